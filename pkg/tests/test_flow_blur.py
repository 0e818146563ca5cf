import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from reference_blur import oracle_blur

from fab.blur import blur_frames, blur_intensity, build_blurred_sequence, motion_intensity, synthesize_blur_triplet
from fab.flow import (FlowDiagnostics, FlowField, FlowParams, estimate_flow, interpolate_subframes, read_flow,
                      warp_backward, write_flow)
from fab.geometry import LandmarkSet, get_scheme
from fab.io import write_sequence
from fab.synthetic import SyntheticConfig, generate_sequence


def blob(shape, cx, cy, s=2.5):
    gy, gx = np.mgrid[0 : shape[0], 0 : shape[1]].astype(float)
    return np.exp(-((gx - cx) ** 2 + (gy - cy) ** 2) / (2 * s * s))


def test_warp_matches_scipy_linear_sampling():
    rng = np.random.default_rng(0)
    img = rng.random((10, 12))
    flow = FlowField(rng.uniform(-2, 2, (10, 12)), rng.uniform(-2, 2, (10, 12)))
    gy, gx = np.mgrid[0:10, 0:12].astype(float)
    ref = ndimage.map_coordinates(img, [np.clip(gy - flow.v, 0, 9), np.clip(gx - flow.u, 0, 11)],
                                  order=1, mode="nearest")
    np.testing.assert_allclose(warp_backward(img, flow), ref, atol=1e-12)


def test_warp_rejects_mismatched_flow():
    with pytest.raises(ValueError, match="extent"):
        warp_backward(np.zeros((4, 4)), FlowField.zeros((4, 5)))


@settings(max_examples=20, deadline=None)
@given(st.integers(-3, 3), st.integers(-3, 3))
def test_integer_shift_is_exact_in_interior(du, dv):
    img = np.random.default_rng(1).random((14, 14))
    out = warp_backward(img, FlowField.constant((14, 14), du, dv))
    np.testing.assert_array_equal(out[3:-3, 3:-3], img[3 - dv : 11 - dv, 3 - du : 11 - du])


def test_zero_motion_gives_zero_flow():
    img = blob((32, 32), 15, 16) + 0.4 * blob((32, 32), 7, 9, 1.5)
    flow = estimate_flow(img, img)
    assert np.hypot(flow.u, flow.v).max() < 1e-6


@pytest.mark.parametrize("dx,dy", [(2.0, 0.0), (0.0, -1.5), (1.0, 1.0)])
def test_translated_blob_flow(dx, dy):
    a = blob((32, 32), 15, 16) + 0.5 * blob((32, 32), 8, 9, 1.8)
    b = blob((32, 32), 15 + dx, 16 + dy) + 0.5 * blob((32, 32), 8 + dx, 9 + dy, 1.8)
    flow = estimate_flow(a, b)
    support = a > 0.3
    assert np.median(np.hypot(flow.u[support] - dx, flow.v[support] - dy)) < 0.3


def test_flow_energy_never_increases_within_a_level():
    a = blob((32, 32), 14, 16)
    b = blob((32, 32), 16, 15)
    diag = FlowDiagnostics()
    estimate_flow(a, b, FlowParams(iterations=40), diag)
    assert diag.levels_used == 3
    for level in diag.energies:
        assert np.all(np.diff(level) <= 1e-9 * max(abs(level[0]), 1.0))


def test_tiny_images_reduce_pyramid_depth(caplog):
    with caplog.at_level("WARNING"):
        flow = estimate_flow(np.zeros((5, 5)), np.zeros((5, 5)))
    assert flow.shape == (5, 5) and "pyramid" in caplog.text


def test_flow_dump_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    flow = FlowField(rng.normal(size=(5, 7)), rng.normal(size=(5, 7)))
    write_flow(tmp_path / "f.flo", flow)
    back = read_flow(tmp_path / "f.flo")
    assert np.array_equal(back.u, flow.u) and np.array_equal(back.v, flow.v)
    (tmp_path / "g.flo").write_bytes((tmp_path / "f.flo").read_bytes()[:-8])
    with pytest.raises(ValueError, match="truncated"):
        read_flow(tmp_path / "g.flo")


def test_blur_matches_subframe_oracle_bit_for_bit():
    seq = generate_sequence(np.random.default_rng(4), SyntheticConfig(n_frames=3, speed=2.5))
    ref, count = oracle_blur(*seq.frames)
    out = synthesize_blur_triplet(*seq.frames)
    assert count == 20
    assert np.array_equal(out.blurred_frame, ref)


def test_default_subframe_count_is_twenty():
    rng = np.random.default_rng(5)
    frames = [rng.random((16, 16)) for _ in range(3)]
    assert len(interpolate_subframes(*frames)) == 20
    with pytest.raises(ValueError, match="even"):
        interpolate_subframes(*frames, n_sub=7)


def test_static_triplet_reproduces_middle_frame():
    frame = generate_sequence(np.random.default_rng(6), SyntheticConfig(n_frames=1, profile="static")).frames[0]
    out = synthesize_blur_triplet(frame, frame, frame)
    assert np.abs(out.blurred_frame - frame).max() < 1e-6


def test_blur_keeps_middle_annotation_and_indices():
    seq = generate_sequence(np.random.default_rng(7), SyntheticConfig(n_frames=5, speed=1.0))
    samples = blur_frames(seq.frames, seq.landmarks, n_sub=4)
    assert len(samples) == 3
    assert samples[1].annotation is seq.landmarks[2]
    assert samples[2].source_indices == (2, 3, 4)
    with pytest.raises(ValueError, match="3 frames"):
        blur_frames(seq.frames[:2])


def test_disk_blur_synthesis(tmp_path):
    seq = generate_sequence(np.random.default_rng(8), SyntheticConfig(n_frames=4, speed=1.0))
    src = write_sequence(tmp_path / "sharp", seq.frames, seq.landmarks)
    out = build_blurred_sequence(src, tmp_path / "blurred", n_sub=4)
    assert len(out) == 2 and out.extra["source_indices"] == [[0, 1, 2], [1, 2, 3]]
    np.testing.assert_allclose(out.load_annotations()[0].points, seq.landmarks[1].points)


def fixture_marks(n_frames, step, iod=100.0):
    scheme = get_scheme()
    base = np.zeros((68, 2))
    base[36], base[45] = [0.0, 0.0], [iod, 0.0]
    base[42:48] = base[45] + np.array([[-10, 0], [-6, -2], [-2, -2], [0, 0], [-2, 2], [-6, 2]])
    base[45] = [iod, 0.0]
    return [LandmarkSet(base + [step * t, 0.0], scheme) for t in range(n_frames)]


def test_motion_intensity_static_is_zero():
    assert motion_intensity(fixture_marks(30, 0.0)).tolist() == [0.0]


def test_motion_intensity_hand_computed_fixture():
    # 29 unit steps of the left eye over a 100 px inter-ocular distance
    values = motion_intensity(fixture_marks(30, 1.0))
    assert values == pytest.approx([0.29], abs=1e-12)


def test_motion_intensity_windows_and_degenerate_iod():
    assert len(motion_intensity(fixture_marks(61, 1.0))) == 2  # trailing single frame dropped
    degenerate = [LandmarkSet(np.zeros((68, 2)), get_scheme())] * 4
    assert np.isnan(motion_intensity(degenerate, window_frames=4)).all()


def test_blur_intensity_increases_with_blur():
    seq = generate_sequence(np.random.default_rng(9), SyntheticConfig(n_frames=1, profile="static"))
    sharp = seq.frames[0]
    soft = ndimage.gaussian_filter(sharp, 1.0)
    assert blur_intensity(soft) > blur_intensity(sharp)
    with pytest.raises(ValueError, match="empty"):
        blur_intensity(sharp, (5, 5, 5, 9))
