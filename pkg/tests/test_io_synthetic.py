import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fab.datasets import load_dataset, read_sequence, write_dataset_index
from fab.geometry import LandmarkSet, get_scheme
from fab.io import (SequenceManifest, quantize, read_image, read_landmarks, write_image, write_landmarks,
                    write_sequence)
from fab.synthetic import PROFILES, SyntheticConfig, generate_sequence, generate_stills, trajectory


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_pgm_round_trip_is_lossless_on_the_16bit_grid(h, w, seed):
    import tempfile
    from pathlib import Path

    img = quantize(np.random.default_rng(seed).random((h, w)))
    with tempfile.TemporaryDirectory() as d:
        write_image(Path(d) / "x.pgm", img)
        assert np.array_equal(read_image(Path(d) / "x.pgm"), img)


def test_ppm_round_trip(tmp_path):
    img = quantize(np.random.default_rng(0).random((3, 5, 4)))
    write_image(tmp_path / "c.ppm", img)
    assert np.array_equal(read_image(tmp_path / "c.ppm"), img)


def test_unknown_image_suffix(tmp_path):
    with pytest.raises(ValueError, match="unsupported"):
        write_image(tmp_path / "x.jpg", np.zeros((2, 2)))
    (tmp_path / "y.tif").write_bytes(b"")
    with pytest.raises(ValueError, match="unsupported"):
        read_image(tmp_path / "y.tif")


def test_landmark_file_round_trip_is_exact(tmp_path):
    pts = np.random.default_rng(1).normal(size=(68, 2)) * 50
    write_landmarks(tmp_path / "a.pts", LandmarkSet(pts, get_scheme()))
    assert np.array_equal(read_landmarks(tmp_path / "a.pts").points, pts)


@pytest.mark.parametrize("text,match", [("", "empty"), ("2, 1\n0 0\n", "version"), ("1, 3\n0 0\n", "announces"),
                                        ("one, two\n", "header")])
def test_malformed_landmark_files(tmp_path, text, match):
    (tmp_path / "b.pts").write_text(text)
    with pytest.raises(ValueError, match=match):
        read_landmarks(tmp_path / "b.pts")


def test_sequence_and_dataset_round_trip(tmp_path):
    seq = generate_sequence(np.random.default_rng(2), SyntheticConfig(n_frames=4))
    m = write_sequence(tmp_path / "s0", seq.frames, seq.landmarks, extra={"tag": "x"})
    index = write_dataset_index(tmp_path, [tmp_path / "s0" / "manifest.json"])
    for where in (tmp_path, index, tmp_path / "s0", tmp_path / "s0" / "manifest.json"):
        loaded = load_dataset(where)
        assert len(loaded) == 1 and loaded[0].extra == {"tag": "x"}
    frames, marks = read_sequence(loaded[0])
    assert all(np.array_equal(a, b) for a, b in zip(frames, seq.frames))
    assert all(np.array_equal(a.points, b.points) for a, b in zip(marks, seq.landmarks))
    assert len(m) == 4


def test_manifest_length_mismatch_rejected():
    with pytest.raises(ValueError, match="annotations"):
        SequenceManifest(["a.pgm", "b.pgm"], ["a.pts"])


def test_missing_dataset(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "nowhere")


def test_colour_frames_rejected_by_networks(tmp_path):
    write_sequence(tmp_path / "c", [np.zeros((3, 4, 4))] * 3, [], suffix=".ppm")
    with pytest.raises(ValueError, match="grayscale"):
        read_sequence(load_dataset(tmp_path / "c")[0])


def test_generation_is_deterministic_per_seed():
    a = generate_sequence(np.random.default_rng(3), SyntheticConfig(n_frames=5))
    b = generate_sequence(np.random.default_rng(3), SyntheticConfig(n_frames=5))
    assert all(np.array_equal(x, y) for x, y in zip(a.frames, b.frames))


@pytest.mark.parametrize("profile", PROFILES)
def test_trajectory_speed_and_bounds(profile):
    rng = np.random.default_rng(4)
    off = trajectory(profile, 40, 1.5, rng, amplitude=4.0)
    steps = np.linalg.norm(np.diff(off, axis=0), axis=1)
    assert np.all(steps <= 1.5 + 1e-9)
    assert np.all(np.linalg.norm(off, axis=1) <= 4.0 + 1e-9)
    if profile == "static":
        assert not off.any()
    with pytest.raises(ValueError, match="profile"):
        trajectory("zigzag", 3, 1.0, rng)


def test_frames_and_landmarks_stay_in_the_crop():
    frames, marks = generate_stills(np.random.default_rng(5), 20)
    for f, m in zip(frames, marks):
        assert f.shape == (32, 32) and 0 <= f.min() and f.max() <= 1
        assert np.all((m.points >= -1) & (m.points <= 32))
