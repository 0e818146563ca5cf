"""Train the structure predictor briefly and compare it with naive extrapolations.

The predictor sees boundary maps of frames t-2 and t-1 and must produce the
map of frame t. Two baselines frame the result: reusing frame t-1's map, and
a perfect landmark-level constant-velocity guess rendered to a map.

    python demos/structure_prediction.py
"""
import time

import numpy as np

from fab.datasets import structure_triplets
from fab.geometry import LandmarkSet
from fab.nets import PredictorConfig, StructurePredictor, predict_structure
from fab.pipeline import TrainConfig, pretrain_predictor, render
from fab.synthetic import SyntheticConfig, generate_sequence

RES, SIGMA = (32, 32), 1.5
rng = np.random.default_rng(0)


def sequences(n):
    return [generate_sequence(rng, SyntheticConfig(n_frames=10, speed=float(rng.uniform(2, 3.5)), amplitude=5.0,
                                                   face_scale=(0.27, 0.31))).landmarks for _ in range(n)]


train, test = structure_triplets(sequences(80), RES, SIGMA), sequences(10)
model = StructurePredictor(PredictorConfig(width=8))
start = time.perf_counter()
history = pretrain_predictor(model, train, TrainConfig(stage="pretrain_predictor", epochs=4, steps_per_epoch=100,
                                                       lr=3e-3, precision="float32"))
print(f"trained in {time.perf_counter() - start:.0f} s, epoch losses {[round(h, 4) for h in history]}")

errs = {"copy previous map": [], "constant-velocity landmarks": [], "structure predictor": []}
for marks in test:
    maps = [render(m, RES, SIGMA) for m in marks]
    for t in range(2, len(maps)):
        target = maps[t]
        guess = LandmarkSet(2 * marks[t - 1].points - marks[t - 2].points, marks[t].scheme)
        _, pred = predict_structure(maps[t - 2], maps[t - 1], model)
        errs["copy previous map"].append(np.mean((maps[t - 1] - target) ** 2))
        errs["constant-velocity landmarks"].append(np.mean((render(guess, RES, SIGMA) - target) ** 2))
        errs["structure predictor"].append(np.mean((pred.grid - target) ** 2))

for name, v in errs.items():
    print(f"{name:>28}: boundary-map MSE {np.mean(v):.5f}")
