# %% [markdown]
# # Training RAM net and the baselines
#
# This walk-through trains small versions of RAM net and the E, I and E+I
# baselines on a handful of synthetic sequences and compares their
# frame-index curves: abs_rel grouped by how many voxel grids each model has
# consumed since the last intensity frame. The settings are shrunk so the
# script finishes in a few minutes; `pytest tests/test_acceptance.py` runs the
# desk-scale version.

# %%
import numpy as np

from ramnet.data import build_training_sequence, make_scene, random_scene_spec
from ramnet.model import ModelConfig
from ramnet.trainer import TrainConfig, eval_frame_index_curve, train

SIZE = 32
seqs = []
for seed in range(10):
    spec = random_scene_spec(np.random.default_rng(seed), height=SIZE, width=SIZE, duration_s=1.0,
                             parallax=200.0)
    seqs.append(build_training_sequence(make_scene(spec, seed), scene_id=f"s{seed}"))
train_set, test_set = seqs[:8], seqs[8:]

# %% [markdown]
# Every model shares the encoder widths, residual block and decoder. RAM net
# owns one encoder and one ConvGRU per sensor; the baselines run a ConvLSTM
# after each level of a single encoder.

# %%
curves = {}
for kind in ("ram", "E", "I", "E+I"):
    cfg = TrainConfig.from_profile("desk", kind=kind, iterations=150, crop=SIZE,
                                   model=ModelConfig(base_channels=8))
    result = train(cfg, train_set)
    curves[kind] = eval_frame_index_curve(result.model, test_set, crop=SIZE)
    print(f"{kind:4s} last loss {result.losses[-1][1]:.3f}")

# %% [markdown]
# RAM net has one point more than E and E+I: index 5 is its prediction right
# after the next frame arrives, aligned with the last voxel grid of the gap.
# At 150 iterations on 32×32 scenes the models are far from converged, so
# read these curves for their shape only.

# %%
for kind, curve in curves.items():
    print(f"{kind:4s}", "  ".join(f"{i}:{v:.3f}" for i, v in zip(curve.indices, curve.abs_rel)))

# %% [markdown]
# Curves are plain CSV, so several runs can be merged with
# `ramnet export-curve --in a.csv b.csv --out merged.csv`.

# %%
print(curves["ram"].to_csv())
