# %% [markdown]
# # From rendered frames to voxel grids
#
# A synthetic scene is a stack of fronto-parallel textured layers sliding
# sideways at a speed inversely proportional to their depth. We render it at
# a high rate, turn brightness changes into events and bin those events into
# voxel grids, the input format of every event-consuming model here.

# %%
import numpy as np

from ramnet.data import build_training_sequence, make_scene, random_scene_spec
from ramnet.events import FrameSequence, SimulatorConfig, simulate_events
from ramnet.representation import build_voxel_grid, normalize_voxel, normalized_to_depth

# %% [markdown]
# ## A single pixel
#
# Log brightness rising linearly by 1 over 10 ms crosses a 0.2 threshold five
# times. With a 3 ms refractory period the pixel can only fire every 3 ms and
# crossings inside the dead time do not move the reference level.

# %%
ramp = FrameSequence(np.array([0, 10_000]), (np.exp([0.0, 1.0]) - 1e-3)[:, None, None])
print("no refractory:", simulate_events(ramp, SimulatorConfig(threshold=0.2)).t)
print("3 ms refractory:", simulate_events(ramp, SimulatorConfig(threshold=0.2, refractory_us=3000)).t)

# %% [markdown]
# ## A whole scene
#
# `make_scene` draws a contrast threshold, renders frames at 500 Hz, keeps
# frames and depth at 25 Hz and simulates the event stream.

# %%
spec = random_scene_spec(np.random.default_rng(1), height=48, width=48, duration_s=0.4)
scene = make_scene(spec, seed=1)
print(f"{len(scene.events)} events, threshold {float(scene.meta['threshold']):.3f}")
print("layers (depth m, px/s):", [(round(l.depth_m, 1), round(float(l.velocity_px_s), 1)) for l in spec.layers])
print("event rate per pixel per second:", len(scene.events) / (48 * 48 * spec.duration_s))

# %% [markdown]
# ## Voxel grids
#
# Each event spreads its polarity over the two nearest of the B temporal bins
# with a triangular kernel, so the grid sums to the net polarity.

# %%
window = scene.events.slice_time(0, 40_000)
grid = build_voxel_grid(window, 48, 48, bins=5, t_start=0, t_end=40_000).grid
print(f"grid sum {grid.sum():.4f}, polarity sum {window.p.sum()}")
norm = normalize_voxel(grid)
nz = norm[norm != 0]
print(f"normalized non-zeros: mean {nz.mean():.2e}, std {nz.std():.3f}")

# %% [markdown]
# ## Training sequences
#
# Slicing at 25 Hz voxels and 5 Hz frames gives sub-sequences of five voxel
# grids followed by one frame and one depth label at the frame time.

# %%
seq = build_training_sequence(scene, scene_id="demo")
print("voxels", seq.voxels.shape, "frames", seq.frames.shape, "labels at", seq.frame_times)
order = [s for _, s, _ in seq.measurements()]
print("measurement order of the first sub-sequence:", order[:6])
metric = normalized_to_depth(seq.depth[seq.label_index(0)], seq.alpha, seq.d_max)
print(f"label depth range {metric.min():.1f} .. {metric.max():.1f} m")
