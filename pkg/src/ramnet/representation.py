"""Network inputs and targets: event voxel grids and normalized log depth."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .events import EventStream

# EventScape and MVSEC depth profiles (alpha, D_max in metres)
EVENTSCAPE = (5.7, 1000.0)
MVSEC = (3.7, 80.0)


@dataclass
class VoxelGrid:
    grid: np.ndarray  # (B, H, W)
    t_start: int
    t_end: int

    @property
    def bins(self) -> int:
        return self.grid.shape[0]


def temporal_coordinates(t: np.ndarray, t_start: int, t_end: int, bins: int) -> np.ndarray:
    """Map timestamps onto the continuous bin axis [0, bins - 1]."""
    duration = float(t_end - t_start)
    t = np.asarray(t, dtype=np.float64)
    if duration <= 0:
        return np.zeros_like(t)
    return (bins - 1) * (t - float(t_start)) / duration


def build_voxel_grid(events: EventStream, height: int, width: int, bins: int = 5,
                     t_start: int | None = None, t_end: int | None = None,
                     dtype=np.float32) -> VoxelGrid:
    """Accumulate events into ``bins`` temporal slices with a triangular kernel.

    Each event adds ``p * max(0, 1 - |b - t*|)`` to bins ``b`` at its pixel.
    The window defaults to the first and last event timestamps; pass explicit
    bounds to voxelize fixed time windows (empty windows give a zero grid).
    """
    if bins < 1:
        raise ValueError(f"need at least one bin, got {bins}")
    n = len(events)
    if t_start is None:
        t_start = int(events.t[0]) if n else 0
    if t_end is None:
        t_end = int(events.t[-1]) if n else t_start
    if t_end < t_start:
        raise ValueError(f"window end {t_end} before start {t_start}")
    if n and (events.t[0] < t_start or events.t[-1] > t_end):
        raise ValueError(f"events span [{events.t[0]}, {events.t[-1]}] outside window [{t_start}, {t_end}]")
    if t_end == t_start and n and np.unique(events.t).size > 1:
        raise ValueError("zero-duration window with distinct event timestamps")
    if n and (events.x.max() >= width or events.y.max() >= height or min(events.x.min(), events.y.min()) < 0):
        raise ValueError("event coordinates outside the voxel grid")

    size = bins * height * width
    tstar = temporal_coordinates(events.t, t_start, t_end, bins)
    lower = np.floor(tstar).astype(np.int64)
    pol = events.p.astype(np.float64)
    pix = events.y.astype(np.int64) * width + events.x.astype(np.int64)
    if n == 0:
        return VoxelGrid(np.zeros((bins, height, width), dtype=dtype), int(t_start), int(t_end))

    # Taps are interleaved per event so every cell accumulates in event order.
    # At t* = B-1 the upper tap has zero mass and is redirected to the lower cell.
    # Weights are evaluated as max(0, 1 - |b - t*|) for both taps.
    upper = np.where(lower + 1 < bins, lower + 1, lower)
    w_lo = np.maximum(0.0, 1.0 - np.abs(lower - tstar))
    w_up = np.where(lower + 1 < bins, np.maximum(0.0, 1.0 - np.abs(lower + 1 - tstar)), 0.0)
    idx = np.stack([lower * height * width + pix, upper * height * width + pix], axis=1).ravel()
    val = np.stack([pol * w_lo, pol * w_up], axis=1).ravel()
    grid = np.bincount(idx, weights=val, minlength=size).reshape(bins, height, width)
    return VoxelGrid(grid.astype(dtype, copy=False), int(t_start), int(t_end))


def normalize_voxel(v: VoxelGrid | np.ndarray) -> VoxelGrid | np.ndarray:
    """Standardize the non-zero entries; zeros stay zero.

    With fewer than two non-zero entries, or a (population) std below 1e-6,
    only the mean is subtracted.
    """
    grid = v.grid if isinstance(v, VoxelGrid) else np.asarray(v)
    out = grid.copy()
    nz = grid != 0
    count = int(nz.sum())
    if count:
        vals = grid[nz].astype(np.float64)
        mean = vals.mean()
        std = vals.std()
        if count < 2 or std < 1e-6:
            out[nz] = vals - mean
        else:
            out[nz] = (vals - mean) / std
    if isinstance(v, VoxelGrid):
        return VoxelGrid(out, v.t_start, v.t_end)
    return out


@dataclass
class DepthMap:
    normalized: np.ndarray
    valid_mask: np.ndarray
    alpha: float
    d_max: float
    metric: np.ndarray | None = None


def depth_to_normalized(metric: np.ndarray, alpha: float = EVENTSCAPE[0], d_max: float = EVENTSCAPE[1],
                        mask: np.ndarray | None = None, clamp: bool = True) -> DepthMap:
    """Normalized log depth ``ln(d / d_max) / alpha + 1``, clamped to [0, 1].

    Pixels outside ``mask`` (default: finite, positive depths) are set to 0
    and flagged invalid. A non-positive depth on a pixel marked valid raises.
    """
    metric = np.asarray(metric, dtype=np.float64)
    if mask is None:
        mask = np.isfinite(metric) & (metric > 0)
    else:
        mask = np.asarray(mask, dtype=bool)
        bad = mask & ~(np.isfinite(metric) & (metric > 0))
        if bad.any():
            raise ValueError(f"{int(bad.sum())} valid pixels have non-positive depth")
    out = np.zeros_like(metric)
    out[mask] = np.log(metric[mask] / d_max) / alpha + 1.0
    if clamp:
        np.clip(out, 0.0, 1.0, out=out)
    return DepthMap(out, mask, alpha, d_max, metric)


def normalized_to_depth(normalized: np.ndarray, alpha: float = EVENTSCAPE[0],
                        d_max: float = EVENTSCAPE[1]) -> np.ndarray:
    return d_max * np.exp(alpha * (np.asarray(normalized, dtype=np.float64) - 1.0))
