"""Event camera simulation from high-rate intensity frames.

Each pixel keeps a reference log brightness. Between two frames the log
brightness is interpolated linearly in time, and an event fires whenever it
moves a full contrast threshold away from the reference.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["EventStream", "FrameSequence", "SimulatorConfig", "sample_threshold",
           "simulate_events", "log_intensity"]

# Threshold comparisons are done with this slack in log units so that exact
# analytic crossings (e.g. a ramp hitting 1.0) are not lost to rounding.
_TOL = 1e-9


@dataclass
class EventStream:
    """Time-sorted events; ``t`` in microseconds, polarity in {-1, +1}."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.int64)
        self.x = np.asarray(self.x, dtype=np.int32)
        self.y = np.asarray(self.y, dtype=np.int32)
        self.p = np.asarray(self.p, dtype=np.int8)
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise ValueError("event field arrays differ in length")

    def __len__(self) -> int:
        return len(self.t)

    @classmethod
    def empty(cls, width: int, height: int) -> "EventStream":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z, width, height)

    def slice_time(self, t0: int, t1: int, closed: bool = False) -> "EventStream":
        """Events with ``t0 <= t < t1`` (``t <= t1`` when ``closed``)."""
        lo = np.searchsorted(self.t, t0, side="left")
        hi = np.searchsorted(self.t, t1, side="right" if closed else "left")
        return self[lo:hi]

    def __getitem__(self, sl) -> "EventStream":
        return EventStream(self.t[sl], self.x[sl], self.y[sl], self.p[sl], self.width, self.height)

    def validate(self) -> None:
        if len(self) == 0:
            return
        if np.any(np.diff(self.t) < 0):
            raise ValueError("event timestamps are not sorted")
        if self.x.min() < 0 or self.x.max() >= self.width or self.y.min() < 0 or self.y.max() >= self.height:
            raise ValueError("event coordinates outside the sensor")
        if not np.all(np.abs(self.p) == 1):
            raise ValueError("polarities must be -1 or +1")


@dataclass
class FrameSequence:
    """Intensity images in [0, 1] with strictly increasing µs timestamps."""

    timestamps: np.ndarray
    frames: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3:
            raise ValueError(f"frames must be (T, H, W), got {self.frames.shape}")
        if len(self.timestamps) != len(self.frames):
            raise ValueError("one timestamp per frame required")
        if len(self.timestamps) > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("frame timestamps must be strictly increasing")
        if not np.all(np.isfinite(self.frames)) or np.any(self.frames < 0):
            raise ValueError("intensities must be finite and non-negative")

    @property
    def rate(self) -> float:
        if len(self.timestamps) < 2:
            return 0.0
        return 1e6 / float(np.mean(np.diff(self.timestamps)))


@dataclass
class SimulatorConfig:
    threshold: float = 0.2
    refractory_us: float = 100.0
    log_eps: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.threshold <= 0:
            raise ValueError(f"contrast threshold must be positive, got {self.threshold}")
        if self.refractory_us < 0:
            raise ValueError(f"refractory period must be >= 0, got {self.refractory_us}")


def sample_threshold(rng: np.random.Generator, low: float = 0.15, high: float = 0.25) -> float:
    """Draw one contrast threshold per sequence, uniform in [low, high]."""
    if high < low:
        raise ValueError(f"empty threshold range [{low}, {high}]")
    if high == low:
        return float(low)
    return float(rng.uniform(low, high))


def log_intensity(frames: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    return np.log(np.asarray(frames, dtype=np.float64) + eps)


def simulate_events(seq: FrameSequence, cfg: SimulatorConfig) -> EventStream:
    """Convert a frame sequence to a canonically sorted event stream.

    A pixel that is still inside its refractory period when the threshold is
    reached stays silent and keeps its reference; once the period ends it fires
    as soon as the brightness is (still or again) a threshold away.
    """
    if len(seq.timestamps) < 2:
        raise ValueError("need at least two frames to simulate events")
    _, h, w = seq.frames.shape
    C = float(cfg.threshold)
    rho = float(cfg.refractory_us)
    logs = log_intensity(seq.frames, cfg.log_eps).reshape(len(seq.frames), -1)
    ts = seq.timestamps.astype(np.float64)

    ref = logs[0].copy()
    last_t = np.full(h * w, -np.inf)
    out_t, out_i, out_p = [], [], []

    for k in range(len(ts) - 1):
        ta, tb = ts[k], ts[k + 1]
        la, lb = logs[k], logs[k + 1]
        span = tb - ta
        cand = np.flatnonzero(np.maximum(np.abs(la - ref), np.abs(lb - ref)) >= C - _TOL)
        while cand.size:
            r = ref[cand]
            a, b = la[cand], lb[cand]
            s = np.maximum(ta, last_t[cand] + rho)
            alive = s <= tb
            ls = a + (b - a) * (np.minimum(s, tb) - ta) / span
            d = ls - r
            ready = alive & (np.abs(d) >= C - _TOL)

            te = np.full(cand.size, np.inf)
            pol = np.zeros(cand.size, dtype=np.int8)
            te[ready] = s[ready]
            pol[ready] = np.where(d[ready] > 0, 1, -1)

            # otherwise the first crossing of ref +/- C after s, if any
            slope = b - ls
            rest = alive & ~ready
            with np.errstate(divide="ignore", invalid="ignore"):
                frac_up = (r + C - ls) / slope
                frac_dn = (r - C - ls) / slope
            up = rest & (slope > 0) & (b >= r + C - _TOL)
            dn = rest & (slope < 0) & (b <= r - C + _TOL)
            te[up] = s[up] + np.clip(frac_up[up], 0.0, 1.0) * (tb - s[up])
            pol[up] = 1
            te[dn] = s[dn] + np.clip(frac_dn[dn], 0.0, 1.0) * (tb - s[dn])
            pol[dn] = -1

            fired = np.isfinite(te)
            if not fired.any():
                break
            idx = cand[fired]
            pf = pol[fired]
            out_t.append(te[fired])
            out_i.append(idx)
            out_p.append(pf)
            ref[idx] += pf * C
            last_t[idx] = te[fired]
            cand = idx

    if not out_t:
        return EventStream.empty(w, h)
    t = np.rint(np.concatenate(out_t)).astype(np.int64)
    pix = np.concatenate(out_i)
    p = np.concatenate(out_p).astype(np.int8)
    x, y = pix % w, pix // w
    order = np.lexsort((p, x, y, t))
    return EventStream(t[order], x[order], y[order], p[order], w, h)
