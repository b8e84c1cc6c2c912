"""Synthetic layered-plane scenes, training sequences and dataset files.

Scenes are stacks of fronto-parallel textured planes translating sideways.
The nearest plane covering a pixel defines its depth, so ground truth is
exact. Rendering happens at the event simulator's high rate; frames and
depth labels are subsampled from the same timeline.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import io as rio
from .events import EventStream, FrameSequence, SimulatorConfig, sample_threshold, simulate_events
from .representation import (EVENTSCAPE, build_voxel_grid, depth_to_normalized,
                             normalize_voxel)

US = 1_000_000


@dataclass
class Layer:
    """A textured plane. ``box`` is (x0, y0, width, height) at t=0; ``None``
    means the plane fills the view and its texture wraps horizontally."""

    depth_m: float
    velocity_px_s: float
    texture_seed: int
    box: tuple[int, int, int, int] | None = None
    brightness: float = 0.5
    contrast: float = 0.25


@dataclass
class SceneSpec:
    height: int = 80
    width: int = 80
    duration_s: float = 2.0
    high_rate_hz: int = 500
    label_rate_hz: int = 25
    layers: list[Layer] = field(default_factory=list)
    alpha: float = EVENTSCAPE[0]
    d_max: float = EVENTSCAPE[1]
    fog_m: float | None = 60.0
    haze: float = 0.75
    texture_sigma: float = 2.0
    mask_mode: str = "full"

    def validate(self) -> None:
        if not self.layers:
            raise ValueError("scene needs at least one layer")
        depths = [l.depth_m for l in self.layers]
        if min(depths) <= 0:
            raise ValueError("layer depths must be positive")
        if len(set(depths)) != len(depths):
            raise ValueError(f"layer depths must be distinct, got {depths}")
        if self.layers and all(l.box is not None for l in self.layers):
            raise ValueError("at least one layer must fill the view")
        for rate in (self.high_rate_hz, self.label_rate_hz):
            steps = self.duration_s * rate
            if abs(steps - round(steps)) > 1e-9:
                raise ValueError(f"rate {rate} Hz does not divide duration {self.duration_s} s")
        if self.high_rate_hz % self.label_rate_hz:
            raise ValueError("label rate must divide the high render rate")
        if self.mask_mode not in ("full", "lidar"):
            raise ValueError(f"unknown mask mode {self.mask_mode!r}")


@dataclass
class Scene:
    """Rendered scene: label-rate frames/depth plus the simulated events."""

    frames: np.ndarray          # (T, H, W) intensities at label rate
    depth: np.ndarray           # (T, H, W) metric depth at label rate
    mask: np.ndarray            # (T, H, W) valid depth
    timestamps: np.ndarray      # (T,) µs
    events: EventStream
    meta: dict

    @property
    def label_rate_hz(self) -> int:
        return int(self.meta["label_rate_hz"])


# ------------------------------------------------------------------ rendering

def _texture(seed: int, height: int, width: int, sigma: float, brightness: float,
             contrast: float) -> np.ndarray:
    rng = np.random.default_rng(seed)
    tex = gaussian_filter(rng.standard_normal((height, width)), sigma, mode="wrap")
    tex /= tex.std() + 1e-12
    return np.clip(brightness + contrast * tex, 0.02, 1.0)


def _sample_rows(tex: np.ndarray, u: np.ndarray, wrap: bool) -> np.ndarray:
    """Bilinear lookup along x for every row at continuous columns ``u``."""
    width = tex.shape[1]
    i0 = np.floor(u).astype(np.int64)
    f = u - i0
    if wrap:
        a, b = tex[:, i0 % width], tex[:, (i0 + 1) % width]
    else:
        a = tex[:, np.clip(i0, 0, width - 1)]
        b = tex[:, np.clip(i0 + 1, 0, width - 1)]
    return a * (1.0 - f) + b * f


class _LayerRenderer:
    def __init__(self, layer: Layer, spec: SceneSpec):
        self.layer = layer
        self.spec = spec
        h, w = spec.height, spec.width
        if layer.box is None:
            self.tex = _texture(layer.texture_seed, h, max(2 * w, 64), spec.texture_sigma,
                                layer.brightness, layer.contrast)
        else:
            _, _, bw, bh = layer.box
            self.tex = _texture(layer.texture_seed, bh, bw, spec.texture_sigma,
                                layer.brightness, layer.contrast)
        self.cols = np.arange(w, dtype=np.float64)

    def render(self, t_s: float) -> tuple[np.ndarray, np.ndarray]:
        """Intensity and coverage (alpha) of this layer at time ``t_s``."""
        spec, layer = self.spec, self.layer
        h, w = spec.height, spec.width
        shift = layer.velocity_px_s * t_s
        if layer.box is None:
            return _sample_rows(self.tex, self.cols - shift, wrap=True), np.ones((h, w))
        x0, y0, bw, bh = layer.box
        period = w + bw
        left = ((x0 + shift + bw) % period) - bw
        u = self.cols - left
        # anti-aliased horizontal coverage of the pixel footprint [x, x + 1)
        cov_x = np.clip(np.minimum(self.cols + 1, left + bw) - np.maximum(self.cols, left), 0.0, 1.0)
        img = np.zeros((h, w))
        alpha = np.zeros((h, w))
        r0, r1 = max(y0, 0), min(y0 + bh, h)
        if r1 > r0:
            rows = _sample_rows(self.tex[r0 - y0:r1 - y0], u, wrap=False)
            img[r0:r1] = rows
            alpha[r0:r1] = cov_x[None, :]
        return img, alpha


def render(spec: SceneSpec, renderers: list[_LayerRenderer], t_s: float) -> tuple[np.ndarray, np.ndarray]:
    """Composite all layers far to near; returns (intensity, metric depth)."""
    h, w = spec.height, spec.width
    img = np.zeros((h, w))
    depth = np.full((h, w), np.inf)
    for r in sorted(renderers, key=lambda r: -r.layer.depth_m):
        col, alpha = r.render(t_s)
        if spec.fog_m:
            trans = math.exp(-r.layer.depth_m / spec.fog_m)
            col = trans * col + (1.0 - trans) * spec.haze
        img = alpha * col + (1.0 - alpha) * img
        depth = np.where(alpha >= 0.5, r.layer.depth_m, depth)
    return img, depth


def generate_scene(spec: SceneSpec, rng: np.random.Generator | None = None):
    """Render high-rate frames, label-rate frames and metric depth.

    Returns ``(high_rate, frames, depth, mask)`` where ``high_rate`` is a
    :class:`FrameSequence` and the rest are label-rate stacks. ``rng`` only
    drives the LiDAR-like row mask.
    """
    spec.validate()
    renderers = [_LayerRenderer(l, spec) for l in spec.layers]
    n_high = int(round(spec.duration_s * spec.high_rate_hz)) + 1
    ts = np.array([round(k * US / spec.high_rate_hz) for k in range(n_high)], dtype=np.int64)
    step = spec.high_rate_hz // spec.label_rate_hz
    hi = np.empty((n_high, spec.height, spec.width))
    depth = np.empty((len(range(0, n_high, step)), spec.height, spec.width))
    for k in range(n_high):
        img, d = render(spec, renderers, k / spec.high_rate_hz)
        hi[k] = img
        if k % step == 0:
            depth[k // step] = d
    frames = hi[::step].copy()
    if spec.mask_mode == "lidar":
        rng = rng or np.random.default_rng(0)
        rows = rng.random((len(depth), spec.height)) < 0.5
        mask = np.repeat(rows[:, :, None], spec.width, axis=2)
    else:
        mask = np.ones(depth.shape, dtype=bool)
    mask &= np.isfinite(depth)
    return FrameSequence(ts, hi), frames, depth, mask


def random_scene_spec(rng: np.random.Generator, height: int = 80, width: int = 80,
                      duration_s: float = 2.0, parallax: float = 400.0,
                      n_objects: tuple[int, int] = (2, 3), **kwargs) -> SceneSpec:
    """Draw a layered scene with speed inversely proportional to depth.

    ``parallax`` (px * m / s) plays the role of camera speed times focal
    length; the sign of the motion is random per scene.
    """
    direction = rng.choice([-1.0, 1.0])
    k = direction * parallax * rng.uniform(0.6, 1.0)
    bg_depth = float(np.exp(rng.uniform(np.log(60.0), np.log(250.0))))
    layers = [Layer(bg_depth, k / bg_depth, int(rng.integers(2**31)), None,
                    brightness=float(rng.uniform(0.3, 0.7)), contrast=0.2)]
    used = {round(bg_depth, 3)}
    for _ in range(int(rng.integers(n_objects[0], n_objects[1] + 1))):
        d = float(np.exp(rng.uniform(np.log(6.0), np.log(40.0))))
        while round(d, 3) in used:
            d *= 1.01
        used.add(round(d, 3))
        lo = max(2, round(0.18 * min(height, width)))
        hi = max(lo + 1, round(0.45 * min(height, width)) + 1)
        bw, bh = int(rng.integers(lo, hi)), int(rng.integers(lo, hi))
        box = (int(rng.integers(-bw // 2, width)), int(rng.integers(0, height - bh // 2)), bw, bh)
        layers.append(Layer(d, k / d, int(rng.integers(2**31)), box,
                            brightness=float(rng.uniform(0.15, 0.85)), contrast=0.25))
    return SceneSpec(height=height, width=width, duration_s=duration_s, layers=layers, **kwargs)


def make_scene(spec: SceneSpec, seed: int, threshold_range=(0.15, 0.25),
               refractory_us: float = 100.0, log_eps: float = 1e-3) -> Scene:
    """Render a scene and simulate its events with a per-sequence threshold."""
    rng = np.random.default_rng(seed)
    threshold = sample_threshold(rng, *threshold_range)
    high, frames, depth, mask = generate_scene(spec, rng)
    events = simulate_events(high, SimulatorConfig(threshold, refractory_us, log_eps, seed))
    step = spec.high_rate_hz // spec.label_rate_hz
    meta = {
        "height": spec.height, "width": spec.width, "duration_s": spec.duration_s,
        "high_rate_hz": spec.high_rate_hz, "label_rate_hz": spec.label_rate_hz,
        "alpha": spec.alpha, "d_max": spec.d_max, "seed": seed, "threshold": repr(threshold),
        "refractory_us": refractory_us, "log_eps": log_eps,
        "layers": ";".join(_layer_str(l) for l in spec.layers),
    }
    return Scene(frames, depth, mask, high.timestamps[::step].copy(), events, meta)


def _layer_str(l: Layer) -> str:
    box = "-" if l.box is None else ",".join(str(v) for v in l.box)
    return f"{l.depth_m!r}:{l.velocity_px_s!r}:{l.texture_seed}:{box}:{l.brightness!r}:{l.contrast!r}"


def parse_layers(text: str) -> list[Layer]:
    """Inverse of the ``layers`` meta string: ``depth:velocity:seed:box[:brightness:contrast]``."""
    layers = []
    for item in filter(None, (s.strip() for s in text.split(";"))):
        parts = item.split(":")
        if len(parts) not in (4, 6):
            raise ValueError(f"bad layer spec {item!r}")
        box = None if parts[3] in ("-", "") else tuple(int(v) for v in parts[3].split(","))
        if box is not None and len(box) != 4:
            raise ValueError(f"layer box needs x0,y0,w,h: {item!r}")
        extra = {} if len(parts) == 4 else {"brightness": float(parts[4]), "contrast": float(parts[5])}
        layers.append(Layer(float(parts[0]), float(parts[1]), int(parts[2]), box, **extra))
    return layers


# ------------------------------------------------------------------ sequences

@dataclass
class SequenceSample:
    """Voxel grids at the voxel rate interleaved with frames at the frame rate.

    Every sub-sequence is ``per_frame`` voxel grids followed by one frame whose
    timestamp equals the end of the last voxel window; that frame carries the
    supervised depth label. ``depth``/``mask`` hold ground truth at every
    voxel time, which the frame-index evaluation needs.
    """

    voxels: np.ndarray          # (V, B, H, W) raw voxel grids
    voxel_times: np.ndarray     # (V,) window end, µs
    frames: np.ndarray          # (F, H, W)
    frame_times: np.ndarray     # (F,)
    depth: np.ndarray           # (V, H, W) normalized log depth at voxel times
    mask: np.ndarray            # (V, H, W)
    per_frame: int
    events: EventStream
    alpha: float
    d_max: float
    scene_id: str = ""
    window_us: int = 40_000

    @property
    def n_sub(self) -> int:
        return len(self.frames)

    def label_index(self, j: int) -> int:
        """Voxel index whose time carries frame ``j``'s label."""
        return (j + 1) * self.per_frame - 1

    def measurements(self) -> list[tuple[int, str, int]]:
        """Time-ordered ``(timestamp, sensor, index)``; a voxel precedes the
        frame sharing its timestamp."""
        out = []
        for i, t in enumerate(self.voxel_times):
            out.append((int(t), "events", i))
            if (i + 1) % self.per_frame == 0:
                j = (i + 1) // self.per_frame - 1
                out.append((int(self.frame_times[j]), "frame", j))
        return out


def build_training_sequence(scene: Scene, voxel_rate_hz: int = 25, frame_rate_hz: int = 5,
                            bins: int = 5, n_sub: int | None = None, start_us: int = 0,
                            scene_id: str = "") -> SequenceSample:
    """Slice a scene into sub-sequences of voxel grids followed by a frame."""
    if voxel_rate_hz % frame_rate_hz:
        raise ValueError("frame rate must divide the voxel rate")
    if scene.label_rate_hz % voxel_rate_hz:
        raise ValueError("voxel rate must divide the label rate")
    per_frame = voxel_rate_hz // frame_rate_hz
    window = US // voxel_rate_hz
    duration_us = int(scene.timestamps[-1])
    available = (duration_us - start_us) // (US // frame_rate_hz)
    if n_sub is None:
        n_sub = available
    if n_sub < 1 or n_sub > available:
        raise ValueError(f"scene of {duration_us} µs holds {available} sub-sequences from "
                         f"{start_us} µs; {n_sub} requested")
    h, w = scene.frames.shape[1:]
    n_vox = n_sub * per_frame
    stride = scene.label_rate_hz // voxel_rate_hz
    alpha, d_max = float(scene.meta["alpha"]), float(scene.meta["d_max"])
    first = start_us // window

    voxels = np.empty((n_vox, bins, h, w), dtype=np.float32)
    times = np.empty(n_vox, dtype=np.int64)
    depth = np.empty((n_vox, h, w), dtype=np.float32)
    mask = np.empty((n_vox, h, w), dtype=bool)
    for i in range(n_vox):
        t0, t1 = (first + i) * window, (first + i + 1) * window
        last = t1 >= duration_us
        ev = scene.events.slice_time(t0, t1, closed=last)
        voxels[i] = build_voxel_grid(ev, h, w, bins, t0, t1).grid
        times[i] = t1
        li = (first + i + 1) * stride
        dm = depth_to_normalized(scene.depth[li], alpha, d_max, mask=scene.mask[li])
        depth[i] = dm.normalized
        mask[i] = dm.valid_mask
    label_idx = [(j + 1) * per_frame - 1 for j in range(n_sub)]
    frames = np.stack([scene.frames[(first + i + 1) * stride] for i in label_idx]).astype(np.float32)
    frame_times = times[label_idx].copy()
    t_end = int(times[-1])
    events = scene.events.slice_time(start_us, t_end, closed=True)
    return SequenceSample(voxels, times, frames, frame_times, depth, mask, per_frame, events,
                          alpha, d_max, scene_id, window)


def packetize_events(events: EventStream, target: int = 10_000) -> list[EventStream]:
    """Split into ``max(1, N // target)`` contiguous packets whose sizes
    differ by at most one, the first ``N mod p`` getting the extra event."""
    if target < 1:
        raise ValueError("packet target must be >= 1")
    n = len(events)
    p = max(1, n // target)
    base, extra = divmod(n, p)
    sizes = [base + 1 if i < extra else base for i in range(p)]
    bounds = np.cumsum([0] + sizes)
    return [events[lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])]


def packet_timestamp(packet: EventStream) -> int | None:
    return int(packet.t[-1]) if len(packet) else None


def augment(sample: SequenceSample, rng: np.random.Generator, crop: int = 64,
            flip: bool | None = None, offset: tuple[int, int] | None = None,
            divisor: int = 8) -> SequenceSample:
    """One random crop and horizontal flip applied to the whole sequence."""
    h, w = sample.frames.shape[1:]
    if crop > min(h, w):
        raise ValueError(f"crop {crop} larger than frame {h}x{w}")
    if crop % divisor:
        raise ValueError(f"crop {crop} not divisible by {divisor}")
    if offset is None:
        offset = (int(rng.integers(0, h - crop + 1)), int(rng.integers(0, w - crop + 1)))
    if flip is None:
        flip = bool(rng.random() < 0.5)
    return crop_flip(sample, offset, crop, flip)


def crop_flip(sample: SequenceSample, offset: tuple[int, int], crop: int, flip: bool) -> SequenceSample:
    oy, ox = offset
    sl = (slice(oy, oy + crop), slice(ox, ox + crop))

    def fix(a):
        a = a[(Ellipsis,) + sl]
        return np.ascontiguousarray(a[..., ::-1] if flip else a)

    ev = sample.events
    keep = (ev.x >= ox) & (ev.x < ox + crop) & (ev.y >= oy) & (ev.y < oy + crop)
    x = ev.x[keep] - ox
    if flip:
        x = crop - 1 - x
    events = EventStream(ev.t[keep], x, ev.y[keep] - oy, ev.p[keep], crop, crop)
    return replace(sample, voxels=fix(sample.voxels), frames=fix(sample.frames),
                   depth=fix(sample.depth), mask=fix(sample.mask), events=events)


def center_crop(sample: SequenceSample, crop: int = 64) -> SequenceSample:
    h, w = sample.frames.shape[1:]
    return crop_flip(sample, ((h - crop) // 2, (w - crop) // 2), crop, False)


# ------------------------------------------------------------------ model inputs

@dataclass
class StreamItem:
    t: int
    sensor: str
    x: np.ndarray               # (C, H, W) network input
    depth_index: int            # index into sample.depth for ground truth at t
    frame_index: int | None     # voxel inputs since the last frame; None before the first frame
    supervised: bool            # aligned with a training label


def frame_input(img: np.ndarray) -> np.ndarray:
    return (2.0 * np.asarray(img, dtype=np.float32) - 1.0)[None]


def voxel_input(grid: np.ndarray) -> np.ndarray:
    return normalize_voxel(np.asarray(grid, dtype=np.float32))


def model_stream(kind: str, sample: SequenceSample) -> list[StreamItem]:
    """Turn a sequence into the input stream a given model consumes.

    ``frame_index`` follows the evaluation convention: 0 for predictions made
    at a frame (for event-only models, the voxel grid coinciding with it),
    ``n`` after ``n`` voxel grids since that frame.
    """
    k = sample.per_frame
    items: list[StreamItem] = []
    if kind == "ram":
        for t, sensor, i in sample.measurements():
            if sensor == "events":
                n = (i + 1) % k
                fi = None if i < k else (n if n else k)
                items.append(StreamItem(t, "events", voxel_input(sample.voxels[i]), i, fi,
                                        (i + 1) % k == 0))
            else:
                items.append(StreamItem(t, "frame", frame_input(sample.frames[i]),
                                        sample.label_index(i), 0, True))
        return items
    if kind == "I":
        return [StreamItem(int(sample.frame_times[j]), "I", frame_input(sample.frames[j]),
                           sample.label_index(j), 0, True) for j in range(sample.n_sub)]
    if kind == "E+I-noRNN":
        h, w = sample.frames.shape[1:]
        out = []
        for j in range(sample.n_sub):
            t1 = int(sample.frame_times[j])
            t0 = t1 - k * sample.window_us
            ev = sample.events.slice_time(t0, t1, closed=True)
            grid = build_voxel_grid(ev, h, w, sample.voxels.shape[1], t0, t1).grid
            x = np.concatenate([voxel_input(grid), frame_input(sample.frames[j])])
            out.append(StreamItem(t1, kind, x, sample.label_index(j), 0, True))
        return out
    if kind not in ("E", "E+I"):
        raise ValueError(f"unknown model kind {kind!r}")
    zero = np.zeros((1,) + sample.frames.shape[1:], dtype=np.float32)
    for i, t in enumerate(sample.voxel_times):
        n = (i + 1) % k
        fi = None if i < k - 1 else n
        x = voxel_input(sample.voxels[i])
        if kind == "E+I":
            j = (i + 1) // k - 1   # latest frame with timestamp <= t
            x = np.concatenate([x, frame_input(sample.frames[j]) if j >= 0 else zero])
        items.append(StreamItem(int(t), kind, x, i, fi, n == 0))
    return items


# ------------------------------------------------------------------ persistence

def save_scene(directory: str | Path, scene: Scene) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    rio.save_tensor(d / "frames.ten", scene.frames)
    rio.save_tensor(d / "depth.ten", np.where(scene.mask, scene.depth, 0.0))
    rio.save_tensor(d / "depth.ten.mask", scene.mask.astype(np.float32))
    rio.save_events(d / "events.evt", scene.events)
    rio.write_meta(d / "meta.cfg", scene.meta)


def load_scene(directory: str | Path) -> Scene:
    d = Path(directory)
    for name in ("frames.ten", "depth.ten", "events.evt", "meta.cfg"):
        if not (d / name).exists():
            raise FileNotFoundError(f"scene directory {d} lacks {name}")
    meta = rio.read_meta(d / "meta.cfg")
    frames = rio.load_tensor(d / "frames.ten").astype(np.float64)
    depth = rio.load_tensor(d / "depth.ten").astype(np.float64)
    mask_path = d / "depth.ten.mask"
    mask = rio.load_tensor(mask_path) > 0.5 if mask_path.exists() else depth > 0
    rate = int(meta["label_rate_hz"])
    ts = np.array([round(k * US / rate) for k in range(len(frames))], dtype=np.int64)
    events = rio.load_events(d / "events.evt")
    return Scene(frames, depth, mask, ts, events, meta)


def make_dataset(out_dir: str | Path, n_scenes: int, seed: int, prefix: str = "scene",
                 spec_kwargs: dict | None = None, sim_kwargs: dict | None = None) -> list[str]:
    """Render ``n_scenes`` random scenes into ``out_dir/scenes/<id>/``."""
    out = Path(out_dir) / "scenes"
    rng = np.random.default_rng(seed)
    ids = []
    for i in range(n_scenes):
        scene_seed = int(rng.integers(2**31))
        spec = random_scene_spec(np.random.default_rng(scene_seed), **(spec_kwargs or {}))
        scene = make_scene(spec, scene_seed, **(sim_kwargs or {}))
        sid = f"{prefix}{i:04d}"
        save_scene(out / sid, scene)
        ids.append(sid)
    return ids


def load_dataset(directory: str | Path, prefix: str | None = None) -> dict[str, Scene]:
    root = Path(directory) / "scenes"
    if not root.is_dir():
        raise FileNotFoundError(f"no scenes/ directory under {directory}")
    out = {}
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        if prefix is None or d.name.startswith(prefix):
            out[d.name] = load_scene(d)
    if not out:
        raise FileNotFoundError(f"no scenes found under {root}")
    return out
