"""Training loop, checkpoints and the frame-index evaluation protocols."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import io as rio
from .data import SequenceSample, StreamItem, augment, center_crop, model_stream
from .losses import GRAD_WEIGHT, align_log_offset, gradient_matching_loss, metrics, scale_invariant_loss, total_sequence_loss
from .model import MODEL_KINDS, ModelConfig, build_model
from .optim import Adam
from .representation import normalized_to_depth
from .tensor import NonFiniteError, backward, no_grad

PROFILES = {
    "eventscape": dict(lr=3e-4, batch_size=8, iterations=27_000, unroll=10),
    "mvsec-ft": dict(lr=1e-3, batch_size=8, iterations=7_600, unroll=8),
    "desk": dict(lr=1e-3, batch_size=2, iterations=600, unroll=3),
}


class DivergenceError(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass
class TrainConfig:
    kind: str = "ram"
    lr: float = 3e-4
    batch_size: int = 2
    iterations: int = 600
    unroll: int = 10
    seed: int = 0
    grad_weight: float = GRAD_WEIGHT
    crop: int = 64
    flip: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        if not (self.lr >= 0 and math.isfinite(self.lr)):
            raise ValueError(f"learning rate must be finite and >= 0, got {self.lr}")
        for name in ("batch_size", "iterations", "unroll"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")

    @classmethod
    def from_profile(cls, profile: str, **overrides) -> "TrainConfig":
        if profile not in PROFILES:
            raise ValueError(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}")
        return cls(**{**PROFILES[profile], **overrides})


@dataclass
class TrainResult:
    model: object
    losses: list[tuple[int, float, float, float]]

    def loss_csv(self) -> str:
        buf = io.StringIO()
        buf.write("iteration,total,si,grad\n")
        for it, total, si, grad in self.losses:
            buf.write(f"{it},{total:.9g},{si:.9g},{grad:.9g}\n")
        return buf.getvalue()


def slice_sample(sample: SequenceSample, start: int, count: int) -> SequenceSample:
    """Sub-sequences ``start .. start + count - 1`` as a sequence of their own."""
    if start < 0 or count < 1 or start + count > sample.n_sub:
        raise ValueError(f"cannot take {count} sub-sequences from {start} of {sample.n_sub}")
    k = sample.per_frame
    v = slice(start * k, (start + count) * k)
    t0 = int(sample.voxel_times[v.start]) - sample.window_us
    t1 = int(sample.voxel_times[v.stop - 1])
    return replace(sample, voxels=sample.voxels[v], voxel_times=sample.voxel_times[v],
                   frames=sample.frames[start:start + count],
                   frame_times=sample.frame_times[start:start + count],
                   depth=sample.depth[v], mask=sample.mask[v],
                   events=sample.events.slice_time(t0, t1, closed=True))


def _batched_streams(kind: str, samples: Sequence[SequenceSample]) -> list[tuple[StreamItem, np.ndarray, np.ndarray, np.ndarray]]:
    """Stack per-sample streams item by item; all samples share one layout."""
    streams = [model_stream(kind, s) for s in samples]
    out = []
    for items in zip(*streams):
        first = items[0]
        x = np.stack([it.x for it in items])
        gt = np.stack([s.depth[it.depth_index] for s, it in zip(samples, items)])[:, None]
        mask = np.stack([s.mask[it.depth_index] for s, it in zip(samples, items)])[:, None]
        out.append((first, x, gt, mask))
    return out


def sequence_loss(model, kind: str, samples: Sequence[SequenceSample], weight: float = GRAD_WEIGHT):
    """Unroll ``model`` over a batch from a zero state and return (total, si, grad).

    Gradients flow through the whole unroll. Every label receives the
    predictions aligned with it; for RAM net these are the prediction after
    the last voxel grid and the one after the frame, which are averaged.
    """
    batch = _batched_streams(kind, samples)
    h, w = samples[0].frames.shape[1:]
    state = model.init_state(len(samples), h, w)
    per_label: dict[int, list] = {}
    for item, x, gt, mask in batch:
        state = model.step(state, item.sensor, x, item.t)
        if item.supervised:
            pred = model.decode(state)
            si = scale_invariant_loss(pred, gt, mask)
            grad = gradient_matching_loss(pred, gt, mask)
            per_label.setdefault(item.depth_index, []).append((si, grad))
    return total_sequence_loss([per_label[k] for k in sorted(per_label)], weight)


def train(config: TrainConfig, dataset: Sequence[SequenceSample], log_path: str | Path | None = None,
          checkpoint_path: str | Path | None = None, model=None) -> TrainResult:
    """Adam on the SI + gradient loss over random sub-sequence windows.

    Each iteration draws ``batch_size`` sequences, one window start shared by
    the batch and an independent crop/flip per sequence. The recurrent state
    starts from zero, so nothing flows between iterations.
    """
    if not dataset:
        raise ValueError("training needs at least one sequence")
    n_sub = min(s.n_sub for s in dataset)
    if config.unroll > n_sub:
        raise ValueError(f"unroll {config.unroll} exceeds the {n_sub} sub-sequences available")
    rng = np.random.default_rng(config.seed)
    if model is None:
        model = build_model(config.kind, config.model, seed=config.seed)
    opt = Adam(model.params, lr=config.lr)
    losses = []
    for it in range(config.iterations):
        idx = rng.integers(0, len(dataset), config.batch_size)
        start = int(rng.integers(0, n_sub - config.unroll + 1))
        batch = [augment(slice_sample(dataset[i], start, config.unroll), rng, config.crop,
                         flip=None if config.flip else False) for i in idx]
        opt.zero_grad()
        try:
            total, si, grad = sequence_loss(model, config.kind, batch, config.grad_weight)
        except NonFiniteError as exc:
            raise DivergenceError(f"non-finite value at iteration {it}: {exc}") from exc
        if not np.isfinite(total.data):
            raise DivergenceError(f"loss is {float(total.data)} at iteration {it}")
        backward(total)
        opt.step()
        losses.append((it, float(total.data), float(si.data), float(grad.data)))
    result = TrainResult(model, losses)
    if log_path is not None:
        Path(log_path).write_text(result.loss_csv(), encoding="utf-8")
    if checkpoint_path is not None:
        save_model(checkpoint_path, model)
    return result


# ------------------------------------------------------------------ checkpoints

def save_model(path: str | Path, model) -> None:
    """CKP1 parameters plus a ``.meta`` sidecar naming the architecture."""
    rio.save_checkpoint(path, model.state_dict())
    cfg = model.config
    rio.write_meta(str(path) + ".meta", {"kind": model.kind, "num_scales": cfg.num_scales,
                                         "base_channels": cfg.base_channels})


def load_model(path: str | Path, kind: str | None = None, config: ModelConfig | None = None):
    meta_path = Path(str(path) + ".meta")
    if meta_path.exists():
        meta = rio.read_meta(meta_path)
        kind = kind or meta["kind"]
        config = config or ModelConfig(num_scales=int(meta["num_scales"]),
                                       base_channels=int(meta["base_channels"]))
    if kind is None:
        raise ValueError(f"model kind unknown for checkpoint {path}")
    model = build_model(kind, config)
    model.load_state_dict(rio.load_checkpoint(path))
    return model


# ------------------------------------------------------------------ evaluation

CUTOFFS = (10.0, 20.0, 30.0)


@dataclass
class EvalCurve:
    """Mean abs_rel per frame index, plus per-sequence rows for the metrics CSV."""

    kind: str
    profile: str
    indices: list[int]
    abs_rel: list[float]
    counts: list[int]
    rows: list[tuple] = field(default_factory=list)

    def value(self, index: int) -> float:
        return self.abs_rel[self.indices.index(index)]

    def best(self) -> float:
        return min(self.abs_rel)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("model,profile,frame_index,abs_rel,count\n")
        for i, a, c in zip(self.indices, self.abs_rel, self.counts):
            buf.write(f"{self.kind},{self.profile},{i},{a:.9g},{c}\n")
        return buf.getvalue()

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        buf.write("sequence_id,frame_index,abs_rel,mae_10,mae_20,mae_30\n")
        for row in self.rows:
            buf.write(",".join([row[0], str(row[1])] + [_fmt(v) for v in row[2:]]) + "\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EvalCurve":
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows:
            raise ValueError("empty curve CSV")
        return cls(rows[0]["model"], rows[0]["profile"], [int(r["frame_index"]) for r in rows],
                   [float(r["abs_rel"]) for r in rows], [int(r["count"]) for r in rows])


def _fmt(v) -> str:
    return "" if v is None else f"{v:.9g}"


def predict_stream(model, kind: str, sample: SequenceSample) -> list[tuple[StreamItem, np.ndarray]]:
    """Clamped predictions after every stream item of one sequence."""
    items = model_stream(kind, sample)
    h, w = sample.frames.shape[1:]
    out = []
    with no_grad():
        state = model.init_state(1, h, w)
        for item in items:
            state = model.step(state, item.sensor, item.x[None], item.t)
            out.append((item, np.clip(model.decode(state).data[0, 0], 0.0, 1.0)))
    return out


def eval_frame_index_curve(model, dataset: Sequence[SequenceSample], kind: str | None = None,
                           crop: int | None = 64, align: bool = True, profile: str = "5hz",
                           ids: Sequence[str] | None = None) -> EvalCurve:
    """Mean abs_rel grouped by the number of voxel grids since the last frame.

    With ``align`` each prediction is shifted by its mean log residual before
    conversion to metres (the offset the scale-invariant loss leaves free).
    """
    kind = kind or model.kind
    per_index: dict[int, list[float]] = {}
    rows = []
    for n, sample in enumerate(dataset):
        sid = (ids[n] if ids is not None else sample.scene_id) or f"seq{n:04d}"
        if crop is not None:
            sample = center_crop(sample, crop)
        seq: dict[int, list[list]] = {}
        for item, pred in predict_stream(model, kind, sample):
            if item.frame_index is None:
                continue
            gt = sample.depth[item.depth_index]
            mask = sample.mask[item.depth_index]
            if align:
                pred = align_log_offset(pred, gt, mask)
            pm = normalized_to_depth(pred, sample.alpha, sample.d_max)
            gm = normalized_to_depth(gt, sample.alpha, sample.d_max)
            m = metrics(pm, gm, mask)
            if m["abs_rel"] is None:
                continue
            cut = [metrics(pm, gm, mask, c)["mean_abs_depth_error"] for c in CUTOFFS]
            per_index.setdefault(item.frame_index, []).append(m["abs_rel"])
            seq.setdefault(item.frame_index, []).append([m["abs_rel"]] + cut)
        for fi in sorted(seq):
            cols = list(zip(*seq[fi]))
            means = [None if any(v is None for v in c) else float(np.mean(c)) for c in cols]
            rows.append((sid, fi, *means))
    indices = sorted(per_index)
    return EvalCurve(kind, profile, indices, [float(np.mean(per_index[i])) for i in indices],
                     [len(per_index[i]) for i in indices], rows)


def eval_rate_generalization(model, dataset: Sequence[SequenceSample], **kwargs) -> EvalCurve:
    """Frame-index curve on sequences with a longer frame gap (e.g. 1 Hz)."""
    kwargs.setdefault("profile", "1hz")
    return eval_frame_index_curve(model, dataset, **kwargs)


def plateau_ratio(curve: EvalCurve, window: int = 5) -> float:
    """Mean of the last ``window`` points over the mean of the ``window`` before."""
    vals = curve.abs_rel
    if len(vals) < 2 * window:
        raise ValueError(f"curve too short for a {window}-point plateau test")
    return float(np.mean(vals[-window:]) / np.mean(vals[-2 * window:-window]))


__all__ = ["PROFILES", "TrainConfig", "TrainResult", "DivergenceError", "train", "sequence_loss",
           "slice_sample", "save_model", "load_model", "EvalCurve", "predict_stream",
           "eval_frame_index_curve", "eval_rate_generalization", "plateau_ratio"]
