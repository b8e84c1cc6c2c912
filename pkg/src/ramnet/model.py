"""Recurrent asynchronous multimodal depth network and its baselines.

RAM net keeps one latent tensor per encoder scale. A measurement from any
sensor is encoded by that sensor's encoder, and each scale of the state is
updated by a ConvGRU owned by that (sensor, scale) pair. The state alone is
decoded into a normalized log-depth map, so predictions can be queried after
every measurement.

The baselines share the residual block and decoder but run a single encoder
on one input stream with a ConvLSTM (or a plain convolution for the
feed-forward variant) after every encoder level.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from . import io as rio
from .tensor import (Tensor, add, bilinear_upsample2x, concat, conv2d, mul, no_grad,
                     one_minus, relu, sigmoid, split, tanh)

SENSORS = ("events", "frame")
BASELINES = ("E", "I", "E+I", "E+I-noRNN")
MODEL_KINDS = ("ram",) + BASELINES


@dataclass
class ModelConfig:
    num_scales: int = 3
    base_channels: int = 16
    event_channels: int = 5
    frame_channels: int = 1
    head_kernel: int = 5
    encoder_kernel: int = 5
    gru_kernel: int = 3
    decoder_kernel: int = 5
    head_bias: float = 0.5
    # initial update-gate bias of each sensor's ConvGRU; negative values make
    # that sensor start out refining the state rather than overwriting it
    event_update_bias: float = -2.0
    frame_update_bias: float = 0.0

    def __post_init__(self):
        if self.num_scales < 1:
            raise ValueError("num_scales must be >= 1")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")

    def channels(self, level: int) -> int:
        """Channels at encoder level ``level`` (0 is the full-resolution head)."""
        return self.base_channels * 2 ** max(level - 1, 0)

    def input_channels(self, kind: str) -> int:
        return {"events": self.event_channels, "frame": self.frame_channels,
                "E": self.event_channels, "I": self.frame_channels,
                "E+I": self.event_channels + self.frame_channels,
                "E+I-noRNN": self.event_channels + self.frame_channels}[kind]


@dataclass
class FusionState:
    """Per-scale latent tensors; ``cells`` holds ConvLSTM memory for baselines."""

    levels: list[Tensor]
    cells: list[Tensor] | None = None
    timestamp: int | None = None
    sensor: str | None = None

    def detach(self) -> "FusionState":
        return FusionState([t.detach() for t in self.levels],
                           None if self.cells is None else [c.detach() for c in self.cells],
                           self.timestamp, self.sensor)

    def to_bytes(self) -> bytes:
        arrays = {f"level{i}": t.data for i, t in enumerate(self.levels)}
        if self.cells is not None:
            arrays.update({f"cell{i}": c.data for i, c in enumerate(self.cells)})
        head = struct.pack("<q", -1 if self.timestamp is None else int(self.timestamp))
        sensor = (self.sensor or "").encode("utf-8")
        head += struct.pack("<H", len(sensor)) + sensor
        if any(a.dtype != np.float32 for a in arrays.values()):
            raise ValueError("state serialization stores float32 tensors only")
        return head + rio.checkpoint_bytes(arrays)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "FusionState":
        (ts,) = struct.unpack_from("<q", raw, 0)
        (n,) = struct.unpack_from("<H", raw, 8)
        sensor = raw[10:10 + n].decode("utf-8") or None
        f = io.BytesIO(raw[10 + n:])
        if f.read(4) != rio.CKP_MAGIC:
            raise rio.FormatError("bad state payload")
        (count,) = struct.unpack("<I", f.read(4))
        arrays = {}
        for _ in range(count):
            (ln,) = struct.unpack("<H", f.read(2))
            name = f.read(ln).decode("utf-8")
            arrays[name] = rio.read_tensor_record(f)
        levels = [Tensor(arrays[f"level{i}"], dtype=np.float32)
                  for i in range(sum(k.startswith("level") for k in arrays))]
        ncell = sum(k.startswith("cell") for k in arrays)
        cells = [Tensor(arrays[f"cell{i}"], dtype=np.float32) for i in range(ncell)] if ncell else None
        return cls(levels, cells, None if ts < 0 else ts, sensor)


def _init_conv(rng: np.random.Generator, params: dict, name: str, c_out: int, c_in: int,
               k: int, gain: float, dtype) -> None:
    fan_in = c_in * k * k
    bound = gain * np.sqrt(1.0 / fan_in)
    params[f"{name}.w"] = Tensor(rng.uniform(-bound, bound, (c_out, c_in, k, k)), True, dtype)
    params[f"{name}.b"] = Tensor(np.zeros(c_out), True, dtype)


def _conv(params: dict, name: str, x: Tensor, stride: int = 1) -> Tensor:
    w = params[f"{name}.w"]
    return conv2d(x, w, params[f"{name}.b"], stride=stride, padding=w.shape[2] // 2)


# ------------------------------------------------------------ building blocks

def encode(x: Tensor, params: dict, prefix: str, num_scales: int) -> list[Tensor]:
    """Run a sensor encoder; returns features at scales 1..num_scales.

    Level 0 is a full-resolution head convolution; every further level halves
    the resolution with a stride-2 convolution followed by ReLU.
    """
    h, w = x.shape[2:]
    factor = 2 ** num_scales
    if h % factor or w % factor:
        raise ValueError(f"spatial size {h}x{w} not divisible by {factor}")
    feats = []
    y = relu(_conv(params, f"{prefix}.enc0", x))
    for level in range(1, num_scales + 1):
        y = relu(_conv(params, f"{prefix}.enc{level}", y, stride=2))
        feats.append(y)
    return feats


def convgru_update(prev: Tensor, s: Tensor, params: dict, prefix: str) -> Tensor:
    """One ConvGRU step fusing feature ``s`` into state ``prev``.

    z and r come from a sigmoid over a convolution of the concatenated
    (state, feature); the candidate applies tanh to a convolution of
    (r * state, feature); the new state blends old and candidate by z.
    """
    if prev.shape != s.shape:
        raise ValueError(f"state {prev.shape} and feature {s.shape} differ in shape")
    c = prev.shape[1]
    wz, wr = params[f"{prefix}.z.w"], params[f"{prefix}.r.w"]
    pad = wz.shape[2] // 2
    both = concat([prev, s], axis=1)
    gates = sigmoid(conv2d(both, concat([wz, wr], axis=0),
                           concat([params[f"{prefix}.z.b"], params[f"{prefix}.r.b"]], axis=0),
                           padding=pad))
    z, r = split(gates, [c, c], axis=1)
    cand = tanh(_conv(params, f"{prefix}.phi", concat([mul(r, prev), s], axis=1)))
    return add(mul(one_minus(z), prev), mul(z, cand))


def convlstm_update(h: Tensor, c: Tensor, x: Tensor, params: dict, prefix: str) -> tuple[Tensor, Tensor]:
    """Standard ConvLSTM without peepholes; gate order i, f, o, g."""
    ch = h.shape[1]
    gates = _conv(params, prefix, concat([x, h], axis=1))
    i, f, o, g = split(gates, [ch] * 4, axis=1)
    c_new = add(mul(sigmoid(f), c), mul(sigmoid(i), tanh(g)))
    return mul(sigmoid(o), tanh(c_new)), c_new


def decode(levels: list[Tensor], params: dict) -> Tensor:
    """Residual block on the coarsest state, then upsampling decoder levels
    each preceded by a summation skip from the same-scale state."""
    x = levels[-1]
    y = relu(_conv(params, "res.1", x))
    y = _conv(params, "res.2", y)
    x = relu(add(y, x))
    for level in range(len(levels), 0, -1):
        skip = levels[level - 1]
        if skip.shape != x.shape:
            raise ValueError(f"state at level {level} has shape {skip.shape}, decoder expects {x.shape}")
        x = add(x, skip)
        x = relu(_conv(params, f"dec{level}", bilinear_upsample2x(x)))
    return _conv(params, "head", x)


def _init_decoder(rng, params, cfg: ModelConfig, dtype) -> None:
    top = cfg.channels(cfg.num_scales)
    _init_conv(rng, params, "res.1", top, top, 3, np.sqrt(6.0), dtype)
    _init_conv(rng, params, "res.2", top, top, 3, np.sqrt(6.0), dtype)
    for level in range(cfg.num_scales, 0, -1):
        _init_conv(rng, params, f"dec{level}", cfg.channels(level - 1), cfg.channels(level),
                   cfg.decoder_kernel, np.sqrt(6.0), dtype)
    _init_conv(rng, params, "head", 1, cfg.channels(0), 1, np.sqrt(3.0), dtype)
    params["head.b"].data[:] = cfg.head_bias


def _init_encoder(rng, params, cfg: ModelConfig, prefix: str, c_in: int, dtype) -> None:
    _init_conv(rng, params, f"{prefix}.enc0", cfg.channels(0), c_in, cfg.head_kernel, np.sqrt(6.0), dtype)
    for level in range(1, cfg.num_scales + 1):
        _init_conv(rng, params, f"{prefix}.enc{level}", cfg.channels(level), cfg.channels(level - 1),
                   cfg.encoder_kernel, np.sqrt(6.0), dtype)


# ------------------------------------------------------------ models

class _Model:
    kind: str
    config: ModelConfig
    params: dict[str, Tensor]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise KeyError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in arrays.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"{k}: checkpoint shape {v.shape} vs model {self.params[k].shape}")
            self.params[k].data[...] = v

    def _zeros(self, batch: int, height: int, width: int) -> list[Tensor]:
        dtype = next(iter(self.params.values())).dtype
        return [Tensor(np.zeros((batch, self.config.channels(l), height >> l, width >> l)), dtype=dtype)
                for l in range(1, self.config.num_scales + 1)]

    def decode(self, state: FusionState) -> Tensor:
        return decode(state.levels, self.params)

    def predict(self, state: FusionState) -> np.ndarray:
        """Evaluation prediction: decoded map clamped to [0, 1]."""
        with no_grad():
            return np.clip(self.decode(state).data, 0.0, 1.0)

    def run(self, stream, batch: int = 1) -> list[tuple[int, np.ndarray]]:
        """Process ``(timestamp, sensor, array)`` items from a zero state and
        return the raw prediction after every item."""
        stream = list(stream)
        if not stream:
            return []
        h, w = stream[0][2].shape[-2:]
        state = self.init_state(batch, h, w)
        out = []
        for t, sensor, x in stream:
            state = self.step(state, sensor, x, t)
            out.append((t, self.decode(state).data))
        return out


class RAMNet(_Model):
    """Per-sensor encoders and ConvGRUs around a shared latent state."""

    kind = "ram"

    def __init__(self, config: ModelConfig | None = None, seed: int = 0,
                 sensors: tuple[str, ...] = SENSORS, dtype=None):
        from .tensor import get_default_dtype

        self.config = config or ModelConfig()
        self.sensors = tuple(sensors)
        dtype = dtype or get_default_dtype()
        rng = np.random.default_rng(seed)
        cfg = self.config
        p: dict[str, Tensor] = {}
        for sensor in self.sensors:
            _init_encoder(rng, p, cfg, sensor, cfg.input_channels(sensor), dtype)
            for level in range(1, cfg.num_scales + 1):
                c = cfg.channels(level)
                for gate in ("z", "r", "phi"):
                    _init_conv(rng, p, f"{sensor}.gru{level}.{gate}", c, 2 * c, cfg.gru_kernel,
                               np.sqrt(3.0), dtype)
                bias = cfg.event_update_bias if sensor == "events" else cfg.frame_update_bias
                p[f"{sensor}.gru{level}.z.b"].data[:] = bias
        _init_decoder(rng, p, cfg, dtype)
        self.params = p

    def init_state(self, batch: int, height: int, width: int) -> FusionState:
        return FusionState(self._zeros(batch, height, width))

    def encode(self, x, sensor: str) -> list[Tensor]:
        if sensor not in self.sensors:
            raise KeyError(f"unknown sensor {sensor!r}")
        x = x if isinstance(x, Tensor) else Tensor(x, dtype=next(iter(self.params.values())).dtype)
        return encode(x, self.params, sensor, self.config.num_scales)

    def step(self, state: FusionState, sensor: str, x, t: int | None = None) -> FusionState:
        if sensor not in self.sensors:
            raise KeyError(f"unknown sensor {sensor!r}")
        if t is not None and state.timestamp is not None and t < state.timestamp:
            raise ValueError(f"measurement at t={t} precedes state time {state.timestamp}")
        feats = self.encode(x, sensor)
        levels = [convgru_update(prev, s, self.params, f"{sensor}.gru{level}")
                  for level, (prev, s) in enumerate(zip(state.levels, feats), 1)]
        return FusionState(levels, None, t, sensor)


class RecurrentBaseline(_Model):
    """E, I and E+I baselines (ConvLSTM per level) and E+I without recurrency."""

    def __init__(self, kind: str, config: ModelConfig | None = None, seed: int = 0, dtype=None):
        from .tensor import get_default_dtype

        if kind not in BASELINES:
            raise ValueError(f"unknown baseline {kind!r}; expected one of {BASELINES}")
        self.kind = kind
        self.config = config or ModelConfig()
        self.recurrent = kind != "E+I-noRNN"
        dtype = dtype or get_default_dtype()
        rng = np.random.default_rng(seed)
        cfg = self.config
        p: dict[str, Tensor] = {}
        _init_encoder(rng, p, cfg, "in", cfg.input_channels(kind), dtype)
        for level in range(1, cfg.num_scales + 1):
            c = cfg.channels(level)
            if self.recurrent:
                _init_conv(rng, p, f"in.lstm{level}", 4 * c, 2 * c, cfg.gru_kernel, np.sqrt(3.0), dtype)
            else:
                _init_conv(rng, p, f"in.conv{level}", c, c, cfg.gru_kernel, np.sqrt(6.0), dtype)
        _init_decoder(rng, p, cfg, dtype)
        self.params = p

    @property
    def sensors(self) -> tuple[str, ...]:
        return (self.kind,)

    def init_state(self, batch: int, height: int, width: int) -> FusionState:
        levels = self._zeros(batch, height, width)
        cells = self._zeros(batch, height, width) if self.recurrent else None
        return FusionState(levels, cells)

    def step(self, state: FusionState, sensor: str, x, t: int | None = None) -> FusionState:
        if sensor != self.kind:
            raise KeyError(f"baseline {self.kind} cannot consume {sensor!r} inputs")
        if t is not None and state.timestamp is not None and t < state.timestamp:
            raise ValueError(f"measurement at t={t} precedes state time {state.timestamp}")
        x = x if isinstance(x, Tensor) else Tensor(x, dtype=next(iter(self.params.values())).dtype)
        feats = encode(x, self.params, "in", self.config.num_scales)
        if not self.recurrent:
            levels = [relu(_conv(self.params, f"in.conv{l}", f)) for l, f in enumerate(feats, 1)]
            return FusionState(levels, None, t, sensor)
        levels, cells = [], []
        for l, (f, h, c) in enumerate(zip(feats, state.levels, state.cells), 1):
            h2, c2 = convlstm_update(h, c, f, self.params, f"in.lstm{l}")
            levels.append(h2)
            cells.append(c2)
        return FusionState(levels, cells, t, sensor)


def build_model(kind: str, config: ModelConfig | None = None, seed: int = 0, dtype=None) -> _Model:
    if kind == "ram":
        return RAMNet(config, seed=seed, dtype=dtype)
    return RecurrentBaseline(kind, config, seed=seed, dtype=dtype)


def ram_forward(model: RAMNet, measurements) -> list[tuple[int, np.ndarray]]:
    """Run RAM net over time-ordered ``(timestamp, sensor, array)`` items."""
    return model.run(measurements)


def baseline_forward(model: RecurrentBaseline, stream) -> list[tuple[int, np.ndarray]]:
    return model.run(stream)


__all__ = ["ModelConfig", "FusionState", "RAMNet", "RecurrentBaseline", "build_model",
           "encode", "convgru_update", "convlstm_update", "decode", "ram_forward",
           "baseline_forward", "SENSORS", "BASELINES", "MODEL_KINDS"]
