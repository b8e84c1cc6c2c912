"""INI-style run configuration with strict keys and typed access."""
from __future__ import annotations

import configparser
import io
from pathlib import Path

DEFAULTS: dict[str, dict[str, str]] = {
    "scene": {
        "height": "80",
        "width": "80",
        "duration_s": "2.0",
        "high_rate_hz": "500",
        "label_rate_hz": "25",
        "depth_profile": "eventscape",
        "parallax": "400.0",
        "min_objects": "2",
        "max_objects": "3",
        "fog_m": "60.0",
        "mask_mode": "full",
        # explicit "depth:velocity:seed:box" layers; empty draws a random scene
        "layers": "",
        "seed": "0",
    },
    "sim": {
        "threshold_min": "0.15",
        "threshold_max": "0.25",
        "refractory_us": "100",
        "log_eps": "0.001",
    },
    "dataset": {
        "n_train": "32",
        "n_test": "8",
        "seed": "1",
        "voxel_rate_hz": "25",
        "frame_rate_hz": "5",
        "bins": "5",
    },
    "model": {
        "kind": "ram",
        "num_scales": "3",
        "base_channels": "16",
    },
    "train": {
        "profile": "desk",
        # empty values fall back to the profile
        "lr": "",
        "batch_size": "",
        "iterations": "",
        "unroll": "",
        "seed": "0",
        "grad_weight": "0.25",
        "crop": "64",
    },
    "eval": {
        "curve": "frame-index",
        # frame rate of the rate-generalization curve
        "frame_rate_hz": "1",
        "crop": "64",
        "align_scale": "true",
        "split": "test",
    },
}


class ConfigError(ValueError):
    """Unknown section/key or a value of the wrong type."""


class Config:
    def __init__(self):
        self._p = configparser.ConfigParser(interpolation=None)
        self._p.optionxform = str
        self._p.read_dict(DEFAULTS)

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: list[str] | None = None) -> "Config":
        cfg = cls()
        if path is not None:
            path = Path(path)
            if not path.is_file():
                raise FileNotFoundError(f"config file {path} not found")
            cfg.update_from_text(path.read_text(encoding="utf-8"), str(path))
        for item in overrides or []:
            cfg.set_override(item)
        return cfg

    def update_from_text(self, text: str, source: str = "<config>") -> None:
        p = configparser.ConfigParser(interpolation=None)
        p.optionxform = str
        try:
            p.read_string(text, source)
        except configparser.Error as exc:
            raise ConfigError(f"{source}: {exc}") from exc
        for section in p.sections():
            for key, value in p.items(section):
                self.set(section, key, value, source)

    def set(self, section: str, key: str, value: str, source: str = "override") -> None:
        if section not in DEFAULTS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        if key not in DEFAULTS[section]:
            raise ConfigError(f"{source}: unknown key '{section}.{key}'")
        self._p.set(section, key, value.strip())

    def set_override(self, item: str) -> None:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        name, value = item.split("=", 1)
        section, key = name.strip().split(".", 1)
        self.set(section, key, value, "--set")

    def get(self, section: str, key: str) -> str:
        return self._p.get(section, key)

    def _typed(self, section, key, fn, kind):
        raw = self.get(section, key)
        try:
            return fn(raw)
        except ValueError as exc:
            raise ConfigError(f"'{section}.{key}' = {raw!r} is not a valid {kind}") from exc

    def int(self, section: str, key: str) -> int:
        return self._typed(section, key, int, "integer")

    def float(self, section: str, key: str) -> float:
        return self._typed(section, key, float, "number")

    def bool(self, section: str, key: str) -> bool:
        try:
            return self._p.getboolean(section, key)
        except ValueError as exc:
            raise ConfigError(f"'{section}.{key}' is not a boolean") from exc

    def optional(self, section: str, key: str, fn):
        raw = self.get(section, key)
        if raw == "":
            return None
        return self._typed(section, key, fn, fn.__name__)

    def dump(self) -> str:
        buf = io.StringIO()
        self._p.write(buf)
        return buf.getvalue().rstrip() + "\n"
