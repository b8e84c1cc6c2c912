"""Command-line entry point: ``python -m ramnet <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data or validation error.
"""
from __future__ import annotations

import argparse
import csv
import io
import math
import re
import sys
from pathlib import Path

import numpy as np

from . import io as rio
from .config import Config, ConfigError
from .data import (SceneSpec, build_training_sequence, load_dataset, make_dataset, make_scene,
                   parse_layers, random_scene_spec)
from .model import ModelConfig
from .representation import EVENTSCAPE, MVSEC, build_voxel_grid, normalize_voxel
from .trainer import (EvalCurve, TrainConfig, eval_frame_index_curve, load_model, predict_stream,
                      train)

DEPTH_PROFILES = {"eventscape": EVENTSCAPE, "mvsec": MVSEC}
COMMANDS = ("make-dataset", "simulate", "voxelize", "train", "eval", "predict", "export-curve")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI file with [scene] [sim] [dataset] [model] [train] [eval]")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")
    common.add_argument("--print-config", action="store_true", help="print the resolved config and exit")

    parser = _Parser(prog="ramnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("make-dataset", parents=[common], help="render train/test scenes")
    p.add_argument("--out", required=True)

    p = sub.add_parser("simulate", parents=[common], help="render one scene and write its events")
    p.add_argument("--out", required=True, help="output .evt file")

    p = sub.add_parser("voxelize", parents=[common], help="fixed-window voxel grids from an .evt file")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", help="output directory (default: next to the input)")
    p.add_argument("--window", default="40ms")
    p.add_argument("--bins", type=int, default=None)
    p.add_argument("--duration", default=None, help="stream duration (default: last timestamp)")
    p.add_argument("--normalize", action="store_true")

    p = sub.add_parser("train", parents=[common], help="train a model on the train split")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="run directory for model.ckp and loss.csv")
    p.add_argument("--profile")
    p.add_argument("--model")

    p = sub.add_parser("eval", parents=[common], help="frame-index or rate-generalization curve")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="curve CSV")
    p.add_argument("--metrics", help="per-sequence metrics CSV")
    p.add_argument("--curve", choices=("frame-index", "rate"))

    p = sub.add_parser("predict", parents=[common], help="depth predictions for one scene")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("export-curve", parents=[common], help="merge curve CSVs into one table")
    p.add_argument("--in", dest="inp", nargs="+", required=True)
    p.add_argument("--out", required=True)
    return parser


_UNITS = {"us": 1, "ms": 1_000, "s": 1_000_000}


def parse_duration_us(text: str) -> int:
    m = re.fullmatch(r"\s*([0-9]*\.?[0-9]+)\s*(us|ms|s)?\s*", text)
    if not m:
        raise UsageError(f"cannot parse duration {text!r} (use e.g. 40ms, 40000us, 0.04s)")
    value = float(m.group(1)) * _UNITS[m.group(2) or "us"]
    if value <= 0 or value != round(value):
        raise UsageError(f"duration {text!r} must be a positive whole number of microseconds")
    return int(round(value))


# ------------------------------------------------------------------ helpers

def _scene_kwargs(cfg: Config) -> dict:
    alpha, d_max = DEPTH_PROFILES[_choice(cfg, "scene", "depth_profile", DEPTH_PROFILES)]
    fog = cfg.get("scene", "fog_m")
    return dict(height=cfg.int("scene", "height"), width=cfg.int("scene", "width"),
                duration_s=cfg.float("scene", "duration_s"),
                high_rate_hz=cfg.int("scene", "high_rate_hz"),
                label_rate_hz=cfg.int("scene", "label_rate_hz"), alpha=alpha, d_max=d_max,
                fog_m=None if fog in ("", "none", "0") else cfg.float("scene", "fog_m"),
                mask_mode=cfg.get("scene", "mask_mode"))


def _sim_kwargs(cfg: Config) -> dict:
    return dict(threshold_range=(cfg.float("sim", "threshold_min"), cfg.float("sim", "threshold_max")),
                refractory_us=cfg.float("sim", "refractory_us"), log_eps=cfg.float("sim", "log_eps"))


def _choice(cfg: Config, section: str, key: str, allowed) -> str:
    value = cfg.get(section, key)
    if value not in allowed:
        raise ConfigError(f"'{section}.{key}' = {value!r}; expected one of {sorted(allowed)}")
    return value


def _model_config(cfg: Config) -> ModelConfig:
    return ModelConfig(num_scales=cfg.int("model", "num_scales"),
                       base_channels=cfg.int("model", "base_channels"))


def _sequences(cfg: Config, data: str, prefix: str, frame_rate: int):
    scenes = load_dataset(data, prefix)
    seqs = [build_training_sequence(s, cfg.int("dataset", "voxel_rate_hz"), frame_rate,
                                    cfg.int("dataset", "bins"), scene_id=sid)
            for sid, s in scenes.items()]
    return seqs


# ------------------------------------------------------------------ commands

def cmd_make_dataset(args, cfg: Config) -> None:
    seed = cfg.int("dataset", "seed")
    spec_kwargs = _scene_kwargs(cfg)
    spec_kwargs.update(parallax=cfg.float("scene", "parallax"),
                       n_objects=(cfg.int("scene", "min_objects"), cfg.int("scene", "max_objects")))
    sim = _sim_kwargs(cfg)
    n_train, n_test = cfg.int("dataset", "n_train"), cfg.int("dataset", "n_test")
    ids = make_dataset(args.out, n_train, seed, "train", spec_kwargs, sim) if n_train else []
    ids += make_dataset(args.out, n_test, seed + 1, "test", spec_kwargs, sim) if n_test else []
    print(f"wrote {len(ids)} scenes to {Path(args.out) / 'scenes'}")


def cmd_simulate(args, cfg: Config) -> None:
    seed = cfg.int("scene", "seed")
    kwargs = _scene_kwargs(cfg)
    layers = cfg.get("scene", "layers")
    if layers:
        spec = SceneSpec(layers=parse_layers(layers), **kwargs)
    else:
        kwargs.update(parallax=cfg.float("scene", "parallax"),
                      n_objects=(cfg.int("scene", "min_objects"), cfg.int("scene", "max_objects")))
        spec = random_scene_spec(np.random.default_rng(seed), **kwargs)
    scene = make_scene(spec, seed, **_sim_kwargs(cfg))
    rio.save_events(args.out, scene.events)
    print(f"wrote {len(scene.events)} events to {args.out}")


def cmd_voxelize(args, cfg: Config) -> None:
    window = parse_duration_us(args.window)
    bins = args.bins if args.bins is not None else cfg.int("dataset", "bins")
    if bins < 1:
        raise UsageError("--bins must be >= 1")
    duration = parse_duration_us(args.duration) if args.duration is not None else None
    events = rio.load_events(args.inp)
    events.validate()
    if duration is None:
        duration = int(events.t[-1]) if len(events) else 0
    if len(events) and events.t[-1] > duration:
        raise ValueError(f"events extend past the duration {duration} us")
    count = math.ceil(duration / window)
    out = Path(args.out) if args.out else Path(args.inp).with_suffix("")
    out.mkdir(parents=True, exist_ok=True)
    for i in range(count):
        t0, t1 = i * window, (i + 1) * window
        ev = events.slice_time(t0, t1, closed=i == count - 1)
        grid = build_voxel_grid(ev, events.height, events.width, bins, t0, t1).grid
        rio.save_tensor(out / f"voxel_{i:05d}.ten", normalize_voxel(grid) if args.normalize else grid)
    print(f"wrote {count} voxel grids to {out}")


def _train_config(args, cfg: Config) -> TrainConfig:
    profile = args.profile or cfg.get("train", "profile")
    kind = args.model or cfg.get("model", "kind")
    overrides = {k: v for k, v in (("lr", cfg.optional("train", "lr", float)),
                                   ("batch_size", cfg.optional("train", "batch_size", int)),
                                   ("iterations", cfg.optional("train", "iterations", int)),
                                   ("unroll", cfg.optional("train", "unroll", int))) if v is not None}
    return TrainConfig.from_profile(profile, kind=kind, seed=cfg.int("train", "seed"),
                                    grad_weight=cfg.float("train", "grad_weight"),
                                    crop=cfg.int("train", "crop"), model=_model_config(cfg), **overrides)


def cmd_train(args, cfg: Config) -> None:
    tc = _train_config(args, cfg)
    seqs = _sequences(cfg, args.data, "train", cfg.int("dataset", "frame_rate_hz"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(tc, seqs, log_path=out / "loss.csv", checkpoint_path=out / "model.ckp")
    first, last = result.losses[0][1], result.losses[-1][1]
    print(f"trained {tc.kind} for {tc.iterations} iterations: loss {first:.4f} -> {last:.4f}")


def cmd_eval(args, cfg: Config) -> None:
    curve_kind = args.curve or _choice(cfg, "eval", "curve", ("frame-index", "rate"))
    model = load_model(args.checkpoint)
    if curve_kind == "rate":
        rate, profile = cfg.int("eval", "frame_rate_hz"), f"{cfg.int('eval', 'frame_rate_hz')}hz"
    else:
        rate, profile = cfg.int("dataset", "frame_rate_hz"), f"{cfg.int('dataset', 'frame_rate_hz')}hz"
    seqs = _sequences(cfg, args.data, cfg.get("eval", "split"), rate)
    curve = eval_frame_index_curve(model, seqs, crop=cfg.int("eval", "crop"),
                                   align=cfg.bool("eval", "align_scale"), profile=profile)
    Path(args.out).write_text(curve.to_csv(), encoding="utf-8")
    if args.metrics:
        Path(args.metrics).write_text(curve.metrics_csv(), encoding="utf-8")
    for i, a, c in zip(curve.indices, curve.abs_rel, curve.counts):
        print(f"frame_index {i:2d}  abs_rel {a:.4f}  (n={c})")


def cmd_predict(args, cfg: Config) -> None:
    model = load_model(args.checkpoint)
    scenes = load_dataset(args.data, args.scene)
    if args.scene not in scenes:
        raise FileNotFoundError(f"scene {args.scene!r} not found under {args.data}")
    seq = build_training_sequence(scenes[args.scene], cfg.int("dataset", "voxel_rate_hz"),
                                  cfg.int("dataset", "frame_rate_hz"), cfg.int("dataset", "bins"),
                                  scene_id=args.scene)
    preds = predict_stream(model, model.kind, seq)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rio.save_tensor(out / "predictions.ten", np.stack([p for _, p in preds]))
    lines = ["index,t_us,sensor,frame_index"]
    lines += [f"{i},{it.t},{it.sensor},{'' if it.frame_index is None else it.frame_index}"
              for i, (it, _) in enumerate(preds)]
    (out / "predictions.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {len(preds)} predictions to {out}")


def cmd_export_curve(args, cfg: Config) -> None:
    rows = []
    for path in args.inp:
        curve = EvalCurve.from_csv(Path(path).read_text(encoding="utf-8"))
        rows += [(curve.kind, curve.profile, i, a, c)
                 for i, a, c in zip(curve.indices, curve.abs_rel, curve.counts)]
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "profile", "frame_index", "abs_rel", "count"])
    w.writerows([(m, p, i, f"{a:.9g}", c) for m, p, i, a, c in rows])
    Path(args.out).write_text(buf.getvalue(), encoding="utf-8")
    print(f"merged {len(args.inp)} curves into {args.out}")


HANDLERS = {"make-dataset": cmd_make_dataset, "simulate": cmd_simulate, "voxelize": cmd_voxelize,
            "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "export-curve": cmd_export_curve}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _build_parser().parse_args(argv)
        cfg = Config.load(args.config, args.set)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    print(f"# ramnet {args.command}: resolved configuration")
    print(cfg.dump(), end="")
    sys.stdout.flush()
    if args.print_config:
        return 0
    try:
        HANDLERS[args.command](args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
