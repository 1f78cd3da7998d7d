"""Command-line front end: ``posereg <command> [flags]``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .datagen import (
    SceneSpec,
    dominant_landmark,
    generate_scene,
    interpolation_poses,
    load_split,
    read_scene_spec,
    render_poses,
    sample_trajectory,
    save_split,
    write_pgm,
    write_scene_spec,
)
from .evaluation import (
    ExperimentReport,
    beta_sweep,
    build_feature_index,
    crop_mask,
    evaluate,
    joint_vs_separate,
    nn_baseline,
    read_summary,
    saliency_map,
    spacing_sweep,
    write_runs,
)
from .model import ConfigError, Model, ModelConfig, build_model, DESK_TRUNK
from .tensor import Checkpoint
from .training import DivergenceError, TrainConfig, pretext_accuracy, pretrain_classifier, train, write_log

logger = logging.getLogger("posereg")

OUTPUT_ROOT_ENV = "POSEREG_OUTPUT_ROOT"
MANIFEST = "manifest.json"


class CommandError(Exception):
    """A failed precondition; reported on stderr with exit status 1."""


# -- shared plumbing -------------------------------------------------------------


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _prepare_out(args, command: str) -> Path:
    out = Path(args.out) if args.out else output_root() / command
    if out.exists() and any(out.iterdir()) and not args.force:
        raise CommandError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    return value


class Manifest:
    """Run record written into the output directory before anything else."""

    def __init__(self, out: Path, command: str, config: dict, inputs: dict):
        self.path = out / MANIFEST
        self.data = {
            "command": command,
            "config": _jsonable(config),
            "inputs": _jsonable(inputs),
            "output": str(out),
            "version": __version__,
            "started": datetime.now(timezone.utc).isoformat(),
            "finished": None,
        }
        self._write()

    def _write(self) -> None:
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")

    def finish(self) -> None:
        self.data["finished"] = datetime.now(timezone.utc).isoformat()
        self._write()


def _need_dir(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise CommandError(f"{what} not found: {p}")
    return p


def _load_scene(data: Path) -> SceneSpec:
    path = data / "scene.txt"
    if not path.exists():
        raise CommandError(f"scene spec not found: {path}")
    return read_scene_spec(path)


def _load(data: Path, split: str, scene: SceneSpec | None = None):
    if not (data / f"{split}.txt").exists():
        raise CommandError(f"split {split!r} not found: {data / (split + '.txt')}")
    return load_split(data, split, scene)


def _dataset_info(data: Path) -> dict:
    path = data / MANIFEST
    return json.loads(path.read_text())["config"] if path.exists() else {}


def _read_kv(path: str | None) -> dict[str, str]:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise CommandError(f"config file not found: {p}")
    values = {}
    for lineno, line in enumerate(p.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        if not sep:
            raise CommandError(f"{p}:{lineno}: expected key = value")
        values[key.strip()] = raw.strip()
    return values


_FLAG_TO_TRAIN = {
    "epochs": "epochs",
    "lr": "base_lr",
    "batch_size": "batch_size",
    "momentum": "momentum",
    "decay_period": "decay_period",
    "seed": "seed",
    "eval_every": "eval_every",
    "clip_norm": "clip_norm",
}


def _configs(args, scene: SceneSpec) -> tuple[ModelConfig, TrainConfig]:
    """Defaults < config file < flags."""
    values = _read_kv(getattr(args, "config", None))
    for flag, key in _FLAG_TO_TRAIN.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = str(v)
    for key in ("feature_dim", "num_heads"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = str(v)
    beta = getattr(args, "beta", None)
    if beta is not None:
        values["beta"] = beta
    model_kw = {}
    for key in ("feature_dim", "num_heads", "input_size"):
        if key in values:
            model_kw[key] = int(values.pop(key))
    beta_raw = values.pop("beta", None)
    train_kw = dict(values)
    if beta_raw is not None:
        if beta_raw == "auto":
            train_kw["beta"] = "auto"
        else:
            model_kw["beta"] = float(beta_raw)
    model_cfg = ModelConfig(trunk=DESK_TRUNK, position_extent=scene.extent, **model_kw)
    train_cfg = TrainConfig.from_mapping(train_kw)
    crop = train_cfg.preprocessor()
    if model_cfg.input_size != crop.crop_side:
        model_cfg = replace(model_cfg, input_size=crop.crop_side)
    model_cfg.validate()
    train_cfg.validate()
    return model_cfg, train_cfg


def save_model(out: Path, model: Model, ckpt: Checkpoint) -> None:
    model.config.save(out / "model.cfg")
    ckpt.save(out / "checkpoint.bin")
    np.save(out / "mean.npy", model.mean_image)


def load_model(model_dir: Path) -> Model:
    for name in ("model.cfg", "checkpoint.bin", "mean.npy"):
        if not (model_dir / name).exists():
            raise CommandError(f"model file not found: {model_dir / name}")
    config = ModelConfig.load(model_dir / "model.cfg")
    model = build_model(config, 0)
    ckpt = Checkpoint.load(model_dir / "checkpoint.bin")
    if ckpt.config_digest != config.digest():
        raise CommandError(
            "checkpoint/config digest mismatch: "
            f"checkpoint {ckpt.config_digest.hex()} vs config {config.digest().hex()}"
        )
    model.load_checkpoint(ckpt)
    model.mean_image = np.load(model_dir / "mean.npy")
    return model


# -- commands -------------------------------------------------------------------


def cmd_gen_data(args) -> None:
    if args.spacing <= 0:
        raise UsageError("--spacing must be positive")
    if min(args.train_count, args.test_count) < 1:
        raise UsageError("frame counts must be positive")
    out = _prepare_out(args, "gen-data")
    manifest = Manifest(out, "gen-data", vars_of(args), {})
    scene = generate_scene(args.seed, args.extent, n_landmarks=args.landmarks, resolution=args.resolution)
    train_poses = sample_trajectory(scene, args.spacing, args.train_count, args.seed + 1)
    test_poses = sample_trajectory(scene, args.spacing, args.test_count, args.seed + 2)
    write_scene_spec(out / "scene.txt", scene)
    save_split(out, "train", render_poses(scene, train_poses, "train"))
    save_split(out, "test", render_poses(scene, test_poses, "test"))
    if args.interp_count > 0:
        offset = args.spacing if args.interp_offset is None else args.interp_offset
        interp = interpolation_poses(train_poses, args.interp_count, offset, scene)
        save_split(out, "interp", render_poses(scene, interp, "interp"))
    manifest.finish()
    print(f"wrote dataset to {out}")


def cmd_train(args) -> None:
    data = _need_dir(args.data, "dataset directory")
    scene = _load_scene(data)
    model_cfg, train_cfg = _configs(args, scene)
    train_set = _load(data, "train")
    val_set = _load(data, args.val_split) if args.val_split else None
    init = None
    if args.init:
        init_path = Path(args.init)
        if not init_path.exists():
            raise CommandError(f"initial weights not found: {init_path}")
        init = Checkpoint.load(init_path)
    out = _prepare_out(args, "train")
    manifest = Manifest(
        out,
        "train",
        {"model": model_cfg.to_text().splitlines(), "train": train_cfg.to_dict()},
        {"data": data, "init": args.init},
    )
    model = build_model(model_cfg, train_cfg.seed)
    if init is not None:
        model.load_checkpoint(init, names=[n for n in model.trunk_names() if n in init.params])
    try:
        ckpt, logs = train(model, train_set, train_cfg, val_set=val_set, checkpoint_dir=out)
    except DivergenceError as exc:
        raise CommandError(str(exc)) from exc
    if train_cfg.epochs == 0:
        ckpt = model.checkpoint(None, 0)
    save_model(out, model, ckpt)
    write_log(out / "log.csv", logs, include_timing=False)
    write_log(out / "log_timing.csv", logs, include_timing=True)
    manifest.finish()
    last = logs[-1] if logs else None
    if last is not None:
        print(f"epoch {last.epoch}: loss {last.train_loss:.4f}, val {last.val_position_m:.3f} m {last.val_orientation_deg:.2f} deg")
    print(f"wrote model to {out}")


def cmd_eval(args) -> None:
    data = _need_dir(args.data, "dataset directory")
    model = load_model(_need_dir(args.model, "model directory"))
    test = _load(data, args.split)
    out = _prepare_out(args, "eval")
    manifest = Manifest(out, "eval", vars_of(args), {"data": data, "model": args.model})
    report = evaluate(model, test, args.mode, args.dense_count)
    report.write(out)
    manifest.finish()
    _print_medians(report.median_position_m, report.median_orientation_deg, len(report.records))


def cmd_nn(args) -> None:
    data = _need_dir(args.data, "dataset directory")
    model = load_model(_need_dir(args.model, "model directory"))
    index_set = _load(data, args.index_split)
    test = _load(data, args.split)
    out = _prepare_out(args, "nn")
    manifest = Manifest(out, "nn", vars_of(args), {"data": data, "model": args.model})
    report = nn_baseline(build_feature_index(model, index_set), model, test)
    report.write(out)
    manifest.finish()
    _print_medians(report.median_position_m, report.median_orientation_deg, len(report.records))


def cmd_saliency(args) -> None:
    data = _need_dir(args.data, "dataset directory")
    model = load_model(_need_dir(args.model, "model directory"))
    scene = _load_scene(data)
    samples = _load(data, args.split, scene)[: args.limit or None]
    out = _prepare_out(args, "saliency")
    manifest = Manifest(out, "saliency", vars_of(args), {"data": data, "model": args.model})
    (out / "maps").mkdir()
    rows = []
    for s in samples:
        result = saliency_map(model, s)
        name = Path(s.frame_id).stem + ".pgm"
        write_pgm(out / "maps" / name, result.saliency)
        mask = crop_mask(model, s.landmark_mask)
        inside = result.saliency[mask].mean() if mask.any() else float("nan")
        outside = result.saliency[~mask].mean() if (~mask).any() else float("nan")
        rows.append((s.frame_id, inside, outside, int(result.degenerate)))
    with open(out / "saliency.csv", "w") as fh:
        fh.write("frame_id,landmark_mean,background_mean,degenerate\n")
        for fid, a, b, d in sorted(rows):
            fh.write(f"{fid},{float(a)!r},{float(b)!r},{d}\n")
    manifest.finish()
    print(f"wrote {len(rows)} saliency maps to {out / 'maps'}")


def cmd_sweep_beta(args) -> None:
    data = _need_dir(args.data, "dataset directory")
    scene = _load_scene(data)
    model_cfg, train_cfg = _configs(args, scene)
    train_set, test = _load(data, "train"), _load(data, args.split)
    out = _prepare_out(args, "sweep-beta")
    manifest = Manifest(out, "sweep-beta", {**vars_of(args), "train": train_cfg.to_dict()}, {"data": data})
    try:
        sweep = beta_sweep(scene, train_set, test, args.betas, model_cfg, train_cfg, train_cfg.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    sweep.write(out / "beta_sweep.csv")
    manifest.finish()
    for r in sweep.runs:
        print(f"beta {r.value:g}: {r.median_position_m:.3f} m {r.median_orientation_deg:.2f} deg{' (diverged)' if r.diverged else ''}")
    print(f"selected beta {sweep.selected_beta:g}")


def cmd_sweep_spacing(args) -> None:
    data = _need_dir(args.data, "dataset directory")
    scene = _load_scene(data)
    model_cfg, train_cfg = _configs(args, scene)
    base_spacing = args.base_spacing or _dataset_info(data).get("spacing")
    if base_spacing is None:
        raise CommandError("base spacing unknown; pass --base-spacing")
    train_set, test = _load(data, "train"), _load(data, args.split)
    out = _prepare_out(args, "sweep-spacing")
    manifest = Manifest(out, "sweep-spacing", {**vars_of(args), "train": train_cfg.to_dict()}, {"data": data})
    try:
        runs = spacing_sweep(train_set, float(base_spacing), args.spacings, test, model_cfg, train_cfg, train_cfg.seed)
    except ValueError as exc:
        raise CommandError(str(exc)) from exc
    write_runs(out / "spacing_sweep.csv", "spacing", runs)
    manifest.finish()
    for r in runs:
        print(f"spacing {r.value:g} m ({r.n_train} frames): {r.median_position_m:.3f} m {r.median_orientation_deg:.2f} deg")


def cmd_compare_heads(args) -> None:
    data = _need_dir(args.data, "dataset directory")
    scene = _load_scene(data)
    model_cfg, train_cfg = _configs(args, scene)
    train_set, test = _load(data, "train"), _load(data, args.split)
    out = _prepare_out(args, "compare-heads")
    manifest = Manifest(out, "compare-heads", {**vars_of(args), "train": train_cfg.to_dict()}, {"data": data})
    runs = joint_vs_separate(train_set, test, model_cfg, train_cfg, train_cfg.seed)
    write_runs(out / "joint_vs_separate.csv", "output", runs)
    manifest.finish()
    for r in runs:
        print(f"{r.label:<12} {r.median_position_m:.3f} m {r.median_orientation_deg:.2f} deg")


def pretext_samples(scene: SceneSpec, count: int, spacing: float, seed: int) -> list[tuple[np.ndarray, int]]:
    """Views along a fresh trajectory labelled with their dominant landmark;
    views showing no landmark are dropped."""
    samples = render_poses(scene, sample_trajectory(scene, spacing, count, seed), "pretext")
    return [(s.image, lab) for s in samples if (lab := dominant_landmark(s)) >= 0]


def cmd_pretrain(args) -> None:
    data = _need_dir(args.data, "dataset directory")
    scene = _load_scene(data)
    model_cfg, train_cfg = _configs(args, scene)
    out = _prepare_out(args, "pretrain")
    manifest = Manifest(out, "pretrain", {**vars_of(args), "train": train_cfg.to_dict()}, {"data": data})
    spacing = float(_dataset_info(data).get("spacing", 0.5))
    pretext = pretext_samples(scene, args.count, spacing, train_cfg.seed + 1000)
    holdout = pretext_samples(scene, max(args.count // 4, 1), spacing, train_cfg.seed + 2000)
    model = build_model(model_cfg, train_cfg.seed)
    ckpt = pretrain_classifier(model, pretext, train_cfg)
    ckpt.save(out / "trunk.bin")
    acc = pretext_accuracy(model, holdout) if holdout else float("nan")
    n_classes = len({lab for _, lab in pretext})
    (out / "pretext.csv").write_text(f"frames,classes,holdout_accuracy\n{len(pretext)},{n_classes},{acc!r}\n")
    manifest.finish()
    print(f"pretext accuracy {acc:.3f} over {n_classes} classes; trunk weights in {out / 'trunk.bin'}")


def cmd_report(args) -> None:
    src = _need_dir(args.eval_dir, "evaluation directory")
    per_frame = src / "per_frame.csv"
    if not per_frame.exists():
        raise CommandError(f"per-frame table not found: {per_frame}")
    ids, pos, ori = [], [], []
    for line in per_frame.read_text().splitlines()[1:]:
        fid, p, o = line.split(",")
        ids.append(fid)
        pos.append(float(p))
        ori.append(float(o))
    report = ExperimentReport.from_errors(ids, pos, ori)
    stored = read_summary(src / "summary.csv")["median"]
    again = (report.median_position_m, report.median_orientation_deg)
    if not all(a == b or (np.isnan(a) and np.isnan(b)) for a, b in zip(again, stored)):
        raise CommandError(f"summary medians {stored} disagree with per-frame records {again}")
    _print_medians(*again, len(ids))
    for q, v in report.percentiles["position_m"].items():
        print(f"p{q:<3d} {v!r} m {report.percentiles['orientation_deg'][q]!r} deg")


def _print_medians(pos: float, ori: float, n: int) -> None:
    print(f"median position error {pos!r} m")
    print(f"median orientation error {ori!r} deg")
    print(f"frames {n}")


# -- argument parsing -------------------------------------------------------------


class UsageError(Exception):
    pass


def vars_of(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def _positive_float(text: str) -> float:
    v = float(text)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return v


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", help=f"output directory (default: ${OUTPUT_ROOT_ENV} or ./runs, plus the command name)")
    p.add_argument("--force", action="store_true", help="write into a non-empty output directory")


def _training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--config", help="key = value file with model/training options")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=_positive_float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--momentum", type=float)
    p.add_argument("--decay-period", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--clip-norm", type=_positive_float, help="cap on the joint gradient norm")
    p.add_argument("--feature-dim", type=int)
    p.add_argument("--num-heads", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="posereg", description="Camera pose regression on synthetic scenes.")
    parser.add_argument("--version", action="version", version=f"posereg {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic scene and pose-labelled splits")
    _common(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--extent", type=_positive_float, nargs=3, default=[10.0, 10.0, 2.0], metavar=("X", "Y", "Z"))
    p.add_argument("--landmarks", type=int, default=16)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--spacing", type=float, default=0.5, help="meters between consecutive frames")
    p.add_argument("--train-count", type=int, default=200)
    p.add_argument("--test-count", type=int, default=50)
    p.add_argument("--interp-count", type=int, default=50, help="frames on the offset interpolation path (0 to skip)")
    p.add_argument("--interp-offset", type=float, help="lateral offset of the interpolation path in meters (default: the spacing)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a pose regressor")
    _common(p)
    _training_flags(p)
    p.add_argument("--beta", help="position/orientation balance, or 'auto'")
    p.add_argument("--val-split", default="test", help="split used for the validation columns of the log ('' to skip)")
    p.add_argument("--init", help="trunk checkpoint to warm-start from (see pretrain)")
    p.set_defaults(func=cmd_train)

    for name, func, help_text in (
        ("eval", cmd_eval, "median and cumulative errors of a trained model"),
        ("nn", cmd_nn, "nearest-neighbour feature baseline"),
        ("saliency", cmd_saliency, "input-gradient saliency maps"),
    ):
        p = sub.add_parser(name, help=help_text)
        _common(p)
        p.add_argument("--data", required=True)
        p.add_argument("--model", required=True, help="directory written by train")
        p.add_argument("--split", default="interp" if name == "nn" else "test")
        if name == "eval":
            p.add_argument("--mode", choices=("center", "dense"), default="center")
            p.add_argument("--dense-count", type=int, default=128)
        if name == "nn":
            p.add_argument("--index-split", default="train")
        if name == "saliency":
            p.add_argument("--limit", type=int, default=0, help="first N frames only")
        p.set_defaults(func=func)

    p = sub.add_parser("sweep-beta", help="train one model per beta")
    _common(p)
    _training_flags(p)
    p.add_argument("--betas", type=_positive_float, nargs="+", default=[1.0, 10.0, 100.0, 1000.0, 10000.0])
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_sweep_beta)

    p = sub.add_parser("sweep-spacing", help="train on coarser subsamplings of the training path")
    _common(p)
    _training_flags(p)
    p.add_argument("--beta")
    p.add_argument("--spacings", type=_positive_float, nargs="+", default=[0.5, 1.0, 2.0, 4.0])
    p.add_argument("--base-spacing", type=_positive_float, help="spacing of the training split (default: from the dataset manifest)")
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_sweep_spacing)

    p = sub.add_parser("compare-heads", help="joint pose output against separate position and orientation networks")
    _common(p)
    _training_flags(p)
    p.add_argument("--beta")
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_compare_heads)

    p = sub.add_parser("pretrain", help="landmark-classification pretext training of the trunk")
    _common(p)
    _training_flags(p)
    p.add_argument("--count", type=int, default=400, help="pretext views to render")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("report", help="reprint the statistics of an evaluation directory")
    p.add_argument("eval_dir")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (CommandError, ConfigError) as exc:
        print(f"posereg {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
