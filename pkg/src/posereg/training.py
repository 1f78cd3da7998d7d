"""SGD training of the pose regressor, and the classification pretext task."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .datagen import CropSpec, PoseSample, ScenePreprocessor
from .geometry import Pose, average_pose_vectors, position_error_m, quat_angular_error_deg, quat_normalize, stack_poses
from .model import Model, PoseOutput, estimate_beta, pose_loss, predict_raw, total_loss
from .tensor import Checkpoint, OptimizerState, Tensor

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "train_loss", "val_loss", "val_position_m", "val_orientation_deg", "lr", "seconds")


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch}, batch {batch}: loss {loss!r}")
        self.epoch = epoch
        self.batch = batch
        self.loss = loss


class DegeneratePretextError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    epochs: int = 300
    base_lr: float = 3e-3
    momentum: float = 0.9
    decay_factor: float = 0.1
    decay_period: int = 200
    seed: int = 0
    rescale_side: int = 73
    crop_side: int = 64
    # a number, "auto" (warm-up estimate), or None to keep the model's beta
    beta: float | str | None = None
    beta_provisional: float = 100.0
    beta_min: float = 1.0
    beta_max: float = 1e4
    warmup_fraction: float = 0.1
    eval_every: int = 1
    divergence_threshold: float = 1e6
    # joint gradient norm cap; None trains without clipping
    clip_norm: float | None = None
    # start each head's bias at the training-set mean target (fresh runs only)
    fit_output_bias: bool = True

    def validate(self, n_samples: int | None = None) -> None:
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs non-negative")
        if n_samples is not None and self.batch_size > n_samples:
            raise ValueError(f"batch_size {self.batch_size} exceeds training set size {n_samples}")
        if min(self.base_lr, self.decay_factor) <= 0 or not 0 <= self.momentum < 1:
            raise ValueError("learning rates must be positive and momentum in [0, 1)")
        if self.eval_every < 1 or self.decay_period < 1:
            raise ValueError("eval_every and decay_period must be positive")
        if isinstance(self.beta, str) and self.beta != "auto":
            raise ValueError(f"beta must be a number or 'auto', got {self.beta!r}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        CropSpec(self.rescale_side, self.crop_side, "random")

    def optimizer(self, params: Sequence[Tensor]) -> OptimizerState:
        return OptimizerState.for_params(
            params,
            momentum=self.momentum,
            base_lr=self.base_lr,
            decay_factor=self.decay_factor,
            decay_period_epochs=self.decay_period,
        )

    def preprocessor(self) -> ScenePreprocessor:
        return ScenePreprocessor(self.rescale_side, self.crop_side)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        kwargs = {}
        types = {f.name: f.type for f in fields(cls)}
        for key, raw in values.items():
            if key not in types:
                raise ValueError(f"unknown training option {key!r}")
            kwargs[key] = _coerce(key, raw, cls)
        return cls(**kwargs)


def _coerce(key: str, raw, cls):
    default = getattr(cls, key)
    if not isinstance(raw, str):
        return raw
    if key == "beta":
        if raw.lower() in ("auto", "none"):
            return None if raw.lower() == "none" else "auto"
        return float(raw)
    if key == "clip_norm" and raw.lower() == "none":
        return None
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    return float(raw)


@dataclass
class TrainLogRow:
    epoch: int
    train_loss: float
    val_loss: float
    val_position_m: float
    val_orientation_deg: float
    lr: float
    seconds: float

    def as_row(self) -> list:
        return [getattr(self, c) for c in LOG_COLUMNS]


def write_log(path, rows: Sequence[TrainLogRow], include_timing: bool = True) -> None:
    cols = LOG_COLUMNS if include_timing else LOG_COLUMNS[:-1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in rows:
            writer.writerow([_fmt(v) for v in row.as_row()[: len(cols)]])


def read_log(path) -> list[TrainLogRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        out = []
        for rec in reader:
            out.append(
                TrainLogRow(
                    epoch=int(rec["epoch"]),
                    **{c: float(rec.get(c) or "nan") for c in LOG_COLUMNS[1:]},
                )
            )
    return out


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else repr(float(v))


@dataclass
class ValidationStats:
    loss: float
    position_m: float
    orientation_deg: float
    quat_diff: float


def validation_stats(model: Model, pre: ScenePreprocessor, samples: Sequence[PoseSample]) -> ValidationStats:
    """Center-crop errors of the final head; medians plus mean loss."""
    crops = pre.transform([s.image for s in samples])
    raw, _ = predict_raw(model, crops)
    positions, quats = stack_poses([s.pose for s in samples])
    kind = model.config.output
    loss = pose_loss(_as_output(raw), [s.pose for s in samples], model.config.beta, kind).item()
    pos = ori = qd = float("nan")
    if kind in ("pose", "position"):
        pos = float(np.median(position_error_m(raw[:, :3], positions)))
    if kind in ("pose", "orientation"):
        q = quat_normalize(raw[:, -4:])
        ori = float(np.median(quat_angular_error_deg(q, quats)))
        signs = np.where(np.sum(q * quats, axis=1) < 0, -1.0, 1.0)[:, None]
        qd = float(np.median(np.linalg.norm(q - signs * quats, axis=1)))
    return ValidationStats(loss, pos, ori, qd)


def _as_output(raw: np.ndarray) -> PoseOutput:
    return PoseOutput(Tensor(raw), Tensor(np.zeros((len(raw), 1))))


def _epoch_batches(n: int, config: TrainConfig, epoch: int, pre: ScenePreprocessor, rescaled):
    """Shuffled batches of random crops; a pure function of (seed, epoch)."""
    rng = np.random.default_rng([config.seed, epoch])
    order = rng.permutation(n)
    for start in range(0, n, config.batch_size):
        idx = order[start : start + config.batch_size]
        crops = np.stack([pre.crops(rescaled[i], "random", rng)[0] for i in idx])
        yield idx, crops


def train(
    model: Model,
    dataset: Sequence[PoseSample],
    config: TrainConfig,
    val_set: Sequence[PoseSample] | None = None,
    checkpoint_dir=None,
    resume: Checkpoint | None = None,
) -> tuple[Checkpoint, list[TrainLogRow]]:
    """Train ``model`` in place and return the final checkpoint and the log.

    With ``config.beta == "auto"`` a short warm-up run at the provisional beta
    estimates beta from its validation errors, then training restarts from the
    initial weights.
    """
    if not dataset:
        raise ValueError("training set is empty")
    config.validate(len(dataset))
    if model.config.input_size != config.crop_side:
        raise ValueError(f"model input size {model.config.input_size} != crop side {config.crop_side}")
    if config.beta == "auto":
        beta = auto_beta(model, dataset, config, val_set)
        model.config = replace(model.config, beta=beta)
        config = replace(config, beta=None)
    elif config.beta is not None:
        model.config = replace(model.config, beta=float(config.beta))

    pre = config.preprocessor()
    rescaled = pre.rescale([s.image for s in dataset])
    if model.mean_image is None:
        pre.fit([s.image for s in dataset])
        model.mean_image = pre.mean_
    else:
        pre.mean_ = model.mean_image
    poses = [s.pose for s in dataset]
    params = model.parameters()
    opt = config.optimizer(params)
    start_epoch = 0
    if resume is not None:
        model.load_checkpoint(resume)
        for v, name in zip(opt.velocities, model.params):
            v[...] = resume.velocities.get(name, 0.0)
        start_epoch = resume.epoch
    elif config.fit_output_bias and model.config.output_bias is None:
        set_head_bias(model, poses)
    model.zero_grad()

    logs: list[TrainLogRow] = []
    t0 = time.perf_counter()
    for epoch in range(start_epoch, config.epochs):
        total, count = 0.0, 0
        for b, (idx, crops) in enumerate(_epoch_batches(len(dataset), config, epoch, pre, rescaled)):
            outputs = model.forward(Tensor(crops), train_mode=True)
            loss = total_loss(outputs, [poses[i] for i in idx], model.config)
            value = loss.item()
            if not math.isfinite(value) or value > config.divergence_threshold:
                raise DivergenceError(epoch, b, value)
            loss.backward()
            if config.clip_norm is not None:
                T.clip_grad_norm(params, config.clip_norm)
            T.sgd_momentum_step(params, opt, epoch)
            total += value * len(idx)
            count += len(idx)
        done = epoch + 1
        if done % config.eval_every == 0 or done == config.epochs:
            stats = validation_stats(model, pre, val_set) if val_set else None
            row = TrainLogRow(
                epoch=done,
                train_loss=total / count,
                val_loss=stats.loss if stats else float("nan"),
                val_position_m=stats.position_m if stats else float("nan"),
                val_orientation_deg=stats.orientation_deg if stats else float("nan"),
                lr=T.lr_schedule(opt, epoch),
                seconds=time.perf_counter() - t0,
            )
            logs.append(row)
            logger.info(
                "epoch %d loss %.4f val %.3f m %.2f deg", done, row.train_loss, row.val_position_m, row.val_orientation_deg
            )
            if checkpoint_dir is not None:
                model.checkpoint(opt.velocities, done).save(Path(checkpoint_dir) / "checkpoint.bin")
    ckpt = model.checkpoint(opt.velocities, max(config.epochs, start_epoch))
    if checkpoint_dir is not None:
        ckpt.save(Path(checkpoint_dir) / "checkpoint.bin")
    return ckpt, logs


def mean_target(poses: Sequence[Pose], kind: str = "pose") -> np.ndarray:
    """Mean position and sign-aligned mean orientation of a pose set."""
    vec = average_pose_vectors(np.array([p.as_vector() for p in poses])).as_vector()
    return {"pose": vec, "position": vec[:3], "orientation": vec[3:]}[kind]


def set_head_bias(model: Model, poses: Sequence[Pose]) -> None:
    target = mean_target(poses, model.config.output)
    for name, p in model.params.items():
        if name.startswith("head") and name.endswith(".bias"):
            p.data[...] = target


def auto_beta(model: Model, dataset, config: TrainConfig, val_set=None) -> float:
    """Estimate beta from a warm-up run, leaving ``model`` untouched."""
    warm_epochs = max(1, int(round(config.warmup_fraction * config.epochs)))
    probe = Model(replace(model.config, beta=config.beta_provisional), {k: Tensor(v.data, True) for k, v in model.params.items()})
    probe.mean_image = model.mean_image
    warm_cfg = replace(config, epochs=warm_epochs, beta=None)
    train(probe, dataset, warm_cfg)
    pre = warm_cfg.preprocessor()
    pre.mean_ = probe.mean_image
    stats = validation_stats(probe, pre, val_set or dataset)
    beta = estimate_beta((stats.position_m, stats.quat_diff), config.beta_min, config.beta_max)
    logger.info("auto beta: %.4g m / %.4g -> beta %.4g", stats.position_m, stats.quat_diff, beta)
    return beta


def pretrain_classifier(
    model: Model,
    dataset: Sequence[tuple[np.ndarray, int]],
    config: TrainConfig,
) -> Checkpoint:
    """Train trunk and feature layer on a softmax classification pretext.

    A temporary linear classifier sits on the localization feature and is
    discarded; the returned checkpoint holds only the trunk parameters (every
    parameter except the regressor heads).
    """
    labels = np.array([lab for _, lab in dataset], dtype=np.intp)
    classes = np.unique(labels)
    if classes.size < 2:
        raise DegeneratePretextError("pretext dataset has a single class")
    config.validate(len(dataset))
    n_classes = int(labels.max()) + 1
    rng = np.random.default_rng([config.seed, 104729])
    classifier_w = T.init_uniform(rng, (n_classes, model.config.feature_dim), model.config.feature_dim)
    classifier_b = Tensor(np.zeros(n_classes), requires_grad=True)
    trunk = [model.params[n] for n in model.trunk_names()]
    params = trunk + [classifier_w, classifier_b]
    opt = config.optimizer(params)

    pre = config.preprocessor()
    images = [img for img, _ in dataset]
    pre.fit(images)
    rescaled = pre.rescale(images)
    for epoch in range(config.epochs):
        for idx, crops in _epoch_batches(len(dataset), config, epoch, pre, rescaled):
            (out,) = model.forward(Tensor(crops), train_mode=False)
            logits = T.linear(out.feature, classifier_w, classifier_b)
            loss = T.softmax_cross_entropy(logits, labels[idx])
            if not math.isfinite(loss.item()):
                raise DivergenceError(epoch, 0, loss.item())
            loss.backward()
            T.sgd_momentum_step(params, opt, epoch)
    model.zero_grad()
    model.pretext_classifier = (classifier_w.data.copy(), classifier_b.data.copy(), pre)
    names = model.trunk_names()
    return Checkpoint(model.config.digest(), {n: model.params[n].data.copy() for n in names}, {}, config.epochs)


def pretext_accuracy(model: Model, dataset: Sequence[tuple[np.ndarray, int]]) -> float:
    """Accuracy of the temporary pretext classifier left by ``pretrain_classifier``."""
    w, b, pre = model.pretext_classifier
    crops = pre.transform([img for img, _ in dataset])
    _, feats = predict_raw(model, crops)
    pred = np.argmax(feats @ w.T + b, axis=1)
    return float(np.mean(pred == np.array([lab for _, lab in dataset])))
