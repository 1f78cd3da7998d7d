"""Error reports and the experiment protocols built on them."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .datagen import PoseSample, ScenePreprocessor, SceneSpec, rescale_shortest_side
from .geometry import Pose, average_pose_vectors, position_error_m, quat_angular_error_deg, quat_normalize
from .model import Model, ModelConfig, build_model, pose_loss, predict_raw
from .tensor import Tensor
from .training import DivergenceError, TrainConfig, TrainLogRow, pretrain_classifier, train

logger = logging.getLogger(__name__)

PERCENTILES = (25, 50, 75, 90, 95, 100)


@dataclass
class FrameError:
    frame_id: str
    position_m: float
    orientation_deg: float


@dataclass
class ExperimentReport:
    records: list[FrameError]
    median_position_m: float
    median_orientation_deg: float
    percentiles: dict[str, dict[int, float]]
    forwards: int = 0
    inference_ms: float = float("nan")
    model_bytes: int = 0

    @classmethod
    def from_errors(cls, frame_ids, position, orientation, **extra) -> "ExperimentReport":
        recs = sorted(
            (FrameError(f, float(p), float(o)) for f, p, o in zip(frame_ids, position, orientation)),
            key=lambda r: r.frame_id,
        )
        pos = np.array([r.position_m for r in recs])
        ori = np.array([r.orientation_deg for r in recs])
        table = {
            "position_m": _percentiles(pos),
            "orientation_deg": _percentiles(ori),
        }
        return cls(recs, table["position_m"][50], table["orientation_deg"][50], table, **extra)

    @property
    def position_errors(self) -> np.ndarray:
        return np.array([r.position_m for r in self.records])

    @property
    def orientation_errors(self) -> np.ndarray:
        return np.array([r.orientation_deg for r in self.records])

    def histogram(self, metric: str) -> tuple[np.ndarray, np.ndarray]:
        """Cumulative histogram: sorted errors and the fraction of frames <= each."""
        values = self.position_errors if metric == "position_m" else self.orientation_errors
        values = np.sort(values[np.isfinite(values)])
        return values, np.arange(1, len(values) + 1) / max(len(values), 1)

    def write(self, directory) -> None:
        """Per-frame, summary and histogram tables. Timing goes to its own file
        so the others are reproducible byte for byte."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "per_frame.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame_id", "position_m", "orientation_deg"])
            for r in self.records:
                w.writerow([r.frame_id, _num(r.position_m), _num(r.orientation_deg)])
        with open(d / "summary.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["statistic", "position_m", "orientation_deg"])
            w.writerow(["median", _num(self.median_position_m), _num(self.median_orientation_deg)])
            for q in PERCENTILES:
                w.writerow([f"p{q}", _num(self.percentiles["position_m"][q]), _num(self.percentiles["orientation_deg"][q])])
            w.writerow(["frames", len(self.records), len(self.records)])
            w.writerow(["forwards", self.forwards, self.forwards])
        for metric in ("position_m", "orientation_deg"):
            values, frac = self.histogram(metric)
            with open(d / f"cumulative_{metric}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow([metric, "fraction"])
                for v, f in zip(values, frac):
                    w.writerow([_num(v), _num(f)])
        with open(d / "timing.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["inference_ms_per_frame", "model_bytes"])
            w.writerow([_num(self.inference_ms), self.model_bytes])


def _percentiles(values: np.ndarray) -> dict[int, float]:
    finite = values[np.isfinite(values)]
    if finite.size == 0:
        return {q: float("nan") for q in PERCENTILES}
    return {q: float(np.percentile(finite, q)) for q in PERCENTILES}


def _num(v) -> str:
    return repr(float(v))


def read_summary(path) -> dict[str, tuple[float, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return {r[0]: (float(r[1]), float(r[2])) for r in rows[1:]}


def model_preprocessor(model: Model, dense_count: int = 128) -> ScenePreprocessor:
    """Preprocessor matching a trained model's stored scene mean."""
    if model.mean_image is None:
        raise ValueError("model has no scene mean image; train it or load the mean first")
    _, h, w = model.mean_image.shape
    pre = ScenePreprocessor(min(h, w), model.config.input_size, dense_count)
    pre.mean_ = model.mean_image
    return pre


def predict_raw_vectors(model: Model, images: Sequence[np.ndarray], mode: str = "center", dense_count: int = 128) -> np.ndarray:
    """One raw output vector per image; dense mode averages over crops."""
    pre = model_preprocessor(model, dense_count)
    if mode == "center":
        raw, _ = predict_raw(model, pre.transform(images))
        return raw
    if mode != "dense":
        raise ValueError(f"unknown evaluation mode {mode!r}")
    out = []
    for rescaled in pre.rescale(images):
        raw, _ = predict_raw(model, pre.crops(rescaled, "dense"), batch_size=dense_count)
        out.append(average_pose_vectors(raw).as_vector() if raw.shape[1] == 7 else raw.mean(axis=0))
    return np.array(out)


def _errors(raw: np.ndarray, samples: Sequence[PoseSample], kind: str) -> tuple[np.ndarray, np.ndarray]:
    positions = np.array([s.pose.position for s in samples])
    quats = np.array([s.pose.orientation for s in samples])
    nan = np.full(len(samples), np.nan)
    pos = position_error_m(raw[:, :3], positions) if kind in ("pose", "position") else nan
    ori = quat_angular_error_deg(quat_normalize(raw[:, -4:]), quats) if kind in ("pose", "orientation") else nan
    return np.atleast_1d(pos), np.atleast_1d(ori)


def evaluate(model: Model, test_set: Sequence[PoseSample], mode: str = "center", dense_count: int = 128) -> ExperimentReport:
    if not test_set:
        raise ValueError("test set is empty")
    before = model.forward_count
    t0 = time.perf_counter()
    raw = predict_raw_vectors(model, [s.image for s in test_set], mode, dense_count)
    elapsed = time.perf_counter() - t0
    pos, ori = _errors(raw, test_set, model.config.output)
    return ExperimentReport.from_errors(
        [s.frame_id for s in test_set],
        pos,
        ori,
        forwards=model.forward_count - before,
        inference_ms=1000.0 * elapsed / len(test_set),
        model_bytes=model.parameter_bytes(),
    )


@dataclass
class FeatureIndex:
    frame_ids: list[str]
    features: np.ndarray
    poses: list[Pose]

    def __len__(self) -> int:
        return len(self.frame_ids)

    def nearest(self, queries: np.ndarray) -> np.ndarray:
        """Index of the Euclidean-nearest stored feature (first on ties)."""
        if len(self) == 0:
            raise ValueError("feature index is empty")
        d2 = (
            np.sum(queries**2, axis=1)[:, None]
            - 2.0 * queries @ self.features.T
            + np.sum(self.features**2, axis=1)[None, :]
        )
        return np.argmin(d2, axis=1)


def build_feature_index(model: Model, train_set: Sequence[PoseSample]) -> FeatureIndex:
    pre = model_preprocessor(model)
    _, feats = predict_raw(model, pre.transform([s.image for s in train_set]))
    return FeatureIndex([s.frame_id for s in train_set], feats, [s.pose for s in train_set])


def nn_baseline(index: FeatureIndex, model: Model, test_set: Sequence[PoseSample]) -> ExperimentReport:
    """Predict each test frame's pose as that of its nearest training feature."""
    if len(index) == 0:
        raise ValueError("feature index is empty")
    pre = model_preprocessor(model)
    t0 = time.perf_counter()
    _, feats = predict_raw(model, pre.transform([s.image for s in test_set]))
    nearest = index.nearest(feats)
    elapsed = time.perf_counter() - t0
    raw = np.array([index.poses[i].as_vector() for i in nearest])
    pos, ori = _errors(raw, test_set, "pose")
    return ExperimentReport.from_errors(
        [s.frame_id for s in test_set],
        pos,
        ori,
        forwards=len(test_set),
        inference_ms=1000.0 * elapsed / len(test_set),
        model_bytes=index.features.nbytes,
    )


# -- experiments ----------------------------------------------------------------


@dataclass
class RunResult:
    label: str
    value: float
    n_train: int
    median_position_m: float
    median_orientation_deg: float
    diverged: bool = False
    logs: list[TrainLogRow] = field(default_factory=list, repr=False)


def _train_and_eval(
    label: str,
    value: float,
    model_config: ModelConfig,
    train_config: TrainConfig,
    train_set: Sequence[PoseSample],
    test_set: Sequence[PoseSample],
    model_seed: int,
) -> RunResult:
    model = build_model(model_config, model_seed)
    try:
        _, logs = train(model, train_set, train_config)
    except DivergenceError as exc:
        logger.warning("%s=%s diverged: %s", label, value, exc)
        return RunResult(label, value, len(train_set), float("inf"), float("inf"), diverged=True)
    report = evaluate(model, test_set)
    return RunResult(label, value, len(train_set), report.median_position_m, report.median_orientation_deg, logs=logs)


def scalarize(position_m: float, orientation_deg: float, diagonal: float) -> float:
    """Selection score for the beta sweep: position over scene diagonal plus
    orientation over 180 degrees."""
    return position_m / diagonal + orientation_deg / 180.0


@dataclass
class BetaSweep:
    runs: list[RunResult]
    selected_beta: float

    def write(self, path) -> None:
        _write_runs(path, "beta", self.runs, extra={"selected": lambda r: int(r.value == self.selected_beta)})


def beta_sweep(
    scene: SceneSpec,
    train_set: Sequence[PoseSample],
    test_set: Sequence[PoseSample],
    betas: Sequence[float],
    model_config: ModelConfig,
    train_config: TrainConfig,
    model_seed: int = 0,
) -> BetaSweep:
    """Train one model per beta (same seed and data order) and evaluate each."""
    betas = [float(b) for b in betas]
    if len(betas) < 3 or min(betas) <= 0 or max(betas) / min(betas) < 100:
        raise ValueError("beta sweep needs at least 3 positive values spanning two orders of magnitude")
    runs = [
        _train_and_eval("beta", b, replace(model_config, beta=b), replace(train_config, beta=None), train_set, test_set, model_seed)
        for b in betas
    ]
    ok = [r for r in runs if not r.diverged]
    if not ok:
        raise RuntimeError("every beta sweep run diverged")
    best = min(ok, key=lambda r: scalarize(r.median_position_m, r.median_orientation_deg, scene.diagonal))
    return BetaSweep(runs, best.value)


def spacing_sweep(
    base_samples: Sequence[PoseSample],
    base_spacing: float,
    spacings: Sequence[float],
    test_set: Sequence[PoseSample],
    model_config: ModelConfig,
    train_config: TrainConfig,
    model_seed: int = 0,
) -> list[RunResult]:
    """Subsample one densely sampled trajectory at coarser spacings and train on each.

    Spacing ``s`` keeps every ``round(s / base_spacing)``-th frame.
    """
    spacings = [float(s) for s in spacings]
    if any(b <= a for a, b in zip(spacings, spacings[1:])):
        raise ValueError("spacings must be strictly increasing")
    runs = []
    for s in spacings:
        stride = max(1, int(round(s / base_spacing)))
        subset = list(base_samples[::stride])
        if len(subset) < train_config.batch_size:
            raise ValueError(f"spacing {s} leaves {len(subset)} frames, fewer than the batch size {train_config.batch_size}")
        runs.append(_train_and_eval("spacing", s, model_config, train_config, subset, test_set, model_seed))
    return runs


def joint_vs_separate(
    train_set: Sequence[PoseSample],
    test_set: Sequence[PoseSample],
    model_config: ModelConfig,
    train_config: TrainConfig,
    model_seed: int = 0,
) -> list[RunResult]:
    """Joint 7-D regression against position-only and orientation-only networks."""
    runs = []
    for kind in ("pose", "position", "orientation"):
        cfg = replace(model_config, output=kind, output_bias=_bias_for(model_config.output_bias, kind))
        run = _train_and_eval("output", float("nan"), cfg, train_config, train_set, test_set, model_seed)
        run.label = kind
        runs.append(run)
    return runs


def _bias_for(bias, kind: str):
    if bias is None:
        return None
    return {"pose": bias, "position": bias[:3], "orientation": bias[3:]}[kind]


def _write_runs(path, key: str, runs: Sequence[RunResult], extra=None) -> None:
    extra = extra or {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([key, "n_train", "median_position_m", "median_orientation_deg", "diverged", *extra])
        for r in runs:
            head = r.label if key == "output" else _num(r.value)
            w.writerow([head, r.n_train, _num(r.median_position_m), _num(r.median_orientation_deg), int(r.diverged), *(f(r) for f in extra.values())])


def write_runs(path, key: str, runs: Sequence[RunResult]) -> None:
    _write_runs(path, key, runs)


@dataclass
class TransferResult:
    cold: list[TrainLogRow]
    warm: list[TrainLogRow]
    pretext_accuracy: float

    def epochs_to_reach(self, logs: Sequence[TrainLogRow], target: float) -> int | None:
        for row in logs:
            if row.val_loss <= target:
                return row.epoch
        return None

    @property
    def cold_final_loss(self) -> float:
        return self.cold[-1].val_loss

    @property
    def warm_epochs_to_cold_final(self) -> int | None:
        return self.epochs_to_reach(self.warm, self.cold_final_loss)


def transfer_comparison(
    train_set: Sequence[PoseSample],
    val_set: Sequence[PoseSample],
    pretext_set: Sequence[tuple[np.ndarray, int]],
    model_config: ModelConfig,
    train_config: TrainConfig,
    pretext_config: TrainConfig,
    pretext_holdout: Sequence[tuple[np.ndarray, int]] | None = None,
    model_seed: int = 0,
) -> TransferResult:
    """Cold-start pose training against training warm-started from the pretext trunk."""
    from .training import pretext_accuracy

    cold = build_model(model_config, model_seed)
    _, cold_logs = train(cold, train_set, train_config, val_set=val_set)
    warm = build_model(model_config, model_seed)
    ckpt = pretrain_classifier(warm, pretext_set, pretext_config)
    acc = pretext_accuracy(warm, pretext_holdout) if pretext_holdout else float("nan")
    warm = build_model(model_config, model_seed)
    warm.load_checkpoint(ckpt, names=warm.trunk_names())
    _, warm_logs = train(warm, train_set, train_config, val_set=val_set)
    return TransferResult(cold_logs, warm_logs, acc)


# -- saliency, efficiency ---------------------------------------------------------


@dataclass
class SaliencyResult:
    saliency: np.ndarray
    raw_max: float
    degenerate: bool


def saliency_map(model: Model, sample: PoseSample) -> SaliencyResult:
    """Per-pixel max over colour channels of |d loss / d pixel| on the center crop,
    min-max normalized to [0, 1]."""
    pre = model_preprocessor(model)
    crop = pre.transform([sample.image])
    x = Tensor(crop[0], requires_grad=True)
    (out,) = model.forward(x, train_mode=False)
    loss = pose_loss(out, sample.pose, model.config.beta, model.config.output)
    loss.backward()
    model.zero_grad()
    grad = np.abs(x.grad).max(axis=0)
    lo, hi = grad.min(), grad.max()
    if hi - lo <= 0:
        return SaliencyResult(np.zeros_like(grad), float(hi), True)
    return SaliencyResult((grad - lo) / (hi - lo), float(hi), False)


def crop_mask(model: Model, mask: np.ndarray) -> np.ndarray:
    """Landmark mask carried through the same rescale and center crop as the image."""
    pre = model_preprocessor(model)
    scaled = rescale_shortest_side(mask[None].astype(np.float64), pre.rescale_side)[0]
    h, w = scaled.shape
    c = pre.crop_side
    r, s = (h - c) // 2, (w - c) // 2
    return scaled[r : r + c, s : s + c] >= 0.5


def saliency_contrast(model: Model, sample: PoseSample) -> float:
    """Mean saliency over landmark pixels divided by mean over background pixels."""
    sal = saliency_map(model, sample).saliency
    mask = crop_mask(model, sample.landmark_mask)
    if mask.all() or not mask.any():
        return float("nan")
    bg = sal[~mask].mean()
    return float(sal[mask].mean() / bg) if bg > 0 else float("inf")


@dataclass
class EfficiencyReport:
    parameter_bytes: int
    center_ms: float
    dense_ms: float
    dense_count: int


def efficiency_report(model: Model, image: np.ndarray, repeats: int = 100, dense_count: int = 128) -> EfficiencyReport:
    """Median wall-clock per frame for center-crop and dense inference."""
    pre = model_preprocessor(model, dense_count)
    center = pre.transform([image])
    dense = pre.crops(pre.rescale([image])[0], "dense")
    center_times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        predict_raw(model, center)
        center_times.append(time.perf_counter() - t0)
    dense_times = []
    for _ in range(max(3, repeats // 20)):
        t0 = time.perf_counter()
        raw, _ = predict_raw(model, dense, batch_size=dense_count)
        if raw.shape[1] == 7:
            average_pose_vectors(raw)
        dense_times.append(time.perf_counter() - t0)
    return EfficiencyReport(
        parameter_bytes=model.parameter_bytes(),
        center_ms=1000.0 * float(np.median(center_times)),
        dense_ms=1000.0 * float(np.median(dense_times)),
        dense_count=dense_count,
    )
