import csv
import math

import numpy as np
import pytest
from scipy.spatial.distance import cdist

from posereg.datagen import generate_scene, render_poses, sample_trajectory
from posereg.evaluation import (
    ExperimentReport,
    FeatureIndex,
    TransferResult,
    beta_sweep,
    build_feature_index,
    crop_mask,
    efficiency_report,
    evaluate,
    joint_vs_separate,
    model_preprocessor,
    nn_baseline,
    read_summary,
    saliency_contrast,
    saliency_map,
    scalarize,
    spacing_sweep,
    write_runs,
)
from posereg.geometry import Pose, quat_normalize
from posereg.model import ModelConfig, build_model
from posereg.training import TrainConfig, TrainLogRow, train

from oracles import trace_angle_deg

TINY_TRUNK = ("conv:3:2:1:4", "relu", "maxpool:2:2", "conv:3:1:1:8", "relu", "gap")


def tiny(**kw):
    return ModelConfig(**{"input_size": 16, "trunk": TINY_TRUNK, "feature_dim": 16, **kw})


def quick(**kw):
    base = dict(batch_size=4, epochs=2, base_lr=1e-3, rescale_side=18, crop_side=16, decay_period=10)
    return TrainConfig(**{**base, **kw})


@pytest.fixture(scope="module")
def scene():
    return generate_scene(0, resolution=16)


@pytest.fixture(scope="module")
def train_set(scene):
    return render_poses(scene, sample_trajectory(scene, 0.5, 24, 1), "train")


@pytest.fixture(scope="module")
def test_set(scene):
    return render_poses(scene, sample_trajectory(scene, 0.5, 6, 2), "test")


@pytest.fixture(scope="module")
def model(train_set):
    m = build_model(tiny(), 0)
    train(m, train_set, quick())
    return m


# -- reports -----------------------------------------------------------------------


def test_report_statistics_match_numpy():
    rng = np.random.default_rng(0)
    pos, ori = rng.exponential(size=31), rng.exponential(size=31) * 10
    ids = [f"f{i:03d}" for i in rng.permutation(31)]
    rep = ExperimentReport.from_errors(ids, pos, ori)
    assert rep.median_position_m == np.median(pos)
    assert rep.median_orientation_deg == np.median(ori)
    assert rep.percentiles["position_m"][90] == np.percentile(pos, 90)
    assert rep.percentiles["orientation_deg"][100] == ori.max()
    assert [r.frame_id for r in rep.records] == sorted(ids)


def test_cumulative_histogram():
    rep = ExperimentReport.from_errors(["a", "b", "c", "d"], [3.0, 1.0, np.nan, 2.0], [1.0, 1.0, 1.0, 1.0])
    values, frac = rep.histogram("position_m")
    np.testing.assert_array_equal(values, [1.0, 2.0, 3.0])
    np.testing.assert_allclose(frac, [1 / 3, 2 / 3, 1.0])


def test_report_files_round_trip(tmp_path):
    rep = ExperimentReport.from_errors(["b", "a"], [0.5, 1.5], [2.0, 4.0], forwards=2, inference_ms=777.125, model_bytes=10)
    rep.write(tmp_path)
    summary = read_summary(tmp_path / "summary.csv")
    assert summary["median"] == (1.0, 3.0)
    assert summary["frames"] == (2.0, 2.0) and summary["forwards"] == (2.0, 2.0)
    rows = list(csv.reader(open(tmp_path / "per_frame.csv")))
    assert rows[1][0] == "a" and float(rows[1][1]) == 1.5
    # wall-clock numbers stay out of the reproducible tables
    assert "777.125" not in (tmp_path / "summary.csv").read_text()
    assert "777.125" in (tmp_path / "timing.csv").read_text()
    assert (tmp_path / "cumulative_orientation_deg.csv").exists()


# -- evaluation against per-frame oracles ----------------------------------------


def test_center_evaluation_matches_per_frame_forward(model, test_set):
    rep = evaluate(model, test_set)
    pre = model_preprocessor(model)
    by_id = {r.frame_id: r for r in rep.records}
    for s in test_set:
        (out,) = model.forward(pre.transform([s.image])[0])
        raw = out.raw.data
        want_pos = np.linalg.norm(raw[:3] - s.pose.position)
        want_ori = trace_angle_deg(quat_normalize(raw[3:]), s.pose.orientation)
        assert by_id[s.frame_id].position_m == pytest.approx(want_pos, abs=1e-12)
        assert by_id[s.frame_id].orientation_deg == pytest.approx(want_ori, abs=1e-5)
    assert rep.forwards == len(test_set)


def test_dense_mode_forward_count(model, test_set):
    rep = evaluate(model, test_set[:2], mode="dense")
    assert rep.forwards == 2 * 128
    rep = evaluate(model, test_set[:2], mode="dense", dense_count=8)
    assert rep.forwards == 16


def test_dense_equals_center_for_an_image_blind_model(train_set, test_set):
    m = build_model(tiny(), 0)
    train(m, train_set, quick(epochs=0))
    m.params["head0.weight"].data[:] = 0.0
    center = evaluate(m, test_set)
    dense = evaluate(m, test_set, mode="dense", dense_count=16)
    np.testing.assert_allclose(dense.position_errors, center.position_errors, atol=1e-12)
    np.testing.assert_allclose(dense.orientation_errors, center.orientation_errors, atol=1e-6)


def test_evaluate_rejects_bad_input(model, test_set):
    with pytest.raises(ValueError):
        evaluate(model, [])
    with pytest.raises(ValueError, match="mode"):
        evaluate(model, test_set, mode="sideways")
    with pytest.raises(ValueError, match="mean image"):
        evaluate(build_model(tiny(), 0), test_set)


# -- nearest neighbour -------------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_nearest_matches_cdist(seed):
    rng = np.random.default_rng(seed)
    feats, queries = rng.normal(size=(40, 6)), rng.normal(size=(15, 6))
    index = FeatureIndex([str(i) for i in range(40)], feats, [Pose([0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0])] * 40)
    np.testing.assert_array_equal(index.nearest(queries), np.argmin(cdist(queries, feats), axis=1))


def test_nearest_breaks_ties_by_first_index():
    feats = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    index = FeatureIndex(["a", "b", "c"], feats, [Pose([0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0])] * 3)
    assert index.nearest(np.array([[1.0, 0.0]]))[0] == 0
    with pytest.raises(ValueError):
        FeatureIndex([], np.zeros((0, 2)), []).nearest(np.zeros((1, 2)))


def test_nn_on_the_training_images_recovers_their_poses(model, train_set):
    index = build_feature_index(model, train_set)
    rep = nn_baseline(index, model, train_set)
    assert np.all(rep.position_errors == 0.0)
    assert np.all(rep.orientation_errors < 1e-5)


# -- experiments -------------------------------------------------------------------


def test_scalarize():
    assert scalarize(5.0, 90.0, 10.0) == 1.0


def test_beta_sweep_validation(scene, train_set, test_set):
    with pytest.raises(ValueError):
        beta_sweep(scene, train_set, test_set, [1.0, 10.0], tiny(), quick())
    with pytest.raises(ValueError):
        beta_sweep(scene, train_set, test_set, [1.0, 5.0, 10.0], tiny(), quick())


def test_beta_sweep_skips_diverged_runs(scene, train_set, test_set, tmp_path):
    cfg = quick(epochs=1, base_lr=1e-2, divergence_threshold=500.0)
    sweep = beta_sweep(scene, train_set, test_set, [1.0, 10.0, 1e5], tiny(), cfg)
    assert [r.diverged for r in sweep.runs] == [False, False, True]
    assert sweep.selected_beta in (1.0, 10.0)
    sweep.write(tmp_path / "beta.csv")
    rows = list(csv.DictReader(open(tmp_path / "beta.csv")))
    assert [int(r["selected"]) for r in rows].count(1) == 1
    assert rows[2]["diverged"] == "1"


def test_spacing_sweep_subsamples(train_set, test_set):
    runs = spacing_sweep(train_set, 0.5, [0.5, 1.0, 2.0], test_set, tiny(), quick(epochs=1))
    assert [r.n_train for r in runs] == [24, 12, 6]
    with pytest.raises(ValueError, match="increasing"):
        spacing_sweep(train_set, 0.5, [1.0, 0.5], test_set, tiny(), quick())
    with pytest.raises(ValueError, match="batch size"):
        spacing_sweep(train_set, 0.5, [4.0], test_set, tiny(), quick())


def test_joint_vs_separate(train_set, test_set, tmp_path):
    runs = joint_vs_separate(train_set, test_set, tiny(), quick(epochs=1))
    assert [r.label for r in runs] == ["pose", "position", "orientation"]
    assert math.isnan(runs[1].median_orientation_deg) and math.isnan(runs[2].median_position_m)
    assert math.isfinite(runs[0].median_position_m) and math.isfinite(runs[2].median_orientation_deg)
    write_runs(tmp_path / "heads.csv", "output", runs)
    assert open(tmp_path / "heads.csv").read().splitlines()[2].startswith("position,")


def _row(epoch, val):
    return TrainLogRow(epoch, 0.0, val, 0.0, 0.0, 0.0, 0.0)


def test_transfer_epochs_to_reach():
    result = TransferResult([_row(1, 3.0), _row(2, 2.0)], [_row(1, 2.5), _row(2, 1.9)], 0.5)
    assert result.cold_final_loss == 2.0
    assert result.warm_epochs_to_cold_final == 2
    never = TransferResult([_row(1, 1.0)], [_row(1, 2.0)], 0.5)
    assert never.warm_epochs_to_cold_final is None


# -- saliency and efficiency -------------------------------------------------------


def test_saliency_is_normalized_and_matches_the_crop(model, test_set):
    res = saliency_map(model, test_set[0])
    assert res.saliency.shape == (16, 16)
    assert res.saliency.min() == 0.0 and res.saliency.max() == 1.0
    assert not res.degenerate and res.raw_max > 0
    mask = crop_mask(model, test_set[0].landmark_mask)
    assert mask.shape == (16, 16) and mask.dtype == bool
    contrast = saliency_contrast(model, test_set[0])
    assert math.isnan(contrast) or contrast > 0


def test_saliency_of_an_image_blind_model_is_degenerate(train_set, test_set):
    m = build_model(tiny(), 0)
    train(m, train_set, quick(epochs=0))
    m.params["head0.weight"].data[:] = 0.0
    res = saliency_map(m, test_set[0])
    assert res.degenerate and np.all(res.saliency == 0.0)


def test_efficiency_report(model, test_set):
    rep = efficiency_report(model, test_set[0].image, repeats=4, dense_count=8)
    assert rep.parameter_bytes == 8 * sum(p.size for p in model.params.values())
    assert rep.center_ms > 0 and rep.dense_ms > 0 and rep.dense_count == 8
