import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from posereg.geometry import Pose, quat_normalize, random_unit_quaternions
from posereg.model import (
    DESK_TRUNK,
    ConfigError,
    DegenerateEstimateError,
    ModelConfig,
    PoseOutput,
    build_model,
    describe,
    estimate_beta,
    init_position_rows,
    layer_shapes,
    pose_loss,
    predict_raw,
    total_loss,
)
from posereg.tensor import Tensor

from oracles import central_difference, relative_error

TINY_TRUNK = ("conv:3:1:1:2", "relu", "maxpool:2:2", "conv:3:1:1:3", "relu", "gap")


def tiny_config(**kw):
    return ModelConfig(**{"input_size": 8, "trunk": TINY_TRUNK, "feature_dim": 8, **kw})


def test_desk_trunk_shapes():
    shapes = dict(layer_shapes(ModelConfig()))
    assert shapes["conv:7:2:3:16"] == (16, 32, 32)
    assert shapes["gap"] == (64,)


def test_bad_chain_names_the_layer():
    bad = ModelConfig(input_size=8, trunk=("conv:3:1:0:4", "maxpool:3:3", "maxpool:3:3", "gap"))
    with pytest.raises(ConfigError, match="layer 2"):
        bad.validate()
    with pytest.raises(ConfigError, match="end with"):
        ModelConfig(trunk=("conv:3:1:1:4", "relu")).validate()
    with pytest.raises(ConfigError, match="descriptor"):
        ModelConfig(trunk=("conv:3:1", "gap")).validate()


def test_config_validation():
    with pytest.raises(ConfigError):
        tiny_config(num_heads=4).validate()
    with pytest.raises(ConfigError):
        tiny_config(num_heads=2, aux_head_weights=(1.0, 0.3)).validate()
    assert tiny_config(num_heads=3).head_weights == (0.3, 0.3, 1.0)
    assert tiny_config().head_weights == (1.0,)


def test_config_text_round_trip_and_digest():
    cfg = tiny_config(beta=123.5, output_bias=(1, 2, 3, 1, 0, 0, 0))
    back = ModelConfig.from_text(cfg.to_text())
    assert back == cfg and back.digest() == cfg.digest()
    assert tiny_config(beta=1.0).digest() != cfg.digest()
    with pytest.raises(ConfigError):
        ModelConfig.from_text("nonsense = 3\n")


def test_build_is_deterministic_per_seed():
    a, b, c = build_model(tiny_config(), 1), build_model(tiny_config(), 1), build_model(tiny_config(), 2)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name].data, b.params[name].data)
    assert not np.array_equal(a.params["conv0.weight"].data, c.params["conv0.weight"].data)


def test_position_rows_scale_with_extent():
    cfg = tiny_config(position_extent=(10.0, 4.0, 2.0))
    w = build_model(cfg, 0).params["head0.weight"].data
    base = 1.0 / math.sqrt(cfg.feature_dim)
    np.testing.assert_allclose(np.linalg.norm(w[:3], axis=1), base * np.array([10.0, 4.0, 2.0]))
    # orientation rows keep the default bound
    assert np.max(np.abs(w[3:])) <= 1.0 / math.sqrt(cfg.feature_dim)


def test_init_position_rows_rejects_zero_rows():
    with pytest.raises(ConfigError):
        init_position_rows(Tensor(np.zeros((7, 4))), (1, 1, 1), 1.0)


def test_forward_shapes_and_modes():
    model = build_model(tiny_config(num_heads=3), 0)
    x = np.random.default_rng(0).normal(size=(2, 3, 8, 8))
    outs = model.forward(x, train_mode=True)
    assert len(outs) == 3 and all(o.raw.shape == (2, 7) for o in outs)
    (test_out,) = model.forward(x[0])
    assert test_out.raw.shape == (7,) and test_out.feature.shape == (8,)
    np.testing.assert_allclose(test_out.raw.data, outs[-1].raw.data[0])
    assert model.forward_count == 3
    with pytest.raises(ValueError, match="expected input"):
        model.forward(np.zeros((3, 9, 9)))


def test_test_time_pose_is_normalized():
    out = PoseOutput(Tensor([1.0, 2.0, 3.0, 0.0, 2.0, 0.0, 0.0]), Tensor([0.0]))
    pose = out.pose()
    np.testing.assert_array_equal(pose.orientation, [0.0, 1.0, 0.0, 0.0])


def test_pose_loss_value():
    out = PoseOutput(Tensor([1.0, 2.0, 2.0, 2.0, 0.0, 0.0, 0.0]), Tensor([0.0]))
    target = Pose([0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0])
    # position term 3, unnormalized quaternion term |(2,0,0,0) - (1,0,0,0)| = 1
    assert pose_loss(out, target, beta=5.0).item() == pytest.approx(3.0 + 5.0)


@given(st.integers(0, 1000))
def test_pose_loss_is_blind_to_label_sign(seed):
    rng = np.random.default_rng(seed)
    raw = rng.normal(size=7)
    q = random_unit_quaternions(rng, 1)[0]
    a = pose_loss(PoseOutput(Tensor(raw), Tensor([0.0])), Pose(raw[:3] + 1, q), 7.0).item()
    # Pose canonicalizes, so compare against an explicitly flipped target term
    flipped = np.concatenate([raw[:3] + 1, -q])
    d_pos = np.linalg.norm(raw[:3] - flipped[:3])
    d_q = min(np.linalg.norm(raw[3:] - q), np.linalg.norm(raw[3:] + q))
    assert a == pytest.approx(d_pos + 7.0 * d_q)


def test_pose_loss_batched_is_mean():
    rng = np.random.default_rng(4)
    raw = rng.normal(size=(3, 7))
    poses = [Pose(rng.normal(size=3), q) for q in random_unit_quaternions(rng, 3)]
    batched = pose_loss(PoseOutput(Tensor(raw), Tensor([0.0])), poses, 2.0).item()
    singles = [pose_loss(PoseOutput(Tensor(r), Tensor([0.0])), p, 2.0).item() for r, p in zip(raw, poses)]
    assert batched == pytest.approx(np.mean(singles))


def test_separate_losses():
    pos = PoseOutput(Tensor([1.0, 0.0, 0.0]), Tensor([0.0]))
    ori = PoseOutput(Tensor([0.0, 1.0, 0.0, 0.0]), Tensor([0.0]))
    target = Pose([0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0])
    assert pose_loss(pos, target, 100.0, "position").item() == 1.0
    assert pose_loss(ori, target, 100.0, "orientation").item() == pytest.approx(math.sqrt(2))
    with pytest.raises(ValueError):
        pose_loss(pos, target, 1.0, "pose")


def _params_fd(model, loss_fn, names):
    arrays = [model.params[n].data for n in names]
    return central_difference(lambda: loss_fn().item(), arrays)


@pytest.mark.parametrize("seed", range(20))
def test_full_loss_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    model = build_model(tiny_config(num_heads=2, aux_head_weights=(0.3, 1.0), beta=3.0), seed)
    for p in model.params.values():
        p.data += 0.05 * rng.normal(size=p.shape)  # move biases off zero
    x = rng.normal(size=(2, 3, 8, 8))
    targets = [Pose(rng.normal(size=3), q) for q in random_unit_quaternions(rng, 2)]

    def loss():
        return total_loss(model.forward(x, train_mode=True), targets, model.config)

    model.zero_grad()
    loss().backward()
    names = list(model.params)
    analytic = [model.params[n].grad.copy() for n in names]
    numeric = _params_fd(model, loss, names)
    for n, a, g in zip(names, analytic, numeric):
        assert relative_error(a, g) < 1e-4, n


def test_total_loss_weights_heads():
    cfg = tiny_config(num_heads=2, aux_head_weights=(0.5, 1.0))
    target = Pose([0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0])
    a = PoseOutput(Tensor([1.0, 0, 0, 1, 0, 0, 0]), Tensor([0.0]))
    b = PoseOutput(Tensor([2.0, 0, 0, 1, 0, 0, 0]), Tensor([0.0]))
    assert total_loss([a, b], target, cfg).item() == pytest.approx(0.5 * 1.0 + 2.0)


def test_estimate_beta():
    assert estimate_beta((2.0, 0.01)) == pytest.approx(200.0)
    assert estimate_beta((2.0, 1e-9)) == 1e4
    assert estimate_beta((1e-6, 1.0)) == 1.0
    with pytest.raises(DegenerateEstimateError):
        estimate_beta((1.0, 0.0))


def test_predict_raw_matches_forward():
    model = build_model(tiny_config(), 0)
    crops = np.random.default_rng(1).normal(size=(5, 3, 8, 8))
    raw, feat = predict_raw(model, crops, batch_size=2)
    assert raw.shape == (5, 7) and feat.shape == (5, 8)
    (out,) = model.forward(crops[3])
    np.testing.assert_allclose(raw[3], out.raw.data, atol=1e-13)


def test_checkpoint_refuses_other_configs():
    model = build_model(tiny_config(), 0)
    other = build_model(tiny_config(beta=99.0), 0)
    with pytest.raises(ValueError, match="digest mismatch.*vs"):
        other.load_checkpoint(model.checkpoint())
    other.load_checkpoint(model.checkpoint(), names=other.trunk_names())


def test_describe_lists_parameters():
    text = describe(build_model(ModelConfig(), 0))
    assert "conv:7:2:3:16" in text and "parameters" in text


def test_desk_defaults():
    cfg = ModelConfig()
    assert cfg.trunk == DESK_TRUNK and cfg.input_size == 64 and cfg.feature_dim == 256
