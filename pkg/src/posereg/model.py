"""The pose regression network and its loss.

A small convolutional trunk feeds a fully connected localization feature
layer, followed by affine regressor heads that emit a 7-D pose vector
(position, unnormalized quaternion). With several heads, the auxiliary ones
tap earlier trunk stages and are only used while training.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .geometry import Pose, quat_normalize, stack_poses
from .tensor import Checkpoint, Tensor

DESK_TRUNK = (
    "conv:7:2:3:16",
    "relu",
    "maxpool:3:2",
    "conv:3:1:1:32",
    "relu",
    "maxpool:3:2",
    "conv:3:1:1:64",
    "relu",
    "gap",
)

TRUNK_GAIN = math.sqrt(6.0)
OUTPUT_DIMS = {"pose": 7, "position": 3, "orientation": 4}


class ConfigError(ValueError):
    pass


class DegenerateEstimateError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 64
    trunk: tuple[str, ...] = DESK_TRUNK
    feature_dim: int = 256
    num_heads: int = 1
    aux_head_weights: tuple[float, ...] | None = None
    beta: float = 10.0
    position_extent: tuple[float, float, float] = (10.0, 10.0, 2.0)
    # initial value of the regressor biases (position, quaternion); zeros if unset
    output_bias: tuple[float, ...] | None = None
    output: str = "pose"
    position_scale: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "trunk", tuple(self.trunk))
        object.__setattr__(self, "position_extent", tuple(float(e) for e in self.position_extent))
        if self.aux_head_weights is None:
            weights = (0.3, 0.3, 1.0)[-self.num_heads :] if self.num_heads <= 3 else None
            object.__setattr__(self, "aux_head_weights", weights)
        else:
            object.__setattr__(self, "aux_head_weights", tuple(float(w) for w in self.aux_head_weights))
        if self.output_bias is not None:
            object.__setattr__(self, "output_bias", tuple(float(b) for b in self.output_bias))

    @property
    def output_dim(self) -> int:
        return OUTPUT_DIMS[self.output]

    @property
    def head_weights(self) -> tuple[float, ...]:
        return self.aux_head_weights

    def validate(self) -> None:
        if not 1 <= self.num_heads <= 3:
            raise ConfigError(f"num_heads must be 1-3, got {self.num_heads}")
        if len(self.aux_head_weights) != self.num_heads:
            raise ConfigError(f"{len(self.aux_head_weights)} head weights for {self.num_heads} heads")
        if self.aux_head_weights[-1] < max(self.aux_head_weights):
            raise ConfigError("the final head weight must be the largest")
        if self.feature_dim < 8:
            raise ConfigError(f"feature_dim must be at least 8, got {self.feature_dim}")
        if self.beta < 0:
            raise ConfigError(f"beta must be non-negative, got {self.beta}")
        if self.output not in OUTPUT_DIMS:
            raise ConfigError(f"output must be one of {sorted(OUTPUT_DIMS)}, got {self.output!r}")
        if len(self.position_extent) != 3 or min(self.position_extent) <= 0:
            raise ConfigError(f"position_extent must be three positive lengths, got {self.position_extent}")
        if self.output_bias is not None and len(self.output_bias) != self.output_dim:
            raise ConfigError(f"output_bias needs {self.output_dim} values, got {len(self.output_bias)}")
        layer_shapes(self)

    def to_text(self) -> str:
        """Canonical ``key = value`` form; its SHA-256 is the checkpoint digest."""
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                text = "none"
            elif f.name == "trunk":
                text = ",".join(value)
            elif isinstance(value, tuple):
                text = " ".join(repr(float(v)) for v in value)
            elif isinstance(value, float):
                text = repr(value)
            else:
                text = str(value)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_text().encode("utf-8")).digest()

    @classmethod
    def from_text(cls, text: str, **overrides) -> "ModelConfig":
        kwargs = {}
        known = {f.name for f in fields(cls)}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if not sep or key not in known:
                raise ConfigError(f"line {lineno}: unknown or malformed entry {line!r}")
            kwargs[key] = _parse_field(key, raw)
        kwargs.update(overrides)
        return cls(**kwargs)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path, **overrides) -> "ModelConfig":
        return cls.from_text(Path(path).read_text(), **overrides)


def _parse_field(key: str, raw: str):
    if raw.lower() == "none":
        return None
    if key == "trunk":
        return tuple(t.strip() for t in raw.split(",") if t.strip())
    if key in ("input_size", "feature_dim", "num_heads"):
        return int(raw)
    if key in ("beta", "position_scale"):
        return float(raw)
    if key == "output":
        return raw
    return tuple(float(v) for v in raw.replace(",", " ").split())


@dataclass
class Layer:
    kind: str
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    channels: int = 0


def parse_layer(token: str) -> Layer:
    parts = token.split(":")
    kind = parts[0]
    try:
        if kind == "conv" and len(parts) == 5:
            k, s, p, c = (int(v) for v in parts[1:])
            return Layer("conv", k, s, p, c)
        if kind == "maxpool" and len(parts) == 3:
            w, s = (int(v) for v in parts[1:])
            return Layer("maxpool", w, s)
        if kind in ("relu", "gap", "flatten") and len(parts) == 1:
            return Layer(kind)
    except ValueError:
        pass
    raise ConfigError(f"bad layer descriptor {token!r}")


def layer_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Output shape after every trunk layer; raises ConfigError naming the
    first layer that does not fit."""
    c, h, w = 3, config.input_size, config.input_size
    shapes = []
    flat = None
    for i, token in enumerate(config.trunk):
        layer = parse_layer(token)
        name = f"layer {i} ({token})"
        if flat is not None:
            raise ConfigError(f"{name}: nothing may follow the pooling/flatten layer")
        if layer.kind == "conv":
            if layer.kernel < 1 or layer.stride < 1 or layer.padding < 0 or layer.channels < 1:
                raise ConfigError(f"{name}: invalid parameters")
            if layer.kernel > h + 2 * layer.padding or layer.kernel > w + 2 * layer.padding:
                raise ConfigError(f"{name}: kernel {layer.kernel} larger than padded map {h}x{w}")
            c = layer.channels
            h = T.conv_output_size(h, layer.kernel, layer.stride, layer.padding)
            w = T.conv_output_size(w, layer.kernel, layer.stride, layer.padding)
            shapes.append((token, (c, h, w)))
        elif layer.kind == "maxpool":
            if layer.kernel < 1 or layer.stride < 1:
                raise ConfigError(f"{name}: invalid parameters")
            if layer.kernel > h or layer.kernel > w:
                raise ConfigError(f"{name}: window {layer.kernel} larger than map {h}x{w}")
            h = (h - layer.kernel) // layer.stride + 1
            w = (w - layer.kernel) // layer.stride + 1
            shapes.append((token, (c, h, w)))
        elif layer.kind == "relu":
            shapes.append((token, (c, h, w)))
        else:
            flat = c if layer.kind == "gap" else c * h * w
            shapes.append((token, (flat,)))
    if flat is None:
        raise ConfigError("trunk must end with 'gap' or 'flatten'")
    n_relu_taps = sum(1 for t in config.trunk if t == "relu")
    if config.num_heads - 1 > n_relu_taps:
        raise ConfigError(f"{config.num_heads - 1} auxiliary heads need as many relu taps, trunk has {n_relu_taps}")
    return shapes


@dataclass
class PoseOutput:
    """Raw regressor output and the localization feature it came from.

    ``raw`` is ``[7]`` (or ``[B, 7]``): position then unnormalized quaternion.
    """

    raw: Tensor
    feature: Tensor

    def pose(self) -> Pose:
        """Test-time pose: the quaternion part normalized to unit length."""
        vec = self.raw.data
        if vec.shape != (7,):
            raise ValueError(f"pose() needs a single 7-D output, got shape {vec.shape}")
        return Pose(vec[:3], quat_normalize(vec[3:]))


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Tensor]
    mean_image: np.ndarray | None = None
    forward_count: int = field(default=0, compare=False)
    # (weights, bias, preprocessor) of the temporary pretext classifier
    pretext_classifier: tuple | None = field(default=None, compare=False, repr=False)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def trunk_names(self) -> list[str]:
        return [k for k in self.params if not k.startswith("head")]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def parameter_bytes(self) -> int:
        return 8 * self.parameter_count()

    def checkpoint(self, velocities: Sequence[np.ndarray] | None = None, epoch: int = 0) -> Checkpoint:
        names = list(self.params)
        vel = {} if velocities is None else {n: v.copy() for n, v in zip(names, velocities)}
        return Checkpoint(self.config.digest(), self.named_arrays(), vel, epoch)

    def load_checkpoint(self, ckpt: Checkpoint, names: Sequence[str] | None = None) -> None:
        if names is None:
            if ckpt.config_digest != self.config.digest():
                raise ValueError(
                    "checkpoint/config digest mismatch: "
                    f"checkpoint {ckpt.config_digest.hex()} vs config {self.config.digest().hex()}"
                )
            names = list(self.params)
        for name in names:
            if name not in ckpt.params:
                raise ValueError(f"checkpoint lacks parameter {name!r}")
            if ckpt.params[name].shape != self.params[name].shape:
                raise ValueError(f"shape mismatch for {name}: {ckpt.params[name].shape} vs {self.params[name].shape}")
            self.params[name].data[...] = ckpt.params[name]

    def forward(self, image: Tensor | np.ndarray, train_mode: bool = False) -> list[PoseOutput]:
        return forward(self, image, train_mode)

    def describe(self) -> str:
        return describe(self)


def init_position_rows(weights: Tensor, extent, base_scale: float) -> None:
    """Rescale rows 0-2 so that row d has norm ``base_scale * extent[d]``."""
    extent = np.asarray(extent, dtype=np.float64)
    if extent.shape != (3,) or np.any(extent <= 0):
        raise ConfigError(f"position extent must be three positive lengths, got {extent}")
    for d in range(3):
        row = weights.data[d]
        norm = np.linalg.norm(row)
        if norm == 0:
            raise ConfigError(f"position row {d} is all zeros and cannot be rescaled")
        weights.data[d] = row * (base_scale * extent[d] / norm)


def _zeros(n: int) -> Tensor:
    return Tensor(np.zeros(n), requires_grad=True)


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    """Trunk and feature weights are uniform with half-width sqrt(6 / fan_in) and
    zero biases, which keeps ReLU activations from shrinking layer by layer.
    Head weights use half-width 1/sqrt(fan_in), position rows rescaled."""
    config.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    c = 3
    relu_channels = []
    conv_idx = 0
    flat = None
    for token, shape in layer_shapes(config):
        layer = parse_layer(token)
        if layer.kind == "conv":
            fan_in = c * layer.kernel * layer.kernel
            params[f"conv{conv_idx}.weight"] = T.init_uniform(
                rng, (layer.channels, c, layer.kernel, layer.kernel), fan_in, TRUNK_GAIN
            )
            params[f"conv{conv_idx}.bias"] = _zeros(layer.channels)
            conv_idx += 1
            c = layer.channels
        elif layer.kind == "relu":
            relu_channels.append(c)
        elif layer.kind in ("gap", "flatten"):
            flat = shape[0]
    params["feature.weight"] = T.init_uniform(rng, (config.feature_dim, flat), flat, TRUNK_GAIN)
    params["feature.bias"] = _zeros(config.feature_dim)

    out_dim = config.output_dim
    scale = config.position_scale if config.position_scale is not None else 1.0 / math.sqrt(config.feature_dim)
    # auxiliary heads tap the first relu outputs, pooled
    head_inputs = relu_channels[: config.num_heads - 1] + [config.feature_dim]
    for h, fan_in in enumerate(head_inputs):
        w = T.init_uniform(rng, (out_dim, fan_in), fan_in)
        if config.output in ("pose", "position"):
            init_position_rows(w, config.position_extent, scale)
        b = Tensor(np.zeros(out_dim) if config.output_bias is None else config.output_bias, requires_grad=True)
        params[f"head{h}.weight"] = w
        params[f"head{h}.bias"] = b
    return Model(config=config, params=params)


def forward(model: Model, image, train_mode: bool = False) -> list[PoseOutput]:
    """Run the network. In train mode every head is returned, otherwise only the last."""
    config = model.config
    x = image if isinstance(image, Tensor) else Tensor(image)
    expected = (3, config.input_size, config.input_size)
    if x.shape[-3:] != expected or x.ndim not in (3, 4):
        raise ValueError(f"forward: expected input of shape {expected} (optionally batched), got {x.shape}")
    model.forward_count += 1 if x.ndim == 3 else x.shape[0]
    p = model.params
    taps = []
    conv_idx = 0
    for token in config.trunk:
        layer = parse_layer(token)
        if layer.kind == "conv":
            x = T.conv2d(x, p[f"conv{conv_idx}.weight"], p[f"conv{conv_idx}.bias"], layer.stride, layer.padding)
            conv_idx += 1
        elif layer.kind == "maxpool":
            x = T.max_pool2d(x, layer.kernel, layer.stride)
        elif layer.kind == "relu":
            x = T.relu(x)
            taps.append(x)
        elif layer.kind == "gap":
            x = T.global_avg_pool(x)
        else:
            x = T.flatten(x)
    feature = T.relu(T.linear(x, p["feature.weight"], p["feature.bias"]))
    last = config.num_heads - 1
    final = PoseOutput(T.linear(feature, p[f"head{last}.weight"], p[f"head{last}.bias"]), feature)
    if not train_mode:
        return [final]
    outputs = []
    for h in range(last):
        pooled = T.global_avg_pool(taps[h])
        outputs.append(PoseOutput(T.linear(pooled, p[f"head{h}.weight"], p[f"head{h}.bias"]), pooled))
    outputs.append(final)
    return outputs


def _target_arrays(target) -> tuple[np.ndarray, np.ndarray, bool]:
    if isinstance(target, Pose):
        return target.position, target.orientation, True
    positions, quats = stack_poses(target)
    return positions, quats, False


def pose_loss(output: PoseOutput, target, beta: float, kind: str = "pose") -> Tensor:
    """``||x_hat - x|| + beta * ||q_hat - q||`` with the raw (unnormalized) q_hat.

    The target quaternion is flipped onto q_hat's hemisphere first, so a label
    stored as -q costs the same as q. ``target`` is a Pose, or a sequence of
    poses for a batched output, in which case the mean over the batch is returned.
    ``kind`` selects the position-only or orientation-only variants.
    """
    positions, quats, single = _target_arrays(target)
    raw = output.raw
    if single != (raw.ndim == 1):
        raise ValueError(f"target count does not match output shape {raw.shape}")
    n_out = raw.shape[-1]
    if n_out != OUTPUT_DIMS[kind]:
        raise ValueError(f"{kind} loss needs {OUTPUT_DIMS[kind]} outputs, got {n_out}")
    terms = []
    if kind in ("pose", "position"):
        terms.append(T.l2_norm_diff(raw[..., 0:3], positions))
    if kind in ("pose", "orientation"):
        q_hat = raw[..., n_out - 4 : n_out]
        dots = np.sum(q_hat.data * quats, axis=-1)
        aligned = quats * np.where(dots < 0, -1.0, 1.0)[..., None]
        q_term = T.l2_norm_diff(q_hat, aligned)
        terms.append(q_term * beta if kind == "pose" else q_term)
    loss = terms[0] if len(terms) == 1 else terms[0] + terms[1]
    return loss if single else loss.mean()


def total_loss(outputs: Sequence[PoseOutput], target, config: ModelConfig) -> Tensor:
    """Head-weighted sum of pose losses."""
    weights = config.head_weights
    if len(outputs) != len(weights):
        raise ValueError(f"{len(outputs)} outputs for {len(weights)} head weights")
    if len(outputs) == 1:
        return pose_loss(outputs[0], target, config.beta, config.output)
    total = None
    for w, out in zip(weights, outputs):
        if w == 0:
            continue
        term = pose_loss(out, target, config.beta, config.output) * w
        total = term if total is None else total + term
    return total


def estimate_beta(short_run_errors, beta_min: float = 1.0, beta_max: float = 1e4) -> float:
    """Position error over quaternion-difference error, clamped to [beta_min, beta_max]."""
    pos_err, quat_err = (float(v) for v in short_run_errors)
    if quat_err <= 0:
        raise DegenerateEstimateError("orientation error is zero; the ratio is undefined")
    if pos_err <= 0:
        raise DegenerateEstimateError("position error must be positive")
    return float(min(max(pos_err / quat_err, beta_min), beta_max))


def describe(model: Model) -> str:
    config = model.config
    lines = [f"input            {(3, config.input_size, config.input_size)}"]
    for token, shape in layer_shapes(config):
        lines.append(f"{token:<16} {shape}")
    lines.append(f"feature          ({config.feature_dim},)")
    for h in range(config.num_heads):
        lines.append(f"head{h:<12d} ({config.output_dim},)")
    lines.append("")
    for name, p in model.params.items():
        lines.append(f"{name:<16} {p.shape}")
    lines.append(f"parameters       {model.parameter_count()}")
    lines.append(f"bytes            {model.parameter_bytes()}")
    return "\n".join(lines)


def predict_raw(model: Model, crops: np.ndarray, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Test-mode outputs for preprocessed crops ``[N, 3, S, S]``.

    Returns ``(raw [N, out_dim], feature [N, feature_dim])``.
    """
    raws, feats = [], []
    for start in range(0, len(crops), batch_size):
        (out,) = forward(model, Tensor(crops[start : start + batch_size]), train_mode=False)
        raws.append(out.raw.data)
        feats.append(out.feature.data)
    if not raws:
        return np.zeros((0, model.config.output_dim)), np.zeros((0, model.config.feature_dim))
    return np.concatenate(raws), np.concatenate(feats)
