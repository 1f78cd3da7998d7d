"""Minimal reverse-mode automatic differentiation on numpy arrays.

Every op works in float64. Image-shaped ops accept either a single
``[C, H, W]`` tensor or a batch ``[N, C, H, W]``; vector ops accept ``[N]``
or ``[B, N]``. The batch forms exist only so training is not dominated by
Python overhead; they compute exactly what a loop over samples would.
"""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class Tensor:
    """A float64 array with an accumulated gradient and a backward rule."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = ""):
        self.data = np.array(data, dtype=DTYPE)
        self.grad = np.zeros_like(self.data)
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # -- small arithmetic surface used by losses ------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return multiply(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def mean(self) -> "Tensor":
        return scale(tensor_sum(self), 1.0 / self.size)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = np.zeros_like(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = tuple(parents)
    out._backward = None
    out.op = op
    return out


def backward(objective: Tensor) -> None:
    """Accumulate d(objective)/d(t) into ``t.grad`` for every reachable ``t``.

    The seed gradient is 1. Gradients add onto whatever is already stored,
    so call ``zero_grad`` between independent objectives.
    """
    if objective.data.size != 1:
        raise ValueError(f"backward() needs a scalar objective, got shape {objective.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(objective, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    objective.grad += 1.0
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


# -- elementwise / structural ops ---------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = _result(a.data + b.data, (a, b), "add")

    def _backward(grad):
        if a.requires_grad:
            a.grad += grad
        if b.requires_grad:
            b.grad += grad

    out._backward = _backward
    return out


def multiply(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"multiply: shape mismatch {a.shape} vs {b.shape}")
    out = _result(a.data * b.data, (a, b), "mul")

    def _backward(grad):
        if a.requires_grad:
            a.grad += grad * b.data
        if b.requires_grad:
            b.grad += grad * a.data

    out._backward = _backward
    return out


def scale(a: Tensor, factor) -> Tensor:
    """Multiply by a constant (scalar or array broadcastable to ``a``)."""
    factor_arr = np.asarray(factor, dtype=DTYPE)
    out = _result(a.data * factor_arr, (a,), "scale")

    def _backward(grad):
        if a.requires_grad:
            a.grad += grad * factor_arr

    out._backward = _backward
    return out


def tensor_sum(a: Tensor) -> Tensor:
    out = _result(np.array(a.data.sum()), (a,), "sum")

    def _backward(grad):
        if a.requires_grad:
            a.grad += grad

    out._backward = _backward
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = _result(a.data.reshape(shape), (a,), "reshape")

    def _backward(grad):
        if a.requires_grad:
            a.grad += grad.reshape(a.shape)

    out._backward = _backward
    return out


def getitem(a: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing."""
    out = _result(np.array(a.data[index]), (a,), "getitem")

    def _backward(grad):
        if a.requires_grad:
            a.grad[index] += grad

    out._backward = _backward
    return out


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at exactly 0 is 0."""
    mask = x.data > 0
    out = _result(np.where(mask, x.data, 0.0), (x,), "relu")

    def _backward(grad):
        if x.requires_grad:
            x.grad += grad * mask

    out._backward = _backward
    return out


# -- layers -------------------------------------------------------------------


def _batched(x: Tensor, ndim: int, name: str) -> tuple[np.ndarray, bool]:
    if x.ndim == ndim:
        return x.data[None], True
    if x.ndim == ndim + 1:
        return x.data, False
    raise ValueError(f"{name}: expected {ndim} or {ndim + 1} dims, got shape {x.shape}")


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation.

    ``x`` is ``[C_in, H, W]`` (or batched), ``kernels`` is ``[C_out, C_in, kH, kW]``
    and ``bias`` is ``[C_out]``.
    """
    if stride < 1:
        raise ValueError(f"conv2d: stride must be positive, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d: padding must be non-negative, got {padding}")
    xb, single = _batched(x, 3, "conv2d")
    if kernels.ndim != 4:
        raise ValueError(f"conv2d: kernels must be 4-D, got shape {kernels.shape}")
    n, c_in, h, w = xb.shape
    c_out, k_in, kh, kw = kernels.shape
    if k_in != c_in:
        raise ValueError(f"conv2d: input channels {c_in} != kernel channels {k_in}")
    if bias.shape != (c_out,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    if kh > h + 2 * padding:
        raise ValueError(f"conv2d: kernel height {kh} exceeds padded input height {h + 2 * padding}")
    if kw > w + 2 * padding:
        raise ValueError(f"conv2d: kernel width {kw} exceeds padded input width {w + 2 * padding}")
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)

    xp = np.pad(xb, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xb
    # cols[n, c, i, j, oh, ow]
    cols = np.empty((n, c_in, kh, kw, oh, ow), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    cols2 = cols.reshape(n, c_in * kh * kw, oh * ow)
    wmat = kernels.data.reshape(c_out, -1)
    outb = np.matmul(wmat, cols2) + bias.data[None, :, None]
    outb = outb.reshape(n, c_out, oh, ow)
    out = _result(outb[0] if single else outb, (x, kernels, bias), "conv2d")

    def _backward(grad):
        g = grad[None] if single else grad
        g2 = g.reshape(n, c_out, oh * ow)
        if bias.requires_grad:
            bias.grad += g2.sum(axis=(0, 2))
        if kernels.requires_grad:
            gw = np.einsum("nop,nkp->ok", g2, cols2, optimize=True)
            kernels.grad += gw.reshape(kernels.shape)
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g2).reshape(n, c_in, kh, kw, oh, ow)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[:, :, i, j]
            dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
            x.grad += dx[0] if single else dx

    out._backward = _backward
    return out


def max_pool2d(x: Tensor, window: int, stride: int) -> Tensor:
    """Per-window maximum; ties send the gradient to the first row-major maximum."""
    if window < 1:
        raise ValueError(f"max_pool2d: window must be positive, got {window}")
    if stride < 1:
        raise ValueError(f"max_pool2d: stride must be positive, got {stride}")
    xb, single = _batched(x, 3, "max_pool2d")
    n, c, h, w = xb.shape
    if window > h or window > w:
        raise ValueError(f"max_pool2d: window {window} larger than input {h}x{w}")
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    best = None
    arg = np.zeros((n, c, oh, ow), dtype=np.intp)
    k = 0
    for i in range(window):
        for j in range(window):
            view = xb[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
            if best is None:
                best = view.copy()
            else:
                better = view > best
                best[better] = view[better]
                arg[better] = k
            k += 1
    out = _result(best[0] if single else best, (x,), "max_pool2d")

    def _backward(grad):
        if not x.requires_grad:
            return
        g = grad[None] if single else grad
        dx = np.zeros_like(xb)
        kk = 0
        for i in range(window):
            for j in range(window):
                dx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += np.where(arg == kk, g, 0.0)
                kk += 1
        x.grad += dx[0] if single else dx

    out._backward = _backward
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: ``[C, H, W] -> [C]``."""
    xb, single = _batched(x, 3, "global_avg_pool")
    n, c, h, w = xb.shape
    pooled = xb.mean(axis=(2, 3))
    out = _result(pooled[0] if single else pooled, (x,), "global_avg_pool")

    def _backward(grad):
        if x.requires_grad:
            g = grad[None] if single else grad
            dx = np.broadcast_to(g[:, :, None, None] / (h * w), xb.shape)
            x.grad += dx[0] if single else dx

    out._backward = _backward
    return out


def flatten(x: Tensor) -> Tensor:
    """``[C, H, W] -> [C*H*W]``, keeping a leading batch axis if present."""
    if x.ndim == 3:
        return reshape(x, (x.size,))
    if x.ndim == 4:
        return reshape(x, (x.shape[0], -1))
    raise ValueError(f"flatten: expected 3 or 4 dims, got shape {x.shape}")


def linear(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``W @ x + b`` for ``x`` of shape ``[N]`` or ``[B, N]``."""
    if weights.ndim != 2:
        raise ValueError(f"linear: weights must be 2-D, got shape {weights.shape}")
    m, nin = weights.shape
    if x.ndim not in (1, 2) or x.shape[-1] != nin:
        raise ValueError(f"linear: input shape {x.shape} does not match weight columns {nin}")
    if bias.shape != (m,):
        raise ValueError(f"linear: bias shape {bias.shape} != ({m},)")
    out = _result(x.data @ weights.data.T + bias.data, (x, weights, bias), "linear")

    def _backward(grad):
        g = grad
        if bias.requires_grad:
            bias.grad += g if g.ndim == 1 else g.sum(axis=0)
        if weights.requires_grad:
            weights.grad += np.outer(g, x.data) if g.ndim == 1 else g.T @ x.data
        if x.requires_grad:
            x.grad += g @ weights.data

    out._backward = _backward
    return out


def l2_norm_diff(a: Tensor, b) -> Tensor:
    """Euclidean norm of ``a - b`` along the last axis.

    For ``[N]`` inputs the result is a scalar; for ``[B, N]`` it is ``[B]``.
    At ``a == b`` the gradient is taken as 0.
    """
    b = _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"l2_norm_diff: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    norm = np.sqrt(np.sum(diff * diff, axis=-1))
    out = _result(norm, (a, b), "l2_norm_diff")

    def _backward(grad):
        safe = np.where(norm > 0, norm, 1.0)
        unit = np.where((norm > 0)[..., None], diff / safe[..., None], 0.0)
        g = grad[..., None] * unit
        if a.requires_grad:
            a.grad += g
        if b.requires_grad:
            b.grad -= g

    out._backward = _backward
    return out


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    z = logits.data if logits.ndim == 2 else logits.data[None]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    if labels.shape[0] != z.shape[0]:
        raise ValueError(f"softmax_cross_entropy: {labels.shape[0]} labels for {z.shape[0]} rows")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logsum[:, None]
    rows = np.arange(z.shape[0])
    out = _result(np.array(-logp[rows, labels].mean()), (logits,), "softmax_xent")

    def _backward(grad):
        if logits.requires_grad:
            p = np.exp(logp)
            p[rows, labels] -= 1.0
            g = p * (grad / z.shape[0])
            logits.grad += g if logits.ndim == 2 else g[0]

    out._backward = _backward
    return out


# -- parameters, optimizer ----------------------------------------------------


def init_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, gain: float = 1.0) -> Tensor:
    """Zero-mean uniform init with half-width gain/sqrt(fan_in)."""
    bound = gain / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


@dataclass
class OptimizerState:
    """SGD with momentum and a step-decay learning rate."""

    velocities: list[np.ndarray]
    momentum: float = 0.9
    base_lr: float = 1e-5
    decay_factor: float = 0.1
    decay_period_epochs: int = 80

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ValueError(f"decay_factor must lie in (0, 1], got {self.decay_factor}")
        if self.decay_period_epochs < 1:
            raise ValueError(f"decay_period_epochs must be positive, got {self.decay_period_epochs}")

    @classmethod
    def for_params(cls, params: Iterable[Tensor], **kwargs) -> "OptimizerState":
        return cls(velocities=[np.zeros_like(p.data) for p in params], **kwargs)


def lr_schedule(state: OptimizerState, epoch: int) -> float:
    """``base_lr * decay_factor ** (epoch // decay_period_epochs)``.

    The product is formed in decimal arithmetic on the shortest repr of each
    rate, so 1e-5 decayed once by 0.1 is exactly 1e-6.
    """
    steps = epoch // state.decay_period_epochs
    if steps == 0:
        return state.base_lr
    value = Decimal(repr(state.base_lr)) * Decimal(repr(state.decay_factor)) ** steps
    return float(value)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale all gradients together so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if norm > max_norm:
        for p in params:
            p.grad *= max_norm / norm
    return norm


def sgd_momentum_step(params: Sequence[Tensor], state: OptimizerState, epoch: int) -> None:
    if len(params) != len(state.velocities):
        raise RuntimeError(
            f"optimizer has {len(state.velocities)} velocity buffers for {len(params)} parameters"
        )
    lr = lr_schedule(state, epoch)
    for p, v in zip(params, state.velocities):
        if v.shape != p.data.shape:
            raise RuntimeError(f"velocity buffer shape {v.shape} does not match parameter {p.data.shape}")
        v *= state.momentum
        v -= lr * p.grad
        p.data += v
        p.zero_grad()


# -- checkpoint container -----------------------------------------------------

CHECKPOINT_MAGIC = b"POSEREG\x00"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    """Named parameter arrays plus their momentum buffers.

    Byte layout (all integers little-endian)::

        8 bytes   magic  b"POSEREG\\0"
        u32       format version (1)
        32 bytes  SHA-256 digest of the canonical model config text
        u32       epochs completed
        u32       number of parameter records
        per record:
          u16       name length L, then L bytes UTF-8 name
          u8        ndim D, then D x u32 extents
          f64 * n   parameter values, row-major
          f64 * n   velocity buffer, row-major
    """

    config_digest: bytes
    params: dict[str, np.ndarray]
    velocities: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0

    def payload_bytes(self) -> int:
        return sum(a.size * 8 for a in self.params.values())

    def to_bytes(self) -> bytes:
        if len(self.config_digest) != 32:
            raise ValueError("config digest must be 32 bytes")
        parts = [
            CHECKPOINT_MAGIC,
            struct.pack("<I", CHECKPOINT_VERSION),
            self.config_digest,
            struct.pack("<II", self.epoch, len(self.params)),
        ]
        for name, arr in self.params.items():
            raw = name.encode("utf-8")
            vel = self.velocities.get(name)
            if vel is None:
                vel = np.zeros_like(arr)
            parts.append(struct.pack("<H", len(raw)) + raw)
            parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
            parts.append(np.ascontiguousarray(vel, dtype="<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        try:
            return cls._parse(blob)
        except (struct.error, UnicodeDecodeError) as exc:
            raise ValueError(f"truncated or corrupt checkpoint: {exc}") from exc

    @classmethod
    def _parse(cls, blob: bytes) -> "Checkpoint":
        if blob[:8] != CHECKPOINT_MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        (version,) = struct.unpack_from("<I", blob, 8)
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        digest = blob[12:44]
        epoch, count = struct.unpack_from("<II", blob, 44)
        pos = 52
        params: dict[str, np.ndarray] = {}
        velocities: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            n = int(np.prod(shape)) if shape else 1
            if pos + 16 * n > len(blob):
                raise ValueError(f"truncated checkpoint in record {name!r}")
            params[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).astype(DTYPE)
            pos += 8 * n
            velocities[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).astype(DTYPE)
            pos += 8 * n
        if pos != len(blob):
            raise ValueError(f"trailing bytes in checkpoint ({len(blob) - pos})")
        return cls(config_digest=digest, params=params, velocities=velocities, epoch=epoch)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def sha256(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()
