"""Dense float32 tensors with reverse-mode autodiff and AdamW.

The engine is deliberately small: numpy holds the buffers, a Tape records
operations in execution order, and backward() replays the tape in reverse
(execution order is already topological). Everything is float32; tensors
holding NaN/Inf are rejected at construction and again before any optimizer
step, so non-finite values cannot silently reach parameters.

Randomness comes exclusively from counter-based Philox generators keyed by
(seed, stream labels), which makes every buffer bit-reproducible for a fixed
seed on one platform.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import ContractError, NonFiniteError, ShapeError

_INV_SQRT2 = np.float32(1.0 / math.sqrt(2.0))
_INV_SQRT2PI = np.float32(1.0 / math.sqrt(2.0 * math.pi))


# ---------------------------------------------------------------------------
# RNG


def rng_for(seed: int, *stream) -> np.random.Generator:
    """Philox generator for a (seed, stream...) pair.

    The 128-bit Philox key is the blake2b digest of the textual stream path,
    so independent streams never collide and every draw is reproducible.
    """
    label = ":".join([str(seed)] + [str(s) for s in stream])
    digest = hashlib.blake2b(label.encode(), digest_size=16).digest()
    key = np.frombuffer(digest, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


# ---------------------------------------------------------------------------
# Tensor and tape


class Tensor:
    """Dense row-major float32 array, optionally tracked for gradients.

    requires_grad tensors are always leaves (parameters); op outputs are
    tracked through the active Tape instead. grad, when present, matches the
    data shape exactly.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data, dtype=np.float32)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"tensor {name or '<unnamed>'} holds NaN/Inf")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def freeze(self) -> "Tensor":
        """Make the buffer immutable and stop gradient tracking."""
        self.requires_grad = False
        self.grad = None
        self.data.flags.writeable = False
        return self

    @property
    def frozen(self) -> bool:
        return not self.data.flags.writeable

    def content_hash(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        h.update(repr(self.data.shape).encode())
        h.update(np.ascontiguousarray(self.data).tobytes())
        return h.hexdigest()

    def __repr__(self):
        tag = self.name or "tensor"
        return f"<{tag} {self.data.shape} rg={self.requires_grad}>"


class Tape:
    """Execution-ordered record of differentiable operations.

    Each entry is (output tensor, [(input tensor, pull fn), ...]) where the
    pull fn maps the output gradient to that input's gradient contribution.
    Reverse iteration visits every node after all of its consumers.
    """

    _active: list["Tape"] = []

    def __init__(self):
        self._entries: list[tuple[Tensor, list[tuple[Tensor, object]]]] = []
        self._tracked: set[int] = set()

    def __enter__(self) -> "Tape":
        Tape._active.append(self)
        return self

    def __exit__(self, *exc):
        Tape._active.pop()
        return False

    def tracks(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._tracked

    @staticmethod
    def current() -> "Tape | None":
        return Tape._active[-1] if Tape._active else None


def _record(out: Tensor, pulls: list[tuple[Tensor, object]]) -> Tensor:
    tape = Tape.current()
    if tape is None:
        return out
    needed = [(t, fn) for t, fn in pulls if tape.tracks(t)]
    if needed:
        tape._entries.append((out, needed))
        tape._tracked.add(id(out))
    return out


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad leaf reachable from loss.

    Intermediate gradients live only in a local table and are released as
    they are consumed.
    """
    if loss.data.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    tape = Tape.current()
    if tape is None or not tape.tracks(loss):
        raise ContractError("loss is not recorded on an active tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float32)}
    for out, pulls in reversed(tape._entries):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, fn in pulls:
            contrib = fn(g)
            if t.requires_grad:
                if t.grad is None:
                    t.grad = np.array(contrib, dtype=np.float32)
                else:
                    t.grad = t.grad + contrib
            else:
                prev = grads.get(id(t))
                grads[id(t)] = contrib if prev is None else prev + contrib


# ---------------------------------------------------------------------------
# Shape helpers


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.astype(np.float32, copy=False)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# Operations


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = Tensor(a.data + b.data)
    return _record(out, [(a, lambda g: _unbroadcast(g, a.shape)),
                         (b, lambda g: _unbroadcast(g, b.shape))])


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out = Tensor(a.data - b.data)
    return _record(out, [(a, lambda g: _unbroadcast(g, a.shape)),
                         (b, lambda g: _unbroadcast(-g, b.shape))])


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = Tensor(a.data * b.data)
    return _record(out, [(a, lambda g: _unbroadcast(g * b.data, a.shape)),
                         (b, lambda g: _unbroadcast(g * a.data, b.shape))])


def scale(a: Tensor, c: float) -> Tensor:
    c32 = np.float32(c)
    out = Tensor(a.data * c32)
    return _record(out, [(a, lambda g: g * c32)])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul batch dims incompatible: {a.shape} x {b.shape}") from None
    out = Tensor(data)

    def pull_a(g):
        return _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)

    def pull_b(g):
        return _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)

    return _record(out, [(a, pull_a), (b, pull_b)])


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    out = Tensor(np.transpose(a.data, axes))
    return _record(out, [(a, lambda g: np.transpose(g, inv))])


def swap_last2(a: Tensor) -> Tensor:
    axes = tuple(range(a.data.ndim - 2)) + (a.data.ndim - 1, a.data.ndim - 2)
    return transpose(a, axes)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return _record(out, [(a, lambda g: g.reshape(a.shape))])


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_pull(i):
        lo, hi = offsets[i], offsets[i + 1]

        def pull(g):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            return g[tuple(idx)]

        return pull

    return _record(out, [(p, make_pull(i)) for i, p in enumerate(parts)])


def tile_leading(a: Tensor, n: int) -> Tensor:
    """Repeat a tensor along a new leading axis (shared weights per batch row)."""
    out = Tensor(np.broadcast_to(a.data, (n,) + a.shape).copy())
    return _record(out, [(a, lambda g: g.sum(axis=0))])


def slice_last(a: Tensor, j: int) -> Tensor:
    """Select index j of the last axis, keeping it as a size-1 axis."""
    if not 0 <= j < a.shape[-1]:
        raise ShapeError(f"index {j} out of range for last axis of {a.shape}")
    out = Tensor(a.data[..., j:j + 1])

    def pull(g):
        full = np.zeros(a.shape, dtype=np.float32)
        full[..., j:j + 1] = g
        return full

    return _record(out, [(a, pull)])


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax; outputs are nonnegative and sum to 1 along axis."""
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def pull(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (g - dot) * y

    return _record(out, [(a, pull)])


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = Tensor(x * cdf)

    def pull(g):
        pdf = np.exp(np.float32(-0.5) * x * x) * _INV_SQRT2PI
        return g * (cdf + x * pdf)

    return _record(out, [(a, pull)])


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise gain and bias."""
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias must be ({d},), got {gain.shape}/{bias.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.float32(eps))
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)

    def pull_a(g):
        gh = g * gain.data
        m1 = gh.mean(axis=-1, keepdims=True)
        m2 = (gh * xhat).mean(axis=-1, keepdims=True)
        return (gh - m1 - xhat * m2) * inv

    def pull_gain(g):
        return _unbroadcast(g * xhat, gain.shape)

    def pull_bias(g):
        return _unbroadcast(g, bias.shape)

    return _record(out, [(a, pull_a), (gain, pull_gain), (bias, pull_bias)])


def tensor_sum(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())
    return _record(out, [(a, lambda g: np.broadcast_to(g, a.shape))])


def mean(a: Tensor, axis: int) -> Tensor:
    n = a.shape[axis]
    out = Tensor(a.data.mean(axis=axis))

    def pull(g):
        return np.repeat(np.expand_dims(g, axis), n, axis=axis) / np.float32(n)

    return _record(out, [(a, pull)])


def cross_entropy(logits: Tensor, label) -> Tensor:
    """Mean negative log-likelihood, computed via a stable log-sum-exp.

    logits is (C,) with an int label, or (B, C) with labels of shape (B,).
    """
    x = logits.data
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    n, c = x.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= c:
        raise IndexError(f"label out of range [0, {c})")
    m = x.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))
    nll = lse - x[np.arange(n), labels]
    out = Tensor(nll.mean())

    def pull(g):
        p = np.exp(x - m)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        p *= g / np.float32(n)
        return p[0] if squeeze else p

    return _record(out, [(logits, pull)])


# ---------------------------------------------------------------------------
# Seeded initialization


def seeded_init(shape, scheme: str, seed: int, *stream) -> Tensor:
    """Deterministically initialize a tensor.

    scheme is one of "zeros", "identity", "normal:SIGMA", "kaiming".
    identity requires a square 2-D shape; kaiming uses He-normal with fan-in
    taken from the first axis (weights are stored (d_in, d_out)).
    """
    shape = tuple(int(s) for s in shape)
    if scheme == "zeros":
        return Tensor(np.zeros(shape, dtype=np.float32))
    if scheme == "identity":
        if len(shape) != 2 or shape[0] != shape[1]:
            raise ContractError(f"identity init needs a square 2-D shape, got {shape}")
        return Tensor(np.eye(shape[0], dtype=np.float32))
    rng = rng_for(seed, *stream)
    if scheme.startswith("normal:"):
        sigma = float(scheme.split(":", 1)[1])
        return Tensor(rng.standard_normal(shape, dtype=np.float32) * np.float32(sigma))
    if scheme == "kaiming":
        sigma = math.sqrt(2.0 / shape[0])
        return Tensor(rng.standard_normal(shape, dtype=np.float32) * np.float32(sigma))
    raise ContractError(f"unknown init scheme {scheme!r}")


# ---------------------------------------------------------------------------
# AdamW


@dataclass
class AdamWState:
    """Per-parameter moment buffers plus the shared hyperparameters."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.05
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], state: AdamWState, lr_now: float | None = None) -> None:
    """One decoupled-weight-decay Adam update over a named parameter dict.

    Decay multiplies weights directly (never routed through the gradients);
    moments are bias-corrected; gradients are cleared afterwards.
    """
    lr = state.lr if lr_now is None else float(lr_now)
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"gradient of {name!r} holds NaN/Inf")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        if state.weight_decay:
            p.data *= np.float32(1.0 - lr * state.weight_decay)
        mhat = m / c1
        vhat = v / c2
        p.data -= np.float32(lr) * mhat / (np.sqrt(vhat) + np.float32(state.eps))
        p.grad = None
