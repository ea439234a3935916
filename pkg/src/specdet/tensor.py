"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable computation in this package is expressed through the
primitives below.  A ``Tape`` records one forward pass; ``backward`` replays
it in reverse to accumulate gradients of a scalar root with respect to every
watched leaf.  Operations are pure: the same inputs always produce
bit-identical outputs, and no op mutates its arguments.

Values are kept finite by construction, with one deliberate exception: the
row-wise top-k affinity mask injects ``-inf`` entries that ``softmax_lastdim``
resolves to exactly zero weight.
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf as _erf

from .errors import (
    ContractError,
    DegenerateMaskError,
    DimensionError,
    OracleError,
    ParameterError,
)

_uid_counter = itertools.count()

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """A dense float64 array, optionally recorded on a differentiation tape."""

    __slots__ = ("data", "tape", "uid")

    def __init__(self, data: np.ndarray, tape: "Tape | None" = None):
        self.data = data
        self.tape = tape
        self.uid = next(_uid_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        watched = "watched" if self.tape is not None else "constant"
        return f"Tensor(shape={self.shape}, {watched})"

    # Operator sugar; scalars are promoted to constants.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


class TapeNode:
    """One recorded operation: output, inputs, and its vector-Jacobian product."""

    __slots__ = ("op", "inputs", "output_uid", "vjp")

    def __init__(
        self,
        op: str,
        inputs: tuple[Tensor, ...],
        output_uid: int,
        vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]],
    ):
        self.op = op
        self.inputs = inputs
        self.output_uid = output_uid
        self.vjp = vjp

    @property
    def input_uids(self) -> tuple[int, ...]:
        return tuple(t.uid for t in self.inputs)


class Tape:
    """Ordered record of one forward pass; single-writer by contract."""

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._leaf_uids: set[int] = set()

    def leaf(self, data) -> Tensor:
        """Watch an array as a differentiable leaf on this tape."""
        t = Tensor(np.asarray(data, dtype=np.float64), tape=self)
        self._leaf_uids.add(t.uid)
        return t

    def is_leaf(self, t: Tensor) -> bool:
        return t.uid in self._leaf_uids


class GradientMap:
    """Gradients from one backward pass, keyed by tensor identity."""

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        return self._grads[t.uid]

    def __contains__(self, t: Tensor) -> bool:
        return t.uid in self._grads

    def get(self, t: Tensor, default=None):
        return self._grads.get(t.uid, default)


def tensor(data) -> Tensor:
    """Wrap array-like data as a constant (untracked) tensor."""
    return Tensor(np.asarray(data, dtype=np.float64))


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return tensor(x)


def _join_tape(inputs: Sequence[Tensor]) -> Tape | None:
    tape = None
    for t in inputs:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ContractError("operands are recorded on different tapes")
    return tape


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, vjp) -> Tensor:
    tape = _join_tape(inputs)
    out = Tensor(out_data, tape=tape)
    if tape is not None:
        tape.nodes.append(TapeNode(op, tuple(inputs), out.uid, vjp))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# --------------------------------------------------------------------------
# Multiply-accumulate instrumentation
# --------------------------------------------------------------------------

class MacCounter:
    """Tallies multiply-accumulate operations executed under `count_macs`.

    Only genuine fused multiply-adds inside contraction kernels are counted
    (matrix products, convolutions, and the sparse row-wise attention apply);
    pure elementwise scaling is not a multiply-accumulate.
    """

    def __init__(self):
        self.total = 0


_mac_counters: list[MacCounter] = []


@contextmanager
def count_macs() -> Iterator[MacCounter]:
    counter = MacCounter()
    _mac_counters.append(counter)
    try:
        yield counter
    finally:
        _mac_counters.remove(counter)


def _add_macs(n: int) -> None:
    for counter in _mac_counters:
        counter.total += n


# --------------------------------------------------------------------------
# Elementwise arithmetic
# --------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", (a, b), out, vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", (a, b), out, vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", (a, b), out, vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _record("div", (a, b), out, vjp)


def neg(a: Tensor) -> Tensor:
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _record("exp", (a,), out, vjp)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return _record("log", (a,), out, vjp)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def vjp(g):
        return (g * 0.5 / out,)

    return _record("sqrt", (a,), out, vjp)


def square(a: Tensor) -> Tensor:
    out = a.data * a.data

    def vjp(g):
        return (g * 2.0 * a.data,)

    return _record("square", (a,), out, vjp)


def absolute(a: Tensor) -> Tensor:
    out = np.abs(a.data)

    def vjp(g):
        return (g * np.sign(a.data),)

    return _record("abs", (a,), out, vjp)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _record("tanh", (a,), out, vjp)


def sigmoid(a: Tensor) -> Tensor:
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    out[~pos] = ez / (1.0 + ez)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _record("sigmoid", (a,), out, vjp)


def gelu(a: Tensor) -> Tensor:
    """Gaussian-error linear unit (exact erf form)."""
    x = a.data
    cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    out = x * cdf

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return _record("gelu", (a,), out, vjp)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """Elementwise max(a, floor); gradient passes only where a > floor."""
    keep = a.data > floor
    out = np.where(keep, a.data, floor)

    def vjp(g):
        return (g * keep,)

    return _record("clamp_min", (a,), out, vjp)


def where_mask(condition: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select a where condition holds, b elsewhere; condition is constant."""
    cond = np.asarray(condition, dtype=bool)
    out = np.where(cond, a.data, b.data)

    def vjp(g):
        ga = _unbroadcast(np.where(cond, g, 0.0), a.shape)
        gb = _unbroadcast(np.where(cond, 0.0, g), b.shape)
        return ga, gb

    return _record("where", (a, b), out, vjp)


def mask_fill(a: Tensor, keep: np.ndarray, fill: float) -> Tensor:
    """Keep entries where the boolean mask holds, substitute `fill` elsewhere.

    The mask is a constant: gradients flow through kept entries only.
    """
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != a.shape:
        raise DimensionError(f"mask shape {keep.shape} != tensor shape {a.shape}")
    out = np.where(keep, a.data, fill)

    def vjp(g):
        return (np.where(keep, g, 0.0),)

    return _record("mask_fill", (a,), out, vjp)


# --------------------------------------------------------------------------
# Shape manipulation
# --------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return _record("reshape", (a,), out, vjp)


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = np.argsort(axes)
    out = np.transpose(a.data, axes)

    def vjp(g):
        return (np.transpose(g, inverse),)

    return _record("transpose", (a,), out, vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    extents = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + extents)

    def vjp(g):
        pieces = []
        for i in range(len(tensors)):
            index = [slice(None)] * g.ndim
            index[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(index)])
        return tuple(pieces)

    return _record("concat", tuple(tensors), out, vjp)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of `length` extents along one axis."""
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    out = a.data[tuple(index)].copy()

    def vjp(g):
        full = np.zeros(a.shape)
        full[tuple(index)] = g
        return (full,)

    return _record("narrow", (a,), out, vjp)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", (a,), np.asarray(out), vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    elif isinstance(axis, int):
        count = a.shape[axis]
    else:
        count = int(np.prod([a.shape[ax] for ax in axis]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


# --------------------------------------------------------------------------
# Contractions
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard 2-D matrix product, differentiable w.r.t. both operands."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents disagree: {a.shape} x {b.shape}")
    _add_macs(a.shape[0] * a.shape[1] * b.shape[1])
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _record("matmul", (a, b), out, vjp)


def conv2d(x: Tensor, k: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of an NCHW input with an OCKK kernel bank."""
    if x.ndim != 4 or k.ndim != 4:
        raise DimensionError(f"conv2d needs 4-D input and kernel, got {x.shape} and {k.shape}")
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    if pad < 0:
        raise ParameterError(f"pad must be >= 0, got {pad}")
    n, c, h, w = x.shape
    o, ck, kh, kw = k.shape
    if ck != c:
        raise DimensionError(f"kernel channels {ck} != input channels {c}")
    h_out = (h + 2 * pad - kh) // stride + 1
    w_out = (w + 2 * pad - kw) // stride + 1
    if h + 2 * pad < kh or w + 2 * pad < kw or h_out < 1 or w_out < 1:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}"
        )

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    # Patch tensor: N x C x kh x kw x Hout x Wout
    cols = np.empty((n, c, kh, kw, h_out, w_out))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride]
    _add_macs(n * o * h_out * w_out * c * kh * kw)
    out = np.einsum("ncijhw,ocij->nohw", cols, k.data)

    def vjp(g):
        gk = np.einsum("ncijhw,nohw->ocij", cols, g)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += np.einsum(
                    "nohw,oc->nchw", g, k.data[:, :, i, j]
                )
        gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        return gx, gk

    return _record("conv2d", (x, k), out, vjp)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour upsampling of an NCHW map by an integer factor."""
    if x.ndim != 4:
        raise DimensionError(f"upsample_nearest needs a 4-D input, got {x.shape}")
    if factor < 1:
        raise ParameterError(f"factor must be >= 1, got {factor}")
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    n, c, h, w = x.shape

    def vjp(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _record("upsample_nearest", (x,), out, vjp)


def sparse_row_matmul(weights: Tensor, values: Tensor, kept: np.ndarray) -> Tensor:
    """Row-wise product out[i] = sum_j weights[i, kept[i, j]] * values[kept[i, j]].

    `kept` is a constant (rows x t) index array naming the columns each row may
    touch; entries outside it are never read, so the kernel's work (and its
    multiply-accumulate count) scales with t rather than the full key count.
    With every column kept this equals a dense weights @ values product.
    """
    if weights.ndim != 2 or values.ndim != 2:
        raise DimensionError(
            f"sparse_row_matmul needs 2-D operands, got {weights.shape} and {values.shape}"
        )
    if weights.shape[1] != values.shape[0]:
        raise DimensionError(
            f"sparse_row_matmul extents disagree: {weights.shape} x {values.shape}"
        )
    kept = np.asarray(kept, dtype=np.intp)
    rows, t = kept.shape
    if rows != weights.shape[0]:
        raise DimensionError(f"kept rows {rows} != weight rows {weights.shape[0]}")
    width = values.shape[1]
    _add_macs(rows * t * width)
    w_kept = np.take_along_axis(weights.data, kept, axis=1)  # rows x t
    v_kept = values.data[kept]  # rows x t x width
    out = np.einsum("rt,rtc->rc", w_kept, v_kept)

    def vjp(g):
        gw = np.zeros(weights.shape)
        contrib = np.einsum("rc,rtc->rt", g, v_kept)
        np.put_along_axis(gw, kept, contrib, axis=1)
        gv = np.zeros(values.shape)
        np.add.at(gv, kept.ravel(), (w_kept[:, :, None] * g[:, None, :]).reshape(-1, width))
        return gw, gv

    return _record("sparse_row_matmul", (weights, values), out, vjp)


# --------------------------------------------------------------------------
# Normalisation and softmax
# --------------------------------------------------------------------------

def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last axis.

    Entries of exactly -inf receive exactly zero weight (the masked-attention
    limit); a slice consisting only of -inf entries is rejected because no
    distribution exists for it.
    """
    if x.shape[-1] < 1:
        raise DimensionError(f"softmax needs a non-empty last axis, got shape {x.shape}")
    m = np.max(x.data, axis=-1, keepdims=True)
    if np.isneginf(m).any():
        raise DegenerateMaskError("softmax row with every entry masked to -inf")
    e = np.exp(x.data - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _record("softmax_lastdim", (x,), out, vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each last-axis slice to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ParameterError(f"layer_norm eps must be > 0, got {eps}")
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise DimensionError(
            f"gain/bias shapes {gain.shape}/{bias.shape} must match last extent ({width},)"
        )
    m = tmean(x, axis=-1, keepdims=True)
    centered = sub(x, m)
    var = tmean(square(centered), axis=-1, keepdims=True)
    normed = div(centered, sqrt(var + eps))
    return add(mul(normed, gain), bias)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation over all non-channel axes (training statistics).

    The channel axis is axis 1 of an N x C x ... tensor.
    """
    if x.ndim < 2:
        raise DimensionError(f"batch_norm needs at least 2 axes, got shape {x.shape}")
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise DimensionError(
            f"gamma/beta shapes {gamma.shape}/{beta.shape} must match channel count ({channels},)"
        )
    if eps < 0:
        raise ParameterError(f"batch_norm eps must be >= 0, got {eps}")
    reduce_axes = (0,) + tuple(range(2, x.ndim))
    per_channel = x.size // channels
    if eps == 0 and per_channel == 1:
        raise ParameterError("batch_norm with a single element per channel needs eps > 0")
    m = tmean(x, axis=reduce_axes, keepdims=True)
    centered = sub(x, m)
    var = tmean(square(centered), axis=reduce_axes, keepdims=True)
    normed = div(centered, sqrt(var + eps))
    shape = (1, channels) + (1,) * (x.ndim - 2)
    return add(mul(normed, reshape(gamma, shape)), reshape(beta, shape))


# --------------------------------------------------------------------------
# Backward pass and the finite-difference oracle
# --------------------------------------------------------------------------

def backward(tape: Tape, root: Tensor) -> GradientMap:
    """Gradient of a scalar root w.r.t. every tensor on the tape.

    Fan-out accumulates: a tensor consumed by several ops receives the sum of
    all its downstream contributions.
    """
    if root.data.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    if root.tape is not tape:
        raise ContractError("root is not recorded on the given tape")
    grads: dict[int, np.ndarray] = {root.uid: np.ones_like(root.data)}
    for node in reversed(tape.nodes):
        g_out = grads.get(node.output_uid)
        if g_out is None:
            continue
        g_inputs = node.vjp(g_out)
        for inp, g in zip(node.inputs, g_inputs):
            if g is None:
                continue
            acc = grads.get(inp.uid)
            grads[inp.uid] = g if acc is None else acc + g
    return GradientMap(grads)


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ParameterError(f"finite difference step must be > 0, got {h}")
    base = np.array(x.data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    for i in range(base.size):
        bumped = base.reshape(-1).copy()
        bumped[i] += h
        f_plus = float(f(Tensor(bumped.reshape(base.shape))))
        bumped[i] -= 2 * h
        f_minus = float(f(Tensor(bumped.reshape(base.shape))))
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise OracleError(f"non-finite function value at coordinate {i}")
        flat[i] = (f_plus - f_minus) / (2 * h)
    return grad
