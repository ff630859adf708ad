"""Reverse-mode automatic differentiation over dense float64 arrays.

Tensors are rank 1-3, row-major and always finite; a non-finite value in
any forward result raises immediately. Every operation appends the output
node to a GradTape, and ``backward`` replays the tape in reverse recording
order exactly once, summing gradients into every node that requires them.
The op set is exactly what the velocity network and the MIL head need.
"""
from __future__ import annotations

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf, or a gradient went non-finite."""


class MaskError(ValueError):
    """A softmax row has no unmasked entries."""


class Tensor:
    """One node of the computation graph: float64 data plus a gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "tape", "op", "_backward")

    def __init__(self, data, tape, requires_grad=False, op="leaf", backward=None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim < 1 or arr.ndim > 3:
            raise ShapeError(f"{op}: tensor rank must be 1-3, got shape {arr.shape}")
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        # single-pass finiteness guard: any NaN/Inf survives the reduction
        with np.errstate(over="ignore", invalid="ignore"):
            if not np.isfinite(arr.sum()):
                raise NonFiniteError(f"{op}: produced non-finite values")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.tape = tape
        self.op = op
        self._backward = backward
        if tape is not None:
            tape._record(self)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape})"


class GradTape:
    """Ordered record of created tensors; backward walks it in reverse."""

    def __init__(self):
        self._nodes = []

    def _record(self, t):
        self._nodes.append(t)

    def leaf(self, data, requires_grad=False):
        return Tensor(data, self, requires_grad=requires_grad, op="leaf")

    def constant(self, data):
        return Tensor(data, self, requires_grad=False, op="const")

    def __len__(self):
        return len(self._nodes)


def backward(tape, loss):
    """Accumulate gradients of a scalar loss into every requiring node.

    Grad buffers are reset first, so calling twice on the same tape yields
    identical gradients.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss.tape is not tape:
        raise ValueError("backward: loss was not recorded on this tape")
    for node in tape._nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape._nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def _accumulate(t, g):
    # strictly out-of-place: grad buffers are never mutated, so closures may
    # hand over views or shared arrays without copies
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _result(data, inputs, op, backward_fn):
    tape = inputs[0].tape
    for t in inputs[1:]:
        if t.tape is not tape:
            raise ValueError(f"{op}: operands live on different tapes")
    needs = any(t.requires_grad for t in inputs)
    return Tensor(data, tape, requires_grad=needs, op=op,
                  backward=backward_fn if needs else None)


def _require_rank(t, rank, op, name):
    if t.data.ndim != rank:
        raise ShapeError(f"{op}: {name} must be rank {rank}, got shape {t.shape}")


def _require_same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# --- arithmetic ---------------------------------------------------------------

def add(a, b):
    _require_same_shape(a, b, "add")

    def bwd(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(a.data + b.data, (a, b), "add", bwd)


def sub(a, b):
    _require_same_shape(a, b, "sub")

    def bwd(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _result(a.data - b.data, (a, b), "sub", bwd)


def mul(a, b):
    _require_same_shape(a, b, "mul")

    def bwd(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _result(a.data * b.data, (a, b), "mul", bwd)


def scale(x, c):
    c = float(c)

    def bwd(g):
        _accumulate(x, g * c)

    return _result(x.data * c, (x,), "scale", bwd)


def sum_all(x):
    """Sum of all entries, returned as a shape-(1,) tensor."""

    def bwd(g):
        _accumulate(x, np.full_like(x.data, g[0]))

    return _result(np.array([x.data.sum()]), (x,), "sum_all", bwd)


# --- linear algebra -----------------------------------------------------------

def linear(x, w, b):
    """x[n,d_in] @ w[d_in,d_out] + b[d_out]."""
    _require_rank(x, 2, "linear", "x")
    _require_rank(w, 2, "linear", "w")
    _require_rank(b, 1, "linear", "b")
    if x.data.shape[1] != w.data.shape[0] or w.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"linear: x{x.shape} @ w{w.shape} + b{b.shape} do not chain"
        )

    def bwd(g):
        _accumulate(x, g @ w.data.T)
        _accumulate(w, x.data.T @ g)
        _accumulate(b, g.sum(axis=0))

    return _result(x.data @ w.data + b.data, (x, w, b), "linear", bwd)


def bmm(a, b):
    """Batched matmul: a[n,p,q] @ b[n,q,r]."""
    _require_rank(a, 3, "bmm", "a")
    _require_rank(b, 3, "bmm", "b")
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2] != b.data.shape[1]:
        raise ShapeError(f"bmm: shapes {a.shape} and {b.shape} do not chain")

    def bwd(g):
        _accumulate(a, g @ b.data.transpose(0, 2, 1))
        _accumulate(b, a.data.transpose(0, 2, 1) @ g)

    return _result(a.data @ b.data, (a, b), "bmm", bwd)


def transpose_last2(x):
    _require_rank(x, 3, "transpose_last2", "x")

    def bwd(g):
        _accumulate(x, np.ascontiguousarray(g.transpose(0, 2, 1)))

    return _result(np.ascontiguousarray(x.data.transpose(0, 2, 1)),
                   (x,), "transpose_last2", bwd)


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.data.shape

    def bwd(g):
        _accumulate(x, g.reshape(old))

    return _result(x.data.reshape(shape), (x,), "reshape", bwd)


def concat_cols(parts):
    """Concatenate rank-2 tensors along axis 1."""
    if not parts:
        raise ShapeError("concat_cols: nothing to concatenate")
    for p in parts:
        _require_rank(p, 2, "concat_cols", "part")
    rows = parts[0].data.shape[0]
    if any(p.data.shape[0] != rows for p in parts):
        raise ShapeError("concat_cols: row counts differ")
    widths = [p.data.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def bwd(g):
        for p, s, e in zip(parts, offsets[:-1], offsets[1:]):
            _accumulate(p, g[:, s:e])

    return _result(np.concatenate([p.data for p in parts], axis=1),
                   tuple(parts), "concat_cols", bwd)


def slice_cols(x, start, stop):
    _require_rank(x, 2, "slice_cols", "x")
    if not (0 <= start < stop <= x.data.shape[1]):
        raise ShapeError(f"slice_cols: [{start}:{stop}] out of range for {x.shape}")

    def bwd(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        _accumulate(x, full)

    return _result(np.ascontiguousarray(x.data[:, start:stop]),
                   (x,), "slice_cols", bwd)


def tile_batch(x, reps):
    """Repeat a rank-2 tensor into [reps, rows, cols]; grads sum over copies."""
    _require_rank(x, 2, "tile_batch", "x")

    def bwd(g):
        _accumulate(x, g.sum(axis=0))

    data = np.ascontiguousarray(np.broadcast_to(x.data, (reps,) + x.data.shape))
    return _result(data, (x,), "tile_batch", bwd)


def embed_rows(table, ids):
    """Gather rows of a [vocab, dim] table; grads scatter-add back."""
    _require_rank(table, 2, "embed_rows", "table")
    ids = np.asarray(ids, dtype=np.int64).ravel()
    vocab = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise ShapeError(
            f"embed_rows: id out of range [0,{vocab}) in {np.unique(ids)}"
        )

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        _accumulate(table, gt)

    return _result(table.data[ids], (table,), "embed_rows", bwd)


def split_heads(x, heads):
    """[n,p,d] -> [n*heads,p,d/heads], grouping (batch, head) in that order."""
    _require_rank(x, 3, "split_heads", "x")
    n, p, d = x.data.shape
    if d % heads != 0:
        raise ShapeError(f"split_heads: {d} features not divisible by {heads} heads")
    dh = d // heads

    def bwd(g):
        back = g.reshape(n, heads, p, dh).transpose(0, 2, 1, 3).reshape(n, p, d)
        _accumulate(x, back)

    data = x.data.reshape(n, p, heads, dh).transpose(0, 2, 1, 3).reshape(n * heads, p, dh)
    return _result(np.ascontiguousarray(data), (x,), "split_heads", bwd)


def merge_heads(x, heads):
    """Inverse of split_heads: [n*heads,p,dh] -> [n,p,heads*dh]."""
    _require_rank(x, 3, "merge_heads", "x")
    nh, p, dh = x.data.shape
    if nh % heads != 0:
        raise ShapeError(f"merge_heads: batch {nh} not divisible by {heads} heads")
    n = nh // heads

    def bwd(g):
        back = g.reshape(n, p, heads, dh).transpose(0, 2, 1, 3).reshape(nh, p, dh)
        _accumulate(x, np.ascontiguousarray(back))

    data = x.data.reshape(n, heads, p, dh).transpose(0, 2, 1, 3).reshape(n, p, heads * dh)
    return _result(np.ascontiguousarray(data), (x,), "merge_heads", bwd)


# --- activations ---------------------------------------------------------------

def _elementwise(x, fwd, bwd_kernel, op):
    flat = x.data.ravel()
    out = fwd(flat).reshape(x.data.shape)

    def bwd(g):
        _accumulate(x, bwd_kernel(flat, g.ravel()).reshape(x.data.shape))

    return _result(out, (x,), op, bwd)


def silu(x):
    return _elementwise(x, kernels.silu_fwd, kernels.silu_bwd, "silu")


def elu(x):
    return _elementwise(x, kernels.elu_fwd, kernels.elu_bwd, "elu")


def softplus(x):
    return _elementwise(x, kernels.softplus_fwd, kernels.softplus_bwd, "softplus")


def sigmoid(x):
    flat = x.data.ravel()
    out = kernels.sigmoid_fwd(flat)

    def bwd(g):
        _accumulate(x, kernels.sigmoid_bwd(out, g.ravel()).reshape(x.data.shape))

    return _result(out.reshape(x.data.shape), (x,), "sigmoid", bwd)


def tanh(x):
    out = np.tanh(x.data)

    def bwd(g):
        _accumulate(x, g * (1.0 - out * out))

    return _result(out, (x,), "tanh", bwd)


def relu(x):
    def bwd(g):
        _accumulate(x, g * (x.data > 0.0))

    return _result(np.maximum(x.data, 0.0), (x,), "relu", bwd)


def activation(x, kind):
    """Dispatch for the two activations the velocity network uses."""
    if kind == "silu":
        return silu(x)
    if kind == "elu":
        return elu(x)
    raise ValueError(f"activation: unknown kind {kind!r}")


# --- normalization and attention -----------------------------------------------

def layer_norm(x, gamma, beta, eps=1e-5):
    """Per-row normalization to zero mean / unit (population) variance, then affine."""
    _require_rank(x, 2, "layer_norm", "x")
    _require_rank(gamma, 1, "layer_norm", "gamma")
    _require_rank(beta, 1, "layer_norm", "beta")
    d = x.data.shape[1]
    if gamma.data.shape[0] != d or beta.data.shape[0] != d:
        raise ShapeError(f"layer_norm: affine dims {gamma.shape}/{beta.shape} != {d}")
    if not eps > 0:
        raise ValueError("layer_norm: eps must be positive")
    out, mean, rstd = kernels.layer_norm_fwd(x.data, gamma.data, beta.data, float(eps))

    def bwd(g):
        gx, ggamma, gbeta = kernels.layer_norm_bwd(x.data, mean, rstd, gamma.data, g)
        _accumulate(x, gx)
        _accumulate(gamma, ggamma)
        _accumulate(beta, gbeta)

    return _result(out, (x, gamma, beta), "layer_norm", bwd)


def masked_softmax(logits, mask, allow_empty=False):
    """Row-wise softmax over unmasked entries; masked entries are exactly 0.

    ``mask`` is a boolean array of the same shape. A fully-masked row is an
    error unless ``allow_empty`` (then the row comes back all zeros).
    """
    _require_rank(logits, 2, "masked_softmax", "logits")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != logits.data.shape:
        raise ShapeError(f"masked_softmax: mask {mask.shape} != logits {logits.shape}")
    if not allow_empty:
        dead = np.flatnonzero(~mask.any(axis=1))
        if dead.size:
            raise MaskError(f"masked_softmax: row {dead[0]} has no unmasked entries")
    probs = kernels.masked_softmax_fwd(logits.data, mask.astype(np.uint8))

    def bwd(g):
        _accumulate(logits, kernels.masked_softmax_bwd(probs, g))

    return _result(probs, (logits,), "masked_softmax", bwd)
