"""Dense float64 arrays with a reverse-mode gradient tape.

Every model computation in this package runs through the primitives in this
module. Arrays are always float64 and C-contiguous. Each primitive checks its
output for NaN/Inf and raises NumericError rather than letting garbage
propagate. Ops append themselves to a flat module-level tape in execution
order; backward() replays the tape in reverse, which is a valid reverse
topological order by construction, and clears it afterwards. Only first-order
gradients are supported.

Thread-safety: the tape is global, so graph construction and backward() must
stay on one thread. Arrays that never require gradients are immutable in
practice and safe to share.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_TAPE: list = []
_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables tape recording inside the block."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def tape_size() -> int:
    return len(_TAPE)


def reset_tape() -> None:
    _TAPE.clear()


class DenseArray:
    """Shape-tagged float64 array with an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.size == 0:
            raise ShapeError(f"arrays must have positive extents, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NumericError("non-finite values in array")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on array of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "DenseArray":
        return DenseArray(self.data.copy())

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def __repr__(self):
        return f"DenseArray(shape={self.shape}, requires_grad={self.requires_grad})"


def array(data, requires_grad: bool = False) -> DenseArray:
    return DenseArray(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> DenseArray:
    return DenseArray(np.zeros(shape), requires_grad=requires_grad)


def randn(rng: np.random.Generator, shape, std: float = 1.0, requires_grad: bool = False) -> DenseArray:
    return DenseArray(std * rng.standard_normal(shape), requires_grad=requires_grad)


def _result(out: np.ndarray, parents: tuple, backward_fn) -> DenseArray:
    """Wrap a primitive's raw output, validate it, and record it on the tape."""
    if out.size == 0:
        raise ShapeError("primitive produced a zero-size array")
    if not np.all(np.isfinite(out)):
        raise NumericError("primitive produced non-finite values")
    res = DenseArray.__new__(DenseArray)
    res.data = np.ascontiguousarray(out, dtype=np.float64)
    res.grad = None
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    res.requires_grad = needs
    if needs:
        _TAPE.append((res, parents, backward_fn))
    return res


def backward(loss: DenseArray) -> None:
    """Accumulate d(loss)/d(leaf) into .grad of every requires_grad leaf.

    The tape is consumed and cleared. Leaf gradients are added to whatever is
    already in .grad, so successive backward calls accumulate until the caller
    zeroes them. Frozen leaves never get a gradient allocated.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        reset_tape()
        raise ContractError("loss is not connected to any input that requires gradients")
    try:
        # Allocate zero gradients up front for every requires_grad array that
        # participates, so even dead branches (e.g. values that only feed a
        # non-differentiable selection) end up with a populated gradient.
        for out, parents, _ in _TAPE:
            for p in parents:
                if p.requires_grad and p.grad is None:
                    p.grad = np.zeros_like(p.data)
        if loss.grad is None:
            loss.grad = np.ones_like(loss.data)
        else:
            loss.grad = loss.grad + np.ones_like(loss.data)
        for out, parents, fn in reversed(_TAPE):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for p, g in zip(parents, grads):
                if g is not None and p.requires_grad:
                    if p.grad is None:
                        p.grad = np.zeros_like(p.data)
                    p.grad += g
    finally:
        reset_tape()


def _sum_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to a broadcast operand's shape."""
    if g.shape == shape:
        return g
    if shape == () or shape == (1,):
        return g.sum().reshape(shape)
    # row-broadcast case: (1, d) against (n, d)
    if len(shape) == 2 and shape[0] == 1 and g.ndim == 2 and g.shape[1] == shape[1]:
        return g.sum(axis=0, keepdims=True)
    raise ShapeError(f"cannot reduce gradient of shape {g.shape} to {shape}")


def _broadcast_ok(a: DenseArray, b: DenseArray) -> bool:
    if a.shape == b.shape:
        return True
    for x, y in ((a, b), (b, a)):
        if x.data.size == 1:
            return True
        if (
            len(x.shape) == 2
            and x.shape[0] == 1
            and len(y.shape) == 2
            and x.shape[1] == y.shape[1]
        ):
            return True
    return False


def add(a: DenseArray, b: DenseArray) -> DenseArray:
    if not _broadcast_ok(a, b):
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    out = a.data + b.data

    def bw(g):
        ga = _sum_to(g, a.shape) if a.requires_grad else None
        gb = _sum_to(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), bw)


def sub(a: DenseArray, b: DenseArray) -> DenseArray:
    if not _broadcast_ok(a, b):
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    out = a.data - b.data

    def bw(g):
        ga = _sum_to(g, a.shape) if a.requires_grad else None
        gb = -_sum_to(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), bw)


def mul(a: DenseArray, b: DenseArray) -> DenseArray:
    if not _broadcast_ok(a, b):
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bw(g):
        ga = _sum_to(g * bd, a.shape) if a.requires_grad else None
        gb = _sum_to(g * ad, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), bw)


def neg(a: DenseArray) -> DenseArray:
    return _result(-a.data, (a,), lambda g: (-g,))


def scale(a: DenseArray, c: float) -> DenseArray:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: DenseArray, b: DenseArray) -> DenseArray:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} x {b.shape}")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), bw)


def transpose(a: DenseArray) -> DenseArray:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-d array, got {a.shape}")
    return _result(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: DenseArray, shape) -> DenseArray:
    old = a.shape
    out = a.data.reshape(shape)
    return _result(out.copy(), (a,), lambda g: (g.reshape(old),))


def concat(arrays: list, axis: int = 0) -> DenseArray:
    if not arrays:
        raise ShapeError("concat of empty list")
    ndim = arrays[0].data.ndim
    if axis >= ndim:
        raise ShapeError(f"concat axis {axis} out of range for {ndim}-d arrays")
    for x in arrays[1:]:
        if x.data.ndim != ndim:
            raise ShapeError("concat: rank mismatch")
        for ax in range(ndim):
            if ax != axis and x.shape[ax] != arrays[0].shape[ax]:
                raise ShapeError(f"concat: shape mismatch {x.shape} vs {arrays[0].shape}")
    out = np.concatenate([x.data for x in arrays], axis=axis)
    sizes = [x.shape[axis] for x in arrays]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        pieces = []
        for i, x in enumerate(arrays):
            if not x.requires_grad:
                pieces.append(None)
                continue
            sl = [slice(None)] * ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(sl)])
        return tuple(pieces)

    return _result(out, tuple(arrays), bw)


def narrow(a: DenseArray, axis: int, start: int, length: int) -> DenseArray:
    if a.data.ndim <= axis:
        raise ShapeError(f"narrow axis {axis} out of range for shape {a.shape}")
    if start < 0 or length < 1 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow [{start}:{start + length}] out of range for shape {a.shape}")
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = a.data[sl].copy()

    def bw(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        return (full,)

    return _result(out, (a,), bw)


def gather_rows(table: DenseArray, ids) -> DenseArray:
    if table.data.ndim != 2:
        raise ShapeError(f"gather_rows expects a 2-d table, got {table.shape}")
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1 or idx.size == 0:
        raise ShapeError("gather_rows expects a non-empty 1-d id list")
    if idx.min() < 0 or idx.max() >= table.shape[0]:
        raise ShapeError(f"gather_rows: id out of range 0..{table.shape[0] - 1}")
    out = table.data[idx]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _result(out, (table,), bw)


def mean_rows(a: DenseArray) -> DenseArray:
    if a.data.ndim != 2:
        raise ShapeError(f"mean_rows expects a 2-d array, got {a.shape}")
    n = a.shape[0]
    out = a.data.mean(axis=0, keepdims=True)

    def bw(g):
        return (np.repeat(g / n, n, axis=0),)

    return _result(out, (a,), bw)


def sum_all(a: DenseArray) -> DenseArray:
    out = np.asarray(a.data.sum())

    def bw(g):
        return (np.full_like(a.data, g.reshape(-1)[0]),)

    return _result(out, (a,), bw)


def sigmoid(a: DenseArray) -> DenseArray:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bw(g):
        return (g * out * (1.0 - out),)

    return _result(out, (a,), bw)


def tanh(a: DenseArray) -> DenseArray:
    out = np.tanh(a.data)

    def bw(g):
        return (g * (1.0 - out * out),)

    return _result(out, (a,), bw)


def softmax_rows(a: DenseArray) -> DenseArray:
    """Row-wise softmax, max-shifted for stability. Rows sum to 1."""
    if a.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-d array, got {a.shape}")
    out = _softmax_last(a.data)

    def bw(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)

    return _result(out, (a,), bw)


def _softmax_last(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(a: DenseArray, eps: float = 1e-5) -> DenseArray:
    """Normalize each row to mean 0, variance 1. No learned affine."""
    if a.data.ndim != 2:
        raise ShapeError(f"layer_norm expects a 2-d array, got {a.shape}")
    x = a.data
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv

    def bw(g):
        m1 = g.mean(axis=1, keepdims=True)
        m2 = (g * xhat).mean(axis=1, keepdims=True)
        return (inv * (g - m1 - xhat * m2),)

    return _result(xhat, (a,), bw)


def l1(a: DenseArray, b: DenseArray) -> DenseArray:
    """Mean absolute difference as a scalar. Subgradient at 0 is 0."""
    if a.shape != b.shape:
        raise ShapeError(f"l1: shapes differ, {a.shape} vs {b.shape}")
    diff = a.data - b.data
    out = np.asarray(np.abs(diff).mean())
    n = diff.size
    sgn = np.sign(diff)

    def bw(g):
        base = g.reshape(-1)[0] * sgn / n
        ga = base if a.requires_grad else None
        gb = -base if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), bw)


def mean_stack(arrays: list) -> DenseArray:
    """Elementwise arithmetic mean of same-shaped arrays."""
    if not arrays:
        raise ShapeError("mean_stack of empty list")
    shape = arrays[0].shape
    for x in arrays[1:]:
        if x.shape != shape:
            raise ShapeError(f"mean_stack: shape mismatch {x.shape} vs {shape}")
    k = len(arrays)
    out = arrays[0].data.copy()
    for x in arrays[1:]:
        out += x.data
    out /= k

    def bw(g):
        share = g / k
        return tuple(share if x.requires_grad else None for x in arrays)

    return _result(out, tuple(arrays), bw)


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    t, d = x.shape
    return x.reshape(t, n_heads, d // n_heads).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    h, t, dh = x.shape
    return x.transpose(1, 0, 2).reshape(t, h * dh)


def mha_probs(q: np.ndarray, k: np.ndarray, n_heads: int, gate=None) -> np.ndarray:
    """Attention probabilities [n_heads, T_q, T_k] for given raw projections.

    Pure numpy inspection helper sharing the exact math of gated_mha; gate is
    an optional per-head vector multiplying the pre-softmax logits.
    """
    d_h = q.shape[1] // n_heads
    q3 = _split_heads(q, n_heads)
    k3 = _split_heads(k, n_heads)
    logits = q3 @ k3.transpose(0, 2, 1) / np.sqrt(d_h)
    if gate is not None:
        logits = logits * np.asarray(gate, dtype=np.float64).reshape(n_heads, 1, 1)
    return _softmax_last(logits)


def gated_mha(q: DenseArray, k: DenseArray, v: DenseArray, n_heads: int,
              gate: DenseArray | None = None) -> DenseArray:
    """Multi-head attention with an optional per-head gate on the logits.

    q: [T_q, d], k/v: [T_k, d], d divisible by n_heads. Per head h the logits
    are gate[h] * (Q_h K_h^T) / sqrt(d_h); softmax over keys, then value
    aggregation. Heads are concatenated; no output projection here. Fused
    into one tape record so a full attention costs O(1) Python overhead.
    """
    if q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2:
        raise ShapeError("gated_mha expects 2-d q, k, v")
    d = q.shape[1]
    if d != k.shape[1] or d != v.shape[1]:
        raise ShapeError(f"gated_mha: width mismatch q={q.shape} k={k.shape} v={v.shape}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"gated_mha: key/value counts differ {k.shape} vs {v.shape}")
    if d % n_heads != 0:
        raise ShapeError(f"width {d} not divisible by {n_heads} heads")
    if gate is not None and gate.data.reshape(-1).shape != (n_heads,):
        raise ShapeError(f"gate must have one entry per head ({n_heads}), got {gate.shape}")

    d_h = d // n_heads
    inv_sqrt = 1.0 / np.sqrt(d_h)
    q3 = _split_heads(q.data, n_heads)
    k3 = _split_heads(k.data, n_heads)
    v3 = _split_heads(v.data, n_heads)
    raw = q3 @ k3.transpose(0, 2, 1) * inv_sqrt
    if gate is not None:
        gvec = gate.data.reshape(n_heads, 1, 1)
        probs = _softmax_last(raw * gvec)
    else:
        gvec = None
        probs = _softmax_last(raw)
    out3 = probs @ v3
    out = _merge_heads(out3)
    parents = (q, k, v) if gate is None else (q, k, v, gate)

    def bw(g):
        g3 = _split_heads(g, n_heads)
        gv3 = probs.transpose(0, 2, 1) @ g3 if v.requires_grad else None
        dprobs = g3 @ v3.transpose(0, 2, 1)
        dot = (dprobs * probs).sum(axis=-1, keepdims=True)
        dlogits = probs * (dprobs - dot)
        if gvec is not None:
            draw = dlogits * gvec
        else:
            draw = dlogits
        gq = _merge_heads(draw @ k3 * inv_sqrt) if q.requires_grad else None
        gk = _merge_heads(draw.transpose(0, 2, 1) @ q3 * inv_sqrt) if k.requires_grad else None
        if gate is None:
            return gq, gk, gv3 if gv3 is None else _merge_heads(gv3)
        ggate = None
        if gate.requires_grad:
            ggate = (dlogits * raw).sum(axis=(1, 2)).reshape(gate.data.shape)
        return gq, gk, gv3 if gv3 is None else _merge_heads(gv3), ggate

    return _result(out, parents, bw)
