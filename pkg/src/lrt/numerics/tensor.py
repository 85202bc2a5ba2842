"""Dense float64 tensors with a recording tape for reverse-mode gradients.

Operations record themselves on the innermost active :class:`Tape` whenever one
of their inputs requires a gradient.  ``backward(tape, loss)`` replays the tape
in reverse and accumulates ``grad`` into every leaf that requires one.

Broadcasting is deliberately narrow: same shape, scalar with tensor, or a 1-D
vector against the last axis of a matrix.
"""

import numpy as np

from ..errors import ContractError, DomainError
from . import _kernels as K

_TAPES = []


class Tensor:
    """A float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)  # always owns its buffer
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        flag = " requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag}{flag})"

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None):
    """A trainable leaf."""
    return Tensor(data, requires_grad=True, name=name)


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out, inputs, vjp):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of primitive applications.  Use as a context manager."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss):
        return backward(self, loss)


def _emit(out_data, inputs, vjp):
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    needs = bool(_TAPES) and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        _TAPES[-1].nodes.append(_Node(out, inputs, vjp))
    return out


def backward(tape, loss):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf on ``tape``.

    Returns the list of leaves that received a gradient.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ContractError("backward() needs a scalar loss tensor")
    grads = {id(loss): np.ones_like(loss.data)}
    seen = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                seen[key] = inp
    leaves = []
    for key, g in grads.items():
        leaf = seen[key]
        if not leaf.requires_grad:
            continue
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        leaves.append(leaf)
    return leaves


# ---------------------------------------------------------------------------
# elementwise binary ops
# ---------------------------------------------------------------------------


def _check_broadcast(a, b, op):
    sa, sb = a.shape, b.shape
    if sa == sb or a.ndim == 0 or b.ndim == 0:
        return
    if b.ndim == 1 and a.ndim >= 2 and sa[-1] == sb[0]:
        return
    if a.ndim == 1 and b.ndim >= 2 and sb[-1] == sa[0]:
        return
    raise ContractError(f"{op}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    return g.reshape(-1, shape[0]).sum(axis=0)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _emit(ad * bd, (a, b), vjp)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    if np.any(b.data == 0.0):
        raise DomainError("div: division by zero")
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _emit(out, (a, b), vjp)


# ---------------------------------------------------------------------------
# elementwise unary ops
# ---------------------------------------------------------------------------


def neg(a):
    a = as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,))


def relu(a):
    """ReLU; the subgradient at exactly zero is zero."""
    a = as_tensor(a)
    mask = a.data > 0.0
    return _emit(np.where(mask, a.data, 0.0), (a,), lambda g: (np.where(mask, g, 0.0),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log: input must be strictly positive")
    ad = a.data
    return _emit(np.log(ad), (a,), lambda g: (g / ad,))


def clip(a, lo, hi):
    """Clamp into [lo, hi]; gradient is passed only where the input was inside."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _emit(np.clip(a.data, lo, hi), (a,), lambda g: (np.where(inside, g, 0.0),))


def cos(a):
    a = as_tensor(a)
    ad = a.data
    return _emit(np.cos(ad), (a,), lambda g: (-g * np.sin(ad),))


def arccos(a):
    a = as_tensor(a)
    ad = a.data
    if np.any(np.abs(ad) >= 1.0):
        raise DomainError("arccos: input must lie strictly inside (-1, 1)")
    return _emit(np.arccos(ad), (a,), lambda g: (-g / np.sqrt(1.0 - ad * ad),))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def sum_(a, axis=None):
    a = as_tensor(a)
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _emit(out, (a,), vjp)


def mean(a, axis=None):
    a = as_tensor(a)
    if a.size == 0:
        raise DomainError("mean of an empty tensor")
    shape = a.shape
    n = a.size if axis is None else shape[axis]
    out = np.asarray(a.data.mean(axis=axis))

    def vjp(g):
        if axis is None:
            return (np.full(shape, g / n),)
        return (np.broadcast_to(np.expand_dims(g / n, axis), shape).copy(),)

    return _emit(out, (a,), vjp)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a):
    a = as_tensor(a)
    if a.ndim != 2:
        raise ContractError("transpose expects a matrix")
    return _emit(a.data.T.copy(), (a,), lambda g: (g.T.copy(),))


def concat(tensors, axis=0):
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ContractError("concat of no tensors")
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _emit(out, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors, axis=0):
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ContractError("stack of no tensors")
    n = len(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)
    return _emit(out, tensors, lambda g: tuple(np.moveaxis(g, axis, 0)[:n]))


def take(a, indices):
    """Gather along the first axis; repeated indices accumulate in the backward pass."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _emit(a.data[idx], (a,), vjp)


def pick(a, index):
    """Per-row element selection: ``out[n] = a[n, index[n]]`` (or ``a[index]`` for 1-D)."""
    a = as_tensor(a)
    shape = a.shape
    if a.ndim == 1:
        i = int(index)

        def vjp1(g):
            full = np.zeros(shape)
            full[i] = g
            return (full,)

        return _emit(np.asarray(a.data[i]), (a,), vjp1)
    if a.ndim != 2:
        raise ContractError("pick expects a vector or matrix")
    idx = np.asarray(index, dtype=np.intp)
    rows = np.arange(shape[0])

    def vjp2(g):
        full = np.zeros(shape)
        full[rows, idx] = g
        return (full,)

    return _emit(a.data[rows, idx].copy(), (a,), vjp2)


# ---------------------------------------------------------------------------
# linear algebra and normalisation
# ---------------------------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ContractError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 1 and bd.ndim == 2:
            return bd @ g, np.outer(ad, g)
        if ad.ndim == 2:
            return np.outer(g, bd), ad.T @ g
        return g * bd, g * ad

    return _emit(np.asarray(ad @ bd), (a, b), vjp)


def _as_rows(x):
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def l2_normalize(a, axis=-1):
    """Scale each vector along the last axis to unit L2 norm."""
    a = as_tensor(a)
    if axis not in (-1, a.ndim - 1):
        raise ContractError("l2_normalize only supports the last axis")
    if a.ndim == 0 or a.shape[-1] == 0:
        raise DomainError("l2_normalize of an empty vector")
    rows = _as_rows(a.data)
    if np.any((rows * rows).sum(axis=1) == 0.0):
        raise DomainError("l2_normalize: zero-norm vector")
    y, norms = K.normalize_rows_fwd(rows)
    shape = a.shape
    return _emit(y.reshape(shape), (a,),
                 lambda g: (K.normalize_rows_bwd(y, norms, _as_rows(g)).reshape(shape),))


def softmax(a, axis=-1):
    """Numerically stable softmax along the last axis."""
    a = as_tensor(a)
    if axis not in (-1, a.ndim - 1):
        raise ContractError("softmax only supports the last axis")
    if a.ndim == 0 or a.size == 0:
        raise DomainError("softmax of an empty input")
    shape = a.shape
    y = K.softmax_rows(_as_rows(a.data))
    return _emit(y.reshape(shape), (a,),
                 lambda g: (K.softmax_rows_bwd(y, _as_rows(g)).reshape(shape),))


def cosine_similarity(a, b):
    """``a . b / (|a| |b|)`` for two vectors of equal length."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or a.shape != b.shape or a.size == 0:
        raise ContractError(f"cosine_similarity needs two equal-length vectors, got {a.shape}, {b.shape}")
    ad, bd = a.data, b.data
    na, nb = np.sqrt(ad @ ad), np.sqrt(bd @ bd)
    if na == 0.0:
        raise DomainError("cosine_similarity: argument 'a' has zero norm")
    if nb == 0.0:
        raise DomainError("cosine_similarity: argument 'b' has zero norm")
    c = float(ad @ bd) / (na * nb)

    def vjp(g):
        return (g * (bd / (na * nb) - c * ad / (na * na)),
                g * (ad / (na * nb) - c * bd / (nb * nb)))

    return _emit(np.asarray(c), (a, b), vjp)


def cosine_matrix(a, b):
    """Cosines between rows of ``a`` (or the single vector ``a``) and rows of ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.shape[-1] != b.shape[1]:
        raise ContractError(f"cosine_matrix: incompatible shapes {a.shape} and {b.shape}")
    return matmul(l2_normalize(a), transpose(l2_normalize(b)))


def patch_encode(x, w, b):
    """Fused ``mean_patches(ReLU(x @ w + b))`` for x of shape (N, P, Dr)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 3 or w.ndim != 2 or x.shape[2] != w.shape[0] or b.shape != (w.shape[1],):
        raise ContractError(f"patch_encode: shapes {x.shape}, {w.shape}, {b.shape} do not match")
    xd = np.ascontiguousarray(x.data)
    wd = np.ascontiguousarray(w.data)
    pooled, active = K.patch_encode_fwd(xd, wd, np.ascontiguousarray(b.data))
    need_x = x.requires_grad

    def vjp(g):
        gx, gw, gb = K.patch_encode_bwd(xd, wd, active, np.ascontiguousarray(g))
        return (gx if need_x else None), gw, gb

    return _emit(pooled, (x, w, b), vjp)
