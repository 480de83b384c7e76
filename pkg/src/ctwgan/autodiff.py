"""Reverse-mode automatic differentiation over dense numpy arrays.

Eager tape: every op on a ``Tensor`` records its parents and a backward
rule. Backward rules are themselves written in terms of Tensor ops, so a
backward pass can be re-recorded and differentiated again (double
backward), which the gradient-penalty term needs.

Broadcasting is deliberately restricted to scalar-with-tensor; anything
wider goes through the explicit ``broadcast_to`` primitive.
"""

from __future__ import annotations

import numpy as np

# Default dtype for new tensors. Training runs in float32; gradient-check
# tests switch to float64 for tighter tolerances.
_DEFAULT_DTYPE = np.float32

_GRAD_ENABLED = True


class no_grad:
    """Context manager that suppresses tape recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type


def get_default_dtype():
    return _DEFAULT_DTYPE


class GraphError(ValueError):
    """Raised for shape/graph misuse (unbound inputs, bad shapes, ...)."""


class Tensor:
    """Dense array plus an optional position in the recorded graph.

    A tensor with ``requires_grad=False`` and no parents behaves as a
    constant under differentiation.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    # -- construction helpers -------------------------------------------

    @staticmethod
    def _from_op(data, parents, backward, op):
        out = Tensor.__new__(Tensor)
        out.data = data
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        out.op = op
        return out

    # -- basic introspection --------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, grad={self.requires_grad})"

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    __radd__ = __add__

    def __neg__(self):
        return mul(self, _wrap(-1.0, self.dtype))

    def __sub__(self, other):
        return add(self, -_wrap(other, self.dtype))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), -self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)


def _wrap(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_scalar_broadcast(a, b, op):
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise GraphError(f"{op}: shapes {a.shape} and {b.shape} differ and "
                         "neither operand is a scalar")


def _unbroadcast(g, shape):
    """Reduce gradient g back to `shape` when a scalar was broadcast."""
    if g.shape == shape:
        return g
    if shape == ():
        return tsum(g)
    raise GraphError(f"cannot reduce grad of shape {g.shape} to {shape}")


# -- primitive ops -------------------------------------------------------

def add(a, b):
    _check_scalar_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), backward, "add")


def mul(a, b):
    _check_scalar_broadcast(a, b, "mul")

    def backward(g):
        return _unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)

    return Tensor._from_op(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    _check_scalar_broadcast(a, b, "div")

    def backward(g):
        ga = _unbroadcast(div(g, b), a.shape)
        gb = _unbroadcast(-div(mul(g, a), mul(b, b)), b.shape)
        return ga, gb

    return Tensor._from_op(a.data / b.data, (a, b), backward, "div")


def square(x):
    return mul(x, x)


def sqrt(x):
    out = Tensor._from_op(np.sqrt(x.data), (x,), None, "sqrt")

    def backward(g):
        return (div(g, mul(_wrap(2.0, x.dtype), out)),)

    out._backward = backward if out.requires_grad else None
    return out


def exp(x):
    out = Tensor._from_op(np.exp(x.data), (x,), None, "exp")

    def backward(g):
        return (mul(g, out),)

    out._backward = backward if out.requires_grad else None
    return out


def log(x):
    def backward(g):
        return (div(g, x),)

    return Tensor._from_op(np.log(x.data), (x,), backward, "log")


def relu(x):
    mask = Tensor((x.data > 0).astype(x.dtype))
    return Tensor._from_op(x.data * mask.data, (x, mask),
                           lambda g: (mul(g, mask), None), "relu")


def leaky_relu(x, slope=0.2):
    m = np.where(x.data > 0, x.dtype.type(1.0), x.dtype.type(slope))
    mask = Tensor(m)
    return Tensor._from_op(x.data * m, (x, mask),
                           lambda g: (mul(g, mask), None), "leaky_relu")


def tsum(x, axis=None):
    """Sum over `axis` (int, tuple, or None for all)."""
    if axis is None:
        axes = tuple(range(x.ndim))
    elif isinstance(axis, int):
        axes = (axis,)
    else:
        axes = tuple(axis)
    shape = x.shape

    def backward(g):
        return (_expand(g, shape, axes),)

    return Tensor._from_op(np.sum(x.data, axis=axes), (x,), backward, "sum")


def tmean(x, axis=None):
    if axis is None:
        n = x.size
    elif isinstance(axis, int):
        n = x.shape[axis]
    else:
        n = int(np.prod([x.shape[a] for a in axis]))
    return mul(tsum(x, axis), _wrap(1.0 / n, x.dtype))


def _expand(g, shape, axes):
    """Adjoint of sum: insert `axes` back into g and tile to `shape`."""
    reps = [1] * len(shape)
    newshape = list(g.shape)
    for a in sorted(axes):
        newshape.insert(a, 1)
        reps[a] = shape[a]
    data = np.broadcast_to(g.data.reshape(newshape), shape)

    def backward(gg):
        return (tsum(gg, axes),)

    return Tensor._from_op(data, (g,), backward, "expand")


def broadcast_to(x, shape):
    """Explicit broadcast; adjoint sums over the broadcast axes."""
    xs = x.shape
    if len(xs) != len(shape):
        raise GraphError(f"broadcast_to: rank mismatch {xs} -> {shape}")
    axes = tuple(i for i, (a, b) in enumerate(zip(xs, shape)) if a != b)
    for i in axes:
        if xs[i] != 1:
            raise GraphError(f"broadcast_to: cannot expand dim {i} of {xs} to {shape}")

    def backward(g):
        s = tsum(g, axes)
        return (reshape(s, xs),)

    return Tensor._from_op(np.broadcast_to(x.data, shape),
                           (x,), backward, "broadcast_to")


def reshape(x, shape):
    shape = tuple(shape)
    old = x.shape

    def backward(g):
        return (reshape(g, old),)

    return Tensor._from_op(x.data.reshape(shape), (x,), backward, "reshape")


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (transpose(g, inv),)

    return Tensor._from_op(x.data.transpose(axes), (x,), backward, "transpose")


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise GraphError(f"matmul: expected 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise GraphError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")

    def backward(g):
        return matmul(g, transpose(b)), matmul(transpose(a), g)

    return Tensor._from_op(a.data @ b.data, (a, b), backward, "matmul")


def concat(tensors, axis=0):
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(slice_axis(g, axis, int(offsets[i]), int(offsets[i + 1]))
                     for i in range(len(tensors)))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis),
                           tuple(tensors), backward, "concat")


def slice_axis(x, axis, start, stop):
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape = x.shape

    def backward(g):
        return (_pad_axis(g, axis, start, shape[axis] - stop),)

    return Tensor._from_op(x.data[idx], (x,), backward, "slice")


def _pad_axis(x, axis, before, after):
    pads = [(0, 0)] * x.ndim
    pads[axis] = (before, after)

    def backward(g):
        return (slice_axis(g, axis, before, before + x.shape[axis]),)

    return Tensor._from_op(np.pad(x.data, pads), (x,), backward, "pad")


def pad2d(x, p):
    """Zero-pad the last two axes of an NCHW tensor by p on each side."""
    if p == 0:
        return x
    pads = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]

    def backward(g):
        idx = [slice(None)] * (x.ndim - 2) + [slice(p, p + x.shape[-2]),
                                              slice(p, p + x.shape[-1])]
        return (_index2d(g, tuple(idx), x.shape, p),)

    return Tensor._from_op(np.pad(x.data, pads), (x,), backward, "pad2d")


def _index2d(x, idx, shape, p):
    def backward(g):
        return (pad2d(g, p),)

    return Tensor._from_op(x.data[idx], (x,), backward, "crop2d")


# -- im2col / col2im: the linear pair underlying conv2d ------------------

def _patch_view(data, k, stride):
    b, c, h, w = data.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    sb, sc, sh, sw = data.strides
    view = np.lib.stride_tricks.as_strided(
        data, (b, c, k, k, ho, wo),
        (sb, sc, sh, sw, sh * stride, sw * stride), writeable=False)
    return view, ho, wo


def im2col(x, k, stride=1):
    """(B,C,H,W) -> (B, C*k*k, Ho*Wo) patch matrix (channel-major)."""
    b, c, h, w = x.shape
    view, ho, wo = _patch_view(x.data, k, stride)
    cols = view.reshape(b, c * k * k, ho * wo)
    meta = (b, c, h, w, k, stride, ho, wo)

    def backward(g):
        return (col2im(g, meta),)

    return Tensor._from_op(cols, (x,), backward, "im2col"), ho, wo


def col2im(cols, meta):
    """Adjoint of im2col: scatter-add patches back to (B,C,H,W)."""
    b, c, h, w, k, stride, ho, wo = meta
    out = np.zeros((b, c, h, w), dtype=cols.dtype)
    patches = cols.data.reshape(b, c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                patches[:, :, i, j]

    def backward(g):
        col, _, _ = im2col(g, k, stride)
        return (col,)

    return Tensor._from_op(out, (cols,), backward, "col2im")


# During a grad() pass this holds the set of node ids the gradient must
# reach; expensive backward rules consult it to skip dead branches (e.g.
# weight gradients while differentiating w.r.t. the critic input).
_NEEDED_STACK = []


def _branch_needed(t):
    return not _NEEDED_STACK or id(t) in _NEEDED_STACK[-1]


def bmatmul(a, b):
    """Broadcast batched matmul: (m,k) @ (B,k,n) -> (B,m,n)."""
    if a.ndim != 2 or b.ndim != 3 or a.shape[1] != b.shape[1]:
        raise GraphError(f"bmatmul: bad shapes {a.shape} @ {b.shape}")

    def backward(g):
        ga = bmatmul_reduce(g, b) if _branch_needed(a) else None
        gb = bmatmul(transpose(a), g) if _branch_needed(b) else None
        return ga, gb

    return Tensor._from_op(np.matmul(a.data, b.data), (a, b), backward,
                           "bmatmul")


def bmatmul_reduce(g, b):
    """sum_i g[i] @ b[i].T for g:(B,m,n), b:(B,k,n) -> (m,k)."""
    data = np.tensordot(g.data, b.data, axes=([0, 2], [0, 2]))

    def backward(gg):
        gg_g = bmatmul(gg, b) if _branch_needed(g) else None
        gg_b = bmatmul(transpose(gg), g) if _branch_needed(b) else None
        return gg_g, gg_b

    return Tensor._from_op(data, (g, b), backward, "bmatmul_reduce")


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D convolution (cross-correlation), NCHW layout.

    weight: (C_out, C_in, k, k); bias: (C_out,) or None.
    Built from im2col + batched matmul so every derivative order is
    available.
    """
    if x.ndim != 4:
        raise GraphError(f"conv2d: expected NCHW input, got shape {x.shape}")
    co, ci, k, k2 = weight.shape
    if k != k2:
        raise GraphError("conv2d: only square kernels supported")
    if x.shape[1] != ci:
        raise GraphError(f"conv2d: input has {x.shape[1]} channels, "
                         f"weight expects {ci}")
    xp = pad2d(x, padding)
    b = x.shape[0]
    if k == 1 and stride == 1:
        # 1x1 conv: the patch matrix is just a reshape
        ho, wo = xp.shape[2], xp.shape[3]
        cols = reshape(xp, (b, ci, ho * wo))
    else:
        cols, ho, wo = im2col(xp, k, stride)
    wmat = reshape(weight, (co, ci * k * k))
    out = bmatmul(wmat, cols)                      # (B, C_out, Ho*Wo)
    if bias is not None:
        out = add(out, broadcast_to(reshape(bias, (1, co, 1)), out.shape))
    return reshape(out, (b, co, ho, wo))


def upsample2x(x):
    """Nearest-neighbour 2x upsample of an NCHW tensor."""
    data = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def backward(g):
        return (blocksum2x(g),)

    return Tensor._from_op(data, (x,), backward, "upsample2x")


def blocksum2x(x):
    """Sum over non-overlapping 2x2 blocks; adjoint of upsample2x."""
    b, c, h, w = x.shape
    data = x.data.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))

    def backward(g):
        return (upsample2x(g),)

    return Tensor._from_op(data, (x,), backward, "blocksum2x")


def norm(x, eps=1e-12):
    """Euclidean norm over all elements, smoothed at zero."""
    return sqrt(tsum(square(x)) + _wrap(eps, x.dtype))


# -- the backward pass ----------------------------------------------------

def _toposort(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output, wrt, create_graph=False):
    """Gradients of a scalar `output` w.r.t. each tensor in `wrt`.

    Returns one Tensor per entry of wrt; unused entries get zeros. With
    create_graph=True the returned gradients are themselves recorded and
    can be differentiated again.
    """
    if output.shape != ():
        raise GraphError(f"grad: output must be a scalar, got shape {output.shape}")
    if not output.requires_grad:
        raise GraphError("grad: output was not recorded on a graph "
                         "(built under no_grad or from constants only)")
    wrt = list(wrt)
    order = _toposort(output)
    # nodes whose value depends on some wrt tensor; gradient only has to
    # flow through these, so everything else (e.g. frozen-weight subtrees
    # during an input-gradient pass) is skipped entirely
    needed = {id(t) for t in wrt}
    for node in order:          # parents precede children in postorder
        if id(node) not in needed:
            if any(id(p) in needed for p in node._parents):
                needed.add(id(node))
    grads = {id(output): Tensor(np.ones((), dtype=output.dtype))}

    ctx = no_grad() if not create_graph else _nullcontext()
    _NEEDED_STACK.append(needed)
    try:
        with ctx:
            for node in reversed(order):
                g = grads.get(id(node))
                if (g is None or node._backward is None
                        or id(node) not in needed):
                    continue
                parent_grads = node._backward(g)
                for p, pg in zip(node._parents, parent_grads):
                    if (pg is None or not p.requires_grad
                            or id(p) not in needed):
                        continue
                    if id(p) in grads:
                        grads[id(p)] = add(grads[id(p)], pg)
                    else:
                        grads[id(p)] = pg
    finally:
        _NEEDED_STACK.pop()

    out = []
    for t in wrt:
        g = grads.get(id(t))
        if g is None:
            g = Tensor(np.zeros(t.shape, dtype=t.dtype))
        out.append(g)
    return out


class _nullcontext:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def finite_diff_grad(f, x, eps=1e-5):
    """Central-difference gradient of a scalar function f at point x.

    Test/acceptance oracle only; independent of the tape machinery.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * eps)
    return g
