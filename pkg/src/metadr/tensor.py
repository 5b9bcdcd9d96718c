"""Reverse-mode automatic differentiation over dense numpy-backed tensors.

The graph is define-by-run: every operation links its output to its inputs
and stores a vector-Jacobian-product (vjp) closure. Crucially, every vjp is
itself expressed in terms of the ops defined here, so running ``grad`` with
``create_graph=True`` records the backward pass and the resulting gradients
can be differentiated again (gradient-of-a-gradient, Hessian-vector
products).

Supported dtypes are float32 and float64. Training code uses float32;
verification (finite-difference checks) uses float64.

ReLU is treated as having zero second derivative everywhere, including at
the kink; finite-difference checks must exclude inputs at the kink.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "tensor",
    "grad",
    "hvp",
    "no_grad",
    "checked",
    "record_op",
    "add",
    "sub",
    "neg",
    "scalar_mul",
    "mul",
    "matmul",
    "transpose",
    "reshape",
    "flatten",
    "broadcast_to",
    "sum_axes",
    "tsum",
    "tmean",
    "relu",
    "bias_add",
    "pad2d",
    "crop2d",
    "conv2d",
    "maxpool2d",
    "softmax_rows",
    "softmax_cross_entropy",
]

_DTYPES = (np.float32, np.float64)

# Module-level switches. Single-writer by design: one graph is built at a
# time (see the concurrency notes in the README).
_grad_enabled = True
_check_finite = False


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def _grad_mode(enabled: bool):
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = enabled
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def checked():
    """Raise FloatingPointError if any op produces NaN/Inf inside the block."""
    global _check_finite
    prev = _check_finite
    _check_finite = True
    try:
        yield
    finally:
        _check_finite = prev


class Tensor:
    """A dense n-d array that may participate in a differentiable graph.

    A Tensor without parents is a leaf; leaves with ``requires_grad=True``
    are the differentiation sources (model parameters). Non-leaf tensors
    hold references to their inputs and a vjp closure.
    """

    __slots__ = ("data", "requires_grad", "parents", "vjp", "op")

    def __init__(
        self,
        data: np.ndarray,
        requires_grad: bool = False,
        parents: tuple = (),
        vjp: Optional[Callable] = None,
        op: str = "leaf",
    ):
        self.data = data
        self.requires_grad = requires_grad
        self.parents = parents
        self.vjp = vjp
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, dtype={self.dtype.name})"


def tensor(data, dtype=None, requires_grad: bool = False) -> Tensor:
    """Create a leaf tensor. dtype defaults to float64 for python input,
    or is taken from the array."""
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        arr = arr.astype(np.float64)
    return Tensor(arr, requires_grad=requires_grad)


def _out(data: np.ndarray, parents: Sequence[Tensor], vjp, op: str) -> Tensor:
    if _check_finite and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), vjp, op)
    return Tensor(data, False)


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise ValueError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _out(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _out(a.data - b.data, (a, b), lambda g: (g, neg(g)), "sub")


def neg(a: Tensor) -> Tensor:
    return scalar_mul(-1.0, a)


def scalar_mul(c: float, a: Tensor) -> Tensor:
    c = float(c)
    return _out(
        (a.data * a.dtype.type(c)), (a,), lambda g: (scalar_mul(c, g),), "scalar_mul"
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product. Shapes must match, or one operand must be a
    single-element tensor (scalar broadcast)."""
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise ValueError(f"mul: dtype mismatch {a.dtype} vs {b.dtype}")

    def vjp(g):
        ga = mul(g, b)
        gb = mul(g, a)
        if a.shape != ga.shape:
            ga = reshape(tsum(ga), a.shape)
        if b.shape != gb.shape:
            gb = reshape(tsum(gb), b.shape)
        return ga, gb

    return _out(a.data * b.data, (a, b), vjp, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul: 2-D operands only")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dims differ {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise ValueError("matmul: dtype mismatch")
    return _out(
        a.data @ b.data,
        (a, b),
        lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)),
        "matmul",
    )


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError("transpose: 2-D only")
    return _out(
        np.ascontiguousarray(a.data.T), (a,), lambda g: (transpose(g),), "transpose"
    )


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    orig = a.shape
    return _out(
        np.ascontiguousarray(a.data).reshape(shape),
        (a,),
        lambda g: (reshape(g, orig),),
        "reshape",
    )


def flatten(a: Tensor) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    n = a.shape[0]
    return reshape(a, (n, int(a.size // n)))


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    orig = a.shape
    data = np.broadcast_to(a.data, shape)

    def vjp(g):
        ndiff = len(shape) - len(orig)
        axes = tuple(range(ndiff)) + tuple(
            i + ndiff for i, d in enumerate(orig) if d == 1 and shape[i + ndiff] != 1
        )
        r = sum_axes(g, axes) if axes else g
        return (reshape(r, orig),)

    return _out(np.ascontiguousarray(data), (a,), vjp, "broadcast_to")


def sum_axes(a: Tensor, axes) -> Tensor:
    """Sum over the given axes, keeping reduced dims (size 1)."""
    axes = tuple(axes)
    orig = a.shape
    return _out(
        a.data.sum(axis=axes, keepdims=True),
        (a,),
        lambda g: (broadcast_to(g, orig),),
        "sum_axes",
    )


def tsum(a: Tensor) -> Tensor:
    orig = a.shape
    return _out(
        np.asarray(a.data.sum(), dtype=a.dtype),
        (a,),
        lambda g: (broadcast_to(g, orig),),
        "sum",
    )


def tmean(a: Tensor) -> Tensor:
    return scalar_mul(1.0 / a.size, tsum(a))


def relu(a: Tensor) -> Tensor:
    # Mask is captured as a constant: second derivative is defined to be
    # zero everywhere, including the kink.
    mask = Tensor((a.data > 0).astype(a.dtype))
    return _out(a.data * mask.data, (a,), lambda g: (mul(g, mask),), "relu")


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a 1-D bias to the trailing axis of a 2-D tensor."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ValueError(f"bias_add: incompatible shapes {x.shape}, {b.shape}")
    return add(x, broadcast_to(reshape(b, (1, b.shape[0])), x.shape))


# ---------------------------------------------------------------------------
# spatial ops (NCHW)


def pad2d(a: Tensor, p: int) -> Tensor:
    """Zero-pad the trailing two axes by p on each side."""
    if p == 0:
        return a
    shape = a.shape[:-2] + (a.shape[-2] + 2 * p, a.shape[-1] + 2 * p)
    data = np.zeros(shape, dtype=a.dtype)
    data[..., p:-p, p:-p] = a.data
    return _out(data, (a,), lambda g: (crop2d(g, p),), "pad2d")


def crop2d(a: Tensor, p: int) -> Tensor:
    if p == 0:
        return a
    return _out(
        np.ascontiguousarray(a.data[..., p:-p, p:-p]),
        (a,),
        lambda g: (pad2d(g, p),),
        "crop2d",
    )


def _flip_kernel(w: Tensor) -> Tensor:
    """Spatially flip a (oc, ic, k, k) kernel and swap its channel axes.
    Self-adjoint, so its vjp is itself."""
    data = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].swapaxes(0, 1))
    return _out(data, (w,), lambda g: (_flip_kernel(g),), "flip_kernel")


def _im2col(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    """Columns of all kxk windows, shaped (c*k*k, n*oh*ow). Built from
    k*k contiguous slice copies, which beats a strided gather."""
    if pad:
        x = np.pad(x, [(0, 0), (0, 0), (pad, pad), (pad, pad)])
    n, c, h, w = x.shape
    oh, ow = h - k + 1, w - k + 1
    buf = np.empty((c, k, k, n, oh, ow), dtype=x.dtype)
    xt = x.transpose(1, 0, 2, 3)
    for i in range(k):
        for j in range(k):
            buf[:, i, j] = xt[:, :, i : i + oh, j : j + ow]
    return buf.reshape(c * k * k, n * oh * ow)


def _conv_forward(x: np.ndarray, w: np.ndarray, pad: int) -> np.ndarray:
    n = x.shape[0]
    oc, c, k, _ = w.shape
    oh = x.shape[2] + 2 * pad - k + 1
    ow = x.shape[3] + 2 * pad - k + 1
    if oc < c:
        # Few output channels: one wide GEMM beats n batched ones, and the
        # final layout transpose is cheap.
        out = w.reshape(oc, c * k * k) @ _im2col(x, k, pad)
        return np.ascontiguousarray(out.reshape(oc, n, oh, ow).transpose(1, 0, 2, 3))
    if pad:
        x = np.pad(x, [(0, 0), (0, 0), (pad, pad), (pad, pad)])
    buf = np.empty((n, c, k, k, oh, ow), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            buf[:, :, i, j] = x[:, :, i : i + oh, j : j + ow]
    out = np.matmul(w.reshape(oc, c * k * k), buf.reshape(n, c * k * k, oh * ow))
    return out.reshape(n, oc, oh, ow)


def conv2d(x: Tensor, w: Tensor, pad: int = 0) -> Tensor:
    """2-D cross-correlation, stride 1, zero padding. x: (n,c,h,w),
    w: (oc,c,k,k), square kernels of side <= 5."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError("conv2d: expected 4-D input and kernel")
    oc, ic, k, k2 = w.shape
    if k != k2 or k > 5:
        raise ValueError("conv2d: square kernels of side <= 5 only")
    if ic != x.shape[1]:
        raise ValueError(f"conv2d: channel mismatch {x.shape} vs {w.shape}")
    if x.dtype != w.dtype:
        raise ValueError("conv2d: dtype mismatch")

    def vjp(g):
        gx = conv2d(pad2d(g, k - 1 - pad), _flip_kernel(w)) if x.requires_grad else None
        gw = _conv_wgrad(x, g, k, pad) if w.requires_grad else None
        return gx, gw

    return _out(_conv_forward(x.data, w.data, pad), (x, w), vjp, "conv2d")


def _conv_wgrad(x: Tensor, g: Tensor, k: int, pad: int) -> Tensor:
    """Gradient of conv2d w.r.t. the kernel: correlate input with the
    output adjoint. Bilinear in (x, g), so its own vjp routes back through
    conv2d and itself."""
    oc, c = g.shape[1], x.shape[1]
    cols = _im2col(x.data, k, pad)  # (c*k*k, n*oh*ow)
    gmat = np.ascontiguousarray(g.data.transpose(1, 0, 2, 3)).reshape(oc, -1)
    dw = (gmat @ cols.T).reshape(oc, c, k, k)

    def vjp(u):
        gx = conv2d(pad2d(g, k - 1 - pad), _flip_kernel(u)) if x.requires_grad else None
        gg = conv2d(x, u, pad=pad) if g.requires_grad else None
        return gx, gg

    return _out(dw, (x, g), vjp, "conv_wgrad")


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; trailing odd rows/cols are dropped."""
    if x.data.ndim != 4:
        raise ValueError("maxpool2d: expected 4-D input")
    n, c, h, w = x.shape
    oh, ow = h // 2, w // 2
    s = x.data[:, :, : 2 * oh, : 2 * ow].reshape(n, c, oh, 2, ow, 2)
    c0, c1, c2, c3 = s[:, :, :, 0, :, 0], s[:, :, :, 0, :, 1], s[:, :, :, 1, :, 0], s[:, :, :, 1, :, 1]
    mx = np.maximum(np.maximum(c0, c1), np.maximum(c2, c3))
    # First-match argmax over the 2x2 window, via comparisons (faster than
    # ndarray.argmax on the stacked candidates).
    sel = np.where(c0 >= mx, 0, np.where(c1 >= mx, 1, np.where(c2 >= mx, 2, 3)))
    # Flat index of each selected element in the *original* x buffer.
    ii, jj = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
    ri = 2 * ii[None, None] + sel // 2
    cj = 2 * jj[None, None] + sel % 2
    nn = np.arange(n)[:, None, None, None]
    cc = np.arange(c)[None, :, None, None]
    idx = ((nn * c + cc) * h + ri) * w + cj
    out = x.data.reshape(-1)[idx.reshape(-1)].reshape(n, c, oh, ow)
    idx_const = idx.reshape(-1)
    in_shape = x.shape
    return _out(
        out, (x,), lambda g: (_pool_scatter(g, idx_const, in_shape),), "maxpool2d"
    )


def _pool_scatter(g: Tensor, idx: np.ndarray, in_shape) -> Tensor:
    out = np.zeros(in_shape, dtype=g.dtype)
    out.reshape(-1)[idx] = g.data.reshape(-1)
    out_shape = g.shape
    return _out(
        out, (g,), lambda u: (_pool_gather(u, idx, out_shape),), "pool_scatter"
    )


def _pool_gather(u: Tensor, idx: np.ndarray, out_shape) -> Tensor:
    data = u.data.reshape(-1)[idx].reshape(out_shape)
    in_shape = u.shape
    return _out(
        data, (u,), lambda g: (_pool_scatter(g, idx, in_shape),), "pool_gather"
    )


# ---------------------------------------------------------------------------
# softmax / cross-entropy


def _softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows(z: Tensor) -> Tensor:
    p = _softmax(z.data)
    holder = []

    def vjp(u):
        pt = holder[0]
        pu = mul(pt, u)
        return (mul(pt, sub(u, broadcast_to(sum_axes(pu, (1,)), u.shape))),)

    out = _out(p, (z,), vjp, "softmax_rows")
    holder.append(out if out.requires_grad else Tensor(p))
    return out


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy between softmax(logits) and integer class labels.

    Computed via log-sum-exp; stable for logits of magnitude up to ~1e4.
    The backward pass is recorded in graph ops so double-backward works.
    """
    z = logits
    if z.data.ndim != 2:
        raise ValueError("softmax_cross_entropy: logits must be 2-D")
    y = np.asarray(labels)
    n, k = z.shape
    if y.shape != (n,):
        raise ValueError("softmax_cross_entropy: labels must be (batch,) ints")
    if y.min() < 0 or y.max() >= k:
        raise ValueError("softmax_cross_entropy: label out of range")
    m = z.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z.data - m).sum(axis=1, keepdims=True)) + m
    loss = np.asarray((lse[:, 0] - z.data[np.arange(n), y]).mean(), dtype=z.dtype)
    onehot = Tensor(np.eye(k, dtype=z.dtype.type)[y])

    def vjp(g):
        diff = sub(softmax_rows(z), onehot)
        return (mul(diff, scalar_mul(1.0 / n, g)),)

    return _out(loss, (z,), vjp, "softmax_cross_entropy")


# ---------------------------------------------------------------------------
# public op dispatcher


_RECORD_KINDS = {
    "add": add,
    "sub": sub,
    "scalar_mul": scalar_mul,
    "elementwise_mul": mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "maxpool2d": maxpool2d,
    "relu": relu,
    "flatten": flatten,
    "bias_add": bias_add,
    "softmax_cross_entropy": softmax_cross_entropy,
    "sum": tsum,
    "mean": tmean,
}


def record_op(kind: str, inputs: Iterable, attrs: Optional[dict] = None) -> Tensor:
    """Apply a supported op by name. Raises ValueError for unknown kinds."""
    fn = _RECORD_KINDS.get(kind)
    if fn is None:
        raise ValueError(f"unsupported op kind: {kind!r}")
    return fn(*inputs, **(attrs or {}))


# ---------------------------------------------------------------------------
# differentiation


def _toposort(root: Tensor) -> list:
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(
    loss: Tensor,
    params: Sequence[Tensor],
    create_graph: bool = False,
) -> list:
    """Gradients of a scalar loss w.r.t. each tensor in params.

    With ``create_graph=True`` the backward pass itself is recorded, so the
    returned gradients are differentiable. Params not reachable from the
    loss get zero gradients.
    """
    if loss.size != 1:
        raise ValueError("grad: loss must be scalar")
    params = list(params)
    order = _toposort(loss)
    adjoints = {id(loss): Tensor(np.ones((), dtype=loss.dtype))}
    if loss.shape != ():
        adjoints[id(loss)] = Tensor(np.ones(loss.shape, dtype=loss.dtype))
    wanted = {id(p) for p in params}
    with _grad_mode(create_graph):
        for node in reversed(order):
            g = adjoints.pop(id(node), None)
            if g is None:
                continue
            if id(node) in wanted:
                adjoints[id(node)] = g  # keep source adjoints
            if node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = adjoints.get(id(parent))
                adjoints[id(parent)] = pg if prev is None else add(prev, pg)
    out = []
    for p in params:
        g = adjoints.get(id(p))
        if g is None:
            g = Tensor(np.zeros(p.shape, dtype=p.dtype))
        out.append(g if create_graph else g.detach())
    return out


def hvp(loss: Tensor, params: Sequence[Tensor], vs: Sequence[Tensor]) -> list:
    """Hessian-vector product: grad of (grad(loss) . v) w.r.t. params."""
    params = list(params)
    vs = list(vs)
    if len(params) != len(vs):
        raise ValueError("hvp: params and vs must align")
    gs = grad(loss, params, create_graph=True)
    dot = None
    for g, v in zip(gs, vs):
        if g.shape != v.shape:
            raise ValueError(f"hvp: shape mismatch {g.shape} vs {v.shape}")
        term = tsum(mul(g, v.detach()))
        dot = term if dot is None else add(dot, term)
    return grad(dot, params)
