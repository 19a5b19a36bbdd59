"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

The backward pass is itself expressed through the public ops, so gradients
requested with ``create_graph=True`` are tracked tensors that can be
differentiated again. This is what lets an unrolled inner optimization loop
(parameters updated by gradient steps) be differentiated end to end.

Broadcasting is deliberately restricted: binary elementwise ops accept equal
shapes, or a size-1 operand against anything. Any other shape adaptation must
be done explicitly with ``reshape`` / ``broadcast_to``.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager, nullcontext

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "GradError",
    "tensor",
    "no_grad",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "broadcast_to",
    "take",
    "put_add",
    "exp",
    "log",
    "recip",
    "relu",
    "sign",
    "clamp",
    "sum",
    "sum_axis",
    "mean",
    "flatten",
    "conv2d",
    "maxpool2d",
    "softmax_cross_entropy",
    "kl_div",
    "grad",
    "finite_diff_check",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for a primitive."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        pretty = " and ".join(str(s) for s in self.shapes)
        super().__init__(f"primitive '{op}': shapes {pretty} do not conform")


class GradError(ValueError):
    """Raised when a gradient request violates the tracking contract."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    """One recorded primitive: parent tensors plus a rule that maps the
    incoming gradient to per-parent gradients (emitted as new tensors)."""

    __slots__ = ("op", "parents", "vjp")

    def __init__(self, op, parents, vjp):
        self.op = op
        self.parents = parents
        self.vjp = vjp


class Tensor:
    """Dense float64 array, optionally attached to a gradient graph node."""

    __slots__ = ("data", "node")

    def __init__(self, data: np.ndarray, node: Node | None = None):
        self.data = data
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def tracked(self) -> bool:
        return self.node is not None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detached(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = ", tracked" if self.tracked else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def tensor(values, track: bool = False) -> Tensor:
    """Build a tensor from array-like values. ``track=True`` makes it a leaf
    of the gradient graph."""
    data = np.ascontiguousarray(np.asarray(values, dtype=np.float64))
    if track and _grad_enabled():
        return Tensor(data, Node("leaf", (), None))
    return Tensor(data)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return tensor(x)


def _result(op: str, data: np.ndarray, parents, vjp_builder) -> Tensor:
    """Wrap op output; record a node only when tracking is on and some parent
    participates in a graph."""
    if _grad_enabled() and any(p.node is not None for p in parents):
        out = Tensor(data, None)
        out.node = Node(op, tuple(parents), vjp_builder(out))
        return out
    return Tensor(data)


def _reduce_to_scalar_shape(g: Tensor, shape) -> Tensor:
    # gradient of a size-1 operand that was broadcast: collapse then reshape
    return reshape(sum(g), shape)


def _binary_shapes(op: str, a: Tensor, b: Tensor):
    if a.shape == b.shape:
        return a.shape
    if a.size == 1 or b.size == 1:
        return b.shape if a.size == 1 else a.shape
    raise ShapeError(op, a.shape, b.shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_shape = _binary_shapes("add", a, b)

    def vjp_builder(out):
        def vjp(g):
            ga = gb = None
            if a.node is not None:
                ga = g if a.shape == out_shape else _reduce_to_scalar_shape(g, a.shape)
            if b.node is not None:
                gb = g if b.shape == out_shape else _reduce_to_scalar_shape(g, b.shape)
            return ga, gb

        return vjp

    return _result("add", a.data + b.data, (a, b), vjp_builder)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_shape = _binary_shapes("sub", a, b)

    def vjp_builder(out):
        def vjp(g):
            ga = gb = None
            if a.node is not None:
                ga = g if a.shape == out_shape else _reduce_to_scalar_shape(g, a.shape)
            if b.node is not None:
                gb = neg(g) if b.shape == out_shape else _reduce_to_scalar_shape(neg(g), b.shape)
            return ga, gb

        return vjp

    return _result("sub", a.data - b.data, (a, b), vjp_builder)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_shape = _binary_shapes("mul", a, b)

    def vjp_builder(out):
        def vjp(g):
            ga = gb = None
            if a.node is not None:
                ga = mul(g, b)
                if a.shape != out_shape:
                    ga = _reduce_to_scalar_shape(ga, a.shape)
            if b.node is not None:
                gb = mul(g, a)
                if b.shape != out_shape:
                    gb = _reduce_to_scalar_shape(gb, b.shape)
            return ga, gb

        return vjp

    return _result("mul", a.data * b.data, (a, b), vjp_builder)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def vjp_builder(out):
        return lambda g: (neg(g),)

    return _result("neg", -a.data, (a,), vjp_builder)


def scale(a, c: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    a = _as_tensor(a)
    c = float(c)

    def vjp_builder(out):
        return lambda g: (scale(g, c),)

    return _result("scale", a.data * c, (a,), vjp_builder)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def vjp_builder(out):
        def vjp(g):
            ga = matmul(g, transpose(b)) if a.node is not None else None
            gb = matmul(transpose(a), g) if b.node is not None else None
            return ga, gb

        return vjp

    return _result("matmul", a.data @ b.data, (a, b), vjp_builder)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("transpose", a.shape)

    def vjp_builder(out):
        return lambda g: (transpose(g),)

    return _result("transpose", np.ascontiguousarray(a.data.T), (a,), vjp_builder)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    in_shape = a.shape

    def vjp_builder(out):
        return lambda g: (reshape(g, in_shape),)

    return _result("reshape", np.ascontiguousarray(data), (a,), vjp_builder)


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    try:
        data = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    except ValueError:
        raise ShapeError("broadcast_to", a.shape, shape) from None
    in_shape = a.shape

    def vjp_builder(out):
        def vjp(g):
            pad = len(shape) - len(in_shape)
            axes = tuple(range(pad)) + tuple(
                pad + i for i, s in enumerate(in_shape) if s == 1 and shape[pad + i] != 1
            )
            gr = sum_axis(g, axes, keepdims=True) if axes else g
            return (reshape(gr, in_shape),)

        return vjp

    return _result("broadcast_to", data, (a,), vjp_builder)


def take(a, idx: np.ndarray) -> Tensor:
    """Gather by flat indices into the row-major flattening of ``a``.

    The index array is a constant: gradients flow to ``a`` only.
    """
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    size = a.size

    def vjp_builder(out):
        def vjp(g):
            return (reshape(put_add(g, idx, size), a.shape),)

        return vjp

    return _result("take", a.data.reshape(-1)[idx], (a,), vjp_builder)


def put_add(v, idx: np.ndarray, size: int) -> Tensor:
    """Scatter-add ``v`` into a zero vector of the given length; duplicate
    indices accumulate. Exact adjoint of ``take``."""
    v = _as_tensor(v)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.shape != v.shape:
        raise ShapeError("put_add", v.shape, idx.shape)
    data = np.zeros(int(size), dtype=np.float64)
    np.add.at(data, idx.reshape(-1), v.data.reshape(-1))

    def vjp_builder(out):
        return lambda g: (take(g, idx),)

    return _result("put_add", data, (v,), vjp_builder)


def exp(a) -> Tensor:
    a = _as_tensor(a)

    def vjp_builder(out):
        return lambda g: (mul(g, out),)

    return _result("exp", np.exp(a.data), (a,), vjp_builder)


def log(a) -> Tensor:
    a = _as_tensor(a)

    def vjp_builder(out):
        return lambda g: (mul(g, recip(a)),)

    return _result("log", np.log(a.data), (a,), vjp_builder)


def recip(a) -> Tensor:
    a = _as_tensor(a)

    def vjp_builder(out):
        return lambda g: (neg(mul(g, mul(out, out))),)

    return _result("recip", 1.0 / a.data, (a,), vjp_builder)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = (a.data > 0).astype(np.float64)

    def vjp_builder(out):
        return lambda g: (mul(g, Tensor(mask)),)

    return _result("relu", a.data * mask, (a,), vjp_builder)


def sign(a) -> Tensor:
    """Elementwise sign with zero gradient everywhere (subgradient convention)."""
    a = _as_tensor(a)

    def vjp_builder(out):
        return lambda g: (scale(g, 0.0),)

    return _result("sign", np.sign(a.data), (a,), vjp_builder)


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to [lo, hi]; gradient passes where the input lies strictly inside
    (boundary values included), zero outside."""
    a = _as_tensor(a)
    data = np.clip(a.data, lo, hi)
    inside = np.ones_like(a.data)
    if lo is not None:
        inside = inside * (a.data >= lo)
    if hi is not None:
        inside = inside * (a.data <= hi)

    def vjp_builder(out):
        return lambda g: (mul(g, Tensor(inside)),)

    return _result("clamp", data, (a,), vjp_builder)


def sum(a) -> Tensor:  # noqa: A001 - deliberate, mirrors the op family name
    a = _as_tensor(a)
    in_shape = a.shape

    def vjp_builder(out):
        return lambda g: (broadcast_to(g, in_shape),)

    return _result("sum", np.asarray(np.sum(a.data)), (a,), vjp_builder)


def sum_axis(a, axis, keepdims: bool = True) -> Tensor:
    a = _as_tensor(a)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    in_shape = a.shape
    data = np.sum(a.data, axis=axes, keepdims=keepdims)
    kept_shape = tuple(1 if i in {ax % len(in_shape) for ax in axes} else s
                       for i, s in enumerate(in_shape))

    def vjp_builder(out):
        def vjp(g):
            gk = g if keepdims else reshape(g, kept_shape)
            return (broadcast_to(gk, in_shape),)

        return vjp

    return _result("sum_axis", np.ascontiguousarray(data), (a,), vjp_builder)


def mean(a) -> Tensor:
    a = _as_tensor(a)
    return scale(sum(a), 1.0 / a.size)


def flatten(a) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    a = _as_tensor(a)
    if a.ndim < 2:
        raise ShapeError("flatten", a.shape)
    return reshape(a, (a.shape[0], -1))


# -- convolution / pooling ---------------------------------------------------
#
# conv2d is lowered to gather -> matmul -> gather (im2col); every stage is a
# differentiable primitive, so second-order gradients come for free. Index
# arrays depend only on shapes and are cached.

_index_cache: dict = {}


def _pad_scatter_idx(b, c, h, w, p):
    key = ("pad", b, c, h, w, p)
    hit = _index_cache.get(key)
    if hit is not None:
        return hit
    hp, wp = h + 2 * p, w + 2 * p
    bi = np.arange(b).reshape(b, 1, 1, 1)
    ci = np.arange(c).reshape(1, c, 1, 1)
    hi = np.arange(h).reshape(1, 1, h, 1) + p
    wi = np.arange(w).reshape(1, 1, 1, w) + p
    idx = ((bi * c + ci) * hp + hi) * wp + wi
    idx = np.ascontiguousarray(np.broadcast_to(idx, (b, c, h, w)))
    _index_cache[key] = (idx, b * c * hp * wp, (b, c, hp, wp))
    return _index_cache[key]


def _im2col_idx(b, c, h, w, kh, kw, stride):
    key = ("col", b, c, h, w, kh, kw, stride)
    hit = _index_cache.get(key)
    if hit is not None:
        return hit
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    bi = np.arange(b).reshape(b, 1, 1, 1, 1, 1)
    oi = np.arange(oh).reshape(1, oh, 1, 1, 1, 1) * stride
    oj = np.arange(ow).reshape(1, 1, ow, 1, 1, 1) * stride
    ci = np.arange(c).reshape(1, 1, 1, c, 1, 1)
    ki = np.arange(kh).reshape(1, 1, 1, 1, kh, 1)
    kj = np.arange(kw).reshape(1, 1, 1, 1, 1, kw)
    idx = ((bi * c + ci) * h + (oi + ki)) * w + (oj + kj)
    idx = np.ascontiguousarray(
        np.broadcast_to(idx, (b, oh, ow, c, kh, kw)).reshape(b * oh * ow, c * kh * kw)
    )
    _index_cache[key] = (idx, oh, ow)
    return _index_cache[key]


def _nhwc_to_nchw_idx(b, cout, oh, ow):
    key = ("perm", b, cout, oh, ow)
    hit = _index_cache.get(key)
    if hit is not None:
        return hit
    bi = np.arange(b).reshape(b, 1, 1, 1)
    ci = np.arange(cout).reshape(1, cout, 1, 1)
    hi = np.arange(oh).reshape(1, 1, oh, 1)
    wi = np.arange(ow).reshape(1, 1, 1, ow)
    idx = ((bi * oh + hi) * ow + wi) * cout + ci
    idx = np.ascontiguousarray(np.broadcast_to(idx, (b, cout, oh, ow)))
    _index_cache[key] = idx
    return idx


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. ``x``: (B, C, H, W); ``w``: (Cout, C, kh, kw)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    b, c, h, wd = x.shape
    cout, _, kh, kw = w.shape
    if padding:
        idx, size, padded_shape = _pad_scatter_idx(b, c, h, wd, padding)
        x = reshape(put_add(x, idx, size), padded_shape)
        b, c, h, wd = padded_shape
    if h < kh or wd < kw:
        raise ShapeError("conv2d", x.shape, w.shape)
    col_idx, oh, ow = _im2col_idx(b, c, h, wd, kh, kw, stride)
    cols = take(x, col_idx)                      # (B*OH*OW, C*kh*kw)
    w2 = reshape(w, (cout, c * kh * kw))
    out = matmul(cols, transpose(w2))            # (B*OH*OW, Cout)
    perm = _nhwc_to_nchw_idx(b, cout, oh, ow)
    return take(out, perm)                       # (B, Cout, OH, OW)


def maxpool2d(x, kernel: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing rows/cols that do not fill a
    window are dropped. Ties go to the first element in row-major order."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("maxpool2d", x.shape)
    b, c, h, w = x.shape
    k = int(kernel)
    oh, ow = h // k, w // k
    if oh < 1 or ow < 1:
        raise ShapeError("maxpool2d", x.shape, (k, k))
    key = ("pool", b, c, h, w, k)
    hit = _index_cache.get(key)
    if hit is None:
        bi = np.arange(b).reshape(b, 1, 1, 1, 1, 1)
        ci = np.arange(c).reshape(1, c, 1, 1, 1, 1)
        oi = np.arange(oh).reshape(1, 1, oh, 1, 1, 1) * k
        oj = np.arange(ow).reshape(1, 1, 1, ow, 1, 1) * k
        ki = np.arange(k).reshape(1, 1, 1, 1, k, 1)
        kj = np.arange(k).reshape(1, 1, 1, 1, 1, k)
        idx = ((bi * c + ci) * h + (oi + ki)) * w + (oj + kj)
        idx = np.ascontiguousarray(
            np.broadcast_to(idx, (b, c, oh, ow, k, k)).reshape(b, c, oh, ow, k * k)
        )
        _index_cache[key] = idx
        hit = idx
    patches = x.data.reshape(-1)[hit]            # (B, C, OH, OW, k*k)
    winners = np.argmax(patches, axis=-1)        # first max in row-major order
    win_idx = np.take_along_axis(hit, winners[..., None], axis=-1)[..., 0]
    return take(x, win_idx)


def _log_softmax(logits: Tensor) -> Tensor:
    shift = Tensor(np.max(logits.data, axis=1, keepdims=True))  # constant shift
    z = sub(logits, broadcast_to(shift, logits.shape))
    lse = add(log(sum_axis(exp(z), 1)), shift)                  # (B, 1)
    return sub(logits, broadcast_to(lse, logits.shape))


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of row-wise softmax against integer labels.

    ``logits``: (B, N) or (N,); ``labels``: int array-like of length B.
    """
    logits = _as_tensor(logits)
    if logits.ndim == 1:
        logits = reshape(logits, (1, logits.size))
    if logits.ndim != 2:
        raise ShapeError("softmax_cross_entropy", logits.shape)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    bsz, n = logits.shape
    if labels.shape != (bsz,) or labels.min() < 0 or labels.max() >= n:
        raise ShapeError("softmax_cross_entropy", logits.shape, labels.shape)
    logp = _log_softmax(logits)
    picked = take(logp, (np.arange(bsz) * n + labels).reshape(bsz, 1))
    return scale(sum(picked), -1.0 / bsz)


def kl_div(p_logits, q_logits) -> Tensor:
    """Mean KL(softmax(p) || softmax(q)) over the batch."""
    p_logits, q_logits = _as_tensor(p_logits), _as_tensor(q_logits)
    if p_logits.shape != q_logits.shape or p_logits.ndim != 2:
        raise ShapeError("kl_div", p_logits.shape, q_logits.shape)
    lp = _log_softmax(p_logits)
    lq = _log_softmax(q_logits)
    per_row = sum_axis(mul(exp(lp), sub(lp, lq)), 1)
    return scale(sum(per_row), 1.0 / p_logits.shape[0])


# -- gradients ----------------------------------------------------------------


def _toposort(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.node is not None and id(p.node) not in seen:
                stack.append((p.node, False))
    return order


def grad(output: Tensor, inputs, create_graph: bool = False) -> list[Tensor]:
    """Gradients of a scalar tracked output with respect to tracked inputs.

    With ``create_graph=True`` the returned tensors are themselves tracked,
    so they can be differentiated again.
    """
    if not isinstance(output, Tensor) or output.node is None:
        raise GradError("output is not tracked")
    if output.size != 1:
        raise GradError(f"output must be scalar, got shape {output.shape}")
    inputs = list(inputs)
    for i, inp in enumerate(inputs):
        if not isinstance(inp, Tensor) or inp.node is None:
            raise GradError(f"input {i} is not tracked")

    order = _toposort(output.node)
    in_graph = {id(n) for n in order}
    for i, inp in enumerate(inputs):
        if id(inp.node) not in in_graph:
            raise GradError(f"input {i} is not reachable from output")

    grads: dict[int, Tensor] = {id(output.node): Tensor(np.ones_like(output.data))}
    ctx = nullcontext() if create_graph else no_grad()
    with ctx:
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if parent.node is None or pg is None:
                    continue
                pid = id(parent.node)
                held = grads.get(pid)
                grads[pid] = pg if held is None else add(held, pg)
    return [grads[id(inp.node)] for inp in inputs]


def finite_diff_check(f, point: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between the analytic gradient of ``f`` at ``point``
    and central finite differences, coordinate by coordinate.

    Relative error per coordinate is |analytic - fd| / max(1, |analytic|);
    non-finite values count as infinite error.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = tensor(point.data.copy(), track=True)
    analytic = grad(f(x), [x])[0].data.reshape(-1)
    flat = point.data.reshape(-1).copy()
    worst = 0.0
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        hi = f(tensor(flat.reshape(point.shape), track=True)).item()
        flat[i] = saved - eps
        lo = f(tensor(flat.reshape(point.shape), track=True)).item()
        flat[i] = saved
        fd = (hi - lo) / (2.0 * eps)
        a = analytic[i]
        if not (np.isfinite(a) and np.isfinite(fd)):
            return float("inf")
        err = abs(a - fd) / max(1.0, abs(a))
        worst = max(worst, err)
    return worst
