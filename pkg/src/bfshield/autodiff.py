"""Static computation graphs with reverse-mode differentiation.

Dense tensors are plain numpy arrays (shape/data/dtype are the array's own);
a graph is an immutable DAG of `Node` objects built once and evaluated many
times against fresh input bindings. Evaluation state (cached activations,
adjoints) lives in a per-call `Context`, never on the graph, so one graph can
be shared across workers.

Conventions:
  * images are NHWC, kernels are (kh, kw, cin, cout), stride is always 1
  * no broadcasting beyond scalar-tensor: elementwise ops require equal
    shapes unless one operand is a scalar (shape ()); use `reshape` rather
    than relying on implicit alignment
  * maxpool routes gradient to the first maximal element in scan order
    ((0,0),(0,1),(1,0),(1,1)) on ties
"""

from __future__ import annotations

import itertools
from typing import Iterable, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError, UnboundInputError
from .precision import active_dtype, use_precision

__all__ = [
    "Node",
    "ParamStore",
    "Context",
    "placeholder",
    "parameter",
    "constant",
    "add",
    "sub",
    "mul",
    "neg",
    "exp",
    "reciprocal",
    "sum_reduce",
    "relu",
    "sigmoid",
    "dense",
    "conv2d",
    "maxpool2x2",
    "softmax_cross_entropy",
    "sigmoid_cross_entropy",
    "slice_nd",
    "pad_nd",
    "concat_depth",
    "reshape",
    "topo_order",
    "forward",
    "evaluate",
    "backward",
    "check_gradient",
]

_ids = itertools.count()


class ParamStore:
    """Named, mutable parameter storage shared by every graph that uses it."""

    __slots__ = ("name", "value")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.asarray(value)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"ParamStore({self.name!r}, shape={self.value.shape})"


class Node:
    """One vertex of a static graph. Immutable after construction."""

    __slots__ = ("op", "inputs", "attrs", "shape", "uid")

    def __init__(self, op: str, inputs: Sequence["Node"], shape: tuple, **attrs):
        self.op = op
        self.inputs = tuple(inputs)
        self.attrs = attrs
        self.shape = tuple(int(s) for s in shape)
        self.uid = next(_ids)

    def __repr__(self):
        return f"<{self.op}#{self.uid} {self.shape}>"


# ---------------------------------------------------------------------------
# Constructors (shape inference happens here, so bad graphs fail at build time)
# ---------------------------------------------------------------------------


def placeholder(name: str, shape) -> Node:
    return Node("input", (), shape, name=name)


def parameter(store: ParamStore) -> Node:
    return Node("param", (), store.value.shape, store=store)


def constant(value) -> Node:
    arr = np.asarray(value, dtype=np.float64)
    return Node("const", (), arr.shape, value=arr)


def _as_node(x) -> Node:
    if isinstance(x, Node):
        return x
    return constant(float(x))


def _elementwise_pair(op: str, a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    if a.shape == b.shape:
        out = a.shape
    elif a.shape == ():
        out = b.shape
    elif b.shape == ():
        out = a.shape
    else:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ and neither is scalar")
    return Node(op, (a, b), out)


def add(a, b) -> Node:
    return _elementwise_pair("add", a, b)


def mul(a, b) -> Node:
    return _elementwise_pair("mul", a, b)


def neg(a) -> Node:
    a = _as_node(a)
    return Node("neg", (a,), a.shape)


def sub(a, b) -> Node:
    return add(a, neg(b))


def exp(a) -> Node:
    a = _as_node(a)
    return Node("exp", (a,), a.shape)


def reciprocal(a) -> Node:
    a = _as_node(a)
    return Node("reciprocal", (a,), a.shape)


def sum_reduce(a: Node, axes=None, keepdims: bool = False) -> Node:
    if axes is None:
        shape = ()
    else:
        axes = tuple(ax % len(a.shape) for ax in axes)
        if keepdims:
            shape = tuple(1 if i in axes else s for i, s in enumerate(a.shape))
        else:
            shape = tuple(s for i, s in enumerate(a.shape) if i not in axes)
    return Node("sum-reduce", (a,), shape, axes=axes, keepdims=keepdims)


def relu(a: Node) -> Node:
    return Node("relu", (a,), a.shape)


def sigmoid(a: Node) -> Node:
    return Node("sigmoid", (a,), a.shape)


def dense(x: Node, w: Node, b: Node) -> Node:
    if len(x.shape) != 2 or len(w.shape) != 2 or len(b.shape) != 1:
        raise ShapeError(f"dense: expected (N,D)@(D,U)+(U,), got {x.shape} {w.shape} {b.shape}")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeError(f"dense: inconsistent shapes {x.shape} {w.shape} {b.shape}")
    return Node("dense", (x, w, b), (x.shape[0], w.shape[1]))


def _conv_pads(kh, kw, dilation, padding):
    eh, ew = (kh - 1) * dilation, (kw - 1) * dilation
    if padding == "valid":
        return 0, 0, 0, 0
    if padding == "same":
        return eh // 2, eh - eh // 2, ew // 2, ew - ew // 2
    raise ShapeError(f"conv2d: unknown padding {padding!r}")


def conv2d(x: Node, w: Node, b: Node, padding: str = "valid", dilation: int = 1) -> Node:
    if len(x.shape) != 4 or len(w.shape) != 4:
        raise ShapeError(f"conv2d: expected NHWC input and (kh,kw,cin,cout) kernel, got {x.shape} {w.shape}")
    n, h, wd, cin = x.shape
    kh, kw, wcin, cout = w.shape
    if wcin != cin or b.shape != (cout,):
        raise ShapeError(f"conv2d: inconsistent shapes {x.shape} {w.shape} {b.shape}")
    pt, pb, pl, pr = _conv_pads(kh, kw, dilation, padding)
    ho = h + pt + pb - (kh - 1) * dilation
    wo = wd + pl + pr - (kw - 1) * dilation
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} (dilation {dilation}) exceeds input {h}x{wd}")
    return Node("conv2d", (x, w, b), (n, ho, wo, cout), padding=padding, dilation=dilation)


def maxpool2x2(x: Node) -> Node:
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2: spatial extent must be even, got {h}x{w}")
    return Node("maxpool2x2", (x,), (n, h // 2, w // 2, c))


def softmax_cross_entropy(logits: Node, onehot: Node) -> Node:
    if logits.shape != onehot.shape or len(logits.shape) != 2:
        raise ShapeError(f"softmax_cross_entropy: expected matching (N,K), got {logits.shape} {onehot.shape}")
    return Node("softmax-cross-entropy", (logits, onehot), ())


def sigmoid_cross_entropy(logits: Node, targets: Node) -> Node:
    """Mean elementwise binary cross-entropy on logits (fused, like the softmax head)."""
    if logits.shape != targets.shape or len(logits.shape) != 2:
        raise ShapeError(f"sigmoid_cross_entropy: expected matching (N,K), got {logits.shape} {targets.shape}")
    return Node("sigmoid-cross-entropy", (logits, targets), ())


def slice_nd(x: Node, begin: Sequence[int], size: Sequence[int]) -> Node:
    if len(begin) != len(x.shape) or len(size) != len(x.shape):
        raise ShapeError(f"slice: begin/size rank must match input rank {len(x.shape)}")
    for b, s, ext in zip(begin, size, x.shape):
        if b < 0 or s < 1 or b + s > ext:
            raise ShapeError(f"slice: window [{b}:{b+s}] outside extent {ext}")
    return Node("slice", (x,), tuple(size), begin=tuple(begin), size=tuple(size))


def pad_nd(x: Node, pad_width: Sequence[tuple]) -> Node:
    if len(pad_width) != len(x.shape):
        raise ShapeError("pad: pad_width rank must match input rank")
    shape = tuple(s + lo + hi for s, (lo, hi) in zip(x.shape, pad_width))
    return Node("pad", (x,), shape, pad_width=tuple((int(l), int(h)) for l, h in pad_width))


def concat_depth(xs: Sequence[Node]) -> Node:
    xs = tuple(xs)
    base = xs[0].shape[:-1]
    for x in xs:
        if x.shape[:-1] != base:
            raise ShapeError(f"concat-depth: leading shapes differ: {[x.shape for x in xs]}")
    return Node("concat-depth", xs, base + (sum(x.shape[-1] for x in xs),))


def reshape(x: Node, shape) -> Node:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != int(np.prod(x.shape, dtype=np.int64)):
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}")
    return Node("reshape", (x,), shape)


# ---------------------------------------------------------------------------
# Forward kernels
# ---------------------------------------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, dilation: int) -> np.ndarray:
    """Gather kernel-position slices of a padded NHWC array into a matrix.

    Returns (N*Ho*Wo, kh*kw*cin), patch layout (a, b, cin) row-major.
    """
    n, hp, wp, cin = xp.shape
    ho = hp - (kh - 1) * dilation
    wo = wp - (kw - 1) * dilation
    cols = np.empty((kh * kw, n, ho, wo, cin), dtype=xp.dtype)
    for a in range(kh):
        for b in range(kw):
            cols[a * kw + b] = xp[:, a * dilation : a * dilation + ho, b * dilation : b * dilation + wo, :]
    # (k2, N, Ho, Wo, cin) -> (N, Ho, Wo, k2, cin) -> (N*Ho*Wo, k2*cin)
    return cols.transpose(1, 2, 3, 0, 4).reshape(n * ho * wo, kh * kw * cin)


def _conv2d_raw(x, w, pads, dilation, out_dtype):
    pt, pb, pl, pr = pads
    if any(pads):
        x = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    kh, kw, cin, cout = w.shape
    n = x.shape[0]
    ho = x.shape[1] - (kh - 1) * dilation
    wo = x.shape[2] - (kw - 1) * dilation
    cols = _im2col(x, kh, kw, dilation)
    y = cols @ w.reshape(kh * kw * cin, cout)
    return y.reshape(n, ho, wo, cout).astype(out_dtype, copy=False), cols


def _softmax(z):
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=1, keepdims=True)


def _silent_reciprocal(x):
    with np.errstate(divide="ignore"):
        return np.reciprocal(x)


def _fw_input(node, xs, ctx):
    raise UnboundInputError(f"input {node.attrs['name']!r} not bound")


def _fw_param(node, xs, ctx):
    return node.attrs["store"].value.astype(active_dtype(), copy=False)


def _fw_const(node, xs, ctx):
    return node.attrs["value"].astype(active_dtype(), copy=False)


_FORWARD = {
    "input": _fw_input,
    "param": _fw_param,
    "const": _fw_const,
    "add": lambda n, xs, ctx: xs[0] + xs[1],
    "mul": lambda n, xs, ctx: xs[0] * xs[1],
    "neg": lambda n, xs, ctx: -xs[0],
    "exp": lambda n, xs, ctx: np.exp(xs[0]),
    # divide-by-zero surfaces as NonFiniteError via the post-op check
    "reciprocal": lambda n, xs, ctx: _silent_reciprocal(xs[0]),
    "sum-reduce": lambda n, xs, ctx: np.sum(xs[0], axis=n.attrs["axes"], keepdims=n.attrs["keepdims"]),
    "relu": lambda n, xs, ctx: np.maximum(xs[0], 0),
    "reshape": lambda n, xs, ctx: xs[0].reshape(n.shape),
    "slice": lambda n, xs, ctx: xs[0][tuple(slice(b, b + s) for b, s in zip(n.attrs["begin"], n.attrs["size"]))].copy(),
    "pad": lambda n, xs, ctx: np.pad(xs[0], n.attrs["pad_width"]),
    "concat-depth": lambda n, xs, ctx: np.concatenate(xs, axis=-1),
}


def _fw_sigmoid(node, xs, ctx):
    x = xs[0]
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _fw_dense(node, xs, ctx):
    x, w, b = xs
    return x @ w + b


def _fw_conv2d(node, xs, ctx):
    x, w, b = xs
    kh, kw = w.shape[:2]
    pads = _conv_pads(kh, kw, node.attrs["dilation"], node.attrs["padding"])
    y, cols = _conv2d_raw(x, w, pads, node.attrs["dilation"], x.dtype)
    ctx.aux[node] = cols
    return y + b


def _fw_maxpool(node, xs, ctx):
    x = xs[0]
    stack = np.stack((x[:, 0::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 0::2], x[:, 1::2, 1::2]))
    idx = stack.argmax(axis=0)
    ctx.aux[node] = idx
    return np.take_along_axis(stack, idx[None], axis=0)[0]


def _fw_softmax_ce(node, xs, ctx):
    z, y = xs
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    per_sample = lse - (z * y).sum(axis=1)
    ctx.aux[node] = _softmax(z)
    return np.asarray(per_sample.mean(), dtype=z.dtype)


def _fw_sigmoid_ce(node, xs, ctx):
    z, y = xs
    # max(z,0) - z*y + log1p(exp(-|z|)) is the overflow-safe form
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    ctx.aux[node] = _fw_sigmoid(node, [z], ctx)
    return np.asarray(per.mean(), dtype=z.dtype)


_FORWARD["sigmoid"] = _fw_sigmoid
_FORWARD["dense"] = _fw_dense
_FORWARD["conv2d"] = _fw_conv2d
_FORWARD["maxpool2x2"] = _fw_maxpool
_FORWARD["softmax-cross-entropy"] = _fw_softmax_ce
_FORWARD["sigmoid-cross-entropy"] = _fw_sigmoid_ce


# ---------------------------------------------------------------------------
# Backward kernels: bk(node, xs, y, gy, ctx, needed) -> per-input grads
# ---------------------------------------------------------------------------


def _reduce_if_scalar(g, operand_shape):
    if operand_shape == () and g.shape != ():
        return g.sum()
    return g


def _bk_add(node, xs, y, gy, ctx, needed):
    return [
        _reduce_if_scalar(gy, xs[0].shape) if needed[0] else None,
        _reduce_if_scalar(gy, xs[1].shape) if needed[1] else None,
    ]


def _bk_mul(node, xs, y, gy, ctx, needed):
    a, b = xs
    return [
        _reduce_if_scalar(gy * b, a.shape) if needed[0] else None,
        _reduce_if_scalar(gy * a, b.shape) if needed[1] else None,
    ]


def _bk_dense(node, xs, y, gy, ctx, needed):
    x, w, b = xs
    return [
        gy @ w.T if needed[0] else None,
        x.T @ gy if needed[1] else None,
        gy.sum(axis=0) if needed[2] else None,
    ]


def _bk_conv2d(node, xs, y, gy, ctx, needed):
    x, w, b = xs
    kh, kw, cin, cout = w.shape
    d = node.attrs["dilation"]
    pt, pb, pl, pr = _conv_pads(kh, kw, d, node.attrs["padding"])
    gx = gw = gb = None
    if needed[0]:
        # scatter-accumulate dY @ w[a,b]^T into the padded input footprint
        n, ho, wo, _ = gy.shape
        gy_mat = gy.reshape(-1, cout)
        gxp = np.zeros((n, x.shape[1] + pt + pb, x.shape[2] + pl + pr, cin), dtype=gy.dtype)
        for a in range(kh):
            for bb in range(kw):
                term = (gy_mat @ w[a, bb].T).reshape(n, ho, wo, cin)
                gxp[:, a * d : a * d + ho, bb * d : bb * d + wo, :] += term
        h, wd = x.shape[1], x.shape[2]
        gx = gxp[:, pt : pt + h, pl : pl + wd, :] if (pt or pb or pl or pr) else gxp
    if needed[1]:
        cols = ctx.aux[node]
        gw = (cols.T @ gy.reshape(-1, cout)).reshape(kh, kw, cin, cout)
    if needed[2]:
        gb = gy.sum(axis=(0, 1, 2))
    return [gx, gw, gb]


def _bk_maxpool(node, xs, y, gy, ctx, needed):
    if not needed[0]:
        return [None]
    idx = ctx.aux[node]
    gx = np.zeros_like(xs[0])
    views = (gx[:, 0::2, 0::2], gx[:, 0::2, 1::2], gx[:, 1::2, 0::2], gx[:, 1::2, 1::2])
    for k, v in enumerate(views):
        v[...] = np.where(idx == k, gy, 0)
    return [gx]


def _bk_softmax_ce(node, xs, y, gy, ctx, needed):
    z, onehot = xs
    n = z.shape[0]
    p = ctx.aux[node]
    gz = gonehot = None
    if needed[0]:
        gz = gy * (p - onehot) / n
    if needed[1]:
        m = z.max(axis=1, keepdims=True)
        logp = (z - m) - np.log(np.exp(z - m).sum(axis=1, keepdims=True))
        gonehot = gy * (-logp) / n
    return [gz, gonehot]


def _bk_sigmoid_ce(node, xs, y, gy, ctx, needed):
    z, targets = xs
    p = ctx.aux[node]
    scale = gy / z.size
    gz = scale * (p - targets) if needed[0] else None
    gt = scale * (-z) if needed[1] else None
    return [gz, gt]


def _bk_slice(node, xs, y, gy, ctx, needed):
    if not needed[0]:
        return [None]
    gx = np.zeros_like(xs[0])
    gx[tuple(slice(b, b + s) for b, s in zip(node.attrs["begin"], node.attrs["size"]))] = gy
    return [gx]


def _bk_pad(node, xs, y, gy, ctx, needed):
    if not needed[0]:
        return [None]
    sl = tuple(slice(lo, lo + s) for s, (lo, hi) in zip(xs[0].shape, node.attrs["pad_width"]))
    return [gy[sl]]


def _bk_concat(node, xs, y, gy, ctx, needed):
    grads, off = [], 0
    for i, x in enumerate(xs):
        c = x.shape[-1]
        grads.append(gy[..., off : off + c] if needed[i] else None)
        off += c
    return grads


def _bk_sum(node, xs, y, gy, ctx, needed):
    if not needed[0]:
        return [None]
    x = xs[0]
    axes = node.attrs["axes"]
    if axes is None:
        return [np.broadcast_to(gy, x.shape)]
    g = gy
    if not node.attrs["keepdims"]:
        shape = tuple(1 if i in axes else s for i, s in enumerate(x.shape))
        g = gy.reshape(shape)
    return [np.broadcast_to(g, x.shape)]


_BACKWARD = {
    "add": _bk_add,
    "mul": _bk_mul,
    "neg": lambda n, xs, y, gy, ctx, nd: [-gy if nd[0] else None],
    "exp": lambda n, xs, y, gy, ctx, nd: [gy * y if nd[0] else None],
    "reciprocal": lambda n, xs, y, gy, ctx, nd: [-gy * y * y if nd[0] else None],
    "relu": lambda n, xs, y, gy, ctx, nd: [gy * (xs[0] > 0) if nd[0] else None],
    "sigmoid": lambda n, xs, y, gy, ctx, nd: [gy * y * (1.0 - y) if nd[0] else None],
    "sum-reduce": _bk_sum,
    "reshape": lambda n, xs, y, gy, ctx, nd: [gy.reshape(xs[0].shape) if nd[0] else None],
    "dense": _bk_dense,
    "conv2d": _bk_conv2d,
    "maxpool2x2": _bk_maxpool,
    "softmax-cross-entropy": _bk_softmax_ce,
    "sigmoid-cross-entropy": _bk_sigmoid_ce,
    "slice": _bk_slice,
    "pad": _bk_pad,
    "concat-depth": _bk_concat,
}


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def topo_order(root: Node) -> list[Node]:
    """Deterministic topological order of the subgraph under `root`."""
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.uid in seen:
            continue
        seen.add(node.uid)
        stack.append((node, True))
        for inp in reversed(node.inputs):
            if inp.uid not in seen:
                stack.append((inp, False))
    return order


class Context:
    """Cached activations (and auxiliary op state) for one forward pass."""

    __slots__ = ("values", "aux", "root", "order")

    def __init__(self, root: Node, order: list[Node]):
        self.values: dict[int, np.ndarray] = {}
        self.aux: dict[Node, object] = {}
        self.root = root
        self.order = order

    def value(self, node: Node) -> np.ndarray:
        return self.values[node.uid]


_TOPO_CACHE: dict[int, list[Node]] = {}


def _order_for(root: Node) -> list[Node]:
    order = _TOPO_CACHE.get(root.uid)
    if order is None:
        order = topo_order(root)
        if len(_TOPO_CACHE) > 256:
            _TOPO_CACHE.clear()
        _TOPO_CACHE[root.uid] = order
    return order


def evaluate(root: Node, bindings: dict | None = None, check_finite: bool = True) -> Context:
    """Run the forward pass; returns the context holding every node's output.

    `bindings` maps placeholder name -> array. Raises UnboundInputError for a
    missing binding, ShapeError on a mis-shaped one, NonFiniteError if any
    intermediate value is NaN/Inf (when check_finite).
    """
    bindings = bindings or {}
    dtype = active_dtype()
    ctx = Context(root, _order_for(root))
    for node in ctx.order:
        if node.op == "input":
            name = node.attrs["name"]
            if name not in bindings:
                raise UnboundInputError(f"input {name!r} not bound")
            val = np.asarray(bindings[name], dtype=dtype)
            if val.shape != node.shape:
                raise ShapeError(f"binding {name!r}: expected shape {node.shape}, got {val.shape}")
        else:
            xs = [ctx.values[i.uid] for i in node.inputs]
            val = _FORWARD[node.op](node, xs, ctx)
        if check_finite and not np.isfinite(val).all():
            raise NonFiniteError(f"non-finite value at {node!r}")
        ctx.values[node.uid] = val
    return ctx


def forward(root: Node, bindings: dict | None = None, check_finite: bool = True) -> np.ndarray:
    """Evaluate and return the root's output tensor."""
    return evaluate(root, bindings, check_finite).value(root)


def _needs_map(order: Iterable[Node], wrt: Sequence[Node]) -> dict[int, bool]:
    targets = {n.uid for n in wrt}
    needs = {}
    for node in order:
        needs[node.uid] = node.uid in targets or any(needs.get(i.uid, False) for i in node.inputs)
    return needs


def backward(root: Node, ctx: Context, wrt: Sequence[Node]) -> dict[Node, np.ndarray]:
    """Reverse-mode adjoints of a scalar root for each requested node.

    The root must be scalar and already evaluated in `ctx` (seed adjoint 1).
    Nodes unreachable from the root get a zero adjoint.
    """
    if root.shape != ():
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if root.uid not in ctx.values:
        raise UnboundInputError("backward: root was not evaluated in this context")
    for node in wrt:
        if node.uid not in ctx.values:
            raise UnboundInputError(f"backward: {node!r} is not part of the evaluated graph")
    needs = _needs_map(ctx.order, wrt)
    adj: dict[int, np.ndarray] = {root.uid: np.asarray(1.0, dtype=ctx.value(root).dtype)}
    for node in reversed(ctx.order):
        gy = adj.get(node.uid)
        if gy is None or not node.inputs:
            continue
        needed = tuple(needs.get(i.uid, False) for i in node.inputs)
        if not any(needed):
            continue
        xs = [ctx.values[i.uid] for i in node.inputs]
        grads = _BACKWARD[node.op](node, xs, ctx.values[node.uid], gy, ctx, needed)
        for inp, g in zip(node.inputs, grads):
            if g is None:
                continue
            if inp.uid in adj:
                adj[inp.uid] = adj[inp.uid] + g
            else:
                adj[inp.uid] = g
    return {n: adj.get(n.uid, np.zeros(n.shape, dtype=active_dtype())) for n in wrt}


# ---------------------------------------------------------------------------
# Numerical gradient verification
# ---------------------------------------------------------------------------


def check_gradient(root, bindings, wrt, h: float = 1e-5, max_coords: int = 24, seed: int = 0) -> float:
    """Max relative error between analytic adjoints and central differences.

    Always runs in float64. For each requested node, up to `max_coords`
    coordinates are sampled and the error
    |analytic - difference| / (|analytic| + |difference| + 1e-12)
    is maximized over all of them. Reports, never asserts.
    """
    if not 1e-7 <= h <= 1e-4:
        raise ValueError(f"step h={h} outside [1e-7, 1e-4]")
    rng = np.random.default_rng(seed)
    with use_precision("float64"):
        bindings = {k: np.asarray(v, dtype=np.float64) for k, v in (bindings or {}).items()}
        ctx = evaluate(root, bindings)
        grads = backward(root, ctx, wrt)
        worst = 0.0
        for node in wrt:
            if node.op == "input":
                buf = bindings[node.attrs["name"]]
            elif node.op == "param":
                store = node.attrs["store"]
                original = store.value
                buf = original.astype(np.float64)
                store.value = buf
            else:
                raise ValueError(f"check_gradient: {node!r} is not an input or parameter")
            analytic = grads[node]
            size = buf.size
            coords = rng.choice(size, size=min(max_coords, size), replace=False) if size else []
            flat = buf.reshape(-1)
            for c in coords:
                keep = flat[c]
                flat[c] = keep + h
                fp = float(forward(root, bindings))
                flat[c] = keep - h
                fm = float(forward(root, bindings))
                flat[c] = keep
                diff = (fp - fm) / (2.0 * h)
                a = float(analytic.reshape(-1)[c])
                err = abs(a - diff) / (abs(a) + abs(diff) + 1e-12)
                worst = max(worst, err)
            if node.op == "param":
                store.value = original
    return worst
