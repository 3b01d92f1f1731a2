"""Dense rank-<=4 tensors with reverse-mode differentiation.

A Graph records operations eagerly in insertion order (define-by-run);
backward replays the record in reverse, accumulating gradients additively
across fan-out. One floating dtype per graph: float32 for training and
inference, float64 for gradient checking.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class GraphError(RuntimeError):
    """Graph misuse: cross-graph operands, repeated backward, non-scalar loss."""


class Node:
    __slots__ = ("id", "op", "input_ids", "value", "param", "keep_grad", "grad",
                 "backward_fn", "name")

    def __init__(self, nid, op, input_ids, value, param, keep_grad, backward_fn, name):
        self.id = nid
        self.op = op
        self.input_ids = input_ids
        self.value = value
        self.param = param
        self.keep_grad = keep_grad
        self.grad = None
        self.backward_fn = backward_fn
        self.name = name


class Tensor:
    """Handle to one node of a Graph; holds no state of its own."""

    __slots__ = ("graph", "node")

    def __init__(self, graph, node):
        self.graph = graph
        self.node = node

    @property
    def data(self) -> np.ndarray:
        return self.node.value

    @property
    def shape(self):
        return self.node.value.shape

    @property
    def ndim(self):
        return self.node.value.ndim

    @property
    def size(self):
        return self.node.value.size

    @property
    def grad(self):
        return self.node.grad

    def __repr__(self):
        return f"Tensor(op={self.node.op!r}, shape={self.shape}, id={self.node.id})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return smul(self, float(other))

    def __rmul__(self, other):
        return smul(self, float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Graph:
    """Insertion-ordered operation record; single-writer, one backward per forward."""

    def __init__(self, dtype=np.float32):
        dt = np.dtype(dtype)
        if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
        self.dtype = dt
        self.nodes: list[Node] = []
        self._backward_ran = False

    def leaf(self, data, param=False, keep_grad=False, name=None) -> Tensor:
        value = np.asarray(data, dtype=self.dtype)
        return self._record("leaf", (), value, None, param=param,
                            keep_grad=keep_grad or param, name=name)

    def constant(self, data) -> Tensor:
        return self.leaf(data)

    def parameters(self):
        return [n for n in self.nodes if n.param]

    def _record(self, op, inputs, value, backward_fn, param=False, keep_grad=False,
                name=None) -> Tensor:
        if value.ndim > 4:
            raise ShapeError(f"{op}: rank {value.ndim} exceeds the rank-4 limit")
        if value.ndim and min(value.shape) < 1:
            raise ShapeError(f"{op}: zero-sized extent in shape {value.shape}")
        node = Node(len(self.nodes), op, tuple(t.node.id for t in inputs), value,
                    param, keep_grad, backward_fn, name)
        self.nodes.append(node)
        return Tensor(self, node)

    def backward(self, loss: Tensor) -> dict:
        """Propagate d(loss)/d(node) back to every parameter node.

        Returns a mapping node id -> gradient for parameter and keep_grad
        nodes; the same arrays are available as Tensor.grad afterwards.
        """
        if loss.graph is not self:
            raise GraphError("loss tensor belongs to a different graph")
        if loss.data.size != 1:
            raise GraphError(f"loss must be scalar, got shape {loss.shape}")
        if self._backward_ran:
            raise GraphError("backward already ran for this graph")
        self._backward_ran = True

        grads = {loss.node.id: np.ones_like(loss.data)}
        kept = {}
        for node in reversed(self.nodes[: loss.node.id + 1]):
            g = grads.pop(node.id, None)
            if g is None:
                continue
            if node.keep_grad:
                node.grad = g
                kept[node.id] = g
            if node.backward_fn is None:
                continue
            for in_id, in_grad in zip(node.input_ids, node.backward_fn(g)):
                if in_grad is None:
                    continue
                if in_id in grads:
                    grads[in_id] = grads[in_id] + in_grad
                else:
                    grads[in_id] = in_grad
        return kept


def backward(graph: Graph, loss: Tensor) -> dict:
    """Module-level alias for Graph.backward."""
    return graph.backward(loss)


def _same_graph(*tensors) -> Graph:
    g = tensors[0].graph
    for t in tensors[1:]:
        if t.graph is not g:
            raise GraphError("operands belong to different graphs")
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    g = _same_graph(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return g._record("add", (a, b), a.data + b.data, lambda gr: (gr, gr))


def sub(a: Tensor, b: Tensor) -> Tensor:
    g = _same_graph(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
    return g._record("sub", (a, b), a.data - b.data, lambda gr: (gr, -gr))


def mul(a: Tensor, b: Tensor) -> Tensor:
    g = _same_graph(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return g._record("mul", (a, b), ad * bd, lambda gr: (gr * bd, gr * ad))


def neg(a: Tensor) -> Tensor:
    return a.graph._record("neg", (a,), -a.data, lambda gr: (-gr,))


def smul(a: Tensor, c: float) -> Tensor:
    """Multiply by a plain (non-trainable) scalar."""
    c = a.graph.dtype.type(c)
    return a.graph._record("smul", (a,), a.data * c, lambda gr: (gr * c,))


def scale(a: Tensor, s: Tensor) -> Tensor:
    """Multiply by a trainable one-element tensor, broadcast over a."""
    g = _same_graph(a, s)
    if s.data.size != 1:
        raise ShapeError(f"scale: scale tensor must have one element, got {s.shape}")
    ad, sv = a.data, s.data
    out = ad * sv

    def bw(gr):
        return gr * sv, np.sum(gr * ad).reshape(sv.shape).astype(gr.dtype)

    return g._record("scale", (a, s), out, bw)


def absolute(a: Tensor) -> Tensor:
    sgn = np.sign(a.data)
    return a.graph._record("abs", (a,), np.abs(a.data), lambda gr: (gr * sgn,))


def leaky_relu(x: Tensor, slope: float) -> Tensor:
    """Elementwise max(x, slope*x); derivative at exactly 0 is the slope."""
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu: slope must lie in (0, 1), got {slope}")
    xd = x.data
    factor = np.where(xd > 0, x.graph.dtype.type(1.0), x.graph.dtype.type(slope))
    return x.graph._record("leaky_relu", (x,), xd * factor, lambda gr: (gr * factor,))


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    out = np.maximum(xd, 0) + np.log1p(np.exp(-np.abs(xd)))
    sig = np.where(xd >= 0, 1.0 / (1.0 + np.exp(-np.clip(xd, 0, None))),
                   np.exp(np.clip(xd, None, 0)) / (1.0 + np.exp(np.clip(xd, None, 0))))
    sig = sig.astype(x.graph.dtype)
    return x.graph._record("softplus", (x,), out.astype(x.graph.dtype),
                           lambda gr: (gr * sig,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 2-D operands, or 3-D with a shared/broadcast batch axis."""
    g = _same_graph(a, b)
    ad, bd = a.data, b.data
    if ad.ndim not in (2, 3) or bd.ndim not in (2, 3):
        raise ShapeError(f"matmul: ranks {ad.ndim} and {bd.ndim} unsupported")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner extents {ad.shape} x {bd.shape} disagree")
    if ad.ndim == 3 and bd.ndim == 3 and ad.shape[0] != bd.shape[0]:
        raise ShapeError(f"matmul: batch extents {ad.shape[0]} and {bd.shape[0]} differ")
    out = np.matmul(ad, bd)

    def bw(gr):
        ga = np.matmul(gr, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), gr)
        if ad.ndim == 2 and ga.ndim == 3:
            ga = ga.sum(axis=0)
        if bd.ndim == 2 and gb.ndim == 3:
            gb = gb.sum(axis=0)
        return ga, gb

    return g._record("matmul", (a, b), out, bw)


def transpose_last2(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise ShapeError(f"transpose_last2: rank {a.ndim} < 2")
    return a.graph._record("transpose", (a,), np.swapaxes(a.data, -1, -2).copy(),
                           lambda gr: (np.swapaxes(gr, -1, -2),))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: {a.shape} has {a.size} elements, target {shape}")
    old = a.shape
    return a.graph._record("reshape", (a,), a.data.reshape(shape),
                           lambda gr: (gr.reshape(old),))


def concat(tensors, axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat: no operands")
    if len(tensors) == 1:
        return tensors[0]
    g = _same_graph(*tensors)
    nd = tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != nd:
            raise ShapeError("concat: rank mismatch")
        for ax in range(nd):
            if ax != axis and t.shape[ax] != tensors[0].shape[ax]:
                raise ShapeError(f"concat: shapes {t.shape} vs {tensors[0].shape} "
                                 f"differ off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def bw(gr):
        return tuple(np.split(gr, splits, axis=axis))

    return g._record("concat", tuple(tensors), out, bw)


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return a.graph._record("sum", (a,), np.sum(a.data).reshape(()),
                           lambda gr: (np.broadcast_to(gr, shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.graph.dtype.type(a.size)
    shape = a.shape
    return a.graph._record("mean", (a,), np.mean(a.data).reshape(()),
                           lambda gr: (np.broadcast_to(gr / n, shape).copy(),))


def softmax_rows(logits: Tensor) -> Tensor:
    """Row softmax (last axis) with max-subtraction; rejects NaN input."""
    ld = logits.data
    if ld.ndim < 1:
        raise ShapeError("softmax_rows: need at least rank 1")
    if np.isnan(ld).any():
        raise ValueError("softmax_rows: NaN in logits")
    shifted = ld - ld.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(gr):
        dot = np.sum(gr * out, axis=-1, keepdims=True)
        return (out * (gr - dot),)

    return logits.graph._record("softmax_rows", (logits,), out, bw)


def normalize_rows(a: Tensor) -> Tensor:
    """Divide each row (last axis) by its sum; zero-sum rows are rejected."""
    s = a.data.sum(axis=-1, keepdims=True)
    if np.any(s == 0):
        raise ValueError("normalize_rows: a row sums to zero")
    out = a.data / s

    def bw(gr):
        dot = np.sum(gr * out, axis=-1, keepdims=True)
        return ((gr - dot) / s,)

    return a.graph._record("normalize_rows", (a,), out, bw)


def safe_div(num: Tensor, den: Tensor) -> Tensor:
    """Elementwise num/den with 0 wherever den == 0 (value and gradients)."""
    g = _same_graph(num, den)
    if num.shape != den.shape:
        raise ShapeError(f"safe_div: shapes {num.shape} and {den.shape} differ")
    nd, dd = num.data, den.data
    ok = dd != 0
    inv = np.where(ok, 1.0 / np.where(ok, dd, 1.0), 0.0).astype(g.dtype)
    out = nd * inv

    def bw(gr):
        gn = gr * inv
        gd = -gr * out * inv
        return gn, gd

    return g._record("safe_div", (num, den), out, bw)


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias (axis 1) to a rank >= 2 tensor."""
    g = _same_graph(x, b)
    if x.ndim < 2 or b.ndim != 1 or b.shape[0] != x.shape[1]:
        raise ShapeError(f"add_channel_bias: bias {b.shape} does not fit {x.shape}")
    bshape = (1, b.shape[0]) + (1,) * (x.ndim - 2)
    out = x.data + b.data.reshape(bshape)
    axes = tuple(ax for ax in range(x.ndim) if ax != 1)

    def bw(gr):
        return gr, gr.sum(axis=axes)

    return g._record("add_channel_bias", (x, b), out, bw)


def nearest_upsample2(x: Tensor) -> Tensor:
    """Double both spatial extents of a (B, C, H, W) tensor by replication."""
    if x.ndim != 4:
        raise ShapeError(f"nearest_upsample2: need rank 4, got {x.shape}")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    b, c, h, w = x.shape

    def bw(gr):
        return (gr.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return x.graph._record("nearest_upsample2", (x,), out, bw)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (B, Cin, H, W) with (Cout, Cin, kh, kw)."""
    g = _same_graph(x, kernel)
    if not isinstance(stride, int) or stride < 1:
        raise ValueError(f"conv2d: stride must be a positive integer, got {stride}")
    if not isinstance(padding, int) or padding < 0:
        raise ValueError(f"conv2d: padding must be a nonnegative integer, got {padding}")
    xd, kd = x.data, kernel.data
    if xd.ndim != 4 or kd.ndim != 4:
        raise ShapeError(f"conv2d: need rank-4 input and kernel, got {xd.shape}, {kd.shape}")
    bsz, cin, h, w = xd.shape
    cout, kcin, kh, kw = kd.shape
    if cin != kcin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {kcin}")
    for extent, k in ((h, kh), (w, kw)):
        span = extent + 2 * padding - k
        if span < 0 or span % stride != 0:
            raise ShapeError(f"conv2d: extent {extent} with pad {padding}, kernel {k}, "
                             f"stride {stride} gives a non-integer output extent")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (B, Ho, Wo, Cin*kh*kw) column matrix
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        bsz * ho * wo, cin * kh * kw)
    kflat = kd.reshape(cout, cin * kh * kw)
    out = (cols @ kflat.T).reshape(bsz, ho, wo, cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def bw(gr):
        gcols = np.ascontiguousarray(gr.transpose(0, 2, 3, 1)).reshape(
            bsz * ho * wo, cout)
        gk = (gcols.T @ cols).reshape(cout, cin, kh, kw)
        gcin = (gcols @ kflat).reshape(bsz, ho, wo, cin, kh, kw)
        gxp = np.zeros((bsz, cin, h + 2 * padding, w + 2 * padding), dtype=gr.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    gcin[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gk

    return g._record("conv2d", (x, kernel), out, bw)


def finite_diff_check(build, params, eps: float = 1e-5, max_samples: int = 400,
                      seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    build(graph, leaves) must build a scalar loss from the given leaf
    tensors and be a pure function of their values. Runs in float64.
    """
    params64 = [np.array(p, dtype=np.float64) for p in params]
    g = Graph(np.float64)
    leaves = [g.leaf(p, param=True) for p in params64]
    loss = build(g, leaves)
    if loss.data.size != 1:
        raise GraphError(f"finite_diff_check: loss has shape {loss.shape}")
    g.backward(loss)
    analytic = [lf.grad if lf.grad is not None else np.zeros_like(p)
                for lf, p in zip(leaves, params64)]

    coords = [(i, j) for i, p in enumerate(params64) for j in range(p.size)]
    if len(coords) > max_samples:
        rng = np.random.default_rng(seed)
        picked = rng.choice(len(coords), size=max_samples, replace=False)
        coords = [coords[k] for k in sorted(picked)]

    def value_at(pi, flat, delta):
        probe = [p.copy() if i == pi else p for i, p in enumerate(params64)]
        probe[pi].flat[flat] += delta
        g2 = Graph(np.float64)
        return float(build(g2, [g2.leaf(p) for p in probe]).data)

    worst = 0.0
    for pi, flat in coords:
        num = (value_at(pi, flat, eps) - value_at(pi, flat, -eps)) / (2.0 * eps)
        ana = float(analytic[pi].flat[flat])
        err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Bicubic resampling (not differentiable; operates on plain arrays)

_CUBIC_A = -0.5


def _cubic_kernel(t: np.ndarray) -> np.ndarray:
    a = _CUBIC_A
    at = np.abs(t)
    at2, at3 = at * at, at * at * at
    inner = (a + 2) * at3 - (a + 3) * at2 + 1
    outer = a * at3 - 5 * a * at2 + 8 * a * at - 4 * a
    return np.where(at <= 1, inner, np.where(at < 2, outer, 0.0))


def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-normalized interpolation weights mapping n_in samples to n_out."""
    ratio = n_in / n_out  # >1 when downsampling
    widen = max(ratio, 1.0)  # widened support antialiases downsampling
    radius = 2.0 * widen
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    for o in range(n_out):
        center = (o + 0.5) * ratio - 0.5
        lo = int(np.floor(center - radius)) + 1
        hi = int(np.floor(center + radius)) + 1
        taps = np.arange(lo, hi)
        weights = _cubic_kernel((center - taps) / widen) / widen
        np.add.at(mat[o], np.clip(taps, 0, n_in - 1), weights)
        mat[o] /= mat[o].sum()
    return mat


def bicubic_resize(img: np.ndarray, scale) -> np.ndarray:
    """Cubic-convolution resize of the last two axes by an integer factor
    or its reciprocal; downsampling widens the kernel support (antialias).
    """
    img = np.asarray(img)
    if img.ndim < 2:
        raise ShapeError(f"bicubic_resize: need at least 2 axes, got {img.shape}")
    h, w = img.shape[-2], img.shape[-1]
    scale = float(scale)
    if scale >= 1:
        if scale != round(scale):
            raise ValueError(f"bicubic_resize: unsupported scale {scale}")
        factor = int(round(scale))
        ho, wo = h * factor, w * factor
    else:
        inv = 1.0 / scale
        if abs(inv - round(inv)) > 1e-9:
            raise ValueError(f"bicubic_resize: unsupported scale {scale}")
        factor = int(round(inv))
        if h % factor or w % factor:
            raise ShapeError(f"bicubic_resize: extents {h}x{w} not divisible by {factor}")
        ho, wo = h // factor, w // factor
    wr = _resize_matrix(h, ho)
    wc = _resize_matrix(w, wo)
    out = np.matmul(np.matmul(wr, img.astype(np.float64)), wc.T)
    return out.astype(img.dtype) if img.dtype.kind == "f" else out
