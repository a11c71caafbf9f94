"""Reverse-mode differentiation over flat float64 parameter vectors.

All model parameters live in a single 1-D array with a named segment layout
(`ParamVector`). Losses are built as small computation graphs (`Graph`) whose
nodes hold numpy arrays; a reverse sweep gives gradients. Every node can also
carry a forward-mode tangent, and the reverse sweep propagates tangents of the
adjoints, so a single forward+reverse pass with a seeded tangent yields a
Hessian-vector product (forward-over-reverse). Tangent-only passes give cheap
per-example directional derivatives.

Central finite differences are provided as the independent test oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericError

__all__ = [
    "Segment",
    "Layout",
    "ParamVector",
    "dot",
    "axpy",
    "scale",
    "norm",
    "Graph",
    "Node",
    "BatchLoss",
    "per_example_losses",
    "loss_value",
    "value_and_grad",
    "grad",
    "hvp",
    "per_example_jvp",
    "finite_diff_grad",
]


# ---------------------------------------------------------------------------
# Flat parameter vectors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def length(self) -> int:
        return math.prod(self.shape)


class Layout:
    """Ordered, contiguous, non-overlapping named segments covering an array."""

    def __init__(self, segments: Sequence[Segment]):
        offset = 0
        names = set()
        for seg in segments:
            if seg.name in names:
                raise ContractError(f"duplicate segment name {seg.name!r}")
            if seg.offset != offset:
                raise ContractError(
                    f"segment {seg.name!r} at offset {seg.offset}, expected {offset}"
                )
            names.add(seg.name)
            offset += seg.length
        self.segments: tuple[Segment, ...] = tuple(segments)
        self.size = offset
        self._by_name = {seg.name: seg for seg in self.segments}

    @classmethod
    def build(cls, shapes: Sequence[tuple[str, tuple[int, ...]]]) -> "Layout":
        segs, offset = [], 0
        for name, shape in shapes:
            seg = Segment(name, offset, tuple(shape))
            segs.append(seg)
            offset += seg.length
        return cls(segs)

    def segment(self, name: str) -> Segment:
        try:
            return self._by_name[name]
        except KeyError:
            raise ContractError(f"unknown segment {name!r}") from None

    def __eq__(self, other) -> bool:
        return isinstance(other, Layout) and self.segments == other.segments

    def __hash__(self):
        return hash(self.segments)

    def __repr__(self):
        inner = ", ".join(f"{s.name}:{s.shape}" for s in self.segments)
        return f"Layout({inner})"


class ParamVector:
    """Flat float64 vector with a named segment layout. Entries always finite."""

    __slots__ = ("values", "layout")

    def __init__(self, values: np.ndarray, layout: Layout, *, check: bool = True):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 1 or values.size != layout.size:
            raise ContractError(
                f"values of size {values.size} do not match layout size {layout.size}"
            )
        if check and values.size and not np.isfinite(values).all():
            bad = int(np.flatnonzero(~np.isfinite(values))[0])
            raise NumericError(f"non-finite parameter entry at index {bad}")
        self.values = values
        self.layout = layout

    @classmethod
    def zeros(cls, layout: Layout) -> "ParamVector":
        return cls(np.zeros(layout.size), layout, check=False)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout, check=False)

    def segment(self, name: str) -> np.ndarray:
        seg = self.layout.segment(name)
        return self.values[seg.offset : seg.offset + seg.length].reshape(seg.shape)

    def __len__(self) -> int:
        return self.layout.size

    def __repr__(self):
        return f"ParamVector(n={len(self)}, norm={norm(self):.6g})"


def _check_same_layout(a: ParamVector, b: ParamVector) -> None:
    if a.layout != b.layout:
        raise ContractError("layout mismatch between parameter vectors")


def dot(a: ParamVector, b: ParamVector) -> float:
    _check_same_layout(a, b)
    return float(np.dot(a.values, b.values))


def axpy(a: float, x: ParamVector, y: ParamVector) -> ParamVector:
    """a*x + y."""
    _check_same_layout(x, y)
    return ParamVector(a * x.values + y.values, x.layout)


def scale(a: float, x: ParamVector) -> ParamVector:
    return ParamVector(a * x.values, x.layout)


def norm(x: ParamVector) -> float:
    return float(np.linalg.norm(x.values))


# ---------------------------------------------------------------------------
# Computation graph
# ---------------------------------------------------------------------------


class Node:
    """One array-valued value in a computation graph.

    `val` is the primal array, `tan` an optional forward tangent. During the
    reverse sweep `grad` accumulates the adjoint and `gtan` the adjoint's
    tangent (the piece that turns a gradient pass into an HVP pass).
    """

    __slots__ = ("val", "tan", "parents", "vjp", "grad", "gtan", "needs_grad")

    def __init__(self, val, tan=None, parents=(), vjp=None, needs_grad=False):
        self.val = val
        self.tan = tan
        self.parents = parents
        self.vjp = vjp
        self.grad = None
        self.gtan = None
        self.needs_grad = needs_grad or any(p.needs_grad for p in parents)


def _tadd(a, b):
    """None-aware tangent addition (None means an exact zero)."""
    if a is None:
        return b
    if b is None:
        return a
    return a + b


class Graph:
    """Records nodes in creation order; backward walks the list in reverse.

    A Graph is built per loss evaluation and never shared, so concurrent
    evaluations on disjoint parameter copies are safe.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def _emit(self, node: Node) -> Node:
        self.nodes.append(node)
        return node

    # -- leaves ------------------------------------------------------------

    def leaf(self, val: np.ndarray, tan: np.ndarray | None = None) -> Node:
        return self._emit(Node(val, tan, needs_grad=True))

    def constant(self, val: np.ndarray) -> Node:
        return self._emit(Node(np.asarray(val)))

    # -- elementwise / linear ops -------------------------------------------

    def add(self, a: Node, b: Node) -> Node:
        def vjp(g, gt):
            return ((g, gt), (g, gt))

        return self._emit(Node(a.val + b.val, _tadd(a.tan, b.tan), (a, b), vjp))

    def sub(self, a: Node, b: Node) -> Node:
        def vjp(g, gt):
            return ((g, gt), (-g, None if gt is None else -gt))

        tan = _tadd(a.tan, None if b.tan is None else -b.tan)
        return self._emit(Node(a.val - b.val, tan, (a, b), vjp))

    def mul(self, a: Node, b: Node) -> Node:
        def vjp(g, gt):
            ga = g * b.val
            gb = g * a.val
            gat = _tadd(None if gt is None else gt * b.val,
                        None if b.tan is None else g * b.tan)
            gbt = _tadd(None if gt is None else gt * a.val,
                        None if a.tan is None else g * a.tan)
            return ((ga, gat), (gb, gbt))

        tan = _tadd(None if a.tan is None else a.tan * b.val,
                    None if b.tan is None else a.val * b.tan)
        return self._emit(Node(a.val * b.val, tan, (a, b), vjp))

    def scale(self, a: Node, c: float) -> Node:
        def vjp(g, gt):
            return ((c * g, None if gt is None else c * gt),)

        return self._emit(
            Node(c * a.val, None if a.tan is None else c * a.tan, (a,), vjp)
        )

    def matmul(self, a: Node, b: Node) -> Node:
        def vjp(g, gt):
            ga = g @ b.val.T
            gb = a.val.T @ g
            gat = _tadd(None if gt is None else gt @ b.val.T,
                        None if b.tan is None else g @ b.tan.T)
            gbt = _tadd(None if a.tan is None else a.tan.T @ g,
                        None if gt is None else a.val.T @ gt)
            return ((ga, gat), (gb, gbt))

        tan = _tadd(None if a.tan is None else a.tan @ b.val,
                    None if b.tan is None else a.val @ b.tan)
        return self._emit(Node(a.val @ b.val, tan, (a, b), vjp))

    def add_bias(self, mat: Node, bias: Node) -> Node:
        """mat (B,d) + bias (d,) broadcast over rows."""

        def vjp(g, gt):
            return ((g, gt), (g.sum(axis=0), None if gt is None else gt.sum(axis=0)))

        tan = _tadd(mat.tan, None if bias.tan is None else
                    np.broadcast_to(bias.tan, mat.val.shape))
        return self._emit(Node(mat.val + bias.val, tan, (mat, bias), vjp))

    def tanh(self, a: Node) -> Node:
        out = np.tanh(a.val)
        sech2 = 1.0 - out * out
        otan = None if a.tan is None else sech2 * a.tan

        def vjp(g, gt):
            ga = sech2 * g
            gat = _tadd(None if gt is None else sech2 * gt,
                        None if otan is None else -2.0 * out * otan * g)
            return ((ga, gat),)

        return self._emit(Node(out, otan, (a,), vjp))

    def square(self, a: Node) -> Node:
        def vjp(g, gt):
            ga = 2.0 * a.val * g
            gat = _tadd(None if gt is None else 2.0 * a.val * gt,
                        None if a.tan is None else 2.0 * a.tan * g)
            return ((ga, gat),)

        tan = None if a.tan is None else 2.0 * a.val * a.tan
        return self._emit(Node(a.val * a.val, tan, (a,), vjp))

    def reshape(self, a: Node, shape: tuple[int, ...]) -> Node:
        def vjp(g, gt):
            return ((g.reshape(a.val.shape),
                     None if gt is None else gt.reshape(a.val.shape)),)

        tan = None if a.tan is None else a.tan.reshape(shape)
        return self._emit(Node(a.val.reshape(shape), tan, (a,), vjp))

    def gather_rows(self, table: Node, idx: np.ndarray) -> Node:
        """table (V,d) indexed by integer idx (m,) -> (m,d)."""
        idx = np.asarray(idx)

        def vjp(g, gt):
            gtab = np.zeros_like(table.val)
            np.add.at(gtab, idx, g)
            if gt is None:
                gtt = None
            else:
                gtt = np.zeros_like(table.val)
                np.add.at(gtt, idx, gt)
            return ((gtab, gtt),)

        tan = None if table.tan is None else table.tan[idx]
        return self._emit(Node(table.val[idx], tan, (table,), vjp))

    def mean_axis1(self, a: Node) -> Node:
        """(B,k,d) -> (B,d), mean over the middle axis."""
        k = a.val.shape[1]

        def vjp(g, gt):
            ga = np.repeat(g[:, None, :] / k, k, axis=1)
            gat = None if gt is None else np.repeat(gt[:, None, :] / k, k, axis=1)
            return ((ga, gat),)

        tan = None if a.tan is None else a.tan.mean(axis=1)
        return self._emit(Node(a.val.mean(axis=1), tan, (a,), vjp))

    # -- losses and reductions ----------------------------------------------

    def xent_logits(self, logits: Node, targets: np.ndarray) -> Node:
        """Per-row softmax cross-entropy: (B,V) logits, (B,) int targets -> (B,)."""
        z = logits.val
        b = z.shape[0]
        rows = np.arange(b)
        zmax = z.max(axis=1, keepdims=True)
        ez = np.exp(z - zmax)
        sez = ez.sum(axis=1, keepdims=True)
        lse = (zmax + np.log(sez)).reshape(b)
        p = ez / sez
        out = lse - z[rows, targets]

        if logits.tan is None:
            tan = None
            ptan_dot = None
        else:
            ptan_dot = (p * logits.tan).sum(axis=1)            # <p, tz> per row
            tan = ptan_dot - logits.tan[rows, targets]

        def vjp(g, gt):
            gz = p * g[:, None]
            gz[rows, targets] -= g
            if gt is None and logits.tan is None:
                return ((gz, None),)
            gzt = None
            if logits.tan is not None:
                dp = p * (logits.tan - ptan_dot[:, None])
                gzt = _tadd(gzt, dp * g[:, None])
            if gt is not None:
                extra = p * gt[:, None]
                extra[rows, targets] -= gt
                gzt = _tadd(gzt, extra)
            return ((gz, gzt),)

        return self._emit(Node(out, tan, (logits,), vjp))

    def bce_logits(self, scores: Node, targets: np.ndarray) -> Node:
        """Per-element binary cross-entropy from logits: scores (B,), targets in {0,1}."""
        s = scores.val
        t = np.asarray(targets, dtype=np.float64)
        # log(1+e^s) - t*s, computed stably
        out = np.maximum(s, 0.0) + np.log1p(np.exp(-np.abs(s))) - t * s
        sig = 1.0 / (1.0 + np.exp(-s))
        tan = None if scores.tan is None else (sig - t) * scores.tan

        def vjp(g, gt):
            gs = (sig - t) * g
            gst = _tadd(None if gt is None else (sig - t) * gt,
                        None if scores.tan is None
                        else sig * (1.0 - sig) * scores.tan * g)
            return ((gs, gst),)

        return self._emit(Node(out, tan, (scores,), vjp))

    def dot_const(self, vec: Node, w: np.ndarray) -> Node:
        """Weighted reduction to a scalar with constant weights."""
        w = np.asarray(w, dtype=np.float64)

        def vjp(g, gt):
            return ((g * w, None if gt is None else gt * w),)

        tan = None if vec.tan is None else np.dot(w, vec.tan)
        return self._emit(Node(np.dot(w, vec.val), tan, (vec,), vjp))

    # -- reverse sweep -------------------------------------------------------

    def backward(self, out: Node, track_tangent: bool = False) -> None:
        out.grad = np.ones_like(out.val)
        if track_tangent:
            out.gtan = np.zeros_like(out.val)
        for node in reversed(self.nodes):
            if node.grad is None or node.vjp is None:
                continue
            contribs = node.vjp(node.grad, node.gtan)
            for parent, (g, gt) in zip(node.parents, contribs):
                if not parent.needs_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
                if gt is not None:
                    parent.gtan = gt if parent.gtan is None else parent.gtan + gt


# ---------------------------------------------------------------------------
# Losses over parameter vectors
# ---------------------------------------------------------------------------


class BatchLoss:
    """A differentiable per-example loss over a ParamVector and a batch.

    Subclasses implement `per_example` returning a (B,)-shaped node of losses.
    Evaluation is deterministic, and the value returned alongside a gradient
    is the same forward computation bit-for-bit.
    """

    layout: Layout

    def per_example(self, g: Graph, p: dict[str, Node], batch) -> Node:
        raise NotImplementedError

    def batch_size(self, batch) -> int:
        return len(batch)


def _leaves(g: Graph, params: ParamVector, tangent: ParamVector | None) -> dict[str, Node]:
    views = {}
    for seg in params.layout.segments:
        val = params.values[seg.offset : seg.offset + seg.length].reshape(seg.shape)
        tan = None
        if tangent is not None:
            tan = tangent.values[seg.offset : seg.offset + seg.length].reshape(seg.shape)
        views[seg.name] = g.leaf(val, tan)
    return views


def _collect(layout: Layout, views: dict[str, Node], attr: str) -> ParamVector:
    out = np.zeros(layout.size)
    for seg in layout.segments:
        piece = getattr(views[seg.name], attr)
        if piece is not None:
            out[seg.offset : seg.offset + seg.length] = np.asarray(piece).ravel()
    if out.size and not np.isfinite(out).all():
        raise NumericError("non-finite gradient entries")
    return ParamVector(out, layout, check=False)


def _check_finite_losses(per_ex: np.ndarray, batch) -> None:
    if per_ex.size and not np.isfinite(per_ex).all():
        i = int(np.flatnonzero(~np.isfinite(per_ex))[0])
        ids = getattr(batch, "ids", None)
        label = f"example index {i}" if ids is None else f"example index {i} (id {int(ids[i])})"
        raise NumericError(f"non-finite loss at {label}")


def _check_params(loss: BatchLoss, params: ParamVector) -> None:
    if params.layout != loss.layout:
        raise ContractError("parameter layout does not match the loss layout")


def _reduce_weights(per_ex: Node, g: Graph, n: int, weights: np.ndarray | None) -> Node:
    if weights is None:
        weights = np.full(n, 1.0 / n) if n else np.zeros(0)
    else:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (n,):
            raise ContractError(f"weights of shape {weights.shape} for batch of {n}")
    return g.dot_const(per_ex, weights)


def per_example_losses(loss: BatchLoss, params: ParamVector, batch) -> np.ndarray:
    """Forward pass only; raises NumericError naming the offending example."""
    _check_params(loss, params)
    g = Graph()
    views = _leaves(g, params, None)
    per_ex = loss.per_example(g, views, batch)
    _check_finite_losses(per_ex.val, batch)
    return np.asarray(per_ex.val, dtype=np.float64)


def loss_value(loss: BatchLoss, params: ParamVector, batch,
               weights: np.ndarray | None = None) -> float:
    per_ex = per_example_losses(loss, params, batch)
    n = per_ex.shape[0]
    if weights is None:
        weights = np.full(n, 1.0 / n) if n else np.zeros(0)
    return float(np.dot(np.asarray(weights, dtype=np.float64), per_ex))


def value_and_grad(loss: BatchLoss, params: ParamVector, batch,
                   weights: np.ndarray | None = None) -> tuple[float, ParamVector]:
    """Value and gradient of the (weighted) mean loss over a nonempty batch."""
    _check_params(loss, params)
    n = loss.batch_size(batch)
    if n == 0:
        raise ContractError("empty batch")
    g = Graph()
    views = _leaves(g, params, None)
    per_ex = loss.per_example(g, views, batch)
    _check_finite_losses(per_ex.val, batch)
    total = _reduce_weights(per_ex, g, n, weights)
    g.backward(total)
    return float(total.val), _collect(params.layout, views, "grad")


def grad(loss: BatchLoss, params: ParamVector, batch,
         weights: np.ndarray | None = None) -> ParamVector:
    return value_and_grad(loss, params, batch, weights)[1]


def hvp(loss: BatchLoss, params: ParamVector, v: ParamVector, batch,
        weights: np.ndarray | None = None) -> ParamVector:
    """Hessian-vector product of the (weighted) mean loss, forward-over-reverse."""
    _check_params(loss, params)
    _check_same_layout(params, v)
    n = loss.batch_size(batch)
    if n == 0:
        raise ContractError("empty batch")
    g = Graph()
    views = _leaves(g, params, v)
    per_ex = loss.per_example(g, views, batch)
    _check_finite_losses(per_ex.val, batch)
    total = _reduce_weights(per_ex, g, n, weights)
    g.backward(total, track_tangent=True)
    return _collect(params.layout, views, "gtan")


def per_example_jvp(loss: BatchLoss, params: ParamVector, direction: ParamVector,
                    batch) -> np.ndarray:
    """Directional derivatives <grad loss_i, direction> for every example, one pass."""
    _check_params(loss, params)
    _check_same_layout(params, direction)
    g = Graph()
    views = _leaves(g, params, direction)
    per_ex = loss.per_example(g, views, batch)
    _check_finite_losses(per_ex.val, batch)
    tan = per_ex.tan
    if tan is None:
        tan = np.zeros_like(per_ex.val)
    if tan.size and not np.isfinite(tan).all():
        raise NumericError("non-finite directional derivative")
    return np.asarray(tan, dtype=np.float64)


def finite_diff_grad(loss: BatchLoss, params: ParamVector, batch, h: float = 1e-4,
                     weights: np.ndarray | None = None) -> ParamVector:
    """Central-difference gradient oracle, coordinate by coordinate."""
    if h <= 0:
        raise ContractError("step size h must be positive")
    _check_params(loss, params)
    out = np.zeros(len(params))
    work = params.values.copy()
    for i in range(len(params)):
        orig = work[i]
        work[i] = orig + h
        up = loss_value(loss, ParamVector(work, params.layout, check=False), batch, weights)
        work[i] = orig - h
        down = loss_value(loss, ParamVector(work, params.layout, check=False), batch, weights)
        work[i] = orig
        out[i] = (up - down) / (2.0 * h)
    return ParamVector(out, params.layout)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-relative discrepancy used by the gradient-check suites."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)
