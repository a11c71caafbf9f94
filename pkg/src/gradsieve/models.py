"""Desk-scale main models, weighting networks, and checkpoint I/O.

Main models: a byte-window language model (fixed context of previous bytes,
softmax over 256 symbols) and a small feature MLP for regression. Weighting
networks score one example with one real number; their final layer starts at
zero so the induced distribution starts exactly uniform. The domain classifier
reuses the weighting-network architecture with a sigmoid readout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import ByteBatch, FeatureBatch
from .errors import ContractError, NumericError
from .numcore import BatchLoss, Graph, Layout, Node, ParamVector, Segment

VOCAB = 256


def _he_uniform(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0):
    bound = gain * math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _mlp_head(g: Graph, p: dict[str, Node], x: Node, n_hidden: int) -> Node:
    h = x
    for i in range(n_hidden):
        h = g.tanh(g.add_bias(g.matmul(h, p[f"w{i}"]), p[f"b{i}"]))
    return g.add_bias(g.matmul(h, p["w_out"]), p["b_out"])


# ---------------------------------------------------------------------------
# Main models
# ---------------------------------------------------------------------------


class ByteWindowLM(BatchLoss):
    """Next-byte model over a window of `context` previous bytes.

    Each context byte is embedded, embeddings are concatenated and passed
    through tanh hidden layers into a 256-way softmax. Per-example loss is the
    negative log-likelihood of the target byte.
    """

    kind = "byte-window-lm"

    def __init__(self, context: int = 8, embed_dim: int = 16,
                 hidden: tuple[int, ...] = (64, 64)):
        self.context = context
        self.embed_dim = embed_dim
        self.hidden = tuple(hidden)
        shapes: list[tuple[str, tuple[int, ...]]] = [("emb", (VOCAB, embed_dim))]
        fan = context * embed_dim
        for i, width in enumerate(self.hidden):
            shapes += [(f"w{i}", (fan, width)), (f"b{i}", (width,))]
            fan = width
        shapes += [("w_out", (fan, VOCAB)), ("b_out", (VOCAB,))]
        self.layout = Layout.build(shapes)

    def init_params(self, seed: int) -> ParamVector:
        rng = np.random.default_rng(seed)
        pv = ParamVector.zeros(self.layout)
        pv.segment("emb")[:] = rng.uniform(-0.5, 0.5, size=(VOCAB, self.embed_dim))
        fan = self.context * self.embed_dim
        for i, width in enumerate(self.hidden):
            pv.segment(f"w{i}")[:] = _he_uniform(rng, (fan, width), fan)
            fan = width
        # small output init keeps initial predictions near uniform
        pv.segment("w_out")[:] = _he_uniform(rng, (fan, VOCAB), fan, gain=0.1)
        return pv

    def _logits(self, g: Graph, p: dict[str, Node], ctx: np.ndarray) -> Node:
        b, k = ctx.shape
        if k != self.context:
            raise ContractError(f"context of width {k}, model expects {self.context}")
        e = g.gather_rows(p["emb"], ctx.astype(np.int64).ravel())
        x = g.reshape(e, (b, k * self.embed_dim))
        return _mlp_head(g, p, x, len(self.hidden))

    def per_example(self, g: Graph, p: dict[str, Node], batch) -> Node:
        if not isinstance(batch, ByteBatch):
            raise ContractError("byte-window-lm expects a ByteBatch")
        logits = self._logits(g, p, batch.ctx)
        return g.xent_logits(logits, batch.target.astype(np.int64))

    def predict_proba(self, params: ParamVector, ctx: np.ndarray) -> np.ndarray:
        """Next-byte distribution per row; rows are positive and sum to 1."""
        g = Graph()
        views = {s.name: g.constant(params.segment(s.name))
                 for s in self.layout.segments}
        z = self._logits(g, views, ctx).val
        z = z - z.max(axis=1, keepdims=True)
        ez = np.exp(z)
        return ez / ez.sum(axis=1, keepdims=True)


class FeatureMLP(BatchLoss):
    """Small tanh MLP for scalar regression with squared-error loss."""

    kind = "feature-mlp"

    def __init__(self, in_dim: int, hidden: tuple[int, ...] = (32,)):
        self.in_dim = in_dim
        self.hidden = tuple(hidden)
        shapes: list[tuple[str, tuple[int, ...]]] = []
        fan = in_dim
        for i, width in enumerate(self.hidden):
            shapes += [(f"w{i}", (fan, width)), (f"b{i}", (width,))]
            fan = width
        shapes += [("w_out", (fan, 1)), ("b_out", (1,))]
        self.layout = Layout.build(shapes)

    def init_params(self, seed: int) -> ParamVector:
        rng = np.random.default_rng(seed)
        pv = ParamVector.zeros(self.layout)
        fan = self.in_dim
        for i, width in enumerate(self.hidden):
            pv.segment(f"w{i}")[:] = _he_uniform(rng, (fan, width), fan)
            fan = width
        pv.segment("w_out")[:] = _he_uniform(rng, (fan, 1), fan, gain=0.1)
        return pv

    def per_example(self, g: Graph, p: dict[str, Node], batch) -> Node:
        if not isinstance(batch, FeatureBatch):
            raise ContractError("feature-mlp expects a FeatureBatch")
        x = g.constant(batch.x)
        pred = g.reshape(_mlp_head(g, p, x, len(self.hidden)), (batch.x.shape[0],))
        return g.square(g.sub(pred, g.constant(batch.y)))

    def predict(self, params: ParamVector, x: np.ndarray) -> np.ndarray:
        g = Graph()
        views = {s.name: g.constant(params.segment(s.name))
                 for s in self.layout.segments}
        return _mlp_head(g, views, g.constant(x), len(self.hidden)).val.reshape(-1)


# ---------------------------------------------------------------------------
# Weighting networks
# ---------------------------------------------------------------------------


class ScoreNet:
    """Base for example scorers: one clamped real score per example.

    Scoring is a pure function of (example, params). The final layer is
    initialized to zero so batch-softmax weights start exactly uniform. Scores
    are bounded smoothly via clamp*tanh(s/clamp).
    """

    def __init__(self, in_dim: int, hidden: int = 32, clamp: float = 20.0):
        self.in_dim = in_dim
        self.hidden = hidden
        self.clamp = clamp
        self.layout = Layout.build(self._shapes())

    def _shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return [("w0", (self.in_dim, self.hidden)), ("b0", (self.hidden,)),
                ("w_out", (self.hidden, 1)), ("b_out", (1,))]

    def init_params(self, seed: int) -> ParamVector:
        rng = np.random.default_rng(seed)
        pv = ParamVector.zeros(self.layout)
        pv.segment("w0")[:] = _he_uniform(rng, (self.in_dim, self.hidden), self.in_dim)
        # w_out/b_out stay zero: initial weights are uniform by construction
        return pv

    def _features(self, g: Graph, p: dict[str, Node], batch) -> Node:
        raise NotImplementedError

    def score_node(self, g: Graph, p: dict[str, Node], batch) -> Node:
        x = self._features(g, p, batch)
        n = x.val.shape[0]
        s = g.reshape(_mlp_head(g, p, x, 1), (n,))
        return g.scale(g.tanh(g.scale(s, 1.0 / self.clamp)), self.clamp)

    def scores(self, params: ParamVector, batch) -> np.ndarray:
        if params.layout != self.layout:
            raise ContractError("parameter layout does not match the scorer")
        g = Graph()
        views = {seg.name: g.constant(params.segment(seg.name))
                 for seg in self.layout.segments}
        out = self.score_node(g, views, batch).val
        if out.size and not np.isfinite(out).all():
            raise NumericError("non-finite score")
        return np.asarray(out, dtype=np.float64)

    def score_vjp(self, params: ParamVector, batch, coeff: np.ndarray) -> ParamVector:
        """Gradient of sum_i coeff_i * score_i with respect to the parameters."""
        if params.layout != self.layout:
            raise ContractError("parameter layout does not match the scorer")
        g = Graph()
        views = {}
        for seg in self.layout.segments:
            views[seg.name] = g.leaf(params.segment(seg.name))
        s = self.score_node(g, views, batch)
        total = g.dot_const(s, coeff)
        g.backward(total)
        out = np.zeros(self.layout.size)
        for seg in self.layout.segments:
            piece = views[seg.name].grad
            if piece is not None:
                out[seg.offset : seg.offset + seg.length] = piece.ravel()
        return ParamVector(out, self.layout)


class FeatureWeightingNet(ScoreNet):
    """Scores a regression example from its features and target.

    Inputs are standardized with fixed statistics (typically of the generic
    set) so the tanh layer stays in its responsive range.
    """

    def __init__(self, feature_dim: int, hidden: int = 32, clamp: float = 20.0,
                 input_mean: np.ndarray | None = None,
                 input_std: np.ndarray | None = None):
        super().__init__(feature_dim + 1, hidden, clamp)
        self.input_mean = np.zeros(self.in_dim) if input_mean is None else input_mean
        self.input_std = np.ones(self.in_dim) if input_std is None else input_std

    def set_input_stats(self, mean: np.ndarray, std: np.ndarray) -> None:
        if mean.shape != (self.in_dim,) or std.shape != (self.in_dim,):
            raise ContractError("input statistics do not match the scorer input")
        self.input_mean = mean
        self.input_std = np.maximum(std, 1e-8)

    def _features(self, g: Graph, p: dict[str, Node], batch) -> Node:
        if not isinstance(batch, FeatureBatch):
            raise ContractError("feature weighting net expects a FeatureBatch")
        raw = np.concatenate([batch.x, batch.y[:, None]], axis=1)
        return g.constant((raw - self.input_mean) / self.input_std)


class TextWeightingNet(ScoreNet):
    """Scores a byte window by mean-pooled byte embeddings through a small MLP."""

    def __init__(self, window: int, embed_dim: int = 16, hidden: int = 32,
                 clamp: float = 20.0):
        self.window = window
        self.embed_dim = embed_dim
        super().__init__(embed_dim, hidden, clamp)

    def _shapes(self):
        return [("emb", (VOCAB, self.embed_dim))] + super()._shapes()

    def init_params(self, seed: int) -> ParamVector:
        pv = super().init_params(seed)
        rng = np.random.default_rng(seed + 1)
        pv.segment("emb")[:] = rng.uniform(-0.5, 0.5, size=(VOCAB, self.embed_dim))
        return pv

    def _features(self, g: Graph, p: dict[str, Node], batch) -> Node:
        if not isinstance(batch, ByteBatch):
            raise ContractError("text weighting net expects a ByteBatch")
        win = np.concatenate([batch.ctx, batch.target[:, None]], axis=1)
        if win.shape[1] != self.window:
            raise ContractError(
                f"window of width {win.shape[1]}, scorer expects {self.window}")
        b = win.shape[0]
        e = g.gather_rows(p["emb"], win.astype(np.int64).ravel())
        return g.mean_axis1(g.reshape(e, (b, self.window, self.embed_dim)))


class LossInputScorer(ScoreNet):
    """MetaWeightNet-style scorer: the only input feature is the example loss."""

    def __init__(self, hidden: int = 32, clamp: float = 20.0):
        super().__init__(1, hidden, clamp)

    def _features(self, g: Graph, p: dict[str, Node], batch) -> Node:
        losses = np.asarray(batch, dtype=np.float64).reshape(-1, 1)
        if not np.isfinite(losses).all():
            raise ContractError("loss inputs must be finite")
        return g.constant(losses)


# ---------------------------------------------------------------------------
# Domain classifier
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LabeledBatch:
    """An example batch plus binary labels (1 = specific) for classifier training."""

    batch: object
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


class DomainClassifier(BatchLoss):
    """Binary classifier P(specific | example) on the weighting-net architecture."""

    def __init__(self, scorer: ScoreNet):
        self.scorer = scorer
        self.layout = scorer.layout

    def init_params(self, seed: int) -> ParamVector:
        return self.scorer.init_params(seed)

    def per_example(self, g: Graph, p: dict[str, Node], batch) -> Node:
        if not isinstance(batch, LabeledBatch):
            raise ContractError("domain classifier expects a LabeledBatch")
        s = self.scorer.score_node(g, p, batch.batch)
        return g.bce_logits(s, batch.labels)

    def prob_specific(self, params: ParamVector, batch) -> np.ndarray:
        s = self.scorer.scores(params, batch)
        return 1.0 / (1.0 + np.exp(-s))


# ---------------------------------------------------------------------------
# Checkpoints: manifest text file + raw little-endian float64 binary
# ---------------------------------------------------------------------------


def save_checkpoint(directory: str | Path, name: str, params: ParamVector) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = directory / f"{name}.manifest"
    binary = directory / f"{name}.bin"
    lines = []
    for seg in params.layout.segments:
        shape = "x".join(str(d) for d in seg.shape)
        lines.append(f"{seg.name} {shape} {seg.offset}")
    manifest.write_text("\n".join(lines) + "\n")
    binary.write_bytes(params.values.astype("<f8").tobytes())
    return manifest


def load_checkpoint(directory: str | Path, name: str) -> ParamVector:
    directory = Path(directory)
    manifest = directory / f"{name}.manifest"
    binary = directory / f"{name}.bin"
    if not manifest.exists():
        raise ContractError(f"missing checkpoint manifest {manifest}")
    segs = []
    for raw in manifest.read_text().splitlines():
        raw = raw.strip()
        if not raw:
            continue
        seg_name, shape_s, offset_s = raw.split()
        shape = tuple(int(d) for d in shape_s.split("x"))
        segs.append(Segment(seg_name, int(offset_s), shape))
    layout = Layout(segs)
    data = np.frombuffer(binary.read_bytes(), dtype="<f8").astype(np.float64)
    if data.size != layout.size:
        raise ContractError(
            f"checkpoint binary holds {data.size} values, manifest expects {layout.size}")
    return ParamVector(data.copy(), layout)
