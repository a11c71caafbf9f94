"""Datasets, synthetic mixtures, corpus windows, and batch sampling.

Two example kinds: feature records (x vector, scalar target) and byte windows
(fixed context plus next byte). Domain tags ride along for diagnostics only
and are exposed through a separate accessor, never through batches.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ConfigError, ContractError

ROLES = ("generic", "specific", "heldout-specific", "heldout-generic")

# id namespaces keep roles disjoint by construction
_ROLE_ID_BASE = {
    "generic": 0,
    "specific": 10_000_000,
    "heldout-specific": 20_000_000,
    "heldout-generic": 30_000_000,
}


@dataclass(frozen=True)
class FeatureBatch:
    ids: np.ndarray
    x: np.ndarray   # (B, p) float64
    y: np.ndarray   # (B,) float64

    def __len__(self) -> int:
        return len(self.ids)

    def take(self, idx: np.ndarray) -> "FeatureBatch":
        return FeatureBatch(self.ids[idx], self.x[idx], self.y[idx])


@dataclass(frozen=True)
class ByteBatch:
    ids: np.ndarray
    ctx: np.ndarray     # (B, k) uint8
    target: np.ndarray  # (B,) uint8

    def __len__(self) -> int:
        return len(self.ids)

    def take(self, idx: np.ndarray) -> "ByteBatch":
        return ByteBatch(self.ids[idx], self.ctx[idx], self.target[idx])


@dataclass
class Dataset:
    """An ordered, immutable collection of examples for one role.

    `_tags` is diagnostics-only: training-path code must go through `batch`
    or `sample`, which never expose tags. Use `domain_tags` for analysis.
    """

    role: str
    ids: np.ndarray
    kind: str                      # "feature" | "byte"
    x: np.ndarray | None = None
    y: np.ndarray | None = None
    ctx: np.ndarray | None = None
    target: np.ndarray | None = None
    _tags: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ContractError(f"unknown dataset role {self.role!r}")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ContractError("example ids must be unique within a dataset")

    def __len__(self) -> int:
        return len(self.ids)

    def batch(self, idx: np.ndarray):
        idx = np.asarray(idx, dtype=np.int64)
        if self.kind == "feature":
            return FeatureBatch(self.ids[idx], self.x[idx], self.y[idx])
        return ByteBatch(self.ids[idx], self.ctx[idx], self.target[idx])

    def all(self):
        return self.batch(np.arange(len(self)))

    def subset(self, keep_idx: np.ndarray, role: str | None = None) -> "Dataset":
        keep_idx = np.asarray(keep_idx, dtype=np.int64)
        tags = None if self._tags is None else self._tags[keep_idx]
        if self.kind == "feature":
            return Dataset(role or self.role, self.ids[keep_idx], "feature",
                           x=self.x[keep_idx], y=self.y[keep_idx], _tags=tags)
        return Dataset(role or self.role, self.ids[keep_idx], "byte",
                       ctx=self.ctx[keep_idx], target=self.target[keep_idx],
                       _tags=tags)

    def strip_tags(self) -> "Dataset":
        """Training-path view with no tags at all."""
        out = Dataset(self.role, self.ids, self.kind, x=self.x, y=self.y,
                      ctx=self.ctx, target=self.target, _tags=None)
        return out


def domain_tags(ds: Dataset) -> np.ndarray:
    """Diagnostics-only access to per-example domain tags."""
    if ds._tags is None:
        raise ContractError(f"dataset role={ds.role} carries no domain tags")
    return ds._tags.copy()


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def sample(ds: Dataset, n: int, rng: np.random.Generator):
    """n i.i.d. uniform draws with replacement."""
    if len(ds) == 0:
        raise ContractError("cannot sample from an empty dataset")
    if n < 1:
        raise ContractError("sample size must be >= 1")
    idx = rng.integers(0, len(ds), size=n)
    return ds.batch(idx)


class Sampler:
    """Reproducible with-replacement sampler: state is (seed, call counter)."""

    def __init__(self, ds: Dataset, seed):
        self.ds = ds
        self.rng = np.random.default_rng(seed)
        self.calls = 0

    def __call__(self, n: int):
        self.calls += 1
        return sample(self.ds, n, self.rng)


def sample_batch_rows(batch, n: int, rng: np.random.Generator):
    """Uniform with-replacement sub-batch of an already-materialized batch."""
    if len(batch) == 0:
        raise ContractError("cannot sample from an empty batch")
    idx = rng.integers(0, len(batch), size=n)
    return batch.take(idx)


# ---------------------------------------------------------------------------
# Synthetic quadratic mixture
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MixtureComponent:
    mean: np.ndarray      # (p,)
    coef: np.ndarray      # (p,)
    noise_std: float


@dataclass(frozen=True)
class MixtureSpec:
    components: tuple[MixtureComponent, ...]
    proportions: tuple[float, ...]
    target_index: int
    sizes: Mapping[str, int]       # per role
    feature_dim: int

    def __post_init__(self):
        props = np.asarray(self.proportions)
        if len(props) != len(self.components):
            raise ConfigError("one proportion per component required")
        if (props <= 0).any() or abs(props.sum() - 1.0) > 1e-9:
            raise ConfigError("proportions must be positive and sum to 1")
        if not 0 <= self.target_index < len(self.components):
            raise ConfigError("target index out of range")


def _exact_counts(proportions, n: int) -> np.ndarray:
    """Largest-remainder rounding: counts sum to n exactly."""
    raw = np.asarray(proportions) * n
    counts = np.floor(raw).astype(np.int64)
    rem = n - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:rem]] += 1
    return counts


def gen_quadratic_mixture(spec: MixtureSpec, seed) -> dict[str, Dataset]:
    """Regression mixture: per domain d, y = <coef_d, x> + noise, x ~ N(mean_d, I).

    The generic sets draw component counts exactly from the proportions;
    specific sets come from the target component only.
    """
    rng = np.random.default_rng(seed)
    out = {}
    for role in ROLES:
        n = int(spec.sizes.get(role, 0))
        if n <= 0:
            continue
        if role in ("specific", "heldout-specific"):
            comp_of = np.full(n, spec.target_index, dtype=np.int64)
        else:
            counts = _exact_counts(spec.proportions, n)
            comp_of = np.repeat(np.arange(len(counts)), counts)
            rng.shuffle(comp_of)
        x = np.empty((n, spec.feature_dim))
        y = np.empty(n)
        for d, comp in enumerate(spec.components):
            m = comp_of == d
            k = int(m.sum())
            if k == 0:
                continue
            xd = rng.standard_normal((k, spec.feature_dim)) + comp.mean
            x[m] = xd
            y[m] = xd @ comp.coef + comp.noise_std * rng.standard_normal(k)
        ids = _ROLE_ID_BASE[role] + np.arange(n, dtype=np.int64)
        out[role] = Dataset(role, ids, "feature", x=x, y=y, _tags=comp_of)
    return out


# ---------------------------------------------------------------------------
# Byte-window text mixture
# ---------------------------------------------------------------------------


def load_corpus(path: str | Path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"corpus file not found: {path}")
    data = path.read_bytes()
    if not data:
        raise ConfigError(f"corpus file is empty: {path}")
    return data


def _windows(corpus: np.ndarray, n: int, window: int, rng: np.random.Generator):
    if len(corpus) < window + 1:
        raise ConfigError(
            f"corpus of {len(corpus)} bytes is shorter than window {window}+1")
    starts = rng.integers(0, len(corpus) - window, size=n)
    idx = starts[:, None] + np.arange(window + 1)[None, :]
    win = corpus[idx]
    return win[:, :window], win[:, window]


def gen_text_mixture(corpus_a: bytes, corpus_b: bytes, mix: float,
                     sizes: Mapping[str, int], window: int, seed) -> dict[str, Dataset]:
    """Generic windows mix corpus A and B with proportion (mix, 1-mix);
    specific windows come from corpus B only. Tags record the source (0=A, 1=B)."""
    if not 0.0 <= mix <= 1.0:
        raise ConfigError("mix must lie in [0, 1]")
    a = np.frombuffer(corpus_a, dtype=np.uint8)
    b = np.frombuffer(corpus_b, dtype=np.uint8)
    rng = np.random.default_rng(seed)
    out = {}
    for role in ROLES:
        n = int(sizes.get(role, 0))
        if n <= 0:
            continue
        if role in ("specific", "heldout-specific"):
            tags = np.ones(n, dtype=np.int64)
        else:
            tags = (rng.random(n) >= mix).astype(np.int64)  # 1 = corpus B
        ctx = np.empty((n, window), dtype=np.uint8)
        tgt = np.empty(n, dtype=np.uint8)
        for src, corpus in ((0, a), (1, b)):
            m = tags == src
            k = int(m.sum())
            if k == 0:
                continue
            c, t = _windows(corpus, k, window, rng)
            ctx[m] = c
            tgt[m] = t
        ids = _ROLE_ID_BASE[role] + np.arange(n, dtype=np.int64)
        out[role] = Dataset(role, ids, "byte", ctx=ctx, target=tgt, _tags=tags)
    return out


# ---------------------------------------------------------------------------
# Feature files: comma-separated reals, last column target, optional tag column
# ---------------------------------------------------------------------------


def load_feature_file(path: str | Path, role: str = "generic") -> Dataset:
    """One record per line; a first line `# domain_tag=1` marks a trailing
    integer domain-tag column."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"feature file not found: {path}")
    lines = path.read_text().splitlines()
    has_tags = False
    start = 0
    if lines and lines[0].strip().replace(" ", "") == "#domain_tag=1":
        has_tags = True
        start = 1
    rows, tags = [], []
    for lineno, line in enumerate(lines[start:], start=start + 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            vals = [float(v) for v in line.split(",")]
        except ValueError:
            raise ConfigError(f"unparseable feature row", line=lineno) from None
        if has_tags:
            tags.append(int(vals[-1]))
            vals = vals[:-1]
        if len(vals) < 2:
            raise ConfigError("feature rows need at least one feature and a target",
                              line=lineno)
        rows.append(vals)
    if not rows:
        raise ConfigError(f"no data rows in {path}")
    arr = np.asarray(rows, dtype=np.float64)
    ids = _ROLE_ID_BASE[role] + np.arange(len(arr), dtype=np.int64)
    return Dataset(role, ids, "feature", x=arr[:, :-1], y=arr[:, -1],
                   _tags=np.asarray(tags, dtype=np.int64) if has_tags else None)


def bundled_corpus_paths() -> tuple[Path, Path]:
    """Paths of the two tiny sample corpora shipped with the package."""
    base = resources.files("gradsieve") / "assets"
    return Path(str(base / "corpus_a.txt")), Path(str(base / "corpus_b.txt"))
