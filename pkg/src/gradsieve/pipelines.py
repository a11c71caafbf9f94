"""End-to-end training pipelines: online bilevel selection, baselines, ablations.

One `Trainer` drives every arm so that disabling selection reproduces the
uniform baseline bit-for-bit: all arms share the same sampling skeleton
(big generic batch -> filter -> small batch) and consume independent,
named RNG streams spawned from the run seed.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import (ByteBatch, Dataset, FeatureBatch, MixtureComponent,
                   MixtureSpec, bundled_corpus_paths, domain_tags,
                   gen_quadratic_mixture, gen_text_mixture, load_corpus,
                   sample, sample_batch_rows)
from .errors import ConfigError, ContractError, NumericError
from .models import (ByteWindowLM, DomainClassifier, FeatureMLP,
                     FeatureWeightingNet, LabeledBatch, LossInputScorer,
                     TextWeightingNet, load_checkpoint, save_checkpoint)
from .numcore import (ParamVector, axpy, per_example_losses, value_and_grad)
from .outer import (OuterState, ltr_batch_weights, make_outer_state,
                    outer_update)
from .selection import (FILTER_RULES, BatchWeights, filter_batch, normalize,
                        softmax, uniform_weights)

METHODS = ("uniform", "none", "mixing", "cds", "classifier",
           "dds", "soba", "anograd", "ltr", "mwn")
BILEVEL_METHODS = ("dds", "soba", "anograd", "ltr", "mwn")

STREAM_NAMES = ("data", "theta_init", "alpha_init", "gen_sampler",
                "spec_sampler", "filter", "subbatch", "weight_eval",
                "clf_init", "clf_sampler", "ft_sampler", "perm", "diag")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    # task
    task: str = "quadratic"            # quadratic | text
    seed: int = 0
    # dataset sizes
    n_generic: int = 8000
    n_specific: int = 200
    n_heldout_specific: int = 512
    n_heldout_generic: int = 1024
    # quadratic task
    feature_dim: int = 6
    target_fraction: float = 0.05
    domain_separation: float = 1.5
    noise_std: float = 0.05
    # text task
    corpus_a: str = ""                 # empty -> bundled sample corpus
    corpus_b: str = ""
    mix: float = 0.95                  # fraction of corpus A in the generic set
    window: int = 8
    # models
    main_hidden: str = ""              # comma list; empty -> task default
    embed_dim: int = 16
    wnet_hidden: int = 32
    score_clamp: float = 20.0
    # training
    method: str = "uniform"
    filter_rule: str = "without_replacement"
    b_small: int = 8
    b_large: int = 64
    T: int = 2000
    lr: float = 0.02
    momentum: float = 0.9
    eta_alpha: float = 1.0
    eta_alpha_decay: str = "none"      # none | linear (anneal to 0 over T)
    eta_v: float = 0.05
    rho: float = 0.0                   # 0 -> use lr
    v_max: float = 2.0
    # baselines
    mix_fraction: float = 0.1
    cds_keep_fraction: float = 0.1
    cds_pretrain_steps: int = 0        # 0 -> T // 2
    cds_finetune_steps: int = 200
    classifier_steps: int = 1000
    classifier_keep_fraction: float = 0.1
    classifier_min_accuracy: float = 0.0
    # fine-tuning
    finetune_steps: int = 0
    patience: int = 5
    finetune_eval_interval: int = 20
    # logging
    log_interval: int = 100
    snapshot_stride: int = 50
    sar_gar_interval: int = 0          # 0 -> never during training
    sar_gar_trials: int = 200

    @property
    def rho_effective(self) -> float:
        return self.rho if self.rho > 0 else self.lr

    def main_hidden_dims(self) -> tuple[int, ...]:
        spec = self.main_hidden or ("64,64" if self.task == "text" else "32")
        try:
            return tuple(int(v) for v in spec.split(",") if v.strip())
        except ValueError:
            raise ConfigError(f"bad main_hidden spec {spec!r}") from None


_FIELDS = {f.name: f for f in fields(TrainConfig)}
_KEY_TYPES = {f.name: type(getattr(TrainConfig(), f.name)) for f in fields(TrainConfig)}


def _parse_value(name: str, raw: str, line: int | None, col: int | None):
    ftype = _KEY_TYPES[name]
    raw = raw.strip()
    try:
        if ftype is int:
            return int(raw)
        if ftype is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}", line=line, col=col) from None


def parse_config_text(text: str) -> TrainConfig:
    """Plain `key = value` lines; unknown keys are errors with line/column."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        if "=" not in line:
            raise ConfigError("expected `key = value`", line=lineno, col=1)
        key, _, val = line.partition("=")
        col = len(key) - len(key.lstrip()) + 1
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}", line=lineno, col=col)
        values[key] = _parse_value(key, val, lineno, col)
    cfg = TrainConfig(**values)
    validate_config(cfg)
    return cfg


def load_config(path: str | Path) -> TrainConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text())


def config_to_text(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(TrainConfig):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {v!r}" if isinstance(v, float) else f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def apply_overrides(cfg: TrainConfig, pairs: list[str]) -> TrainConfig:
    """Repeated `key=value` overrides; last one wins."""
    values = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override must look like key=value: {pair!r}", col=1)
        key, _, val = pair.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}", col=1)
        values[key] = _parse_value(key, val, None, None)
    out = replace(cfg, **values)
    validate_config(out)
    return out


def validate_config(cfg: TrainConfig) -> None:
    if cfg.task not in ("quadratic", "text"):
        raise ConfigError(f"unknown task {cfg.task!r}")
    if cfg.method not in METHODS:
        raise ConfigError(f"unknown method {cfg.method!r}")
    if cfg.filter_rule not in FILTER_RULES:
        raise ConfigError(f"unknown filter_rule {cfg.filter_rule!r}")
    if cfg.b_small > cfg.b_large:
        raise ConfigError("b_small must not exceed b_large")
    if cfg.b_small < 1:
        raise ConfigError("b_small must be >= 1")
    if cfg.T < 0 or cfg.finetune_steps < 0:
        raise ConfigError("step counts must be >= 0")
    if not 0.0 <= cfg.mix_fraction <= 1.0:
        raise ConfigError("mix_fraction must lie in [0, 1]")
    if not 0.0 <= cfg.mix <= 1.0:
        raise ConfigError("mix must lie in [0, 1]")
    for name in ("cds_keep_fraction", "classifier_keep_fraction"):
        v = getattr(cfg, name)
        if not 0.0 < v <= 1.0:
            raise ConfigError(f"{name} must lie in (0, 1]")
    if not 0.0 < cfg.target_fraction <= 1.0:
        raise ConfigError("target_fraction must lie in (0, 1]")
    if cfg.lr <= 0 or cfg.eta_v <= 0 or cfg.eta_alpha < 0 or cfg.v_max <= 0:
        raise ConfigError("learning rates must be positive (eta_alpha may be 0)")
    if cfg.eta_alpha_decay not in ("none", "linear"):
        raise ConfigError(f"unknown eta_alpha_decay {cfg.eta_alpha_decay!r}")
    cfg.main_hidden_dims()


# ---------------------------------------------------------------------------
# Task construction
# ---------------------------------------------------------------------------


@dataclass
class TaskBundle:
    datasets: dict[str, Dataset]
    main: object                  # BatchLoss main model
    wnet: object                  # example scorer for the task
    target_tag: int


def make_streams(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(STREAM_NAMES))
    return {n: np.random.default_rng(c) for n, c in zip(STREAM_NAMES, children)}


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def quadratic_mixture_spec(cfg: TrainConfig, rng: np.random.Generator) -> MixtureSpec:
    """Two-domain needle: opposite regression maps and a symmetric mean shift.

    The maps conflict at every x, so no model fits both domains and the
    selection pressure toward target data persists throughout training.
    """
    p = cfg.feature_dim
    coef = _unit(rng.standard_normal(p)) * 2.0
    mu = 0.5 * cfg.domain_separation * _unit(rng.standard_normal(p))
    sizes = {"generic": cfg.n_generic, "specific": cfg.n_specific,
             "heldout-specific": cfg.n_heldout_specific,
             "heldout-generic": cfg.n_heldout_generic}
    target = MixtureComponent(mean=mu, coef=coef, noise_std=cfg.noise_std)
    if cfg.target_fraction >= 1.0:
        return MixtureSpec((target,), (1.0,), 0, sizes, p)
    distractor = MixtureComponent(mean=-mu, coef=-coef, noise_std=cfg.noise_std)
    return MixtureSpec((distractor, target),
                       (1.0 - cfg.target_fraction, cfg.target_fraction),
                       1, sizes, p)


def build_task(cfg: TrainConfig, data_rng: np.random.Generator) -> TaskBundle:
    if cfg.task == "quadratic":
        spec = quadratic_mixture_spec(cfg, data_rng)
        datasets = gen_quadratic_mixture(spec, data_rng)
        main = FeatureMLP(cfg.feature_dim, cfg.main_hidden_dims())
        wnet = FeatureWeightingNet(cfg.feature_dim, cfg.wnet_hidden, cfg.score_clamp)
        gen = datasets["generic"]
        raw = np.concatenate([gen.x, gen.y[:, None]], axis=1)
        wnet.set_input_stats(raw.mean(axis=0), raw.std(axis=0))
        return TaskBundle(datasets, main, wnet, spec.target_index)
    # text
    path_a, path_b = bundled_corpus_paths()
    corpus_a = load_corpus(cfg.corpus_a or path_a)
    corpus_b = load_corpus(cfg.corpus_b or path_b)
    sizes = {"generic": cfg.n_generic, "specific": cfg.n_specific,
             "heldout-specific": cfg.n_heldout_specific,
             "heldout-generic": cfg.n_heldout_generic}
    datasets = gen_text_mixture(corpus_a, corpus_b, cfg.mix, sizes,
                                cfg.window, data_rng)
    main = ByteWindowLM(cfg.window, cfg.embed_dim, cfg.main_hidden_dims())
    wnet = TextWeightingNet(cfg.window + 1, cfg.embed_dim, cfg.wnet_hidden,
                            cfg.score_clamp)
    return TaskBundle(datasets, main, wnet, 1)


# ---------------------------------------------------------------------------
# Metrics and run directory bookkeeping
# ---------------------------------------------------------------------------

METRIC_COLUMNS = ("step", "phase", "heldout_specific_loss", "heldout_generic_loss",
                  "mean_target_weight", "mean_distractor_weight", "weight_entropy",
                  "sar", "gar")


@dataclass(frozen=True)
class MetricsRecord:
    step: int
    phase: str
    heldout_specific_loss: float | None = None
    heldout_generic_loss: float | None = None
    mean_target_weight: float | None = None
    mean_distractor_weight: float | None = None
    weight_entropy: float | None = None
    sar: float | None = None
    gar: float | None = None

    def row(self) -> str:
        def fmt(v):
            if v is None:
                return ""
            return format(v, ".12g")

        cells = [str(self.step), self.phase]
        cells += [fmt(getattr(self, c)) for c in METRIC_COLUMNS[2:]]
        return ",".join(cells)


class RunWriter:
    """Append-only writer for one run directory."""

    def __init__(self, run_dir: str | Path, cfg: TrainConfig, run_id: str):
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        (self.run_dir / "checkpoints").mkdir(exist_ok=True)
        self.run_id = run_id
        self.cfg = cfg
        self._t0 = time.time()
        self._phase_times: dict[str, float] = {}
        (self.run_dir / "config.cfg").write_text(config_to_text(cfg))
        self._metrics = open(self.run_dir / "metrics.csv", "a")
        if self._metrics.tell() == 0:
            self._metrics.write(",".join(METRIC_COLUMNS) + "\n")
            self._metrics.flush()
        self._events = open(self.run_dir / "events.log", "a")

    def metrics(self, rec: MetricsRecord) -> None:
        self._metrics.write(rec.row() + "\n")
        self._metrics.flush()

    def event(self, step: int, name: str, **kv) -> None:
        extra = " ".join(f"{k}={v}" for k, v in kv.items())
        self._events.write(f"step={step} event={name}" + (f" {extra}" if extra else "") + "\n")
        self._events.flush()

    def phase_time(self, phase: str, seconds: float) -> None:
        self._phase_times[phase] = self._phase_times.get(phase, 0.0) + seconds

    def checkpoint(self, name: str, params: ParamVector) -> None:
        save_checkpoint(self.run_dir / "checkpoints", name, params)

    def trajectory_checkpoint(self, t: int, alpha: ParamVector) -> None:
        save_checkpoint(self.run_dir / "trajectory", f"alpha_{t:06d}", alpha)

    def finalize(self) -> None:
        self._metrics.close()
        self._events.close()
        files = {}
        for p in sorted(self.run_dir.rglob("*")):
            if p.is_file() and p.name != "manifest.json":
                files[str(p.relative_to(self.run_dir))] = hashlib.sha256(
                    p.read_bytes()).hexdigest()
        manifest = {
            "run_id": self.run_id,
            "version": version_string(),
            "method": self.cfg.method,
            "config": {f.name: getattr(self.cfg, f.name) for f in fields(TrainConfig)},
            "files": files,
            "timings": {"total_s": round(time.time() - self._t0, 3),
                        **{k: round(v, 3) for k, v in self._phase_times.items()}},
        }
        (self.run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))


def version_string() -> str:
    return f"v{__version__}"


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    theta: ParamVector
    alpha: ParamVector | None
    trajectory: list[tuple[int, ParamVector]]
    metrics: list[MetricsRecord]
    events: list[tuple[int, str]]
    bundle: TaskBundle
    final_step: int


class Trainer:
    """Shared sampling skeleton for every arm; see module docstring."""

    def __init__(self, cfg: TrainConfig, bundle: TaskBundle,
                 streams: dict[str, np.random.Generator],
                 writer: RunWriter | None = None,
                 alpha_schedule=None):
        self.cfg = cfg
        self.bundle = bundle
        self.streams = streams
        self.writer = writer
        self.alpha_schedule = alpha_schedule
        self.method = "uniform" if cfg.method == "none" else cfg.method

        self.main = bundle.main
        self.generic = bundle.datasets["generic"]
        self.specific = bundle.datasets.get("specific")
        self.heldout_spec = bundle.datasets.get("heldout-specific")
        self.heldout_gen = bundle.datasets.get("heldout-generic")

        self.theta = self.main.init_params(_draw_seed(streams["theta_init"]))
        self.buf = ParamVector.zeros(self.main.layout)
        self.t = 0
        self.metrics: list[MetricsRecord] = []
        self.events: list[tuple[int, str]] = []
        self.trajectory: list[tuple[int, ParamVector]] = []
        self._last_metrics_step: int | None = None

        self.scorer = None
        self.state: OuterState | None = None
        needs_scorer = (self.method in ("dds", "soba", "anograd", "mwn")
                        or alpha_schedule is not None)
        if needs_scorer:
            self.scorer = (LossInputScorer(cfg.wnet_hidden, cfg.score_clamp)
                           if self.method == "mwn" else bundle.wnet)
            alpha0 = self.scorer.init_params(_draw_seed(streams["alpha_init"]))
            self.state = make_outer_state(
                "soba" if self.method == "soba" else "dds",
                alpha0, self.main.layout, rho=cfg.rho_effective,
                eta_v=cfg.eta_v, eta_alpha=cfg.eta_alpha, v_max=cfg.v_max)

        # fixed tagged batch for weight diagnostics
        self._weight_eval = None
        if self.heldout_gen is not None and self.heldout_gen._tags is not None:
            n = min(256, len(self.heldout_gen))
            idx = streams["weight_eval"].permutation(len(self.heldout_gen))[:n]
            self._weight_eval = (self.heldout_gen.batch(idx),
                                 domain_tags(self.heldout_gen)[idx])

    # -- plumbing -----------------------------------------------------------

    def set_generic(self, ds: Dataset) -> None:
        self.generic = ds

    def _event(self, step: int, name: str, **kv) -> None:
        self.events.append((step, name))
        if self.writer:
            self.writer.event(step, name, **kv)

    def _snapshot(self, t: int) -> None:
        if self.alpha_schedule is not None:
            return
        alpha = self._current_alpha()
        if alpha is None:
            return
        if self.trajectory and self.trajectory[-1][0] == t:
            return
        self.trajectory.append((t, alpha.copy()))
        if self.writer:
            self.writer.trajectory_checkpoint(t, alpha)

    def _current_alpha(self):
        if self.alpha_schedule is not None:
            return self.alpha_schedule(self.t)
        return self.state.alpha if self.state is not None else None

    def _scorer_input(self, batch):
        if self.method == "mwn" and self.alpha_schedule is None:
            return per_example_losses(self.main, self.theta, batch)
        if isinstance(self.scorer, LossInputScorer):
            return per_example_losses(self.main, self.theta, batch)
        return batch

    def _big_batch_weights(self, big) -> BatchWeights:
        alpha = self._current_alpha()
        if alpha is None:
            return uniform_weights(big.ids)
        scores = self.scorer.scores(alpha, self._scorer_input(big))
        return normalize(scores, big.ids)

    def _sgd_step(self, batch, weights=None) -> float:
        val, g = value_and_grad(self.main, self.theta, batch, weights=weights)
        self.buf = axpy(self.cfg.momentum, self.buf, g)
        self.theta = axpy(-self.cfg.lr, self.buf, self.theta)
        return val

    # -- one step of each arm -------------------------------------------------

    def step(self) -> None:
        cfg = self.cfg
        t = self.t + 1
        if self.alpha_schedule is not None:
            # frozen / scheduled weighting: filter by w(.; alpha_t), no outer update
            big = sample(self.generic, cfg.b_large, self.streams["gen_sampler"])
            weights = self._big_batch_weights(big)
            batch = filter_batch(big, weights, cfg.b_small, cfg.filter_rule,
                                 self.streams["filter"])
            self._sgd_step(batch)
        elif self.method in ("uniform",):
            big = sample(self.generic, cfg.b_large, self.streams["gen_sampler"])
            batch = filter_batch(big, uniform_weights(big.ids), cfg.b_small,
                                 cfg.filter_rule, self.streams["filter"])
            self._sgd_step(batch)
        elif self.method == "mixing":
            n_spec = math.ceil(cfg.mix_fraction * cfg.b_small)
            n_gen = cfg.b_small - n_spec
            parts = []
            if n_gen > 0:
                big = sample(self.generic, cfg.b_large, self.streams["gen_sampler"])
                parts.append(filter_batch(big, uniform_weights(big.ids), n_gen,
                                          cfg.filter_rule, self.streams["filter"]))
            if n_spec > 0:
                parts.append(sample(self.specific, n_spec, self.streams["spec_sampler"]))
            self._sgd_step(_concat_batches(parts))
        elif self.method == "ltr":
            big = sample(self.generic, cfg.b_large, self.streams["gen_sampler"])
            batch = filter_batch(big, uniform_weights(big.ids), cfg.b_small,
                                 cfg.filter_rule, self.streams["filter"])
            b_spec = sample(self.specific, cfg.b_small, self.streams["spec_sampler"])
            w, evs = ltr_batch_weights(self.main, self.theta, batch, b_spec,
                                       cfg.rho_effective, cfg.eta_alpha)
            for name in evs:
                self._event(t, name)
            self._sgd_step(batch, weights=w)
        else:
            # weighting-model methods: filter big batch, uniform-weight update,
            # outer update on an independent uniform sub-batch
            big = sample(self.generic, cfg.b_large, self.streams["gen_sampler"])
            weights = self._big_batch_weights(big)
            batch = filter_batch(big, weights, cfg.b_small, cfg.filter_rule,
                                 self.streams["filter"])
            b_prime = sample_batch_rows(big, cfg.b_small, self.streams["subbatch"])
            b_spec = sample(self.specific, cfg.b_small, self.streams["spec_sampler"])
            self._sgd_step(batch)
            scorer_input = self._scorer_input(b_prime)
            state = self.state
            if cfg.eta_alpha_decay == "linear" and cfg.T > 0:
                decayed = cfg.eta_alpha * max(0.0, 1.0 - (t - 1) / cfg.T)
                state = replace(state, eta_alpha=decayed)
            state, evs = outer_update(self.method, self.main, self.scorer,
                                      scorer_input, self.theta, state,
                                      b_prime, b_spec)
            self.state = replace(state, eta_alpha=self.cfg.eta_alpha)
            for name in evs:
                self._event(t, name)
        self.t = t

    # -- evaluation ------------------------------------------------------------

    def eval_heldout(self) -> tuple[float | None, float | None]:
        spec_loss = gen_loss = None
        if self.heldout_spec is not None and len(self.heldout_spec):
            spec_loss = float(np.mean(per_example_losses(
                self.main, self.theta, self.heldout_spec.all())))
        if self.heldout_gen is not None and len(self.heldout_gen):
            gen_loss = float(np.mean(per_example_losses(
                self.main, self.theta, self.heldout_gen.all())))
        return spec_loss, gen_loss

    def weight_stats(self):
        alpha = self._current_alpha()
        if alpha is None or self._weight_eval is None or self.scorer is None:
            return None, None, None
        batch, tags = self._weight_eval
        w = softmax(self.scorer.scores(alpha, self._scorer_input(batch)))
        target = tags == self.bundle.target_tag
        mean_t = float(w[target].mean()) if target.any() else None
        mean_d = float(w[~target].mean()) if (~target).any() else None
        entropy = float(-(w * np.log(w)).sum())
        return mean_t, mean_d, entropy

    def record_metrics(self, phase: str, force: bool = False) -> None:
        if self._last_metrics_step == self.t and not force:
            return
        spec_loss, gen_loss = self.eval_heldout()
        mean_t, mean_d, ent = self.weight_stats()
        sar = gar = None
        cfg = self.cfg
        if (cfg.sar_gar_interval > 0 and self.t % cfg.sar_gar_interval == 0
                and self.specific is not None):
            from .diagnostics import sar_gar

            report = sar_gar(self.main, self.theta, self.generic, self.specific,
                             cfg.sar_gar_trials, cfg.b_small, cfg.b_small,
                             self.streams["diag"])
            sar, gar = report.sar, report.gar
        rec = MetricsRecord(self.t, phase, spec_loss, gen_loss, mean_t, mean_d,
                            ent, sar, gar)
        self.metrics.append(rec)
        self._last_metrics_step = self.t
        if self.writer:
            self.writer.metrics(rec)

    # -- run -----------------------------------------------------------------

    def run(self, steps: int, phase: str = "pretrain", on_step=None) -> None:
        if steps <= 0:
            return
        started = time.time()
        if self.t == 0:
            self._snapshot(0)
            self.record_metrics(phase)
        try:
            for _ in range(steps):
                self.step()
                if on_step is not None:
                    on_step(self.t, self.theta)
                if self.state is not None and self.alpha_schedule is None \
                        and self.t % self.cfg.snapshot_stride == 0:
                    self._snapshot(self.t)
                if self.t % self.cfg.log_interval == 0:
                    self.record_metrics(phase)
        except NumericError as err:
            self._event(self.t, "numeric_abort", error=str(err))
            if self.writer:
                self.writer.checkpoint("abort_theta", self.theta)
            raise
        self._snapshot(self.t)
        self.record_metrics(phase)
        if self.writer:
            self.writer.phase_time(phase, time.time() - started)

    def result(self) -> RunResult:
        alpha = self.state.alpha if self.state is not None else None
        return RunResult(self.theta, alpha, self.trajectory, self.metrics,
                         self.events, self.bundle, self.t)


def _draw_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**63 - 1))


def _concat_batches(parts):
    if len(parts) == 1:
        return parts[0]
    ids = np.concatenate([p.ids for p in parts])
    if isinstance(parts[0], FeatureBatch):
        return FeatureBatch(ids, np.concatenate([p.x for p in parts]),
                            np.concatenate([p.y for p in parts]))
    return ByteBatch(ids, np.concatenate([p.ctx for p in parts]),
                     np.concatenate([p.target for p in parts]))


# ---------------------------------------------------------------------------
# Pipelines
# ---------------------------------------------------------------------------


def run_training(cfg: TrainConfig, writer: RunWriter | None = None,
                 bundle: TaskBundle | None = None, on_step=None) -> RunResult:
    """Dispatch on cfg.method and run the full arm, fine-tuning included."""
    if cfg.method == "cds":
        return cds_pipeline(cfg, writer, bundle)
    if cfg.method == "classifier":
        return classifier_pipeline(cfg, writer, bundle)
    streams = make_streams(cfg.seed)
    if bundle is None:
        bundle = build_task(cfg, streams["data"])
    trainer = Trainer(cfg, bundle, streams, writer)
    trainer.run(cfg.T, "pretrain", on_step=on_step)
    _finish_run(trainer, cfg, writer, streams)
    return trainer.result()


def pretrain_bilevel(cfg: TrainConfig, writer: RunWriter | None = None,
                     bundle: TaskBundle | None = None, on_step=None) -> RunResult:
    if cfg.method not in BILEVEL_METHODS:
        raise ConfigError(f"pretrain_bilevel requires a bilevel method, got {cfg.method!r}")
    return run_training(cfg, writer, bundle, on_step)


def pretrain_uniform(cfg: TrainConfig, writer=None, bundle=None, on_step=None) -> RunResult:
    return run_training(replace(cfg, method="uniform"), writer, bundle, on_step)


def mixing(cfg: TrainConfig, writer=None, bundle=None, on_step=None) -> RunResult:
    return run_training(replace(cfg, method="mixing"), writer, bundle, on_step)


def _finish_run(trainer: Trainer, cfg: TrainConfig, writer, streams) -> None:
    if cfg.finetune_steps > 0:
        theta_ft, _ = finetune_theta(trainer, cfg.finetune_steps, streams,
                                     phase="finetune")
        trainer.theta = theta_ft
        trainer.record_metrics("finetune", force=True)
    if writer:
        writer.checkpoint("final_theta", trainer.theta)
        alpha = trainer.state.alpha if trainer.state is not None else None
        if alpha is not None:
            writer.checkpoint("final_alpha", alpha)


def finetune_theta(trainer: Trainer, max_steps: int, streams,
                   phase: str = "finetune") -> tuple[ParamVector, float]:
    """SGD on the specific set, early-stopped on held-out specific loss.

    Returns the best-evaluation parameters, so the held-out specific loss
    never ends worse than where it started.
    """
    cfg = trainer.cfg
    if trainer.specific is None or len(trainer.specific) == 0:
        raise ContractError("fine-tuning requires a nonempty specific set")
    theta = trainer.theta.copy()
    buf = ParamVector.zeros(trainer.main.layout)

    def heldout(th):
        return float(np.mean(per_example_losses(
            trainer.main, th, trainer.heldout_spec.all())))

    best_loss = heldout(theta)
    best_theta = theta.copy()
    bad = 0
    for k in range(1, max_steps + 1):
        batch = sample(trainer.specific, cfg.b_small, streams["ft_sampler"])
        _, g = value_and_grad(trainer.main, theta, batch)
        buf = axpy(cfg.momentum, buf, g)
        theta = axpy(-cfg.lr, buf, theta)
        trainer.t += 1
        if k % cfg.finetune_eval_interval == 0 or k == max_steps:
            cur = heldout(theta)
            if cur < best_loss:
                best_loss, best_theta, bad = cur, theta.copy(), 0
            else:
                bad += 1
            trainer.theta = theta
            trainer.record_metrics(phase)
            if bad >= cfg.patience:
                trainer._event(trainer.t, "finetune_early_stop")
                break
    trainer.theta = best_theta
    return best_theta, best_loss


def finetune(cfg: TrainConfig, theta: ParamVector,
             bundle: TaskBundle | None = None,
             writer: RunWriter | None = None) -> tuple[ParamVector, list[MetricsRecord]]:
    """Standalone fine-tune entry: start from a given theta."""
    streams = make_streams(cfg.seed)
    if bundle is None:
        bundle = build_task(cfg, streams["data"])
    trainer = Trainer(replace(cfg, method="uniform"), bundle, streams, writer)
    trainer.theta = theta.copy()
    if cfg.finetune_steps > 0:
        finetune_theta(trainer, cfg.finetune_steps, streams)
    if writer:
        writer.checkpoint("final_theta", trainer.theta)
    return trainer.theta, trainer.metrics


# -- CDS ---------------------------------------------------------------------


def cds_pipeline(cfg: TrainConfig, writer: RunWriter | None = None,
                 bundle: TaskBundle | None = None) -> RunResult:
    """Contrastive data selection: pretrain, fine-tune a copy, keep the
    generic examples whose loss improved most, resume on the kept subset."""
    streams = make_streams(cfg.seed)
    if bundle is None:
        bundle = build_task(cfg, streams["data"])
    t1 = cfg.cds_pretrain_steps if cfg.cds_pretrain_steps > 0 else cfg.T // 2
    t1 = min(t1, cfg.T)
    trainer = Trainer(replace(cfg, method="uniform"), bundle, streams, writer)
    trainer.run(t1, "pretrain")

    theta_pre = trainer.theta.copy()
    ft_trainer = Trainer(replace(cfg, method="uniform"), bundle,
                         make_streams(cfg.seed), None)
    ft_trainer.theta = theta_pre.copy()
    ft_trainer.t = trainer.t
    theta_ft, _ = finetune_theta(ft_trainer, cfg.cds_finetune_steps,
                                 ft_trainer.streams, phase="cds-finetune")

    keep = cds_select(trainer.main, theta_pre, theta_ft,
                      bundle.datasets["generic"], cfg.cds_keep_fraction)
    trainer._event(trainer.t, "cds_selected", kept=len(keep))
    trainer.set_generic(bundle.datasets["generic"].subset(keep))
    trainer.run(cfg.T - t1, "resume")
    _finish_run(trainer, cfg, writer, streams)
    return trainer.result()


def cds_select(loss, theta_pre: ParamVector, theta_ft: ParamVector,
               generic: Dataset, keep_fraction: float) -> np.ndarray:
    """Indices (ascending, original order) of the top keep-fraction of generic
    examples by loss improvement pre -> fine-tuned."""
    batch = generic.all()
    pre = per_example_losses(loss, theta_pre, batch)
    ft = per_example_losses(loss, theta_ft, batch)
    improvement = pre - ft
    k = int(round(keep_fraction * len(generic)))
    if k <= 0:
        raise ConfigError("cds keep-fraction leaves an empty subset")
    order = np.lexsort((batch.ids, -improvement))
    return np.sort(order[:k])


# -- Domain classifier ---------------------------------------------------------


def classifier_pipeline(cfg: TrainConfig, writer: RunWriter | None = None,
                        bundle: TaskBundle | None = None) -> RunResult:
    """Train P(specific | x) on balanced batches, keep the top generic
    examples by that probability, then train the main model on them."""
    streams = make_streams(cfg.seed)
    if bundle is None:
        bundle = build_task(cfg, streams["data"])
    clf = DomainClassifier(bundle.wnet)
    params = clf.init_params(_draw_seed(streams["clf_init"]))
    buf = ParamVector.zeros(clf.layout)
    rng = streams["clf_sampler"]
    n_spec = cfg.b_small // 2
    n_gen = cfg.b_small - n_spec
    generic = bundle.datasets["generic"]
    specific = bundle.datasets["specific"]
    for _ in range(cfg.classifier_steps):
        bg = sample(generic, n_gen, rng)
        bs = sample(specific, n_spec, rng)
        batch = LabeledBatch(_concat_batches([bg, bs]),
                             np.concatenate([np.zeros(n_gen), np.ones(n_spec)]))
        _, g = value_and_grad(clf, params, batch)
        buf = axpy(cfg.momentum, buf, g)
        params = axpy(-cfg.lr, buf, params)

    acc = classifier_heldout_accuracy(clf, params, bundle)
    trainer = Trainer(replace(cfg, method="uniform"), bundle, streams, writer)
    trainer._event(0, "classifier_accuracy", accuracy=f"{acc:.4f}")
    if acc < cfg.classifier_min_accuracy:
        raise ConfigError(
            f"classifier held-out accuracy {acc:.3f} below gate "
            f"{cfg.classifier_min_accuracy:.3f}")

    p_spec = clf.prob_specific(params, generic.all())
    k = int(round(cfg.classifier_keep_fraction * len(generic)))
    if k <= 0:
        raise ConfigError("classifier keep-fraction leaves an empty subset")
    order = np.lexsort((generic.ids, -p_spec))
    keep = np.sort(order[:k])
    trainer._event(0, "classifier_selected", kept=len(keep))
    trainer.set_generic(generic.subset(keep))
    trainer.run(cfg.T, "pretrain")
    _finish_run(trainer, cfg, writer, streams)
    return trainer.result()


def classifier_heldout_accuracy(clf: DomainClassifier, params: ParamVector,
                                bundle: TaskBundle) -> float:
    hg = bundle.datasets["heldout-generic"]
    hs = bundle.datasets["heldout-specific"]
    n = min(len(hg), len(hs))
    pg = clf.prob_specific(params, hg.batch(np.arange(n)))
    ps = clf.prob_specific(params, hs.batch(np.arange(n)))
    return float(np.concatenate([(pg < 0.5), (ps >= 0.5)]).mean())


# -- Curriculum ablation and weight transfer -------------------------------------


def trajectory_schedule(trajectory: list[tuple[int, ParamVector]],
                        mode: str, perm_rng: np.random.Generator | None = None):
    """Step -> alpha function. `final` pins the last snapshot; `shuffled`
    permutes the snapshot order while keeping the step boundaries."""
    if not trajectory:
        raise ContractError("empty weight trajectory")
    steps = [t for t, _ in trajectory]
    if any(b <= a for a, b in zip(steps, steps[1:])):
        raise ContractError("trajectory steps must be strictly increasing")
    alphas = [a for _, a in trajectory]
    if mode == "final":
        last = alphas[-1]
        return lambda t: last
    if mode != "shuffled":
        raise ContractError(f"unknown curriculum mode {mode!r}")
    if perm_rng is None:
        raise ContractError("shuffled mode needs a permutation rng")
    perm = perm_rng.permutation(len(alphas))
    shuffled = [alphas[i] for i in perm]

    def schedule(t: int) -> ParamVector:
        j = int(np.searchsorted(steps, t, side="right")) - 1
        return shuffled[max(j, 0)]

    return schedule


def curriculum_ablation(trajectory: list[tuple[int, ParamVector]], mode: str,
                        cfg: TrainConfig, writer: RunWriter | None = None,
                        bundle: TaskBundle | None = None) -> RunResult:
    streams = make_streams(cfg.seed)
    if bundle is None:
        bundle = build_task(cfg, streams["data"])
    schedule = trajectory_schedule(trajectory, mode, streams["perm"])
    trainer = Trainer(cfg, bundle, streams, writer, alpha_schedule=schedule)
    trainer.run(cfg.T, f"curriculum-{mode}")
    _finish_run(trainer, cfg, writer, streams)
    return trainer.result()


def transfer_weights(trajectory: list[tuple[int, ParamVector]],
                     large_cfg: TrainConfig, writer: RunWriter | None = None,
                     bundle: TaskBundle | None = None) -> RunResult:
    """Train the (larger) main model with the weighting frozen at the final
    snapshot of a previous run."""
    if not trajectory:
        raise ContractError("empty weight trajectory")
    streams = make_streams(large_cfg.seed)
    if bundle is None:
        bundle = build_task(large_cfg, streams["data"])
    alpha = trajectory[-1][1]
    if alpha.layout != bundle.wnet.layout:
        raise ConfigError("weighting-net input spec differs between scales")
    trainer = Trainer(large_cfg, bundle, streams, writer,
                      alpha_schedule=lambda t: alpha)
    trainer.run(large_cfg.T, "transfer")
    _finish_run(trainer, large_cfg, writer, streams)
    return trainer.result()


def load_trajectory(run_dir: str | Path) -> list[tuple[int, ParamVector]]:
    traj_dir = Path(run_dir) / "trajectory"
    if not traj_dir.exists():
        raise ConfigError(f"no trajectory directory under {run_dir}")
    out = []
    for manifest in sorted(traj_dir.glob("alpha_*.manifest")):
        t = int(manifest.stem.split("_")[1])
        out.append((t, load_checkpoint(traj_dir, manifest.stem)))
    if not out:
        raise ConfigError(f"no trajectory snapshots under {run_dir}")
    return out
