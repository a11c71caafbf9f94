#!/usr/bin/env python3
"""Build the committed needle-recovery fixture.

Runs the uniform baseline and the brute-force oracle (training directly on
target-domain data) for both needle tasks over the acceptance seeds, and
freezes the task configs, per-method overrides, and reference losses into
tests/fixtures/needle_reference.json. The acceptance suite replays these
configs and compares against the recorded references.
"""

import json
import sys
from dataclasses import replace
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from gradsieve.pipelines import TrainConfig, run_training  # noqa: E402

SEEDS = [1, 2, 3, 4, 5]

QUADRATIC = dict(
    task="quadratic", T=2000, lr=0.02, b_small=16, b_large=128,
    n_generic=4000, n_specific=200, n_heldout_specific=256,
    n_heldout_generic=512, feature_dim=6, target_fraction=0.05,
    domain_separation=1.5, noise_std=0.05, score_clamp=4.0,
    wnet_hidden=32, log_interval=500,
)

TEXT = dict(
    task="text", T=2000, lr=0.05, b_small=16, b_large=128,
    n_generic=24000, n_specific=400, n_heldout_specific=256,
    n_heldout_generic=512, mix=0.95, window=8, score_clamp=4.0,
    wnet_hidden=32, log_interval=500,
)

METHOD_OVERRIDES = {
    "dds": dict(eta_alpha=1.0, eta_alpha_decay="linear"),
    "soba": dict(eta_alpha=1.0, eta_v=0.05, v_max=2.0),
    "anograd": dict(eta_alpha=2.0, eta_alpha_decay="linear"),
}


def oracle_config(cfg: TrainConfig) -> TrainConfig:
    """Brute-force oracle: the generic pool is replaced by pure target data."""
    if cfg.task == "quadratic":
        return replace(cfg, method="uniform", target_fraction=1.0)
    return replace(cfg, method="uniform", mix=0.0)


def main() -> None:
    out = {"seeds": SEEDS, "required_wins": 4, "weight_ratio_min": 2.0,
           "tasks": {}}
    for name, params in (("quadratic", QUADRATIC), ("text", TEXT)):
        base = TrainConfig(**params)
        uniform_losses, oracle_losses = [], []
        for seed in SEEDS:
            u = run_training(replace(base, method="uniform", seed=seed))
            uniform_losses.append(u.metrics[-1].heldout_specific_loss)
            o = run_training(replace(oracle_config(base), seed=seed))
            oracle_losses.append(o.metrics[-1].heldout_specific_loss)
            print(f"{name} seed={seed}: uniform={uniform_losses[-1]:.4f} "
                  f"oracle={oracle_losses[-1]:.4f}")
        out["tasks"][name] = {
            "config": params,
            "method_overrides": METHOD_OVERRIDES,
            "uniform_heldout_specific": uniform_losses,
            "oracle_heldout_specific": oracle_losses,
        }
    target = Path(__file__).resolve().parents[1] / "tests" / "fixtures"
    target.mkdir(parents=True, exist_ok=True)
    path = target / "needle_reference.json"
    path.write_text(json.dumps(out, indent=2) + "\n")
    print("wrote", path)


if __name__ == "__main__":
    main()
