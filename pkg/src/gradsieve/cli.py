"""Command-line entry point: train, finetune, diagnose, oracle-check, export,
curriculum, transfer.

Exit codes: 0 success, 2 configuration/contract errors (single-line message
with an `error[config]:` prefix), 3 numeric aborts (last good checkpoint is
retained in the run directory).
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, NumericError
from .models import load_checkpoint
from .pipelines import (METRIC_COLUMNS, MetricsRecord, RunWriter, TrainConfig,
                        apply_overrides, build_task, curriculum_ablation,
                        finetune, load_config, load_trajectory, make_streams,
                        run_training, transfer_weights)

OUT_ROOT_ENV = "GRADSIEVE_OUT"


def _fail(category: str, message: str, code: int) -> int:
    first_line = str(message).splitlines()[0] if str(message) else category
    print(f"error[{category}]: {first_line}", file=sys.stderr)
    return code


def _out_root(args) -> Path:
    if getattr(args, "out_root", None):
        return Path(args.out_root)
    return Path(os.environ.get(OUT_ROOT_ENV, "runs"))


def _new_run_dir(args, seed: int) -> tuple[Path, str]:
    root = _out_root(args)
    base = getattr(args, "run_id", None) or f"{time.strftime('%Y%m%d-%H%M%S')}-seed{seed}"
    run_id = base
    k = 1
    while (root / run_id).exists():
        run_id = f"{base}-{k}"
        k += 1
    return root / run_id, run_id


def _load_cfg(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.set:
        cfg = apply_overrides(cfg, args.set)
    return cfg


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    run_dir, run_id = _new_run_dir(args, cfg.seed)
    writer = RunWriter(run_dir, cfg, run_id)
    try:
        run_training(cfg, writer)
    finally:
        writer.finalize()
    print(run_dir)
    return 0


def cmd_finetune(args) -> int:
    run_dir = Path(args.run_dir)
    cfg = load_config(run_dir / "config.cfg")
    if args.set:
        cfg = apply_overrides(cfg, args.set)
    if cfg.finetune_steps <= 0:
        raise ConfigError("finetune requires finetune_steps > 0 (use --set)")
    theta = load_checkpoint(run_dir / "checkpoints", "final_theta")
    out_dir, run_id = _new_run_dir(args, cfg.seed)
    writer = RunWriter(out_dir, cfg, run_id)
    try:
        finetune(cfg, theta, writer=writer)
    finally:
        writer.finalize()
    print(out_dir)
    return 0


def cmd_diagnose(args) -> int:
    from .diagnostics import sar_gar

    run_dir = Path(args.run_dir)
    cfg = load_config(run_dir / "config.cfg")
    if args.trials is not None and args.trials < 100:
        raise ContractError("diagnose requires trials >= 100")
    trials = args.trials if args.trials is not None else 1000
    streams = make_streams(cfg.seed)
    bundle = build_task(cfg, streams["data"])
    theta = load_checkpoint(run_dir / "checkpoints", args.checkpoint)
    if theta.layout != bundle.main.layout:
        raise ContractError("checkpoint layout does not match the configured model")
    report = sar_gar(bundle.main, theta, bundle.datasets["generic"],
                     bundle.datasets["specific"], trials, cfg.b_small,
                     cfg.b_small, streams["diag"])
    print(report.summary())
    rec = MetricsRecord(step=cfg.T, phase="diagnose", sar=report.sar,
                        gar=report.gar)
    with open(run_dir / "metrics.csv", "a") as fh:
        fh.write(rec.row() + "\n")
    return 0


def cmd_oracle_check(args) -> int:
    from .numcore import relative_error
    from .oracle import (analytic_hypergrad, exact_v, finite_diff_hypergrad,
                         random_instance, soba_dalpha, theta_star)

    rng = np.random.default_rng(args.seed)
    max_fd = 0.0
    max_soba = 0.0
    for _ in range(args.instances):
        inst = random_instance(rng)
        alpha = rng.standard_normal(inst.n)
        gh = analytic_hypergrad(inst, alpha)
        max_fd = max(max_fd, relative_error(gh, finite_diff_hypergrad(inst, alpha)))
        ts = theta_star(inst, alpha)
        dalpha = soba_dalpha(inst, alpha, ts, exact_v(inst, alpha, ts))
        max_soba = max(max_soba, relative_error(gh, dalpha))
    ok = max_fd <= args.tol and max_soba <= args.tol
    print(f"hypergrad vs finite differences: max rel err {max_fd:.3e}")
    print(f"soba dalpha vs analytic hypergrad: max rel err {max_soba:.3e}")
    print("OK" if ok else f"TOLERANCE VIOLATION (> {args.tol:g})")
    return 0 if ok else 1


def cmd_export(args) -> int:
    out_rows = []
    for run in args.run_dirs:
        run = Path(run)
        metrics = run / "metrics.csv"
        if not metrics.exists():
            raise ConfigError(f"no metrics.csv under {run}")
        lines = metrics.read_text().splitlines()
        if not lines or lines[0].split(",") != list(METRIC_COLUMNS):
            raise ConfigError(f"unexpected metrics header in {metrics}")
        series_dir = run / "export"
        series_dir.mkdir(exist_ok=True)
        cells_by_row = []
        for rowno, line in enumerate(lines[1:], start=2):
            cells = line.split(",")
            if len(cells) != len(METRIC_COLUMNS):
                print(f"error[export]: malformed metrics row {rowno} in {metrics}",
                      file=sys.stderr)
                return 3
            cells_by_row.append(cells)
        for j, col in enumerate(METRIC_COLUMNS[2:], start=2):
            body = [f"{c[0]},{c[j]}" for c in cells_by_row if c[j] != ""]
            (series_dir / f"{col}.csv").write_text(
                "\n".join([f"step,{col}"] + body) + "\n")
        method = _run_method(run)
        pre, ft = _summary_losses(cells_by_row)
        out_rows.append((run.name, method, pre, ft))

    summary = ["run,method,pretrain_heldout_specific_loss,finetune_heldout_specific_loss"]
    for name, method, pre, ft in out_rows:
        summary.append(f"{name},{method},{pre},{ft}")
    target = Path(args.summary) if args.summary else Path(args.run_dirs[0]) / "export" / "summary.csv"
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text("\n".join(summary) + "\n")
    print(target)
    return 0


def _run_method(run: Path) -> str:
    cfg_path = run / "config.cfg"
    if cfg_path.exists():
        for line in cfg_path.read_text().splitlines():
            if line.startswith("method"):
                return line.split("=", 1)[1].strip()
    return "?"


def _summary_losses(cells_by_row) -> tuple[str, str]:
    pre = ft = ""
    for cells in cells_by_row:
        phase, loss = cells[1], cells[2]
        if loss == "":
            continue
        if phase in ("pretrain", "resume", "transfer") or phase.startswith("curriculum"):
            pre = loss
        elif phase == "finetune":
            ft = loss
    return pre, ft


def cmd_curriculum(args) -> int:
    run_dir = Path(args.run_dir)
    cfg = load_config(run_dir / "config.cfg")
    if args.set:
        cfg = apply_overrides(cfg, args.set)
    trajectory = load_trajectory(run_dir)
    out_dir, run_id = _new_run_dir(args, cfg.seed)
    writer = RunWriter(out_dir, cfg, run_id)
    try:
        curriculum_ablation(trajectory, args.mode, cfg, writer)
    finally:
        writer.finalize()
    print(out_dir)
    return 0


def cmd_transfer(args) -> int:
    run_dir = Path(args.run_dir)
    cfg = load_config(run_dir / "config.cfg")
    if args.set:
        cfg = apply_overrides(cfg, args.set)
    trajectory = load_trajectory(run_dir)
    out_dir, run_id = _new_run_dir(args, cfg.seed)
    writer = RunWriter(out_dir, cfg, run_id)
    try:
        transfer_weights(trajectory, cfg, writer)
    finally:
        writer.finalize()
    print(out_dir)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gradsieve",
                                description="Bilevel data selection at desk scale")
    sub = p.add_subparsers(dest="command", required=True)

    def add_common(sp, config_positional=False):
        if config_positional:
            sp.add_argument("config", help="path to a key = value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable, last wins)")
        sp.add_argument("--out-root", default=None,
                        help=f"output root (default ${OUT_ROOT_ENV} or ./runs)")
        sp.add_argument("--run-id", default=None, help="run directory name")

    sp = sub.add_parser("train", help="run one training arm end to end")
    add_common(sp, config_positional=True)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("finetune", help="fine-tune a finished run on the specific set")
    sp.add_argument("run_dir")
    add_common(sp)
    sp.set_defaults(fn=cmd_finetune)

    sp = sub.add_parser("diagnose", help="SAR/GAR alignment report for a checkpoint")
    sp.add_argument("run_dir")
    sp.add_argument("--trials", type=int, default=None)
    sp.add_argument("--checkpoint", default="final_theta")
    sp.set_defaults(fn=cmd_diagnose)

    sp = sub.add_parser("oracle-check", help="verify hypergradients on random instances")
    sp.add_argument("--instances", type=int, default=50)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--tol", type=float, default=1e-6)
    sp.set_defaults(fn=cmd_oracle_check)

    sp = sub.add_parser("export", help="emit per-metric series and an arm summary")
    sp.add_argument("run_dirs", nargs="+")
    sp.add_argument("--summary", default=None, help="summary csv path")
    sp.set_defaults(fn=cmd_export)

    sp = sub.add_parser("curriculum", help="retrain with final or shuffled weighting")
    sp.add_argument("run_dir")
    sp.add_argument("--mode", choices=("final", "shuffled"), required=True)
    add_common(sp)
    sp.set_defaults(fn=cmd_curriculum)

    sp = sub.add_parser("transfer", help="train a larger model with frozen weighting")
    sp.add_argument("run_dir")
    add_common(sp)
    sp.set_defaults(fn=cmd_transfer)

    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as err:
        loc = ""
        if err.line is not None:
            loc = f" (line {err.line}" + (f", col {err.col})" if err.col else ")")
        return _fail("config", f"{err}{loc}", 2)
    except ContractError as err:
        return _fail("config", str(err), 2)
    except FileNotFoundError as err:
        return _fail("config", str(err), 2)
    except NumericError as err:
        return _fail("numeric", str(err), 3)


if __name__ == "__main__":
    sys.exit(main())
