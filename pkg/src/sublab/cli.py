"""Command-line front end.

One executable, ``sublab``, with a subcommand per experiment stage:
training, the importance analyzers, surgery, sweeps, and rendering.
Every subcommand writes its artifacts under the run directory and is
idempotent; rerunning with the same inputs rewrites identical bytes.

Exit codes: 0 on success, 1 on bad configs or failed analysis
(message on stderr), 2 on unknown flags or malformed arguments.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import analysis, report, surgery
from .config import ConfigError, parse_config
from .linalg import SvdConvergenceError
from .tensor import NonFiniteError
from .training import RunDirectory, TrainingDivergedError, train


def _open_run(path: str) -> RunDirectory:
    run = RunDirectory(Path(path))
    if not run.config_path.exists():
        raise FileNotFoundError(f"not a run directory (no config.ini): {path}")
    return run


def _checkpoint(value: str):
    if value == "final":
        return value
    return int(value)


def _floats(value: str) -> tuple:
    return tuple(float(part) for part in value.split(","))


def _ints(value: str) -> tuple:
    return tuple(int(part) for part in value.split(","))


def _warn_degenerate(grid) -> None:
    for flag in grid.flags:
        print(f"warning: {flag} (baseline {grid.baseline:.2f} BLEU)", file=sys.stderr)


def _print_grid(grid) -> None:
    _warn_degenerate(grid)
    print(report.grid_csv(grid), end="")


def cmd_train(args) -> int:
    text = Path(args.config).read_text() if args.config else None
    exp = parse_config(text if text is not None else "")
    run = train(exp, Path(args.out), config_text=text)
    history = run.read_metrics()
    if history:
        last = history[-1]
        print(f"finished epoch {last['epoch']} at step {last['step']}: "
              f"valid BLEU {last['valid_bleu']:.2f}")
    print(f"run written to {run.path}")
    return 0


def cmd_contribution(args) -> int:
    run = _open_run(args.run)
    grid = analysis.run_contribution(run, eval_set=args.eval_set,
                                     checkpoint=args.checkpoint, jobs=args.jobs)
    _print_grid(grid)
    return 0


def cmd_criticality(args) -> int:
    run = _open_run(args.run)
    grid, _ = analysis.run_criticality(
        run, eval_set=args.eval_set, checkpoint=args.checkpoint,
        alphas=args.alpha_grid, epsilon=args.epsilon,
        jobs=args.jobs, full_curve=args.full_curve)
    _print_grid(grid)
    return 0


def cmd_pwcca(args) -> int:
    run = _open_run(args.run)
    grid = analysis.run_pwcca(run, eval_set=args.eval_set,
                              checkpoint=args.checkpoint, probes=args.probes)
    _print_grid(grid)
    return 0


def cmd_isometry(args) -> int:
    run = _open_run(args.run)
    grid = analysis.run_isometry(run, eval_set=args.eval_set,
                                 checkpoint=args.checkpoint, at=args.at,
                                 positions=args.positions)
    _print_grid(grid)
    return 0


def cmd_dynamics(args) -> int:
    run = _open_run(args.run)
    grids = analysis.run_dynamics(run, eval_set=args.eval_set,
                                  epochs=args.epochs, jobs=args.jobs)
    for epoch in sorted(grids):
        print(f"epoch {epoch}:")
        print(report.grid_csv(grids[epoch]), end="")
    return 0


def cmd_group_ablate(args) -> int:
    run = _open_run(args.run)
    params = run.load_checkpoint(args.checkpoint)
    pairs = analysis.eval_pairs_for(run, args.eval_set)
    rows = surgery.group_ablation(params, pairs, k_max=args.k,
                                  strategy=args.strategy, jobs=args.jobs)
    text = report.ablation_csv(rows)
    analysis.write_artifact(run, f"group_ablation_{args.strategy}.csv", text)
    print(text, end="")
    return 0


def cmd_prune(args) -> int:
    run = _open_run(args.run)
    result = surgery.prune_experiment(run, fraction=args.fraction,
                                      out_dir=args.out, eval_set=args.eval_set,
                                      jobs=args.jobs)
    print(report.prune_table(result), end="")
    return 0


def cmd_rewind(args) -> int:
    run = _open_run(args.run)
    result = surgery.rewind_experiment(run, fraction=args.fraction,
                                       extra_steps=args.extra_steps,
                                       out_dir=args.out, eval_set=args.eval_set,
                                       jobs=args.jobs)
    print(report.rewind_table(result), end="")
    return 0


def cmd_sweep(args) -> int:
    text = Path(args.config).read_text() if args.config else ""
    exp = parse_config(text)
    parse = _floats if args.param == "dropout" else _ints
    values = parse(args.values)
    result = analysis.run_sweep(exp, args.param, values, Path(args.out),
                                eval_set=args.eval_set, jobs=args.jobs,
                                threshold=args.threshold)
    table = report.sweep_table(result)
    stem = f"sweep_{args.param.replace('-', '_')}"
    (Path(args.out) / f"{stem}.txt").write_text(table)
    print(table, end="")
    return 0


def cmd_report(args) -> int:
    run = _open_run(args.run)
    written = report.render_run(run)
    if not written:
        print(f"nothing to render: no analysis artifacts in {run.analysis_dir}",
              file=sys.stderr)
        return 1
    for name in written:
        print(f"wrote {run.analysis_dir / name}")
    return 0


def _add_run_arguments(sub, checkpoint: bool = True) -> None:
    sub.add_argument("--run", required=True,
                     help="run directory produced by 'sublab train'")
    sub.add_argument("--eval-set", default="test", choices=analysis.EVAL_SETS,
                     help="which split to evaluate (default: test)")
    sub.add_argument("--jobs", type=int, default=1,
                     help="thread fan-out across components (default: 1)")
    if checkpoint:
        sub.add_argument("--checkpoint", type=_checkpoint, default="final",
                         help="'final' or an epoch number (default: final)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sublab",
        description="Train small encoder-decoder transformers and measure "
                    "which residual sub-layers matter.")
    commands = parser.add_subparsers(dest="command", required=True)

    sub = commands.add_parser("train", help="train a model from a config file")
    sub.add_argument("--config", help="INI config; omit to use built-in defaults")
    sub.add_argument("--out", required=True, help="run directory to create")
    sub.set_defaults(handler=cmd_train)

    sub = commands.add_parser("contribution",
                              help="masked-BLEU contribution grid")
    _add_run_arguments(sub)
    sub.set_defaults(handler=cmd_contribution)

    sub = commands.add_parser("criticality",
                              help="init-interpolation criticality grid")
    _add_run_arguments(sub)
    sub.add_argument("--alpha-grid", type=_floats, default=None,
                     help="comma-separated interpolation factors, e.g. 0,0.5,1")
    sub.add_argument("--epsilon", type=float, default=None,
                     help="recovery tolerance in BLEU (default: max(0.5, 1%% of baseline))")
    sub.add_argument("--full-curve", action="store_true",
                     help="evaluate every grid point instead of stopping at recovery")
    sub.set_defaults(handler=cmd_criticality)

    sub = commands.add_parser("pwcca",
                              help="representation similarity to decoder output")
    _add_run_arguments(sub)
    sub.add_argument("--probes", type=int, default=analysis.PWCCA_PROBE_SENTENCES,
                     help="sentences used to collect activations (default: 64)")
    sub.set_defaults(handler=cmd_pwcca)

    sub = commands.add_parser("isometry",
                              help="mean Jacobian singular value per sub-layer")
    _add_run_arguments(sub)
    sub.add_argument("--at", default="init", choices=("init", "final"),
                     help="measure the initialized or the trained weights")
    sub.add_argument("--positions", type=int, default=analysis.ISOMETRY_MIN_POSITIONS,
                     help="number of probe positions (default: 8)")
    sub.set_defaults(handler=cmd_isometry)

    sub = commands.add_parser("dynamics",
                              help="contribution grids across epoch checkpoints")
    _add_run_arguments(sub, checkpoint=False)
    sub.add_argument("--epochs", type=_ints, default=None,
                     help="comma-separated epoch numbers (default: all)")
    sub.set_defaults(handler=cmd_dynamics)

    sub = commands.add_parser("group-ablate",
                              help="BLEU after masking k components at once")
    _add_run_arguments(sub)
    sub.add_argument("--k", type=int, required=True,
                     help="largest group size to ablate")
    sub.add_argument("--strategy", default="greedy", choices=surgery.STRATEGIES,
                     help="greedy re-selection or static grid order")
    sub.set_defaults(handler=cmd_group_ablate)

    sub = commands.add_parser("prune",
                              help="retrain with the least useful components removed")
    _add_run_arguments(sub, checkpoint=False)
    sub.add_argument("--fraction", type=float, default=0.2,
                     help="fraction of components to remove (default: 0.2)")
    sub.add_argument("--out", default=None,
                     help="directory for the arm runs (default: <run>/prune)")
    sub.set_defaults(handler=cmd_prune)

    sub = commands.add_parser("rewind",
                              help="reset unimportant components to init, then fine-tune")
    _add_run_arguments(sub, checkpoint=False)
    sub.add_argument("--fraction", type=float, default=0.2,
                     help="fraction of components to rewind (default: 0.2)")
    sub.add_argument("--extra-steps", type=int, default=None,
                     help="fine-tuning budget (default: 20%% of base steps)")
    sub.add_argument("--out", default=None,
                     help="directory for the arm runs (default: <run>/rewind)")
    sub.set_defaults(handler=cmd_rewind)

    sub = commands.add_parser("sweep",
                              help="train one run per setting and compare grids")
    sub.add_argument("--param", required=True, choices=analysis.SWEEP_PARAMS)
    sub.add_argument("--values", required=True,
                     help="comma-separated values, e.g. 0.0,0.1,0.3,0.5")
    sub.add_argument("--out", required=True, help="directory for the sweep runs")
    sub.add_argument("--config", help="base INI config; omit for defaults")
    sub.add_argument("--eval-set", default="test", choices=analysis.EVAL_SETS)
    sub.add_argument("--jobs", type=int, default=1,
                     help="train sweep points in parallel (default: 1)")
    sub.add_argument("--threshold", type=float, default=analysis.IMPORTANT_THRESHOLD,
                     help="contribution score counted as important (default: 0.5)")
    sub.set_defaults(handler=cmd_sweep)

    sub = commands.add_parser("report",
                              help="render stored grids to CSV and SVG")
    sub.add_argument("--run", required=True)
    sub.set_defaults(handler=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError, NotADirectoryError,
            TrainingDivergedError, NonFiniteError, SvdConvergenceError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
