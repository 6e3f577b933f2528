"""Model surgery: multi-component ablation, pruning, and weight rewinding.

Three levels of intervention, in increasing permanence:

* group ablation masks several components at once in a trained model and
  charts quality against the number of masked components, without any
  retraining;
* pruning removes components from the architecture and retrains from
  scratch, compared against the standard model and a parameter-matched
  shallow-decoder model;
* rewinding resets selected components to their exact initialization
  weights inside an otherwise trained model, then fine-tunes everything,
  compared against fine-tuning without the reset on an identical budget.
"""

from __future__ import annotations

import dataclasses
import json
import math
from typing import Iterable, Optional, Sequence

from .analysis import (
    contribution_grid_for,
    eval_bleu,
    eval_pairs_for,
    fan_out,
    write_artifact,
)
from .importance import ImportanceGrid
from .model import (
    ComponentId,
    MaskSpec,
    Parameters,
    component_param_names,
    components,
    param_count,
)
from . import tensor as tz
from .training import FINETUNE_FRACTION, RunDirectory, finetune, train

STRATEGIES = ("greedy", "static")


def group_ablation(
    params: Parameters,
    pairs,
    k_max: int,
    strategy: str = "greedy",
    grid: Optional[ImportanceGrid] = None,
    jobs: int = 1,
) -> list:
    """Mask components cumulatively; returns rows of (k, bleu, component).

    Greedy re-evaluates every remaining candidate each round and keeps the
    one whose additional masking hurts least. Static follows ascending
    single-component contribution order from ``grid``. Row k=0 is the
    unmasked baseline.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"strategy must be one of {STRATEGIES}, got '{strategy}'")
    order = components(params.config)
    if not (0 <= k_max <= len(order)):
        raise ValueError(f"k_max must be in [0, {len(order)}], got {k_max}")

    baseline = eval_bleu(params, pairs)
    rows = [{"k": 0, "bleu": baseline, "component": None}]
    masked: list = []

    if strategy == "static":
        if grid is None:
            grid = contribution_grid_for(params, pairs, jobs=jobs)
        ranked = sorted(order, key=lambda c: (grid.scores[c], c.sort_key()))
        for k, cid in enumerate(ranked[:k_max], start=1):
            masked.append(cid)
            score = eval_bleu(params, pairs, mask=MaskSpec(masked))
            rows.append({"k": k, "bleu": score, "component": cid.key})
        return rows

    remaining = list(order)
    for k in range(1, k_max + 1):
        def score_with(cid: ComponentId) -> float:
            return eval_bleu(params, pairs, mask=MaskSpec(masked + [cid]))

        scores = fan_out(score_with, remaining, jobs)
        best_idx = min(range(len(remaining)),
                       key=lambda i: (-scores[i], remaining[i].sort_key()))
        masked.append(remaining.pop(best_idx))
        rows.append({"k": k, "bleu": scores[best_idx], "component": masked[-1].key})
    return rows


def select_unimportant(grid: ImportanceGrid, fraction: float) -> list:
    """The ceil(fraction * N) lowest-scoring components, ties resolved by
    position (encoder before decoder, lower layers first)."""
    if not (0.0 < fraction < 1.0):
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    order = sorted(grid.scores, key=lambda c: (grid.scores[c], c.sort_key()))
    take = math.ceil(fraction * len(order))
    return order[:take]


def rewind_components(params: Parameters, ids: Iterable[ComponentId]) -> Parameters:
    """Copy of the checkpoint with the named components' weights set
    bit-exactly to their initialization values. Idempotent."""
    if not params.init_values:
        raise ValueError("checkpoint carries no initialization snapshot")
    out = params.clone()
    existing = set(components(params.config))
    for cid in ids:
        if cid not in existing:
            raise ValueError(f"cannot rewind unknown or removed component {cid.key}")
        for name in component_param_names(params.config, cid):
            out.values[name] = tz.parameter(params.init_values[name].copy())
    return out


def _grid_for(run: RunDirectory, eval_set: str, jobs: int,
              grid: Optional[ImportanceGrid]) -> ImportanceGrid:
    if grid is not None:
        return grid
    stored = run.analysis_dir / "contribution.json"
    if stored.exists():
        return ImportanceGrid.from_json(stored.read_text())
    from .analysis import run_contribution

    return run_contribution(run, eval_set=eval_set, jobs=jobs)


def prune_experiment(
    run: RunDirectory,
    fraction: float = 0.2,
    out_dir=None,
    eval_set: str = "test",
    jobs: int = 1,
    grid: Optional[ImportanceGrid] = None,
    log=print,
    write: bool = True,
) -> dict:
    """Retrain three architectures from scratch with shared hyper-parameters:
    the standard model, the model with the least-contributing components
    removed, and a shallow-decoder model matched to the pruned parameter
    count. The standard arm reuses the base run, which training determinism
    makes byte-identical to retraining it. The shallow arm never drops below
    one decoder layer, so on very small models it may stay above the pruned
    parameter count; the reported depth makes that visible.
    """
    exp = run.experiment()
    out_root = run.path / "prune" if out_dir is None else out_dir
    grid = _grid_for(run, eval_set, jobs, grid)
    ids = select_unimportant(grid, fraction)

    pruned_model = dataclasses.replace(
        exp.model, removed=exp.model.removed | frozenset(ids))
    pruned_exp = dataclasses.replace(exp, model=pruned_model)

    target = param_count(pruned_model)
    depth = exp.model.dec_layers
    while depth > 1 and param_count(dataclasses.replace(exp.model, dec_layers=depth)) > target:
        depth -= 1
    shallow_model = dataclasses.replace(exp.model, dec_layers=depth)
    shallow_exp = dataclasses.replace(exp, model=shallow_model)

    log(f"[prune] removing {[c.key for c in ids]}")
    pruned_run = train(pruned_exp, out_root / "pruned", log=log)
    shallow_run = train(shallow_exp, out_root / "shallow_decoder", log=log)

    pairs = eval_pairs_for(run, eval_set)
    arms = {}
    for name, arm_run, model in (
        ("standard", run, exp.model),
        ("pruned", pruned_run, pruned_model),
        ("shallow_decoder", shallow_run, shallow_model),
    ):
        params = arm_run.load_checkpoint("final")
        arms[name] = {
            "run": str(arm_run.path),
            "param_count": param_count(model),
            "dec_layers": model.dec_layers,
            "bleu": eval_bleu(params, pairs),
        }
    report = {
        "selected": [cid.key for cid in ids],
        "fraction": fraction,
        "eval_set": eval_set,
        "arms": arms,
    }
    if write:
        write_artifact(run, "prune.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def rewind_experiment(
    run: RunDirectory,
    fraction: float = 0.2,
    extra_steps: Optional[int] = None,
    out_dir=None,
    eval_set: str = "test",
    jobs: int = 1,
    grid: Optional[ImportanceGrid] = None,
    log=print,
    write: bool = True,
) -> dict:
    """Compare three arms from one trained model: leave it alone, fine-tune
    as is, or rewind the least-contributing components to initialization and
    fine-tune. Both fine-tuning arms consume identical seeds, batches, and
    step budgets, so the reset is the only difference.
    """
    exp = run.experiment()
    out_root = run.path / "rewind" if out_dir is None else out_dir
    grid = _grid_for(run, eval_set, jobs, grid)
    ids = select_unimportant(grid, fraction)

    base_final = run.load_checkpoint("final")
    if extra_steps is None:
        extra_steps = max(1, math.ceil(FINETUNE_FRACTION * base_final.step))

    pairs = eval_pairs_for(run, eval_set)
    standard_bleu = eval_bleu(base_final, pairs)

    log(f"[rewind] resetting {[c.key for c in ids]}, {extra_steps} extra steps")
    continue_run = finetune(run, out_root / "continue", extra_steps, log=log)

    rewound = rewind_components(base_final, ids)
    rewound_before_bleu = eval_bleu(rewound, pairs)
    rewind_run = finetune(run, out_root / "rewind", extra_steps,
                          override_params=rewound, log=log)

    continue_final = continue_run.load_checkpoint("final")
    rewind_final = rewind_run.load_checkpoint("final")
    report = {
        "selected": [cid.key for cid in ids],
        "fraction": fraction,
        "eval_set": eval_set,
        "extra_steps": extra_steps,
        "arms": {
            "standard": {"bleu": standard_bleu, "steps": base_final.step},
            "continue": {"bleu": eval_bleu(continue_final, pairs),
                         "steps": continue_final.step,
                         "run": str(continue_run.path)},
            "rewind": {"bleu": eval_bleu(rewind_final, pairs),
                       "steps": rewind_final.step,
                       "run": str(rewind_run.path),
                       "bleu_before_finetune": rewound_before_bleu},
        },
    }
    if write:
        write_artifact(run, "rewind.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report
