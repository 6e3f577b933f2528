"""Analyzers that turn a trained run into importance artifacts.

Every function here takes a RunDirectory, measures something about its
checkpoints, writes a JSON artifact under ``<run>/analysis/``, and returns
the in-memory result. Measurement fan-out across components is optionally
threaded; aggregation order is always the canonical component order, so
results do not depend on scheduling.
"""

from __future__ import annotations

import dataclasses
import json
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as tz
from .cca import pwcca
from .data import PAD, batch_arrays
from .evaluation import evaluate
from .importance import (
    CLIP_FRACTION,
    DEGENERATE_BASELINE,
    ImportanceGrid,
    alpha_grid,
    contribution_from_drops,
    criticality_grid,
    recovery_threshold,
)
from .linalg import svd
from .config import ExperimentConfig, corpus_for
from .model import (
    ComponentId,
    InterpolationSpec,
    MaskSpec,
    Parameters,
    Side,
    causal_bias,
    components,
    forward,
    pad_mask_bias,
    residual_block,
)
from .tensor import backward
from .training import RunDirectory, train

EVAL_SETS = ("train", "valid", "test")
PWCCA_PROBE_SENTENCES = 64
ISOMETRY_MIN_POSITIONS = 8
IMPORTANT_THRESHOLD = 0.5
SWEEP_PARAMS = ("dropout", "data-size", "seed", "depth", "width")


def eval_pairs_for(run: RunDirectory, eval_set: str) -> list:
    if eval_set not in EVAL_SETS:
        raise ValueError(f"eval_set must be one of {EVAL_SETS}, got '{eval_set}'")
    exp = run.experiment()
    return corpus_for(exp.data)[eval_set].pairs


def eval_bleu(params: Parameters, pairs, mask=None, interp=None) -> float:
    return evaluate(params, pairs, mask=mask, interp=interp).bleu


def fan_out(fn, items: Sequence, jobs: int) -> list:
    """Apply fn to items, optionally threaded; results keep item order."""
    if jobs <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def write_artifact(run: RunDirectory, name: str, text: str) -> None:
    run.analysis_dir.mkdir(exist_ok=True)
    (run.analysis_dir / name).write_text(text)


# ---------------------------------------------------------------------------
# contribution
# ---------------------------------------------------------------------------


def contribution_grid_for(
    params: Parameters,
    pairs,
    jobs: int = 1,
    clip_fraction: float = CLIP_FRACTION,
) -> ImportanceGrid:
    """Masked-evaluation contribution grid for one checkpoint."""
    order = components(params.config)
    baseline = eval_bleu(params, pairs)
    if baseline <= DEGENERATE_BASELINE:
        drops = {cid: 0.0 for cid in order}
        return contribution_from_drops(baseline, drops, clip_fraction)

    def drop_of(cid: ComponentId) -> float:
        return baseline - eval_bleu(params, pairs, mask=MaskSpec([cid]))

    drops = dict(zip(order, fan_out(drop_of, order, jobs)))
    grid = contribution_from_drops(baseline, drops, clip_fraction)
    return grid.with_info(drops={cid.key: drops[cid] for cid in order},
                          clip_cap=clip_fraction * baseline)


def run_contribution(
    run: RunDirectory,
    eval_set: str = "test",
    checkpoint="final",
    jobs: int = 1,
    write: bool = True,
) -> ImportanceGrid:
    params = run.load_checkpoint(checkpoint)
    pairs = eval_pairs_for(run, eval_set)
    grid = contribution_grid_for(params, pairs, jobs=jobs)
    grid = grid.with_info(checkpoint=str(checkpoint), eval_set=eval_set)
    if write:
        write_artifact(run, "contribution.json", grid.to_json())
    return grid


# ---------------------------------------------------------------------------
# criticality
# ---------------------------------------------------------------------------


def interpolation_curve(
    params: Parameters,
    pairs,
    cid: ComponentId,
    baseline: float,
    alphas: Sequence[float],
    epsilon: float,
    full_curve: bool = False,
) -> list:
    """BLEU at ascending alpha blends; stops at the first recovered point
    unless the full curve is requested."""
    points = []
    for alpha in alphas:
        score = eval_bleu(params, pairs, interp=InterpolationSpec({cid: float(alpha)}))
        points.append((float(alpha), score))
        if not full_curve and baseline - score < epsilon:
            break
    return points


def run_criticality(
    run: RunDirectory,
    eval_set: str = "test",
    checkpoint="final",
    alphas: Optional[Sequence[float]] = None,
    epsilon: Optional[float] = None,
    jobs: int = 1,
    full_curve: bool = False,
    write: bool = True,
) -> tuple:
    """Returns (grid, curves); curves map each component to its evaluated
    (alpha, bleu) points."""
    params = run.load_checkpoint(checkpoint)
    if not params.init_values:
        raise ValueError("checkpoint carries no initialization snapshot")
    pairs = eval_pairs_for(run, eval_set)
    order = components(params.config)
    grid_alphas = tuple(float(a) for a in (alphas if alphas is not None else alpha_grid()))
    if not grid_alphas or grid_alphas[0] != 0.0 or grid_alphas[-1] != 1.0:
        raise ValueError("alpha grid must ascend from 0 to 1")
    if list(grid_alphas) != sorted(grid_alphas):
        raise ValueError("alpha grid must ascend from 0 to 1")

    baseline = eval_bleu(params, pairs)
    eps = recovery_threshold(baseline) if epsilon is None else epsilon
    if baseline <= DEGENERATE_BASELINE:
        curves = {cid: [] for cid in order}
    else:
        def curve_of(cid: ComponentId) -> list:
            return interpolation_curve(params, pairs, cid, baseline, grid_alphas,
                                       eps, full_curve)

        curves = dict(zip(order, fan_out(curve_of, order, jobs)))
    grid = criticality_grid(baseline, curves, eps)
    grid = grid.with_info(checkpoint=str(checkpoint), eval_set=eval_set,
                          epsilon=eps, alpha_grid=list(grid_alphas))
    if write:
        write_artifact(run, "criticality.json", grid.to_json())
        write_artifact(run, "criticality_curves.json", curves_to_json(curves))
    return grid, curves


def curves_to_json(curves: dict) -> str:
    doc = {
        cid.key: [[alpha, score] for alpha, score in points]
        for cid, points in curves.items()
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def curves_from_json(text: str) -> dict:
    doc = json.loads(text)
    return {
        ComponentId.parse(key): [(alpha, score) for alpha, score in points]
        for key, points in doc.items()
    }


# ---------------------------------------------------------------------------
# representation similarity
# ---------------------------------------------------------------------------


def collect_activations(params: Parameters, pairs, n_sentences: int):
    """Forward over a probe batch; returns (activations, row mask).

    The tasks are length preserving, so source and target widths match and
    one non-pad mask selects aligned rows on both sides of the model.
    """
    probe = pairs[:n_sentences]
    if not probe:
        raise ValueError("no probe sentences")
    src, tgt_in, tgt_out = batch_arrays(probe)
    if src.shape != tgt_in.shape:
        raise ValueError("probe batch is not length aligned")
    acts: dict = {}
    forward(params, src, tgt_in, collect=acts)
    rows = tgt_out != PAD
    return acts, rows


def run_pwcca(
    run: RunDirectory,
    eval_set: str = "test",
    checkpoint="final",
    probes: int = PWCCA_PROBE_SENTENCES,
    write: bool = True,
) -> ImportanceGrid:
    """Similarity of every component's output representation to the final
    decoder representation, over pooled non-pad probe positions."""
    params = run.load_checkpoint(checkpoint)
    pairs = eval_pairs_for(run, eval_set)
    acts, rows = collect_activations(params, pairs, probes)
    needed = 5 * params.config.d_model
    if int(rows.sum()) < needed:
        raise ValueError(
            f"probe set too small: {int(rows.sum())} rows < {needed} (5 * d_model)"
        )
    final = acts["dec_out"][rows]
    order = components(params.config)
    scores = {cid: pwcca(acts[f"out/{cid.key}"][rows], final) for cid in order}
    baseline = eval_bleu(params, pairs)
    grid = ImportanceGrid(metric="pwcca", baseline=baseline, scores=scores,
                          info={"checkpoint": str(checkpoint), "eval_set": eval_set,
                                "probe_sentences": min(probes, len(pairs)),
                                "probe_rows": int(rows.sum())})
    if write:
        write_artifact(run, "pwcca.json", grid.to_json())
    return grid


# ---------------------------------------------------------------------------
# dynamical isometry
# ---------------------------------------------------------------------------


def params_at(params: Parameters, at: str) -> Parameters:
    """The checkpoint's weights ('final') or its initialization ('init')."""
    if at == "final":
        return params
    if at != "init":
        raise ValueError("at must be 'init' or 'final'")
    values = {name: tz.parameter(arr.copy()) for name, arr in params.init_values.items()}
    return Parameters(config=params.config, values=values,
                      init_values=params.init_values, step=0, meta=dict(params.meta))


def _probe_positions(rows: np.ndarray, count: int) -> list:
    """Evenly spaced non-pad (sentence, position) pairs, deterministic."""
    coords = np.argwhere(rows)
    if len(coords) < count:
        raise ValueError(f"probe batch has {len(coords)} positions, need {count}")
    picks = np.unique(np.linspace(0, len(coords) - 1, count).round().astype(int))
    return [tuple(coords[i]) for i in picks]


def block_jacobian(
    params: Parameters,
    cid: ComponentId,
    acts: dict,
    src: np.ndarray,
    tgt_in: np.ndarray,
    position: tuple,
) -> np.ndarray:
    """Jacobian of one residual block's output at a probe position with
    respect to its input at the same position, other positions held fixed."""
    config = params.config
    d = config.d_model
    b, t = position
    x_full = acts[f"in/{cid.key}"]
    base = x_full.copy()
    base[b, t, :] = 0.0
    hot = np.zeros(x_full.shape[:2] + (1,))
    hot[b, t, 0] = 1.0

    src_bias = pad_mask_bias(src)
    if cid.side is Side.ENCODER:
        self_bias, cross_bias, memory = src_bias, None, None
    else:
        self_bias = causal_bias(tgt_in.shape[1]) + pad_mask_bias(tgt_in)
        cross_bias = src_bias
        memory = tz.constant(acts["enc_out"])

    probe = tz.parameter(x_full[b, t].copy())
    inject = tz.mul(tz.reshape(probe, (1, 1, d)), tz.constant(hot))
    x = tz.add(tz.constant(base), inject)
    out = residual_block(params.values, config, cid, x, memory,
                         self_bias, cross_bias, mode="eval")

    jac = np.empty((d, d))
    seed = np.zeros(out.shape)
    for k in range(d):
        seed[b, t, k] = 1.0
        backward(out, seed=seed)
        seed[b, t, k] = 0.0
        jac[k] = probe.grad
    return jac


def isometry_table(
    params: Parameters,
    pairs,
    positions: int = ISOMETRY_MIN_POSITIONS,
    n_sentences: int = 8,
) -> dict:
    """Mean singular value of each block's positionwise Jacobian, averaged
    over probe positions."""
    if positions < ISOMETRY_MIN_POSITIONS:
        raise ValueError(f"need at least {ISOMETRY_MIN_POSITIONS} probe positions")
    probe_pairs = sorted(pairs, key=lambda p: (len(p[0]), p[0]))[:n_sentences]
    src, tgt_in, tgt_out = batch_arrays(probe_pairs)
    acts: dict = {}
    forward(params, src, tgt_in, collect=acts)
    probe_at = _probe_positions(tgt_out != PAD, positions)

    table = {}
    for cid in components(params.config):
        means = []
        for position in probe_at:
            jac = block_jacobian(params, cid, acts, src, tgt_in, position)
            _, sing, _ = svd(jac)
            means.append(float(sing.mean()))
        table[cid] = float(np.mean(means))
    return table


def run_isometry(
    run: RunDirectory,
    eval_set: str = "test",
    checkpoint="final",
    at: str = "init",
    positions: int = ISOMETRY_MIN_POSITIONS,
    write: bool = True,
) -> ImportanceGrid:
    params = params_at(run.load_checkpoint(checkpoint), at)
    pairs = eval_pairs_for(run, eval_set)
    table = isometry_table(params, pairs, positions=positions)
    grid = ImportanceGrid(metric="isometry", baseline=0.0, scores=table,
                          info={"checkpoint": str(checkpoint), "eval_set": eval_set,
                                "weights": at, "positions": positions})
    if write:
        write_artifact(run, f"isometry_{at}.json", grid.to_json())
    return grid


# ---------------------------------------------------------------------------
# learning dynamics
# ---------------------------------------------------------------------------


def run_dynamics(
    run: RunDirectory,
    eval_set: str = "test",
    epochs: Optional[Sequence[int]] = None,
    jobs: int = 1,
    write: bool = True,
) -> dict:
    """Contribution grid per epoch checkpoint; returns {epoch: grid}."""
    available = run.epochs()
    if not available:
        raise FileNotFoundError(f"no epoch checkpoints in {run.path}")
    wanted = list(epochs) if epochs is not None else available
    missing = sorted(set(wanted) - set(available))
    if missing:
        raise FileNotFoundError(f"missing epoch checkpoints: {missing}")
    pairs = eval_pairs_for(run, eval_set)

    grids = {}
    for epoch in sorted(wanted):
        params = run.load_checkpoint(epoch)
        grid = contribution_grid_for(params, pairs, jobs=jobs)
        grids[epoch] = grid.with_info(checkpoint=f"epoch_{epoch:03d}",
                                      eval_set=eval_set)
    if write:
        doc = {str(epoch): json.loads(grids[epoch].to_json()) for epoch in grids}
        write_artifact(run, "dynamics.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return grids


# ---------------------------------------------------------------------------
# Hyper-parameter sweeps
# ---------------------------------------------------------------------------


def sweep_variant(exp: ExperimentConfig, param: str, value) -> ExperimentConfig:
    """One experiment with a single swept setting changed.

    ``width`` scales the feed-forward width along with the model width so
    the usual 2x ratio is preserved; ``depth`` moves encoder and decoder
    together; ``seed`` reseeds training (init, shuffling, dropout) while
    keeping the corpus fixed, so runs differ only in optimization noise.
    """
    if param == "dropout":
        model = dataclasses.replace(exp.model, dropout=float(value))
        return dataclasses.replace(exp, model=model)
    if param == "data-size":
        data = dataclasses.replace(exp.data, n_pairs=int(value))
        return dataclasses.replace(exp, data=data)
    if param == "seed":
        training = dataclasses.replace(exp.train, seed=int(value))
        return dataclasses.replace(exp, train=training)
    if param == "depth":
        model = dataclasses.replace(exp.model, enc_layers=int(value), dec_layers=int(value))
        return dataclasses.replace(exp, model=model)
    if param == "width":
        model = dataclasses.replace(exp.model, d_model=int(value), d_ff=2 * int(value))
        return dataclasses.replace(exp, model=model)
    raise ValueError(f"sweep param must be one of {SWEEP_PARAMS}, got '{param}'")


def run_sweep(
    exp: ExperimentConfig,
    param: str,
    values: Sequence,
    out_root,
    eval_set: str = "test",
    jobs: int = 1,
    threshold: float = IMPORTANT_THRESHOLD,
    log=print,
    write: bool = True,
) -> dict:
    """Train one run per value, grade each with a contribution grid, and
    compare how many components clear the importance threshold."""
    if param not in SWEEP_PARAMS:
        raise ValueError(f"sweep param must be one of {SWEEP_PARAMS}, got '{param}'")
    if not values:
        raise ValueError("sweep needs at least one value")
    out_root = Path(out_root)
    variants = [(value, sweep_variant(exp, param, value)) for value in values]

    def one(item):
        value, variant = item
        run = train(variant, out_root / f"{param}_{value}", log=log)
        grid = run_contribution(run, eval_set=eval_set)
        scores = [grid.scores[cid] for cid in sorted(grid.scores, key=lambda c: c.sort_key())]
        return {
            "value": value,
            "run": str(run.path),
            "baseline": grid.baseline,
            "n_components": len(scores),
            "n_important": sum(1 for s in scores if s >= threshold),
            "flags": list(grid.flags),
        }

    rows = fan_out(one, variants, jobs)
    report = {
        "param": param,
        "eval_set": eval_set,
        "threshold": threshold,
        "rows": rows,
    }
    if write:
        out_root.mkdir(parents=True, exist_ok=True)
        stem = f"sweep_{param.replace('-', '_')}"
        (out_root / f"{stem}.json").write_text(
            json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report
