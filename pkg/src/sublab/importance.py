"""Component importance scores derived from evaluation results.

Two complementary notions are computed for every sub-layer:

* contribution: how much translation quality falls when the sub-layer's
  output is zeroed at evaluation time. Raw drops are clipped to a band
  between zero and a fixed fraction of the baseline score, then normalized
  by the largest clipped drop so the most damaging sub-layer scores 1.
* criticality: how far back toward its random initialization the
  sub-layer's weights can be pushed before quality falls off. The score is
  the smallest interpolation weight alpha at which the blended model still
  scores within a recovery threshold of the trained baseline; a sub-layer
  that tolerates alpha = 0 (full reset) is not critical at all.

Everything here is pure arithmetic over numbers another module measured.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .model import ComponentId

CLIP_FRACTION = 0.1
DEGENERATE_BASELINE = 1.0
ALPHA_POINTS = 21


def alpha_grid(points: int = ALPHA_POINTS) -> tuple:
    """Evenly spaced interpolation weights from 0 to 1 inclusive."""
    if points < 2:
        raise ValueError("alpha grid needs at least the two endpoints")
    return tuple(np.linspace(0.0, 1.0, points))


def recovery_threshold(baseline: float) -> float:
    """Allowed BLEU shortfall that still counts as recovered."""
    return max(0.5, 0.01 * baseline)


@dataclass(frozen=True)
class ImportanceGrid:
    """Per-component scores for one metric, plus how they were produced.

    ``info`` carries provenance needed to interpret the numbers later:
    which checkpoint and evaluation set, the clip cap or the recovery
    threshold and alpha grid, and so on.
    """

    metric: str
    baseline: float
    scores: dict = field(default_factory=dict)
    flags: tuple = ()
    info: dict = field(default_factory=dict)

    def vector(self, order: Sequence[ComponentId]) -> np.ndarray:
        return np.array([self.scores[cid] for cid in order])

    def to_json(self) -> str:
        doc = {
            "metric": self.metric,
            "baseline": self.baseline,
            "scores": {cid.key: self.scores[cid] for cid in sorted(self.scores, key=lambda c: c.sort_key())},
            "flags": list(self.flags),
            "info": self.info,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @staticmethod
    def from_json(text: str) -> "ImportanceGrid":
        doc = json.loads(text)
        return ImportanceGrid(
            metric=doc["metric"],
            baseline=doc["baseline"],
            scores={ComponentId.parse(k): v for k, v in doc["scores"].items()},
            flags=tuple(doc["flags"]),
            info=doc.get("info", {}),
        )

    def with_info(self, **info) -> "ImportanceGrid":
        merged = dict(self.info)
        merged.update(info)
        return ImportanceGrid(self.metric, self.baseline, self.scores, self.flags, merged)


def contribution_from_drops(
    baseline: float,
    drops: Mapping[ComponentId, float],
    clip_fraction: float = CLIP_FRACTION,
) -> ImportanceGrid:
    """Normalize masked-evaluation score drops into [0, 1] contributions.

    Each drop is clipped below at 0 (a component whose removal helps is
    merely unimportant, not negatively important) and above at
    ``clip_fraction * baseline`` so a single catastrophic component cannot
    flatten everyone else. Scores divide by the largest clipped drop.

    A baseline at or below ``DEGENERATE_BASELINE`` BLEU means the model
    never learned the task; drops from noise are meaningless, so the grid
    is forced to zero and flagged.
    """
    if not drops:
        raise ValueError("no drops to score")
    if baseline <= DEGENERATE_BASELINE:
        return ImportanceGrid(
            metric="contribution",
            baseline=baseline,
            scores={cid: 0.0 for cid in drops},
            flags=("degenerate_baseline",),
        )
    cap = clip_fraction * baseline
    clipped = {cid: min(max(drop, 0.0), cap) for cid, drop in drops.items()}
    peak = max(clipped.values())
    if peak == 0.0:
        return ImportanceGrid(
            metric="contribution",
            baseline=baseline,
            scores={cid: 0.0 for cid in drops},
            flags=("all_drops_clipped_to_zero",),
        )
    scores = {cid: value / peak for cid, value in clipped.items()}
    return ImportanceGrid(metric="contribution", baseline=baseline, scores=scores)


def criticality_from_curve(
    points: Sequence[tuple],
    baseline: float,
    epsilon: Optional[float] = None,
) -> float:
    """Smallest alpha on the curve whose score recovers the baseline.

    ``points`` holds (alpha, bleu) pairs; recovery means
    ``baseline - bleu < epsilon`` strictly. Whole-curve reasoning: scan in
    ascending alpha and return the first recovered weight. If nothing
    recovers (possible on partial curves), the component is maximally
    critical and the score is 1.
    """
    if not points:
        raise ValueError("empty interpolation curve")
    eps = recovery_threshold(baseline) if epsilon is None else epsilon
    for alpha, bleu in sorted(points):
        if not (0.0 <= alpha <= 1.0):
            raise ValueError(f"alpha {alpha} outside [0, 1]")
        if baseline - bleu < eps:
            return float(alpha)
    return 1.0


def criticality_grid(
    baseline: float,
    curves: Mapping[ComponentId, Sequence[tuple]],
    epsilon: Optional[float] = None,
) -> ImportanceGrid:
    """Score every component from its interpolation curve.

    The degenerate-baseline rule matches the contribution metric: a model
    that never learned has nothing to recover, so all scores are zero.
    """
    if not curves:
        raise ValueError("no curves to score")
    if baseline <= DEGENERATE_BASELINE:
        return ImportanceGrid(
            metric="criticality",
            baseline=baseline,
            scores={cid: 0.0 for cid in curves},
            flags=("degenerate_baseline",),
        )
    scores = {
        cid: criticality_from_curve(curve, baseline, epsilon)
        for cid, curve in curves.items()
    }
    return ImportanceGrid(metric="criticality", baseline=baseline, scores=scores)


def _ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Rank correlation with average ranks for ties.

    A constant vector has no ranking to speak of; the correlation is
    defined as 0 rather than NaN so downstream comparisons stay total.
    """
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("spearman needs two equal-length vectors")
    if len(x) < 2:
        raise ValueError("spearman needs at least two points")
    if np.all(x == x[0]) or np.all(y == y[0]):
        return 0.0
    rx = _ranks(x)
    ry = _ranks(y)
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    return float((rx * ry).sum() / np.sqrt((rx * rx).sum() * (ry * ry).sum()))
