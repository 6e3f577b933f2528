"""Projection-weighted canonical correlation between activation matrices.

Both inputs are (rows, features) matrices whose rows are pooled probe
positions. The score is invariant to invertible linear transforms of
either feature space, which makes it a usable similarity between layers
of different widths. Projection weighting keeps directions that actually
carry the first input's activations from being drowned out by noise
directions, so the score reflects the representation rather than the
basis.
"""

from __future__ import annotations

import numpy as np

from .linalg import svd

RANK_TOL = 1e-10


def _orthonormal_basis(centered: np.ndarray) -> np.ndarray:
    """Orthonormal columns spanning the matrix, small directions dropped."""
    u, s, _ = svd(centered)
    if s[0] == 0.0:
        raise ValueError("activation matrix is constant; nothing to correlate")
    keep = s >= RANK_TOL * s[0]
    return u[:, keep]


def pwcca(x, y) -> float:
    """Projection-weighted CCA similarity between two activation matrices.

    Rows are observations and must align pairwise; columns are features
    and may differ in number. Weights are derived from the first
    argument, so pwcca(x, y) measures how much of x's representation is
    mirrored in y.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2:
        raise ValueError("pwcca expects two matrices")
    if x.shape[0] != y.shape[0]:
        raise ValueError(
            f"row counts must match, got {x.shape[0]} and {y.shape[0]}"
        )
    if x.shape[0] < 2:
        raise ValueError("need at least two observation rows")

    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    ux = _orthonormal_basis(xc)
    uy = _orthonormal_basis(yc)

    directions, rho, _ = svd(ux.T @ uy)
    variates = ux @ directions
    weights = np.abs(variates.T @ xc).sum(axis=1)
    weights = weights / weights.sum()
    return float(weights @ rho)
