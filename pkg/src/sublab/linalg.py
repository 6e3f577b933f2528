"""Small dense factorizations and exact Jacobians.

The SVD is a one-sided Jacobi: plane rotations orthogonalize the columns
until the Gram matrix is numerically diagonal. It is simple, accurate at
the matrix sizes this lab produces, and fails loudly if the sweep cap is
hit instead of returning a silently wrong answer.
"""

from __future__ import annotations

import numpy as np

from .tensor import NonFiniteError, Tensor, backward

MAX_SWEEPS = 100
# convergence: off-diagonal norm of the Gram matrix relative to ||A||_F^2
OFF_DIAG_TOL = 1e-12
MAX_SIDE = 512
JACOBIAN_CAP = 1_000_000


class SvdConvergenceError(RuntimeError):
    """Jacobi sweeps hit the iteration cap before the Gram matrix was diagonal."""


def _jacobi_rotation(app: float, aqq: float, apq: float) -> tuple[float, float]:
    """Cosine/sine zeroing the (p, q) entry of a 2x2 symmetric block."""
    tau = (aqq - app) / (2.0 * apq)
    if tau >= 0.0:
        t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
    else:
        t = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
    c = 1.0 / np.sqrt(1.0 + t * t)
    return c, t * c


def svd(m, max_sweeps: int = MAX_SWEEPS) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD: returns (U, S, V) with m = U @ diag(S) @ V.T.

    S is non-negative and descending. U is (r, k), V is (c, k) with
    k = min(r, c). Raises SvdConvergenceError if the sweep cap is hit.
    """
    a = np.array(m, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("svd expects a matrix")
    if not np.isfinite(a).all():
        raise NonFiniteError("svd")
    r, c = a.shape
    if min(r, c) > MAX_SIDE:
        raise ValueError(f"svd supports min(rows, cols) <= {MAX_SIDE}, got {a.shape}")
    if r < c:
        u, s, v = svd(a.T, max_sweeps=max_sweeps)
        return v, s, u

    work = a.copy()
    v = np.eye(c)
    fro2 = float((a * a).sum())
    if fro2 == 0.0:
        return np.eye(r, c), np.zeros(c), v

    converged = False
    for _ in range(max_sweeps):
        off2 = 0.0
        for p in range(c - 1):
            for q in range(p + 1, c):
                ap = work[:, p]
                aq = work[:, q]
                apq = float(ap @ aq)
                app = float(ap @ ap)
                aqq = float(aq @ aq)
                off2 += apq * apq
                if apq * apq <= 1e-64 * app * aqq:
                    continue
                cth, sth = _jacobi_rotation(app, aqq, apq)
                new_p = cth * ap - sth * aq
                new_q = sth * ap + cth * aq
                work[:, p] = new_p
                work[:, q] = new_q
                vp = v[:, p].copy()
                v[:, p] = cth * vp - sth * v[:, q]
                v[:, q] = sth * vp + cth * v[:, q]
        if np.sqrt(2.0 * off2) <= OFF_DIAG_TOL * fro2:
            converged = True
            break
    if not converged:
        raise SvdConvergenceError(f"one-sided Jacobi did not converge in {max_sweeps} sweeps")

    norms = np.sqrt((work * work).sum(axis=0))
    order = np.argsort(-norms, kind="stable")
    s = norms[order]
    work = work[:, order]
    v = v[:, order]
    u = np.zeros((r, c))
    for j in range(c):
        if s[j] > 0.0:
            u[:, j] = work[:, j] / s[j]
    return u, s, v


def eigh(m, max_sweeps: int = MAX_SWEEPS) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric eigendecomposition via two-sided Jacobi rotations.

    Returns (w, Q) with m = Q @ diag(w) @ Q.T, eigenvalues descending.
    """
    a = np.array(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("eigh expects a square matrix")
    n = a.shape[0]
    if n > MAX_SIDE:
        raise ValueError(f"eigh supports side <= {MAX_SIDE}, got {n}")
    scale = np.abs(a).max()
    if scale > 0 and np.abs(a - a.T).max() > 1e-10 * scale:
        raise ValueError("eigh expects a symmetric matrix")
    if not np.isfinite(a).all():
        raise NonFiniteError("eigh")

    work = (a + a.T) / 2.0
    q = np.eye(n)
    fro = float(np.sqrt((work * work).sum()))
    if fro == 0.0:
        return np.zeros(n), q

    converged = False
    for _ in range(max_sweeps):
        off = np.sqrt(2.0 * (np.triu(work, 1) ** 2).sum())
        if off <= OFF_DIAG_TOL * max(fro, 1e-300):
            converged = True
            break
        for p in range(n - 1):
            for q_i in range(p + 1, n):
                apq = work[p, q_i]
                if apq == 0.0:
                    continue
                cth, sth = _jacobi_rotation(work[p, p], work[q_i, q_i], apq)
                rot = np.array([[cth, sth], [-sth, cth]])
                idx = [p, q_i]
                work[:, idx] = work[:, idx] @ rot
                work[idx, :] = rot.T @ work[idx, :]
                q[:, idx] = q[:, idx] @ rot
    if not converged:
        raise SvdConvergenceError(f"two-sided Jacobi did not converge in {max_sweeps} sweeps")

    w = np.diag(work).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], q[:, order]


def jacobian(f, x: Tensor) -> np.ndarray:
    """Exact Jacobian of ``f`` at ``x`` by repeated reverse sweeps.

    Row i is the gradient of the i-th output component with respect to the
    flattened input. ``f`` must build a graph from ``x`` to its output.
    """
    if not x.requires_grad:
        raise ValueError("jacobian input must require grad")
    y = f(x)
    out_dim = y.data.size
    in_dim = x.data.size
    if out_dim * in_dim > JACOBIAN_CAP:
        raise ValueError(
            f"jacobian of size {out_dim}x{in_dim} exceeds the {JACOBIAN_CAP}-entry cap"
        )
    jac = np.zeros((out_dim, in_dim))
    seed = np.zeros(out_dim)
    for i in range(out_dim):
        seed[i] = 1.0
        backward(y, seed)
        if x.grad is not None:
            jac[i] = x.grad.reshape(-1)
        seed[i] = 0.0
    if not np.isfinite(jac).all():
        raise NonFiniteError("jacobian")
    return jac


def mean_singular_value(matrix: np.ndarray) -> float:
    """Average singular value, the isotropy summary used by signal probes."""
    _, s, _ = svd(matrix)
    return float(s.mean())
