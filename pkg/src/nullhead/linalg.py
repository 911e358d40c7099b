"""Dense spectral primitives used by the scatter and head computations.

All routines work on float64 ``numpy.ndarray`` values and never modify their
inputs. Every spectral vector returned here follows one sign convention: the
entry of largest magnitude is positive, ties resolved by the lowest row
index. This keeps outputs reproducible so tests can compare golden values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, DimensionError, NumericalError

#: default relative threshold for numeric rank decisions (about sqrt(eps))
RANK_TOL = 1e-7

MAX_SWEEPS = 100


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``a = u @ diag(s) @ vt`` with ``s`` descending."""

    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray


@dataclass(frozen=True)
class EigResult:
    """Eigenpairs of a symmetric matrix, eigenvalues descending."""

    values: np.ndarray
    vectors: np.ndarray


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Return ``a`` as a finite 2-D float64 array, raising otherwise."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericalError(f"{name} of shape {m.shape} has non-finite entries")
    return m


def _require_square(a: np.ndarray, name: str) -> None:
    if a.shape[0] != a.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {a.shape}")


def sign_fix(vectors: np.ndarray) -> np.ndarray:
    """Per-column signs (+1/-1) that make each column's largest-magnitude entry positive."""
    if vectors.size == 0:
        return np.ones(vectors.shape[1])
    mag = np.abs(vectors)
    # magnitudes within 1e-10 of the column max count as ties -> lowest row wins
    idx = np.argmax(mag >= (1.0 - 1e-10) * mag.max(axis=0), axis=0)
    pivots = vectors[idx, np.arange(vectors.shape[1])]
    return np.where(pivots < 0, -1.0, 1.0)


def numeric_rank(s: np.ndarray, tol_rel: float = RANK_TOL) -> int:
    """Count of singular values above ``tol_rel * max(s)``."""
    if s.size == 0 or s[0] <= 0:
        return 0
    return int(np.count_nonzero(s > tol_rel * s[0]))


def svd(a) -> SvdResult:
    """Thin singular value decomposition.

    For a D x N input the result has ``k = min(D, N)`` components. LAPACK's
    divide-and-conquer driver reduces tall or wide inputs with a QR step
    first, so the cost is O(max(D, N) * k**2).

    Raises
    ------
    NumericalError
        If ``a`` contains NaN or Inf.
    ConvergenceError
        If the underlying iteration does not converge.
    """
    a = as_matrix(a)
    if a.size == 0:
        raise DimensionError("svd of an empty matrix")
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceError(f"svd did not converge for matrix of shape {a.shape}") from exc
    signs = sign_fix(u)
    return SvdResult(u=u * signs, s=s, vt=vt * signs[:, None])


def _symmetrize(a: np.ndarray, name: str) -> np.ndarray:
    _require_square(a, name)
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if a.size and np.max(np.abs(a - a.T)) > 1e-9 * scale:
        raise DimensionError(f"{name} of shape {a.shape} is not symmetric")
    return 0.5 * (a + a.T)


def jacobi_eig(a, max_sweeps: int = MAX_SWEEPS) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi eigen-iteration for a symmetric matrix.

    Returns unsorted ``(values, vectors)``. Intended for small matrices; the
    rotations are applied row/column-wise so one sweep costs O(n**3).
    """
    m = np.array(a, dtype=np.float64)
    n = m.shape[0]
    v = np.eye(n)
    norm = np.linalg.norm(m)
    if norm == 0.0:
        return np.zeros(n), v
    for _ in range(max_sweeps):
        off =np.linalg.norm(m - np.diag(np.diag(m)))
        if off <= 1e-15 * norm:
            return np.diag(m).copy(), v
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = m[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (m[q, q] - m[p, p]) / (2.0 * apq)
                t = np.copysign(1.0, theta) / (abs(theta) + np.hypot(theta, 1.0))
                c = 1.0 / np.hypot(t, 1.0)
                s = t * c
                mp, mq = m[:, p].copy(), m[:, q].copy()
                m[:, p] = c * mp - s * mq
                m[:, q] = s * mp + c * mq
                mp, mq = m[p, :].copy(), m[q, :].copy()
                m[p, :] = c * mp - s * mq
                m[q, :] = s * mp + c * mq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    raise ConvergenceError(
        f"Jacobi eigensolver exceeded {max_sweeps} sweeps on matrix of shape {m.shape}"
    )


def sym_eig(a, method: str = "lapack") -> EigResult:
    """Eigendecomposition of a symmetric matrix, eigenvalues descending.

    ``a`` is symmetrized as ``(a + a.T) / 2`` after checking it is symmetric
    to 1e-9. ``method="jacobi"`` uses the cyclic Jacobi iteration in
    :func:`jacobi_eig` instead of LAPACK's ``syevd``.
    """
    a = _symmetrize(as_matrix(a), "sym_eig input")
    if method == "lapack":
        try:
            values, vectors = np.linalg.eigh(a)
        except np.linalg.LinAlgError as exc:
            raise ConvergenceError(
                f"eigh did not converge for matrix of shape {a.shape}"
            ) from exc
    elif method == "jacobi":
        values, vectors = jacobi_eig(a)
    else:
        raise ValueError(f"unknown eigensolver {method!r}")
    order = np.argsort(-values, kind="stable")
    values, vectors = values[order], vectors[:, order]
    return EigResult(values=values, vectors=vectors * sign_fix(vectors))


def orthonormalize(a, tol_rel: float = RANK_TOL) -> np.ndarray:
    """Orthonormal basis of the column space of ``a``.

    Modified Gram-Schmidt with one re-orthogonalization pass per column.
    A column is dropped when its residual norm falls to ``tol_rel`` times the
    largest input column norm, so the output width is the numeric rank.
    """
    a = as_matrix(a)
    norms = np.linalg.norm(a, axis=0)
    if a.size == 0 or norms.max() == 0.0:
        raise NumericalError("cannot orthonormalize an all-zero matrix")
    cutoff = tol_rel * norms.max()
    basis: list[np.ndarray] = []
    for j in range(a.shape[1]):
        v = a[:, j].copy()
        for _ in range(2):
            for q in basis:
                v -= (q @ v) * q
        nv = np.linalg.norm(v)
        if nv > cutoff:
            basis.append(v / nv)
    return np.column_stack(basis)


def nullspace_basis(a, tol_rel: float = RANK_TOL) -> np.ndarray:
    """Orthonormal basis for the (numerical) nullspace of a PSD matrix.

    Keeps eigenvectors whose eigenvalue is at most ``tol_rel * lambda_max``
    (every eigenvector when ``lambda_max <= 0``). Columns are ordered by
    ascending eigenvalue; the result may have zero columns.
    """
    a = as_matrix(a)
    _require_square(a, "nullspace_basis input")
    eig = sym_eig(a)
    lam_max = eig.values[0] if eig.values.size else 0.0
    if lam_max <= 0.0:
        keep = np.ones(eig.values.size, dtype=bool)
    else:
        keep = eig.values <= tol_rel * lam_max
    return eig.vectors[:, keep][:, ::-1]


def pinv(a, tol_rel: float = RANK_TOL) -> np.ndarray:
    """Moore-Penrose pseudo-inverse, zeroing singular values <= ``tol_rel * s_max``."""
    res = svd(a)
    s_inv = np.zeros_like(res.s)
    if res.s[0] > 0:
        big = res.s > tol_rel * res.s[0]
        s_inv[big] = 1.0 / res.s[big]
    return (res.vt.T * s_inv) @ res.u.T
