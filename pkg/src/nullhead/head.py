"""Joint-nullspace discriminant head: eigenvalue loss, its gradient and the projection.

Pipeline for one labelled batch ``H`` (D x N):

1. centre and build ``S_w, S_t, S_b`` (:mod:`nullhead.scatter`);
2. keep the ``t`` leading left singular vectors ``U1`` of the centred
   features, which removes the nullspace of ``S_t``;
3. reduce each scatter to ``U1^T S U1`` (t x t);
4. take ``W``, an orthonormal basis of the nullspace of the reduced ``S_w``
   (or a substitute when that nullspace is too small, see :func:`null_w`);
5. eigendecompose ``W^T S_b~ W``; the loss is minus the sum of the
   eigenvalues (among the leading C-1) that lie within ``epsilon`` of the
   smallest of them;
6. the projection ``P = U1 W M`` uses the eigenvectors ``M`` with non-zero
   eigenvalues.

The gradient treats ``U1``, ``W`` and the eigenvectors as constants for the
batch (stop-gradient) and differentiates only through the scatter matrices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateBatchError, DimensionError
from .linalg import RANK_TOL, nullspace_basis, numeric_rank, orthonormalize, svd, sym_eig
from .scatter import LabeledBatch, ScatterSet, center_total, center_within, scatters

#: selection window above the smallest eigenvalue
DEFAULT_EPSILON = 1.0

FALLBACKS = ("relative", "smallest")


@dataclass(frozen=True)
class ReducedScatters:
    u1: np.ndarray
    s_b_r: np.ndarray
    s_w_r: np.ndarray
    s_t_r: np.ndarray

    @property
    def rank(self) -> int:
        return self.u1.shape[1]


@dataclass(frozen=True)
class HeadState:
    """Everything computed for one batch; consumed by :func:`head_grad` and inference."""

    reduced: ReducedScatters
    w: np.ndarray
    head_matrix: np.ndarray
    eig_values: np.ndarray
    eig_vectors: np.ndarray
    selected: np.ndarray
    lifted_vectors: np.ndarray
    projection: np.ndarray
    num_classes: int
    batch_size: int
    fallback: bool = False
    average: bool = False

    @property
    def k(self) -> int:
        return int(self.selected.size)

    @property
    def selected_values(self) -> np.ndarray:
        return self.eig_values[self.selected]


def reduce(scatter: ScatterSet, f_t: np.ndarray, tol_rel: float = RANK_TOL) -> ReducedScatters:
    """Project the scatter matrices onto the range of the centred features."""
    if f_t.shape[0] != scatter.s_t.shape[0]:
        raise DimensionError(
            f"centred features have {f_t.shape[0]} rows, scatters are {scatter.s_t.shape}"
        )
    if not np.any(f_t):
        raise DegenerateBatchError("all features in the batch are identical (rank 0)")
    res = svd(f_t)
    t = numeric_rank(res.s, tol_rel)
    if t == 0:
        raise DegenerateBatchError("all features in the batch are identical (rank 0)")
    u1 = res.u[:, :t]

    def project(s):
        r = u1.T @ s @ u1
        return 0.5 * (r + r.T)

    return ReducedScatters(
        u1=u1, s_b_r=project(scatter.s_b), s_w_r=project(scatter.s_w), s_t_r=project(scatter.s_t)
    )


def _null_w(reduced, num_classes, tol_rel, ridge, fallback):
    if fallback not in FALLBACKS:
        raise ValueError(f"fallback must be one of {FALLBACKS}, got {fallback!r}")
    s_w_r = reduced.s_w_r
    if ridge:
        s_w_r = s_w_r + ridge * np.eye(reduced.rank)
    need = min(num_classes - 1, reduced.rank)
    w = nullspace_basis(s_w_r, tol_rel)
    if w.shape[1] >= need and w.shape[1] > 0:
        return w, False
    if fallback == "smallest":
        return sym_eig(s_w_r).vectors[:, ::-1][:, :need], True
    # whiten by the (positive definite) reduced total scatter, so directions
    # are ranked by within/total ratio; the ratio-0 ones are the nullspace
    t_vals, t_vecs = np.linalg.eigh(reduced.s_t_r)
    whiten = (t_vecs / np.sqrt(t_vals)) @ t_vecs.T
    ratio_vecs = sym_eig(whiten @ s_w_r @ whiten).vectors[:, ::-1][:, :need]
    return orthonormalize(whiten @ ratio_vecs, tol_rel=1e-12), True


def null_w(
    reduced: ReducedScatters,
    num_classes: int,
    tol_rel: float = RANK_TOL,
    ridge: float = 0.0,
    fallback: str = "relative",
) -> np.ndarray:
    """Orthonormal nullspace basis of the reduced within-class scatter.

    When the nullspace has fewer than ``min(C-1, t)`` columns (the batch is
    large relative to the feature dimension) a substitute basis of that
    many directions is returned:

    ``"relative"``
        directions with the smallest within-class to total scatter ratio,
        i.e. the span of the smallest generalized eigenvectors of
        ``(S_w~, S_t~)``. They reduce to the nullspace as within-class
        scatter vanishes.
    ``"smallest"``
        eigenvectors of ``S_w~`` with the smallest eigenvalues.

    Never returns an empty basis.
    """
    return _null_w(reduced, num_classes, tol_rel, ridge, fallback)[0]


def select_eigenvalues(values: np.ndarray, num_classes: int, epsilon: float) -> np.ndarray:
    """Indices of the eigenvalues used by the loss.

    Among the leading ``C-1`` eigenvalues (descending), keep those strictly
    below ``min + epsilon``.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    top = values[: num_classes - 1]
    return np.flatnonzero(top < top.min() + epsilon)


def head_loss(
    batch: LabeledBatch,
    epsilon: float = DEFAULT_EPSILON,
    *,
    tol_rel: float = RANK_TOL,
    average: bool = False,
    ridge: float = 0.0,
    fallback: str = "relative",
) -> tuple[float, HeadState]:
    """Eigenvalue loss of one batch and the state needed for its gradient.

    Parameters
    ----------
    batch : LabeledBatch
        Features (D x N) and labels; every class needs at least 2 samples.
    epsilon : float
        Selection window above the smallest of the leading C-1 eigenvalues.
    tol_rel : float
        Relative rank threshold for the range and nullspace decisions.
    average : bool
        Divide the loss by the number of selected eigenvalues.
    ridge : float
        Added to the diagonal of the reduced within-class scatter before
        taking its nullspace. Zero disables it.
    fallback : {"relative", "smallest"}
        Substitute basis used when the nullspace is too small; see
        :func:`null_w`.

    Returns
    -------
    loss : float
    state : HeadState
    """
    num_classes = batch.num_classes
    if num_classes < 2:
        raise DegenerateBatchError(f"need at least 2 classes, got {num_classes}")
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    sc = scatters(batch)
    reduced = reduce(sc, center_total(batch), tol_rel)
    w, used_fallback = _null_w(reduced, num_classes, tol_rel, ridge, fallback)
    q = w.shape[1]
    if q < num_classes - 1:
        raise DimensionError(
            f"only {q} nullspace directions (reduced rank t={reduced.rank}) "
            f"for C={num_classes} classes; need C-1={num_classes - 1}"
        )
    head_matrix = w.T @ reduced.s_b_r @ w
    head_matrix = 0.5 * (head_matrix + head_matrix.T)
    eig = sym_eig(head_matrix)
    selected = select_eigenvalues(eig.values, num_classes, epsilon)
    loss = -float(np.sum(eig.values[selected]))
    if average:
        loss /= selected.size

    lifted = w @ eig.vectors
    e_max = eig.values[0]
    n_proj = int(np.count_nonzero(eig.values > tol_rel * e_max)) if e_max > 0 else 0
    n_proj = min(n_proj, num_classes - 1)
    projection = reduced.u1 @ lifted[:, :n_proj]

    state = HeadState(
        reduced=reduced,
        w=w,
        head_matrix=head_matrix,
        eig_values=eig.values,
        eig_vectors=eig.vectors,
        selected=selected,
        lifted_vectors=lifted,
        projection=projection,
        num_classes=num_classes,
        batch_size=batch.size,
        fallback=used_fallback,
        average=average,
    )
    return loss, state


def head_grad(batch: LabeledBatch, state: HeadState) -> np.ndarray:
    """Gradient of :func:`head_loss` with respect to the batch features (D x N).

    For each selected eigenpair ``(E, psi)`` with ``a = U1 W psi`` the
    frozen-basis derivative of ``a^T (S_b - E S_w) a`` is
    ``(2/N) a a^T (F_t - (1 + E) F_w)``, using ``S_b = S_t - S_w`` and the
    fact that both centring maps are symmetric projections.
    """
    d = state.reduced.u1.shape[0]
    if batch.dim != d or batch.size != state.batch_size:
        raise DimensionError(
            f"state was built for a {d}x{state.batch_size} batch, got {batch.features.shape}"
        )
    a = state.reduced.u1 @ state.lifted_vectors[:, state.selected]
    e = state.eig_values[state.selected]
    f_t = center_total(batch)
    f_w = center_within(batch)
    grad_g = (a @ (a.T @ f_t) - (a * (1.0 + e)) @ (a.T @ f_w)) * (2.0 / batch.size)
    if state.average:
        grad_g /= state.k
    return -grad_g
