"""Tensor-product smooths with and without shape constraints.

Bivariate coefficients live on a ``q1 x q2`` grid, flattened row-major so
that index ``(j, k)`` matches column ``j * q2 + k`` of ``row_kronecker(B1, B2)``.
Constrained directions use cumulative-sum matrices (lower-triangular ones
for increasing, upper-triangular ones for decreasing).  Because B-spline
values are nonnegative, positive increments along a direction give a
surface that is monotone along that covariate at every value of the other.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .splines import (
    SmoothDesign,
    _selection,
    difference_matrix,
    eval_basis,
    place_knots,
    sum_to_zero_basis,
)

__all__ = ["TensorDesign", "double_monotone", "row_kronecker", "tensor_raw", "ti_interaction"]

DIRECTIONS = ("increasing", "decreasing", "none")


def row_kronecker(A, B) -> np.ndarray:
    """Row-wise Kronecker product: row ``i`` is ``kron(A[i], B[i])``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[0] != B.shape[0]:
        raise ValueError(f"row counts differ: {A.shape[0]} vs {B.shape[0]}")
    return (A[:, :, None] * B[:, None, :]).reshape(A.shape[0], -1)


@dataclass(frozen=True)
class TensorDesign(SmoothDesign):
    """Bivariate design; ``marginal_raw`` keeps the two training marginal bases."""

    marginal_raw: tuple[np.ndarray, ...] = ()

    @property
    def product_matrix(self) -> np.ndarray:
        return self.matrix


def tensor_raw(x1, x2, knots, clamp: bool = False) -> np.ndarray:
    return row_kronecker(eval_basis(x1, knots[0], clamp), eval_basis(x2, knots[1], clamp))


def _cumulative(direction: str, q: int) -> tuple[np.ndarray, int | None]:
    """Accumulation matrix and index of its all-ones (level) column."""
    if direction == "increasing":
        return np.tril(np.ones((q, q))), 0
    if direction == "decreasing":
        return np.triu(np.ones((q, q))), q - 1
    return np.eye(q), None


def _grid_penalty(grid, exp_grid, axis: int, constrained: bool) -> np.ndarray:
    """Difference penalty along one axis of the coefficient grid.

    Constrained axes take first differences between neighbouring
    exponentiated entries only; free axes take second differences.
    """
    q1, q2 = grid
    if not constrained:
        D = difference_matrix(grid[axis], 2)
        other = np.eye(grid[1 - axis])
        return np.kron(D.T @ D, other) if axis == 0 else np.kron(other, D.T @ D)
    idx = np.arange(q1 * q2).reshape(grid)
    if axis == 1:
        idx = idx.T
    rows = []
    for line in idx.T:
        for a, b in zip(line[:-1], line[1:]):
            if exp_grid.flat[a] and exp_grid.flat[b]:
                r = np.zeros(q1 * q2)
                r[a], r[b] = -1.0, 1.0
                rows.append(r)
    if not rows:
        return np.zeros((q1 * q2, q1 * q2))
    D = np.array(rows)
    return D.T @ D


def _finish(constraint, raw, sigma, absorb, exp_full, penalties_full, knots, grid,
            constraints, marginal_raw, center_cols: bool) -> TensorDesign:
    keep_exp = (absorb.T @ exp_full.astype(float)) > 0.5
    # absorption may only mix linear coefficients
    mixed = np.abs(absorb[exp_full]).sum(axis=1)
    if np.any(mixed > 1 + 1e-12):
        raise AssertionError("absorption mixes exponentiated coefficients")
    cols = raw @ sigma @ absorb
    center = cols.mean(axis=0) if center_cols else np.zeros(absorb.shape[1])
    pens = []
    for S in penalties_full:
        P = absorb.T @ S @ absorb
        pens.append(0.5 * (P + P.T))
    return TensorDesign(constraint, sigma, absorb, center, keep_exp, tuple(pens), tuple(knots),
                        tuple(grid), tuple(constraints), cols - center, tuple(marginal_raw))


def ti_interaction(x1, x2, q1: int = 5, q2: int = 5, constraint: str = "none",
                   order: int = 4) -> TensorDesign:
    """Pure interaction smooth excluding both main effects.

    ``none`` centers both marginals (sum-to-zero) before the product.
    ``increasing-first``/``decreasing-first`` drop the level column of the
    first marginal's cumulative reparametrization and the first B-spline of
    the second marginal, so that every remaining product coefficient is an
    exponentiated increment multiplying a nonnegative basis function.
    """
    if constraint not in ("none", "increasing-first", "decreasing-first"):
        raise ValueError(f"unknown interaction constraint {constraint!r}")
    min_q = 3 if constraint != "none" else 2
    if q1 < min_q or q2 < min_q:
        raise ValueError(f"q too small for constraint {constraint!r}")
    kv1 = place_knots(x1, q1, min(order, q1))
    kv2 = place_knots(x2, q2, min(order, q2))
    B1 = eval_basis(x1, kv1)
    B2 = eval_basis(x2, kv2)
    raw = row_kronecker(B1, B2)
    grid = (q1, q2)
    S2 = difference_matrix(q2, 2)
    S2 = S2.T @ S2
    if constraint == "none":
        S1 = difference_matrix(q1, 2)
        S1 = S1.T @ S1
        Z1 = sum_to_zero_basis(B1.sum(axis=0))
        Z2 = sum_to_zero_basis(B2.sum(axis=0))
        absorb = np.kron(Z1, Z2)
        exp_full = np.zeros(q1 * q2, dtype=bool)
        pens = [np.kron(S1, np.eye(q2)), np.kron(np.eye(q1), S2)]
        return _finish("none", raw, np.eye(q1 * q2), absorb, exp_full, pens, (kv1, kv2), grid,
                       (), (B1, B2), center_cols=True)

    direction = "increasing" if constraint == "increasing-first" else "decreasing"
    A, level = _cumulative(direction, q1)
    sigma = np.kron(A, np.eye(q2))
    exp_grid = np.ones(grid, dtype=bool)
    exp_grid[level, :] = False
    keep = [j * q2 + k for j in range(q1) for k in range(1, q2) if j != level]
    absorb = _selection(q1 * q2, keep)
    pens = [_grid_penalty(grid, exp_grid, 0, True), np.kron(np.eye(q1), S2)]
    return _finish(constraint, raw, sigma, absorb, exp_grid.ravel(), pens, (kv1, kv2), grid,
                   (direction, "none"), (B1, B2), center_cols=True)


def double_monotone(x1, x2, q1: int = 5, q2: int = 5, direction=("increasing", "increasing"),
                    order: int = 4) -> TensorDesign:
    """Bivariate smooth monotone along one or both covariates.

    ``direction`` is a pair drawn from ``increasing``/``decreasing``/``none``;
    a single string applies to both covariates.  The level coefficient (the
    only combination giving a constant surface) is absorbed and columns are
    centered.
    """
    if isinstance(direction, str):
        direction = (direction, direction)
    d1, d2 = direction
    if d1 not in DIRECTIONS or d2 not in DIRECTIONS or (d1 == "none" and d2 == "none"):
        raise ValueError(f"unsupported direction combination {direction!r}")
    if q1 < 3 or q2 < 3:
        raise ValueError("q too small for a constrained tensor smooth")
    kv1 = place_knots(x1, q1, min(order, q1))
    kv2 = place_knots(x2, q2, min(order, q2))
    B1 = eval_basis(x1, kv1)
    B2 = eval_basis(x2, kv2)
    raw = row_kronecker(B1, B2)
    grid = (q1, q2)
    A1, l1 = _cumulative(d1, q1)
    A2, l2 = _cumulative(d2, q2)
    sigma = np.kron(A1, A2)
    lin_grid = np.zeros(grid, dtype=bool)
    if l1 is not None and l2 is not None:
        lin_grid[l1, l2] = True
    elif l1 is not None:
        lin_grid[l1, :] = True
    else:
        lin_grid[:, l2] = True
    exp_grid = ~lin_grid
    lin = np.flatnonzero(lin_grid.ravel())
    nonlin = np.flatnonzero(exp_grid.ravel())
    # constant surface = equal linear coefficients; constrain them to sum to zero
    Zl = sum_to_zero_basis(np.ones(lin.size)) if lin.size > 1 else np.zeros((1, 0))
    absorb = np.zeros((q1 * q2, Zl.shape[1] + nonlin.size))
    absorb[np.ix_(lin, np.arange(Zl.shape[1]))] = Zl
    absorb[nonlin, Zl.shape[1] + np.arange(nonlin.size)] = 1.0
    pens = [_grid_penalty(grid, exp_grid, 0, d1 != "none"),
            _grid_penalty(grid, exp_grid, 1, d2 != "none")]
    return _finish(f"{d1}/{d2}", raw, sigma, absorb, exp_grid.ravel(), pens, (kv1, kv2), grid,
                   (d1, d2), (B1, B2), center_cols=True)
