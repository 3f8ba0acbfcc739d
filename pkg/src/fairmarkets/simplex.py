"""Dense two-phase tableau simplex.

Variables are implicitly nonnegative. Pricing uses the most negative reduced
cost and falls back to Bland's rule permanently once a run of degenerate
pivots suggests stalling, which rules out cycling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import LpInfeasible, LpUnbounded, NotConverged

DEGENERATE_STREAK = 30


@dataclass
class LpResult:
    x: np.ndarray
    fun: float
    pivots: int


class _Tableau:
    def __init__(self, T, basis, tol):
        self.T = T
        self.basis = basis
        self.tol = tol
        self.pivots = 0

    def pivot(self, r, k):
        T = self.T
        T[r] /= T[r, k]
        col = T[:, k].copy()
        col[r] = 0.0
        T -= np.outer(col, T[r])
        self.basis[r] = k
        self.pivots += 1

    def run(self, allowed, max_pivots, bland=False):
        """Minimise the objective row; ``allowed`` masks eligible columns."""
        T, tol = self.T, self.tol
        streak = 0
        while True:
            d = T[-1, :-1]
            candidates = np.flatnonzero((d < -tol) & allowed)
            if candidates.size == 0:
                return
            if bland:
                k = candidates[0]
            else:
                k = candidates[np.argmin(d[candidates])]
            column = T[:-1, k]
            rows = np.flatnonzero(column > tol)
            if rows.size == 0:
                raise LpUnbounded(f"objective unbounded along column {k}")
            ratios = T[rows, -1] / column[rows]
            best = ratios.min()
            tied = rows[ratios <= best + tol * max(1.0, abs(best))]
            r = tied[np.argmin(self.basis[tied])]
            streak = streak + 1 if best <= tol else 0
            if streak >= DEGENERATE_STREAK:
                bland = True
            self.pivot(r, k)
            if self.pivots > max_pivots:
                raise NotConverged("simplex pivot limit reached", iterations=self.pivots)


def solve_lp(
    c,
    A_ub=None,
    b_ub=None,
    A_eq=None,
    b_eq=None,
    maximize: bool = False,
    tol: float = 1e-9,
    max_pivots: int = 100_000,
    bland: bool = False,
) -> LpResult:
    """Optimise ``c @ x`` subject to ``A_ub x <= b_ub``, ``A_eq x = b_eq``, ``x >= 0``.

    Raises :class:`LpInfeasible` or :class:`LpUnbounded`. ``bland=True`` uses
    Bland's rule from the first pivot.
    """
    c = np.asarray(c, dtype=float)
    nvar = c.size
    A_ub = np.zeros((0, nvar)) if A_ub is None else np.atleast_2d(np.asarray(A_ub, dtype=float))
    b_ub = np.zeros(0) if b_ub is None else np.asarray(b_ub, dtype=float).ravel()
    A_eq = np.zeros((0, nvar)) if A_eq is None else np.atleast_2d(np.asarray(A_eq, dtype=float))
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float).ravel()
    n_ub, n_eq = A_ub.shape[0], A_eq.shape[0]
    if A_ub.shape[1] != nvar or A_eq.shape[1] != nvar or b_ub.size != n_ub or b_eq.size != n_eq:
        raise ValueError("inconsistent LP dimensions")
    cost = -c if maximize else c

    n_rows = n_ub + n_eq
    # slack (ub rows) then artificials (flipped ub rows and all eq rows)
    flip_ub = b_ub < 0
    flip_eq = b_eq < 0
    needs_art = np.concatenate([flip_ub, np.ones(n_eq, dtype=bool)])
    n_art = int(needs_art.sum())
    n_cols = nvar + n_ub + n_art
    T = np.zeros((n_rows + 1, n_cols + 1))
    T[:n_ub, :nvar] = A_ub
    T[:n_ub, nvar : nvar + n_ub] = np.eye(n_ub)
    T[:n_ub, -1] = b_ub
    T[:n_ub][flip_ub] *= -1.0
    T[n_ub:n_rows, :nvar] = A_eq
    T[n_ub:n_rows, -1] = b_eq
    T[n_ub:n_rows][flip_eq] *= -1.0

    basis = np.empty(n_rows, dtype=int)
    art_rows = np.flatnonzero(needs_art)
    basis[:n_ub] = nvar + np.arange(n_ub)
    art_cols = nvar + n_ub + np.arange(n_art)
    T[art_rows, art_cols] = 1.0
    basis[art_rows] = art_cols
    tab = _Tableau(T, basis, tol)

    is_art = np.zeros(n_cols, dtype=bool)
    is_art[art_cols] = True
    if n_art:
        T[-1, :] = 0.0
        T[-1, art_cols] = 1.0
        T[-1] -= T[art_rows].sum(axis=0)
        tab.run(np.ones(n_cols, dtype=bool), max_pivots, bland)
        infeas = -T[-1, -1]
        scale = 1.0 + np.abs(T[:-1, -1]).max(initial=0.0)
        if infeas > 1e3 * tol * scale:
            raise LpInfeasible(f"phase 1 ended with infeasibility {infeas:.3g}")
        # drive remaining artificials out of the basis or drop redundant rows
        keep = np.ones(n_rows + 1, dtype=bool)
        for r in range(n_rows):
            if not is_art[tab.basis[r]]:
                continue
            row = T[r, :-1].copy()
            row[is_art] = 0.0
            k = np.flatnonzero(np.abs(row) > tol)
            if k.size:
                tab.pivot(r, k[0])
            else:
                keep[r] = False
        T = T[keep][:, np.concatenate([~is_art, [True]])]
        col_map = -np.ones(n_cols, dtype=int)
        col_map[~is_art] = np.arange(int((~is_art).sum()))
        tab.T = T
        tab.basis = col_map[tab.basis[keep[:-1]]]
    full_cost = np.concatenate([cost, np.zeros(tab.T.shape[1] - 1 - nvar)])
    T = tab.T
    basic_cost = full_cost[tab.basis]
    T[-1, :-1] = full_cost - basic_cost @ T[:-1, :-1]
    T[-1, -1] = -basic_cost @ T[:-1, -1]
    tab.run(np.ones(T.shape[1] - 1, dtype=bool), max_pivots, bland)

    x_full = np.zeros(T.shape[1] - 1)
    x_full[tab.basis] = T[:-1, -1]
    x = np.maximum(x_full[:nvar], 0.0)
    return LpResult(x=x, fun=float(c @ x), pivots=tab.pivots)
