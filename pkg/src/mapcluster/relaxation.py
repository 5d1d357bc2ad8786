"""Continuous relaxation of the MIQP at a branch-and-bound node.

Fixed binaries are substituted out of the column set, the reduced convex QP
is handed to an interior-point (clarabel) or operator-splitting (OSQP)
backend, and a lower bound is certified independently of solver accuracy:

For any point x and row multipliers y with the correct signs, convexity of
the objective f gives, for every x' in the variable box,

    f(x') + y'(A x' - b) >= -0.5 x'Qx - b(y) + r'x',   r = Qx + c + A'y,

so ``lower_bound = -0.5 x'Qx - b(y) + sum_j min(r_j lo_j, r_j hi_j) + const``.
The difference to the primal objective is the duality gap plus the
residual-weighted box term; no tuning constant is involved.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
import scipy.sparse as sp

from .formulation import MiqpModel


class QpStatus(enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    ITER_LIMIT = "IterLimit"


@dataclass
class QpSolution:
    primal: Optional[np.ndarray]
    objective: float
    lower_bound: float
    primal_residual: float
    dual_residual: float
    status: QpStatus
    certificate: str = ""
    dual: Optional[np.ndarray] = None

    def z(self, model: MiqpModel) -> np.ndarray:
        return self.primal[model.z_idx]


@dataclass(frozen=True)
class Tolerances:
    eps: float = 1e-7
    max_iter: int = 200_000
    backend: str = "clarabel"


def _take_columns(indptr, indices, data, cols):
    starts = indptr[cols]
    lens = indptr[cols + 1] - starts
    new_ptr = np.zeros(cols.size + 1, dtype=np.int64)
    np.cumsum(lens, out=new_ptr[1:])
    pick = np.repeat(starts - new_ptr[:-1], lens) + np.arange(new_ptr[-1])
    return new_ptr, indices[pick], data[pick]


class _Prepared:
    """Per-model conic data: rows ``M x + s = b`` ordered [eq | ineq | box-hi | box-lo]."""

    def __init__(self, model: MiqpModel):
        A = model.A.tocsr()
        eq = model.sense == "="
        ge = model.sense == ">"
        sign = np.where(ge, -1.0, 1.0)
        order = np.concatenate([np.flatnonzero(eq), np.flatnonzero(~eq)])
        G = sp.diags(sign[order]) @ A[order]
        nv = model.ncols
        I = sp.identity(nv, format="csr")
        M = sp.vstack([G, I, -I], format="csc")
        M.sort_indices()
        self.n_eq = int(eq.sum())
        self.n_gen = A.shape[0]
        self.row_kind = [model.row_kind[r] for r in order]
        self.b = np.concatenate([sign[order] * model.rhs[order], model.hi, -model.lo])
        self.M_ptr, self.M_ind, self.M_val = M.indptr, M.indices, M.data
        self.nrows = M.shape[0]
        Qs = model.Q.tocsc()
        Qs.sort_indices()
        self.Q_ptr, self.Q_ind, self.Q_val = Qs.indptr, Qs.indices, Qs.data
        self.Q = Qs
        Qu = sp.triu(Qs, format="csc")
        Qu.sort_indices()
        self.U_ptr, self.U_ind, self.U_val = Qu.indptr, Qu.indices, Qu.data
        self.c = model.c
        self.c0 = model.c0
        self.lo, self.hi = model.lo, model.hi


def _prepared(model: MiqpModel) -> _Prepared:
    cache = model.__dict__.setdefault("_relax_cache", {})
    if "prep" not in cache:
        cache["prep"] = _Prepared(model)
    return cache["prep"]


def certified_bound(Q, c, c0, G, b_G, n_eq, lo, hi, x, z_G) -> float:
    """Lower bound from any x and general-row multipliers z_G (rows ``G x <= b``, first n_eq equalities)."""
    z = z_G.copy()
    z[n_eq:] = np.maximum(z[n_eq:], 0.0)
    Qx = Q @ x
    r = Qx + c + G.T @ z
    box = np.minimum(r * lo, r * hi)
    return float(-0.5 * x @ Qx - b_G @ z + box.sum() + c0)


def _residuals(Q, c, G, b_G, n_eq, lo, hi, x, z_G):
    gx = G @ x - b_G
    pres = max(
        float(np.max(np.abs(gx[:n_eq]), initial=0.0)),
        float(np.max(np.maximum(gx[n_eq:], 0.0), initial=0.0)),
        float(np.max(np.maximum(lo - x, 0.0), initial=0.0)),
        float(np.max(np.maximum(x - hi, 0.0), initial=0.0)),
    )
    z = z_G.copy()
    z[n_eq:] = np.maximum(z[n_eq:], 0.0)
    r = Q @ x + c + G.T @ z
    # box multipliers absorb r where a bound is active
    span = np.maximum(hi - lo, 1.0)
    at_lo = x <= lo + 1e-9 * span
    at_hi = x >= hi - 1e-9 * span
    r = np.where(at_lo & (r > 0), 0.0, r)
    r = np.where(at_hi & (r < 0), 0.0, r)
    return pres, float(np.max(np.abs(r), initial=0.0))


def _clarabel(P, q, M, b, n_eq, tol):
    import clarabel

    cones = []
    if n_eq:
        cones.append(clarabel.ZeroConeT(n_eq))
    cones.append(clarabel.NonnegativeConeT(M.shape[0] - n_eq))
    s = clarabel.DefaultSettings()
    s.verbose = False
    s.tol_gap_abs = tol.eps * 1e-2
    s.tol_gap_rel = tol.eps * 1e-2
    s.tol_feas = tol.eps * 1e-1
    s.max_iter = min(tol.max_iter, 500)
    sol = clarabel.DefaultSolver(P, q, M, b, cones, s).solve()
    return str(sol.status), np.asarray(sol.x), np.asarray(sol.z)


def _osqp(P, q, M, b, n_eq, tol, warm):
    import osqp

    l = np.full(b.size, -np.inf)
    l[:n_eq] = b[:n_eq]
    prob = osqp.OSQP()
    prob.setup(P, q, M, l, b, verbose=False, eps_abs=tol.eps, eps_rel=0.0,
               max_iter=tol.max_iter, polishing=True, eps_prim_inf=1e-9, eps_dual_inf=1e-9)
    if warm is not None:
        prob.warm_start(x=warm)
    res = prob.solve()
    status = res.info.status
    if "infeasible" in status and "dual" not in status:
        status = "PrimalInfeasible"
    elif status in ("solved", "solved inaccurate"):
        status = "Solved"
    return status, np.asarray(res.x), np.asarray(res.y)


def solve_relaxation(
    model: MiqpModel,
    fix0: Iterable = (),
    fix1: Iterable = (),
    warm: Optional[np.ndarray] = None,
    tol: Tolerances = Tolerances(),
) -> QpSolution:
    """Minimize the node relaxation (z in [0, 1] except the fixed entries)."""
    pr = _prepared(model)
    nv = model.ncols
    val = np.zeros(nv)
    fixed = np.zeros(nv, dtype=bool)
    for i, k in fix0:
        fixed[model.z_idx[i, k]] = True
    ones = [model.z_idx[i, k] for i, k in fix1]
    fixed[ones] = True
    val[ones] = 1.0
    free = np.flatnonzero(~fixed)

    # b - M[:, fixed] @ val
    b = pr.b.copy()
    for j in ones:
        s0, s1 = pr.M_ptr[j], pr.M_ptr[j + 1]
        b[pr.M_ind[s0:s1]] -= pr.M_val[s0:s1]
    ptr, ind, dat = _take_columns(pr.M_ptr, pr.M_ind, pr.M_val, free)
    present = np.zeros(pr.nrows, dtype=bool)
    present[ind] = True
    gen_empty = ~present[: pr.n_gen]
    if np.any(gen_empty):
        bg = b[: pr.n_gen]
        bad = gen_empty & np.concatenate([np.abs(bg[: pr.n_eq]) > 1e-12, bg[pr.n_eq:] < -1e-12])
        if np.any(bad):
            r = int(np.flatnonzero(bad)[0])
            return QpSolution(None, np.inf, np.inf, np.inf, np.inf, QpStatus.INFEASIBLE,
                              f"{pr.row_kind[r]} row has no free columns and is violated")
    renum = np.cumsum(present) - 1
    keep = np.flatnonzero(present)
    M = sp.csc_matrix((dat, renum[ind], ptr), shape=(keep.size, free.size))
    b = b[keep]
    n_gen = int(present[: pr.n_gen].sum())
    n_eq = int(present[: pr.n_eq].sum())

    qptr, qind, qdat = _take_columns(pr.Q_ptr, pr.Q_ind, pr.Q_val, free)
    qrenum = np.full(nv, -1)
    qrenum[free] = np.arange(free.size)
    Q_r = _slice_sym(qptr, qind, qdat, qrenum, free.size)
    uptr, uind, udat = _take_columns(pr.U_ptr, pr.U_ind, pr.U_val, free)
    Q_up = _slice_sym(uptr, uind, udat, qrenum, free.size)
    xf = val[fixed]
    Qfx = pr.Q @ val
    c_r = pr.c[free] + Qfx[free]
    c0 = pr.c0 + pr.c[fixed] @ xf + 0.5 * val @ Qfx
    lo, hi = pr.lo[free], pr.hi[free]

    if tol.backend == "osqp":
        w = warm[free] if warm is not None else None
        status, x, zd = _osqp(Q_up, c_r, M, b, n_eq, tol, w)
    else:
        status, x, zd = _clarabel(Q_up, c_r, M, b, n_eq, tol)
    if "Infeasible" in status and "Dual" not in status:
        return QpSolution(None, np.inf, np.inf, np.inf, np.inf, QpStatus.INFEASIBLE,
                          f"{tol.backend}: {status} (infeasibility certificate on row duals)")
    G = M[:n_gen]
    b_G = b[:n_gen]
    x = np.clip(x, lo, hi)
    z_G = zd[:n_gen]
    lb = certified_bound(Q_r, c_r, c0, G, b_G, n_eq, lo, hi, x, z_G)
    pres, dres = _residuals(Q_r, c_r, G, b_G, n_eq, lo, hi, x, z_G)
    obj = float(0.5 * x @ (Q_r @ x) + c_r @ x + c0)
    qp_status = QpStatus.OPTIMAL if status in ("Solved", "AlmostSolved") else QpStatus.ITER_LIMIT
    if qp_status is QpStatus.OPTIMAL and (pres > tol.eps or dres > tol.eps):
        # bound stays valid; the point just misses the residual contract
        qp_status = QpStatus.ITER_LIMIT
        status += f" (residuals {pres:.1e}/{dres:.1e})"
    full = val
    full[free] = x
    return QpSolution(full, obj, min(lb, obj), pres, dres, qp_status, status, dual=z_G)


def _slice_sym(ptr, ind, dat, renum, size):
    rows = renum[ind]
    keep = rows >= 0
    col = np.repeat(np.arange(size), np.diff(ptr))
    counts = np.bincount(col[keep], minlength=size)
    new_ptr = np.zeros(size + 1, dtype=np.int64)
    np.cumsum(counts, out=new_ptr[1:])
    return sp.csc_matrix((dat[keep], rows[keep], new_ptr), shape=(size, size))
