"""Mixed-integer QP model of MAP clustering.

Columns, in order: z (n*K binaries), mu (K*d), t (n*K*d, t_ikd = z_ik mu_kd),
pi (K), u (K, chordal epigraph of -log pi_k), w (n*K, w_ik = z_ik u_k).

The objective is ``0.5 x'Qx + c'x + c0``; rows are ``A x (sense) rhs``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .constraints import (
    closed_must_links,
    MustLink,
    to_linear_rows,
    validate,
)
from .model import ContractError, Dataset, ProblemSpec, whiten


class BuildError(ValueError):
    pass


@dataclass(frozen=True)
class Chords:
    breaks: np.ndarray
    slopes: np.ndarray
    intercepts: np.ndarray
    e_max: float

    def __call__(self, pi) -> np.ndarray:
        """Upper envelope max_j (a_j pi + b_j), which equals the interpolant."""
        pi = np.asarray(pi, dtype=float)
        return np.max(np.multiply.outer(pi, self.slopes) + self.intercepts, axis=-1)


def pwl_chords(pi_min: float, B: int) -> Chords:
    """Chords of -log over the regular grid pi_min = g_0 < ... < g_B = 1.

    The per-cell overestimate peaks where -1/pi equals the chord slope, so
    ``e_max`` is exact rather than sampled.
    """
    if B < 1 or not 0 < pi_min <= 1:
        raise ValueError("need B >= 1 and 0 < pi_min <= 1")
    if pi_min == 1:
        # single-component model: pi is pinned to 1 and -log pi = 0
        return Chords(np.array([1.0, 1.0]), np.zeros(1), np.zeros(1), 0.0)
    g = np.linspace(pi_min, 1.0, B + 1)
    g[-1] = 1.0
    f = -np.log(g)
    a = np.diff(f) / np.diff(g)
    b = f[:-1] - a * g[:-1]
    p_star = -1.0 / a
    err = a * p_star + b + np.log(p_star)
    return Chords(g, a, b, float(max(err.max(), 0.0)))


def true_bound_correction(glbd_miqp: float, n: int, e_max: float) -> float:
    """Lower bound on the exact-log problem from a bound on the chordal model."""
    return glbd_miqp - n * e_max


@dataclass
class MiqpModel:
    n: int
    K: int
    d: int
    var_index: dict
    z_idx: np.ndarray
    mu_idx: np.ndarray
    t_idx: np.ndarray
    pi_idx: np.ndarray
    u_idx: np.ndarray
    w_idx: np.ndarray
    Q: sp.csc_matrix
    c: np.ndarray
    c0: float
    A: sp.csr_matrix
    sense: np.ndarray  # '<', '=', '>'
    rhs: np.ndarray
    row_kind: list
    lo: np.ndarray
    hi: np.ndarray
    integrality: np.ndarray
    chords: Chords
    e_max: float
    data: Dataset = field(repr=False)
    spec: ProblemSpec = field(repr=False)
    constraints: list = field(default_factory=list, repr=False)
    validation: object = field(default=None, repr=False)

    @property
    def ncols(self) -> int:
        return self.c.size

    @property
    def nrows(self) -> int:
        return self.rhs.size

    def row_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.where(self.sense == "<", -np.inf, self.rhs)
        hi = np.where(self.sense == ">", np.inf, self.rhs)
        return lo, hi

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ (self.Q @ x) + self.c @ x + self.c0)

    def max_violation(self, x: np.ndarray) -> float:
        ax = self.A @ x
        lo, hi = self.row_bounds()
        v = max(float(np.max(np.maximum(lo - ax, 0.0), initial=0.0)),
                float(np.max(np.maximum(ax - hi, 0.0), initial=0.0)))
        vb = max(float(np.max(self.lo - x, initial=0.0)), float(np.max(x - self.hi, initial=0.0)))
        return max(v, vb)

    def point_for(self, z: np.ndarray, mu: np.ndarray, pi: np.ndarray) -> np.ndarray:
        """Feasible column vector for a binary z and params (t, u, w set to their optimal values)."""
        x = np.zeros(self.ncols)
        z = np.asarray(z, dtype=float)
        x[self.z_idx] = z
        x[self.mu_idx] = mu
        x[self.t_idx] = z[:, :, None] * mu[None, :, :]
        x[self.pi_idx] = pi
        u = self.chords(pi)
        x[self.u_idx] = u
        x[self.w_idx] = z * u[None, :]
        return x


def default_bounds(data: Dataset, K: int) -> tuple[np.ndarray, np.ndarray]:
    return np.tile(data.points.min(axis=0), (K, 1)), np.tile(data.points.max(axis=0), (K, 1))


def build_miqp(data: Dataset, spec: ProblemSpec, constraints: Sequence = ()) -> MiqpModel:
    n, K, d = data.n, spec.K, spec.d
    if data.d != d:
        raise ContractError("data and spec dimensions differ")
    ML, MU = spec.mu_lower, spec.mu_upper
    if np.any(ML > MU):
        raise BuildError("mean lower bound exceeds upper bound")
    B = spec.breakpoints
    chords = pwl_chords(spec.pi_floor, B)
    umax = -np.log(spec.pi_floor)

    cols = 0

    def block(shape):
        nonlocal cols
        size = int(np.prod(shape))
        idx = np.arange(cols, cols + size).reshape(shape)
        cols += size
        return idx

    z_idx = block((n, K))
    mu_idx = block((K, d))
    t_idx = block((n, K, d))
    pi_idx = block((K,))
    u_idx = block((K,))
    w_idx = block((n, K))
    var_index = {}
    for i in range(n):
        for k in range(K):
            var_index[("z", i, k)] = int(z_idx[i, k])
            var_index[("w", i, k)] = int(w_idx[i, k])
            for j in range(d):
                var_index[("t", i, k, j)] = int(t_idx[i, k, j])
    for k in range(K):
        var_index[("pi", k)] = int(pi_idx[k])
        var_index[("u", k)] = int(u_idx[k])
        for j in range(d):
            var_index[("mu", k, j)] = int(mu_idx[k, j])

    # objective: 0.5 * sum_i ||L'(y_i - sum_k t_ik)||^2 + sum_ik w_ik + ridge
    _, tr = whiten(data, spec)
    Lt = tr.factor.T  # d x d
    grows, gcols, gvals = [], [], []
    resid = np.zeros(n * d)
    for i in range(n):
        for a in range(d):
            r = i * d + a
            for k in range(K):
                for b in range(d):
                    if Lt[a, b] != 0.0:
                        grows.append(r)
                        gcols.append(t_idx[i, k, b])
                        gvals.append(Lt[a, b])
        resid[i * d:(i + 1) * d] = Lt @ data.points[i]
    G = sp.csr_matrix((gvals, (grows, gcols)), shape=(n * d, cols))
    Q = (G.T @ G).tocsc()
    c = -(G.T @ resid)
    c0 = 0.5 * float(resid @ resid)
    lam = spec.ridge
    if np.any(lam > 0):
        Q = Q + sp.csc_matrix((np.tile(lam, K), (mu_idx.ravel(), mu_idx.ravel())), shape=(cols, cols))
    c[w_idx.ravel()] += 1.0
    Q = sp.csc_matrix(Q)
    Q.sum_duplicates()

    rows_i, rows_j, rows_v, sense, rhs, kind = [], [], [], [], [], []

    def add(entries, s, r, tag):
        row = len(rhs)
        for j, v in entries:
            rows_i.append(row)
            rows_j.append(j)
            rows_v.append(v)
        sense.append(s)
        rhs.append(r)
        kind.append(tag)

    for i in range(n):
        add([(z_idx[i, k], 1.0) for k in range(K)], "=", 1.0, "rowsum")
    add([(pi_idx[k], 1.0) for k in range(K)], "=", 1.0, "simplex")
    for i in range(n):
        for k in range(K):
            z = z_idx[i, k]
            for j in range(d):
                t, mu = t_idx[i, k, j], mu_idx[k, j]
                lo, hi = ML[k, j], MU[k, j]
                add([(z, lo), (t, -1.0)], "<", 0.0, "product")
                add([(t, 1.0), (z, -hi)], "<", 0.0, "product")
                add([(mu, 1.0), (t, -1.0), (z, hi)], "<", hi, "product")
                add([(t, 1.0), (mu, -1.0), (z, -lo)], "<", -lo, "product")
    for k in range(K):
        for a, b in zip(chords.slopes, chords.intercepts):
            add([(pi_idx[k], a), (u_idx[k], -1.0)], "<", -b, "chord")
    for i in range(n):
        for k in range(K):
            add([(u_idx[k], 1.0), (w_idx[i, k], -1.0), (z_idx[i, k], umax)], "<", umax, "w")
            add([(w_idx[i, k], -1.0)], "<", 0.0, "w")

    rep = validate(constraints, data, K)
    effective = []
    # contradictory input is not compiled; the solver short-circuits to Infeasible
    if rep.ok:
        effective = [c for c in rep.constraints if not isinstance(c, MustLink)]
        effective += closed_must_links(rep.constraints, n)
    smap = {"<=": "<", "=": "=", ">=": ">"}
    for con in effective:
        for row in to_linear_rows(con, n, K):
            add([(var_index[v], coef) for v, coef in row.coefs], smap[row.sense], row.rhs, "side")

    A = sp.csr_matrix((rows_v, (rows_i, rows_j)), shape=(len(rhs), cols))
    A.sum_duplicates()

    lo = np.empty(cols)
    hi = np.empty(cols)
    lo[z_idx] = 0.0
    hi[z_idx] = 1.0
    lo[mu_idx] = ML
    hi[mu_idx] = MU
    lo[t_idx] = np.minimum(ML, 0.0)[None, :, :]
    hi[t_idx] = np.maximum(MU, 0.0)[None, :, :]
    lo[pi_idx] = spec.pi_floor
    hi[pi_idx] = 1.0
    lo[u_idx] = 0.0
    hi[u_idx] = umax
    lo[w_idx] = 0.0
    hi[w_idx] = umax
    integ = np.zeros(cols, dtype=bool)
    integ[z_idx] = True

    return MiqpModel(
        n=n, K=K, d=d, var_index=var_index,
        z_idx=z_idx, mu_idx=mu_idx, t_idx=t_idx, pi_idx=pi_idx, u_idx=u_idx, w_idx=w_idx,
        Q=Q, c=np.asarray(c, dtype=float).ravel(), c0=c0,
        A=A, sense=np.array(sense), rhs=np.array(rhs, dtype=float), row_kind=kind,
        lo=lo, hi=hi, integrality=integ, chords=chords, e_max=chords.e_max,
        data=data, spec=spec, constraints=list(rep.constraints), validation=rep,
    )


def _name(key) -> str:
    return key[0] + "_" + "_".join(str(v + 1) for v in key[1:])


def dump_model(model: MiqpModel, path) -> None:
    """Write the plain-text exchange file (grammar in docs/model_format.md)."""
    names = [None] * model.ncols
    for key, j in model.var_index.items():
        names[j] = _name(key)
    Q = sp.triu(model.Q).tocoo()
    A = model.A.tocoo()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"MIQP {model.ncols} {model.nrows}\n")
        for j, nm in enumerate(names):
            kind = "B" if model.integrality[j] else "C"
            fh.write(f"COL {j} {nm} {kind} {float(model.lo[j])!r} {float(model.hi[j])!r}\n")
        fh.write(f"OBJCONST {float(model.c0)!r}\n")
        for j in np.flatnonzero(model.c):
            fh.write(f"OBJLIN {j} {float(model.c[j])!r}\n")
        for i, j, v in zip(Q.row, Q.col, Q.data):
            fh.write(f"OBJQUAD {i} {j} {float(v)!r}\n")
        for r in range(model.nrows):
            fh.write(f"ROW {r} {model.row_kind[r]} {model.sense[r]} {float(model.rhs[r])!r}\n")
        for r, j, v in zip(A.row, A.col, A.data):
            fh.write(f"COEF {r} {j} {float(v)!r}\n")
        fh.write("END\n")


def load_model_dump(path) -> dict:
    """Parse an exchange file back into plain arrays (used for cross-checking)."""
    cols, rows, obj_lin, quad, coefs = {}, {}, {}, [], []
    const = 0.0
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            tok = line.split()
            if not tok:
                continue
            tag = tok[0]
            if tag == "MIQP":
                ncols, nrows = int(tok[1]), int(tok[2])
            elif tag == "COL":
                cols[int(tok[1])] = (tok[2], tok[3], float(tok[4]), float(tok[5]))
            elif tag == "OBJCONST":
                const = float(tok[1])
            elif tag == "OBJLIN":
                obj_lin[int(tok[1])] = float(tok[2])
            elif tag == "OBJQUAD":
                quad.append((int(tok[1]), int(tok[2]), float(tok[3])))
            elif tag == "ROW":
                rows[int(tok[1])] = (tok[2], tok[3], float(tok[4]))
            elif tag == "COEF":
                coefs.append((int(tok[1]), int(tok[2]), float(tok[3])))
    c = np.zeros(ncols)
    for j, v in obj_lin.items():
        c[j] = v
    qi, qj, qv = zip(*quad) if quad else ((), (), ())
    Qu = sp.coo_matrix((qv, (qi, qj)), shape=(ncols, ncols)).tocsr()
    Q = Qu + sp.triu(Qu, 1).T
    ai, aj, av = zip(*coefs) if coefs else ((), (), ())
    A = sp.csr_matrix((av, (ai, aj)), shape=(nrows, ncols))
    return {
        "names": [cols[j][0] for j in range(ncols)],
        "integrality": np.array([cols[j][1] == "B" for j in range(ncols)]),
        "lo": np.array([cols[j][2] for j in range(ncols)]),
        "hi": np.array([cols[j][3] for j in range(ncols)]),
        "c0": const, "c": c, "Q": Q.tocsc(), "A": A,
        "sense": np.array([rows[r][1] for r in range(nrows)]),
        "rhs": np.array([rows[r][2] for r in range(nrows)]),
    }
