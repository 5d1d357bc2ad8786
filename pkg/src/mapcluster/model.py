"""Problem data, the MAP clustering objective, and closed-form parameter updates.

Objective (negative log posterior, assignment-independent constants dropped)::

    sum_ik z_ik * q(y_i, mu_k) - sum_ik z_ik * log(pi_k) [+ ridge]

with ``q(y, mu) = eta * (y - mu)**2`` for a scalar precision and
``q(y, mu) = 0.5 * (y - mu)' P (y - mu)`` for a shared precision matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np
from scipy.optimize import linear_sum_assignment, lsq_linear


class ContractError(ValueError):
    """Inputs with inconsistent shapes or out-of-range indices."""


class NotPSDError(ValueError):
    """Precision matrix failed Cholesky factorization."""


@dataclass(frozen=True)
class Dataset:
    points: np.ndarray
    ids: Optional[tuple] = None
    known_labels: Mapping[int, int] = field(default_factory=dict)
    missing: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise ContractError(f"points must be a non-empty n x d matrix, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ContractError("points contain non-finite entries")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.ids is not None:
            if len(self.ids) != pts.shape[0]:
                raise ContractError("ids length does not match number of points")
            object.__setattr__(self, "ids", tuple(self.ids))
        labels = {int(i): int(k) for i, k in dict(self.known_labels).items()}
        for i in labels:
            if not 0 <= i < pts.shape[0]:
                raise ContractError(f"known label for sample {i} out of range")
        object.__setattr__(self, "known_labels", labels)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True)
class Uniform:
    pass


@dataclass(frozen=True)
class GaussianRidge:
    strength: tuple  # per-dimension lambda >= 0

    def __post_init__(self):
        lam = tuple(float(v) for v in np.atleast_1d(self.strength))
        if any(v < 0 for v in lam):
            raise ContractError("ridge strength must be nonnegative")
        object.__setattr__(self, "strength", lam)


Prior = Union[Uniform, GaussianRidge]


@dataclass(frozen=True)
class ProblemSpec:
    """Model configuration shared by every solver.

    ``precision`` is a scalar eta (objective term ``eta * ||y - mu||^2``) or a
    symmetric PSD matrix P (term ``0.5 * (y - mu)' P (y - mu)``).
    """

    K: int
    precision: Union[float, np.ndarray]
    mu_lower: np.ndarray
    mu_upper: np.ndarray
    prior: Prior = Uniform()
    pi_floor: float = 1e-3
    breakpoints: int = 32

    def __post_init__(self):
        if self.K < 1:
            raise ContractError("K must be >= 1")
        lo = np.atleast_2d(np.asarray(self.mu_lower, dtype=float)).copy()
        hi = np.atleast_2d(np.asarray(self.mu_upper, dtype=float)).copy()
        if lo.shape != hi.shape or lo.shape[0] != self.K:
            raise ContractError(f"mean bounds must be K x d, got {lo.shape} and {hi.shape}")
        if np.any(lo > hi):
            raise ContractError("mu_lower exceeds mu_upper")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "mu_lower", lo)
        object.__setattr__(self, "mu_upper", hi)
        if np.ndim(self.precision) == 0:
            eta = float(self.precision)
            if not eta > 0:
                raise ContractError("scalar precision must be positive")
            object.__setattr__(self, "precision", eta)
        else:
            P = np.array(self.precision, dtype=float)
            d = lo.shape[1]
            if P.shape != (d, d):
                raise ContractError(f"precision matrix must be {d} x {d}")
            if not np.allclose(P, P.T, atol=1e-12 * max(1.0, np.abs(P).max())):
                raise ContractError("precision matrix must be symmetric")
            P = 0.5 * (P + P.T)
            P.setflags(write=False)
            object.__setattr__(self, "precision", P)
            precision_factor(P)
        if not 0 < self.pi_floor <= 1.0 / self.K:
            raise ContractError(f"pi_floor must lie in (0, 1/K], got {self.pi_floor}")
        if self.breakpoints < 1:
            raise ContractError("breakpoints must be >= 1")
        if isinstance(self.prior, GaussianRidge) and len(self.prior.strength) not in (1, lo.shape[1]):
            raise ContractError("ridge strength must have length 1 or d")

    @property
    def d(self) -> int:
        return self.mu_lower.shape[1]

    @property
    def precision_matrix(self) -> np.ndarray:
        """P such that the quadratic term is 0.5 * r' P r (scalar eta maps to 2 eta I)."""
        if np.ndim(self.precision) == 0:
            return 2.0 * self.precision * np.eye(self.d)
        return self.precision

    @property
    def ridge(self) -> np.ndarray:
        if isinstance(self.prior, GaussianRidge):
            return np.broadcast_to(np.asarray(self.prior.strength, dtype=float), (self.d,)).copy()
        return np.zeros(self.d)

    @classmethod
    def from_data(cls, data: Dataset, K: int, precision, **kw) -> "ProblemSpec":
        """Spec with default mean bounds [min(y), max(y)] per dimension."""
        lo = kw.pop("mu_lower", None)
        hi = kw.pop("mu_upper", None)
        if lo is None:
            lo = np.tile(data.points.min(axis=0), (K, 1))
        if hi is None:
            hi = np.tile(data.points.max(axis=0), (K, 1))
        return cls(K=K, precision=precision, mu_lower=lo, mu_upper=hi, **kw)


@dataclass(frozen=True)
class Assignment:
    z: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.z)
        if z.ndim != 2:
            raise ContractError("assignment must be an n x K matrix")
        if not np.all((z == 0) | (z == 1)):
            raise ContractError("assignment entries must be binary")
        if not np.all(z.sum(axis=1) == 1):
            raise ContractError("each assignment row must sum to 1")
        z = z.astype(np.int8)
        z.setflags(write=False)
        object.__setattr__(self, "z", z)

    @classmethod
    def from_labels(cls, labels: Sequence[int], K: int) -> "Assignment":
        labels = np.asarray(labels, dtype=int)
        if labels.size and (labels.min() < 0 or labels.max() >= K):
            raise ContractError("label out of range")
        z = np.zeros((labels.size, K), dtype=np.int8)
        z[np.arange(labels.size), labels] = 1
        return cls(z)

    @property
    def labels(self) -> np.ndarray:
        return self.z.argmax(axis=1)

    @property
    def counts(self) -> np.ndarray:
        return self.z.sum(axis=0).astype(int)


@dataclass(frozen=True)
class Params:
    mu: np.ndarray
    pi: np.ndarray

    def __post_init__(self):
        mu = np.atleast_2d(np.asarray(self.mu, dtype=float)).copy()
        pi = np.asarray(self.pi, dtype=float).ravel().copy()
        if mu.shape[0] != pi.size:
            raise ContractError("mu rows and pi length differ")
        mu.setflags(write=False)
        pi.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "pi", pi)


@dataclass(frozen=True)
class MapSolution:
    assignment: Assignment
    params: Params
    objective: float
    feasible: bool = True

    @property
    def labels(self) -> np.ndarray:
        return self.assignment.labels


def precision_factor(P: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor L of P = L L'; PSD matrices get a tiny diagonal shift."""
    P = np.asarray(P, dtype=float)
    d = P.shape[0]
    for j in range(1, d + 1):
        minor = P[:j, :j]
        if np.linalg.eigvalsh(minor).min() < -1e-10 * max(1.0, np.abs(P).max()):
            raise NotPSDError(f"precision matrix is not PSD: leading minor of order {j} is indefinite")
    try:
        return np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        # singular PSD: factor through the eigendecomposition instead
        w, V = np.linalg.eigh(P)
        w = np.clip(w, 0.0, None)
        _, R = np.linalg.qr((V * np.sqrt(w)).T)
        L = R.T
        return L * np.where(np.diag(L) < 0, -1.0, 1.0)


@dataclass(frozen=True)
class LinearTransform:
    """Whitening map y -> factor' y with ``0.5 (y-mu)'P(y-mu) = 0.5 ||factor'(y-mu)||^2``."""

    factor: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.factor

    @property
    def is_diagonal(self) -> bool:
        return bool(np.allclose(self.factor, np.diag(np.diag(self.factor))))


def whiten(data: Dataset, spec: ProblemSpec) -> tuple[Dataset, LinearTransform]:
    L = precision_factor(spec.precision_matrix)
    tr = LinearTransform(L)
    return Dataset(tr.apply(data.points), ids=data.ids, known_labels=data.known_labels), tr


def _check_shapes(data: Dataset, spec: ProblemSpec, z: np.ndarray, p: Optional[Params] = None):
    if data.d != spec.d:
        raise ContractError(f"data dimension {data.d} does not match spec dimension {spec.d}")
    if z.shape != (data.n, spec.K):
        raise ContractError(f"assignment shape {z.shape} does not match (n, K)=({data.n}, {spec.K})")
    if p is not None and (p.mu.shape != (spec.K, spec.d) or p.pi.shape != (spec.K,)):
        raise ContractError("params shape does not match spec")


def quadratic_costs(points: np.ndarray, mu: np.ndarray, spec: ProblemSpec) -> np.ndarray:
    """n x K matrix of per-sample template costs q(y_i, mu_k)."""
    P = spec.precision_matrix
    diff = points[:, None, :] - mu[None, :, :]
    return 0.5 * np.einsum("ikd,de,ike->ik", diff, P, diff)


def ridge_penalty(mu: np.ndarray, spec: ProblemSpec) -> float:
    lam = spec.ridge
    return 0.5 * float(np.sum(lam * mu**2))


def evaluate_objective(data: Dataset, spec: ProblemSpec, a, p: Params) -> float:
    """Negative log posterior of (z, mu, pi) up to assignment-independent constants.

    ``a`` may be an :class:`Assignment` or a relaxed n x K array; the value is
    linear in it for fixed parameters.
    """
    z = a.z if isinstance(a, Assignment) else np.asarray(a, dtype=float)
    _check_shapes(data, spec, z, p)
    if np.any(p.pi <= 0):
        raise ValueError("mixing proportions must be strictly positive")
    C = quadratic_costs(data.points, p.mu, spec)
    return float(np.sum(z * C) - np.sum(z * np.log(p.pi)[None, :]) + ridge_penalty(p.mu, spec))


def normalization_offset(n: int, spec: ProblemSpec) -> float:
    """Constant separating the reported objective from the full -log likelihood."""
    P = spec.precision_matrix
    sign, logdet = np.linalg.slogdet(P)
    if sign <= 0:
        return float("nan")
    return float(n * (0.5 * spec.d * np.log(2 * np.pi) - 0.5 * logdet))


# -- closed-form parameter updates -------------------------------------------


def _pool_adjacent(counts: np.ndarray) -> np.ndarray:
    """Isotonic (non-decreasing) least-squares fit with unit weights."""
    blocks = []  # (sum, size)
    for c in counts:
        blocks.append([float(c), 1])
        while len(blocks) > 1 and blocks[-2][0] / blocks[-2][1] > blocks[-1][0] / blocks[-1][1]:
            s, m = blocks.pop()
            blocks[-1][0] += s
            blocks[-1][1] += m
    out = []
    for s, m in blocks:
        out.extend([s / m] * m)
    return np.array(out)


def optimal_pi(counts: np.ndarray, pi_floor: float, ordered: bool = False) -> np.ndarray:
    """Minimize -sum n_k log pi_k over the floored simplex (optionally pi ascending).

    Floored coordinates are a prefix of the components sorted by count, so all
    K+1 prefix sizes are tried and the best feasible candidate kept.
    """
    counts = np.asarray(counts, dtype=float)
    K = counts.size
    if ordered:
        order = np.arange(K)
        base = _pool_adjacent(counts)
    else:
        order = np.argsort(counts, kind="stable")
        base = counts[order]
    best, best_val = None, np.inf
    for m in range(K + 1):
        rest = base[m:]
        mass = 1.0 - m * pi_floor
        if m == K:
            if abs(mass) > 1e-12:
                continue
            cand = np.full(K, pi_floor)
        elif rest.sum() > 0:
            cand = np.concatenate([np.full(m, pi_floor), mass * rest / rest.sum()])
        else:
            cand = np.concatenate([np.full(m, pi_floor), np.full(K - m, mass / (K - m))])
        if np.any(cand < pi_floor * (1 - 1e-12)) or (ordered and np.any(np.diff(cand) < -1e-15)):
            continue
        with np.errstate(divide="ignore"):
            val = -np.sum(np.where(base > 0, base * np.log(np.maximum(cand, 1e-300)), 0.0))
        if val < best_val - 1e-15:
            best, best_val = cand, val
    pi = np.empty(K)
    pi[order] = best
    return pi


def optimal_mean(
    sum_y: np.ndarray, count: float, spec: ProblemSpec, k: int
) -> np.ndarray:
    """Minimizer over the k-th box of 0.5 sum_i (y_i-mu)'P(y_i-mu) + ridge."""
    lo, hi = spec.mu_lower[k], spec.mu_upper[k]
    lam = spec.ridge
    P = spec.precision_matrix
    if count <= 0:
        if np.any(lam > 0):
            return np.where(lam > 0, np.clip(0.0, lo, hi), 0.5 * (lo + hi))
        return 0.5 * (lo + hi)
    H = count * P + np.diag(lam)
    g = P @ sum_y
    separable = spec.d == 1 or np.allclose(P, np.diag(np.diag(P)))
    if separable:
        return np.clip(g / np.diag(H), lo, hi)
    mu = np.linalg.solve(H, g)
    if np.all(mu >= lo) and np.all(mu <= hi):
        return mu
    R = np.linalg.cholesky(H).T
    res = lsq_linear(R, np.linalg.solve(R.T, g), bounds=(lo, hi), method="bvls", tol=1e-14)
    return res.x


def conditional_params(
    data: Dataset,
    spec: ProblemSpec,
    a,
    *,
    order_pi: bool = False,
    estimator_link: bool = False,
) -> Params:
    """Optimal (mu, pi) for a fixed assignment.

    Works for soft (responsibility) matrices as well, which is what the EM
    M-step uses.  ``estimator_link`` pins pi to the empirical proportions.
    """
    z = a.z if isinstance(a, Assignment) else np.asarray(a, dtype=float)
    _check_shapes(data, spec, z)
    counts = z.sum(axis=0).astype(float)
    sums = z.T.astype(float) @ data.points
    mu = np.vstack([optimal_mean(sums[k], counts[k], spec, k) for k in range(spec.K)])
    if estimator_link:
        pi = counts / data.n
    else:
        pi = optimal_pi(counts, spec.pi_floor, ordered=order_pi)
    return Params(mu, pi)


def solution_for(data: Dataset, spec: ProblemSpec, a: Assignment, **kw) -> MapSolution:
    p = conditional_params(data, spec, a, **kw)
    infeasible = np.any(p.pi < spec.pi_floor * (1 - 1e-12)) if kw.get("estimator_link") else np.any(p.pi <= 0)
    if kw.get("order_pi") and np.any(np.diff(p.pi) < -1e-12):
        infeasible = True
    if infeasible:
        return MapSolution(a, p, float("inf"), feasible=False)
    return MapSolution(a, p, evaluate_objective(data, spec, a, p))


# -- comparison metrics -------------------------------------------------------


@dataclass(frozen=True)
class Metrics:
    pi_sup: float
    mu_l2: float
    z_sup_mean: float
    matching: tuple


def solution_metrics(est: MapSolution, truth: MapSolution, spec: Optional[ProblemSpec] = None) -> Metrics:
    """Permutation-aligned comparison: sup |pi diff|, ||mu diff||_2, mean sup |z diff|.

    Estimated components are matched to truth components by minimum-cost
    perfect matching on Euclidean mean distance.
    """
    mu_e, mu_t = est.params.mu, truth.params.mu
    if mu_e.shape != mu_t.shape:
        raise ContractError("solutions have different K or d")
    if est.assignment.z.shape != truth.assignment.z.shape:
        raise ContractError("solutions have different n or K")
    cost = np.linalg.norm(mu_e[:, None, :] - mu_t[None, :, :], axis=2)
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty_like(cols)
    perm[cols] = rows  # truth component l <- estimated component perm[l]
    pi_e = est.params.pi[perm]
    mu_al = mu_e[perm]
    z_e = est.assignment.z[:, perm].astype(float)
    return Metrics(
        pi_sup=float(np.max(np.abs(pi_e - truth.params.pi))),
        mu_l2=float(np.linalg.norm(mu_al - mu_t)),
        z_sup_mean=float(np.mean(np.max(np.abs(z_e - truth.assignment.z), axis=1))),
        matching=tuple(int(v) for v in perm),
    )
