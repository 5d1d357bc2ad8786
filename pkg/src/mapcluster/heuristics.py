"""Local-search baselines: K-means, EM, multi-restart EM and simulated annealing.

None of these certify anything; they exist to be compared against the global
solver.  EM ignores side constraints (its rounded output is repaired), while
simulated annealing only visits feasible assignments.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from ._stats import LabelStats
from .bnb import _units, repair_labels
from .constraints import all_satisfied, param_flags, violated
from .model import (
    Assignment,
    ContractError,
    Dataset,
    MapSolution,
    Params,
    ProblemSpec,
    conditional_params,
    quadratic_costs,
    ridge_penalty,
    solution_for,
)


@dataclass
class SoftSolution:
    responsibilities: np.ndarray
    params: Params
    loglik_trace: list = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return max(0, len(self.loglik_trace) - 1)


def kmeans_init(data: Dataset, K: int, seed: int = 0, max_iter: int = 100) -> Assignment:
    """Lloyd iterations from a seeded farthest-point start."""
    n = data.n
    if n < K:
        raise ContractError(f"need at least K={K} samples, got {n}")
    y = data.points
    rng = np.random.default_rng(seed)
    centers = [y[rng.integers(n)]]
    dist = np.sum((y - centers[0]) ** 2, axis=1)
    for _ in range(1, K):
        nxt = y[int(np.argmax(dist))]
        centers.append(nxt)
        dist = np.minimum(dist, np.sum((y - nxt) ** 2, axis=1))
    C = np.array(centers, dtype=float)
    labels = None
    for _ in range(max_iter):
        d2 = np.sum((y[:, None, :] - C[None]) ** 2, axis=2)
        new = np.argmin(d2, axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for k in range(K):
            members = labels == k
            if members.any():
                C[k] = y[members].mean(axis=0)
    return Assignment.from_labels(labels, K)


def log_posterior(data: Dataset, spec: ProblemSpec, p: Params) -> float:
    """Marginal log-likelihood of the mixture minus the mean prior penalty.

    Normalizing constants that do not depend on (mu, pi) are dropped.
    """
    logits = np.log(p.pi)[None, :] - quadratic_costs(data.points, p.mu, spec)
    return float(logsumexp(logits, axis=1).sum() - ridge_penalty(p.mu, spec))


def em(
    data: Dataset,
    spec: ProblemSpec,
    init: Params,
    max_iter: int = 500,
    tol: float = 1e-10,
    constraints: Sequence = (),
) -> tuple[SoftSolution, Optional[MapSolution]]:
    """EM on the soft relaxation, then argmax rounding with constraint repair.

    The M-step is the exact constrained maximizer (floored pi, boxed mu), so
    the tracked log posterior never decreases.
    """
    p = init
    flags = param_flags(constraints)
    trace = [log_posterior(data, spec, p)]
    R = None
    for _ in range(max_iter):
        logits = np.log(p.pi)[None, :] - quadratic_costs(data.points, p.mu, spec)
        R = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
        p = conditional_params(data, spec, R, order_pi=flags["order_pi"])
        trace.append(log_posterior(data, spec, p))
        if trace[-1] - trace[-2] < tol:
            break
    if R is None:
        logits = np.log(p.pi)[None, :] - quadratic_costs(data.points, p.mu, spec)
        R = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
    soft = SoftSolution(R, p, trace)
    return soft, repair_labels(R, data, spec, list(constraints))


def random_params(spec: ProblemSpec, rng: np.random.Generator) -> Params:
    mu = rng.uniform(spec.mu_lower, spec.mu_upper)
    pi = np.maximum(rng.dirichlet(np.ones(spec.K)), spec.pi_floor)
    return Params(mu, pi / pi.sum())


def em_multistart(
    data: Dataset,
    spec: ProblemSpec,
    restarts: int = 10,
    seed: int = 0,
    time_budget: Optional[float] = None,
    constraints: Sequence = (),
    max_iter: int = 500,
    tol: float = 1e-10,
) -> Optional[MapSolution]:
    """Best rounded EM solution over restarts; the first start is K-means.

    Restart r draws its start from the same generator state regardless of
    the total count, so the result is a running minimum over a fixed stream.
    """
    if restarts < 1 and time_budget is None:
        raise ValueError("restarts must be positive")
    rng = np.random.default_rng(seed)
    flags = param_flags(constraints)
    t0 = time.perf_counter()
    best = None
    r = 0
    while True:
        if time_budget is not None:
            if r > 0 and time.perf_counter() - t0 >= time_budget:
                break
        elif r >= restarts:
            break
        if r == 0:
            a = kmeans_init(data, spec.K, int(rng.integers(2**31)))
            init = conditional_params(data, spec, a, order_pi=flags["order_pi"])
        else:
            init = random_params(spec, rng)
        _, sol = em(data, spec, init, max_iter, tol, constraints)
        if sol is not None and (best is None or sol.objective < best.objective):
            best = sol
        r += 1
    return best


@dataclass(frozen=True)
class Schedule:
    T0: Optional[float] = None  # None: spread of sampled move deltas
    decay: float = 0.995
    steps: int = 50_000


def simulated_annealing(
    data: Dataset,
    spec: ProblemSpec,
    constraints: Sequence = (),
    schedule: Schedule = Schedule(),
    seed: int = 0,
    init: Optional[Assignment] = None,
) -> MapSolution:
    """Metropolis search over feasible assignments with geometric cooling.

    A move reassigns one must-link group; moves that break a side constraint
    are rejected before evaluation.  Returns the best labelling visited.
    """
    constraints = list(constraints)
    K = spec.K
    flags = param_flags(constraints)
    rng = np.random.default_rng(seed)
    if init is None:
        init = kmeans_init(data, K, int(rng.integers(2**31)))
    sol = repair_labels(init.z.astype(float), data, spec, constraints)
    if sol is None:
        blocking = violated(constraints, init.labels, K)
        raise ContractError(f"no feasible initial assignment; blocking constraints: {blocking}")
    st = LabelStats(data, spec, sol.labels, **flags)
    cur = st.objective()
    units = [g for g, pin in _units(constraints, data.n) if pin is None]
    has_cons = bool(constraints)
    best_lab, best_val = st.labels.copy(), cur
    if not units or K < 2:
        return solution_for(data, spec, Assignment.from_labels(best_lab, K), **flags)

    def propose():
        g = units[int(rng.integers(len(units)))]
        a = int(st.labels[g[0]])
        b = int(rng.integers(K - 1))
        return g, a, b + (b >= a)

    T = schedule.T0
    if T is None:
        deltas = []
        for _ in range(100):
            g, a, b = propose()
            v = st.move_objective(g, a, b)
            if np.isfinite(v):
                deltas.append(v - cur)
        T = float(np.std(deltas)) if deltas else 1.0
        T = T if T > 0 else 1.0
    for _ in range(schedule.steps):
        g, a, b = propose()
        if has_cons and not all_satisfied(constraints, _moved(st.labels, g, b), K):
            T *= schedule.decay
            continue
        v = st.move_objective(g, a, b)
        delta = v - cur
        if delta <= 0 or (T > 0 and rng.random() < np.exp(-delta / T)):
            st.apply(g, a, b)
            cur = v
            if cur < best_val:
                best_lab, best_val = st.labels.copy(), cur
        T *= schedule.decay
    return solution_for(data, spec, Assignment.from_labels(best_lab, K), **flags)


def _moved(labels, g, b):
    out = labels.copy()
    out[g] = b
    return out
