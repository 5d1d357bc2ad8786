"""Best-first branch-and-bound over the assignment binaries.

Node bounds come from the chordal MIQP relaxation; incumbents are always
re-scored under the exact objective.  ``true_glbd`` subtracts the worst-case
chord overestimate so it bounds the exact problem.
"""

from __future__ import annotations

import enum
import heapq
import itertools
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ._stats import LabelStats
from .constraints import (
    AssignLabel,
    MinSize,
    all_satisfied,
    must_link_groups,
    param_flags,
    propagate,
    violated,
)
from .formulation import MiqpModel, true_bound_correction
from .model import Assignment, Dataset, MapSolution, ProblemSpec, solution_for
from .relaxation import QpSolution, QpStatus, Tolerances, solve_relaxation

log = logging.getLogger(__name__)

INT_TOL = 1e-6
FATHOM_SLACK = 1e-9


class Strategy(str, enum.Enum):
    MOST_INFEASIBLE = "most-infeasible"
    MOST_INTEGRAL = "most-integral"


class Status(str, enum.Enum):
    OPTIMAL = "OptimalWithinEps"
    FEASIBLE = "Feasible"
    INFEASIBLE = "Infeasible"
    NO_INCUMBENT = "LimitNoIncumbent"


@dataclass
class Node:
    fix1: frozenset
    fix0: frozenset
    parent_lbd: float
    depth: int
    warm: Optional[np.ndarray] = None


@dataclass(frozen=True)
class TraceRecord:
    t: float
    ubd: float
    glbd: float
    nodes: int
    queue_len: int


@dataclass
class BnbOptions:
    epsilon: float = 1e-4
    time_limit: float = float("inf")
    node_limit: Optional[int] = None
    strategy: Strategy = Strategy.MOST_INFEASIBLE
    workers: int = 1
    deterministic: bool = False
    seed: int = 0
    tol: Tolerances = field(default_factory=Tolerances)
    trace_interval: float = 1.0


@dataclass
class BnbResult:
    incumbent: Optional[MapSolution]
    ubd: float
    glbd: float
    true_glbd: float
    gap: float
    nodes_explored: int
    nodes_fathomed: int
    trace: list
    status: Status
    wall_seconds: float
    e_max: float = 0.0


def relative_gap(ubd: float, glbd: float) -> float:
    if not np.isfinite(ubd):
        return float("inf")
    return (ubd - glbd) / max(1.0, abs(ubd))


# -- branching -------------------------------------------------------------------


def select_branch_var(sol: QpSolution, strategy, model: MiqpModel, fixed: Sequence = ()):
    """Pick a free fractional z_ik, or None when every free z is integral.

    Near-ties (1e-9) resolve to the smallest (i, k).
    """
    strategy = Strategy(strategy)
    z = sol.primal[model.z_idx]
    free = np.ones(z.shape, dtype=bool)
    for i, k in fixed:
        free[i, k] = False
    frac = free & (z > INT_TOL) & (z < 1 - INT_TOL)
    if not frac.any():
        return None
    if strategy is Strategy.MOST_INFEASIBLE:
        score = np.where(frac, np.abs(z - 0.5), np.inf)
        best = score.min()
        cand = frac & (score <= best + 1e-9)
    else:
        score = np.where(frac, z, -np.inf)
        best = score.max()
        cand = frac & (score >= best - 1e-9)
    i, k = np.argwhere(cand)[0]
    return int(i), int(k)


# -- incumbent heuristics ---------------------------------------------------------------


def _units(constraints, n):
    """Must-link groups with an optional pinned component each."""
    groups = must_link_groups(constraints, n)
    pins = {c.i: c.k for c in constraints if isinstance(c, AssignLabel)}
    out = []
    for g in groups:
        pin = next((pins[i] for i in g if i in pins), None)
        out.append((np.array(g), pin))
    return out


def round_and_repair(sol, constraints, model: MiqpModel) -> Optional[MapSolution]:
    """Round relaxed z to a feasible hard assignment, or None if repair fails."""
    data, spec = model.data, model.spec
    z = sol.primal[model.z_idx] if isinstance(sol, QpSolution) else np.asarray(sol, dtype=float)
    return repair_labels(z, data, spec, constraints)


def _argmax_ties_low(row: np.ndarray) -> int:
    return int(np.flatnonzero(row >= row.max() - 1e-9)[0])


def repair_labels(z: np.ndarray, data: Dataset, spec: ProblemSpec, constraints) -> Optional[MapSolution]:
    n, K = z.shape
    units = _units(constraints, n)
    unit_of = np.empty(n, dtype=int)
    labels = np.empty(n, dtype=int)
    for u, (g, pin) in enumerate(units):
        unit_of[g] = u
        labels[g] = pin if pin is not None else _argmax_ties_low(z[g].sum(axis=0))
    seen = {labels.tobytes()}
    for _ in range(n + 1):
        bad = violated(constraints, labels, K)
        if not bad:
            break
        involved = set()
        for c in bad:
            involved.update(_samples_of(c, labels))
        movable = sorted({int(units[unit_of[i]][0][0]) for i in involved if units[unit_of[i]][1] is None})
        best, best_key = None, None
        for i in movable:
            g = units[unit_of[i]][0]
            cur = z[g, labels[i]].sum()
            for k in range(K):
                if k == labels[i]:
                    continue
                trial = _with(labels, g, k)
                if trial.tobytes() in seen:
                    continue
                key = (len(violated(constraints, trial, K)), cur - z[g, k].sum(), i, k)
                if best_key is None or key < best_key:
                    best, best_key = trial, key
        if best is None:
            return None
        labels = best
        seen.add(labels.tobytes())
    if violated(constraints, labels, K):
        return None
    sol = solution_for(data, spec, Assignment.from_labels(labels, K), **param_flags(constraints))
    return sol if sol.feasible else None


def _with(labels, g, k):
    out = labels.copy()
    out[g] = k
    return out


def _samples_of(c, labels):
    from .constraints import CannotLink, Cover, MinSize, MustLink, OneWay, Pack, Partition

    if isinstance(c, (MustLink, CannotLink)):
        return (c.i, c.j)
    if isinstance(c, OneWay):
        return (c.i, c.j)
    if isinstance(c, MinSize):
        return tuple(np.flatnonzero(labels != c.k))
    if isinstance(c, Pack):
        return tuple(i for i in c.S if labels[i] == c.k)
    if isinstance(c, Cover):
        return tuple(i for i in c.S if labels[i] != c.k)
    if isinstance(c, Partition):
        cnt = sum(labels[i] == c.k for i in c.S)
        return tuple(i for i in c.S if (labels[i] == c.k) == (cnt > c.L))
    if isinstance(c, AssignLabel):
        return (c.i,)
    return ()


def local_polish(s: MapSolution, data: Dataset, spec: ProblemSpec, constraints=()) -> MapSolution:
    """Alternate closed-form parameters with best single-unit reassignments.

    A unit is a must-link group; pinned units never move.  Every accepted move
    lowers the re-estimated objective by at least 1e-12, so the loop ends.
    """
    constraints = list(constraints)
    flags = param_flags(constraints)
    K = spec.K
    st = LabelStats(data, spec, s.labels, **flags)
    cur = st.objective()
    units = [(g, pin) for g, pin in _units(constraints, data.n) if pin is None]
    has_cons = any(not isinstance(c, AssignLabel) for c in constraints)
    groups = [g for g, _ in units]
    improved = True
    while improved:
        improved = False
        if groups:
            vals = st.unit_moves(groups)
            order = np.argsort(vals, axis=None, kind="stable")
            for flat in order:
                u, b = divmod(int(flat), K)
                if not vals[u, b] < cur - 1e-12:
                    break
                g = groups[u]
                a = int(st.labels[g[0]])
                if has_cons and not all_satisfied(constraints, _with(st.labels, g, b), K):
                    continue
                st.apply(g, a, b)
                cur = st.objective()
                improved = True
                break
        if flags["order_pi"] and not any(isinstance(c, AssignLabel) for c in constraints):
            perm = np.empty(K, dtype=int)
            perm[np.argsort(st.counts, kind="stable")] = np.arange(K)
            if np.any(perm != np.arange(K)) and all_satisfied(constraints, perm[st.labels], K):
                old = st.labels.copy()
                st.relabel(perm)
                val = st.objective()
                if val < cur - 1e-12:
                    cur = val
                    improved = True
                else:
                    st = LabelStats(data, spec, old, **flags)
    out = solution_for(data, spec, Assignment.from_labels(st.labels, K), **flags)
    if out.objective > s.objective:
        return s
    return out


# -- symmetry breaking -----------------------------------------------------------------


def label_symmetric(model: MiqpModel) -> bool:
    """True when permuting component labels maps feasible points to feasible points."""
    from .constraints import CannotLink, EstimatorLink, MustLink

    spec = model.spec
    if not (np.all(spec.mu_lower == spec.mu_lower[0]) and np.all(spec.mu_upper == spec.mu_upper[0])):
        return False
    sizes = set()
    for c in model.constraints:
        if isinstance(c, (MustLink, CannotLink)):
            continue
        if isinstance(c, EstimatorLink):
            continue
        if isinstance(c, MinSize):
            sizes.add((c.k, c.L))
            continue
        return False
    if sizes:
        Ls = {L for _, L in sizes}
        if len(Ls) != 1 or {k for k, _ in sizes} != set(range(model.K)):
            return False
    return True


def symmetry_zeros(one, zero, n: int, K: int) -> set:
    """Fixings excluded by first-occurrence canonical labelling.

    Any labelling can be relabelled so sample i uses a component at most one
    above the largest component used by samples before it.
    """
    extra = set()
    top = -1
    for i in range(n):
        cap = top + 1
        for k in range(cap + 1, K):
            if (i, k) not in zero:
                extra.add((i, k))
        allowed = [k for k in range(min(cap, K - 1) + 1) if (i, k) not in zero]
        if allowed:
            top = max(top, allowed[-1])
        if top >= K - 1:
            break
    return extra


def _close(fix1, fix0, cons, n, K, symmetric):
    out = propagate(fix1, fix0, cons, n, K)
    while out is not None and symmetric:
        extra = symmetry_zeros(out[0], out[1], n, K)
        if not extra:
            break
        out = propagate(out[0], out[1] | extra, cons, n, K)
    return out


# -- main loop -------------------------------------------------------------------------


class _Tracer:
    def __init__(self, t0, interval):
        self.t0 = t0
        self.interval = interval
        self.records: list[TraceRecord] = []
        self._last_emit = -np.inf

    def emit(self, ubd, glbd, nodes, qlen, force=False):
        t = time.perf_counter() - self.t0
        last = self.records[-1] if self.records else None
        changed = last is None or last.ubd != ubd or last.glbd != glbd
        if not (changed or force or t - self._last_emit >= self.interval):
            return
        if last is not None and t <= last.t:
            t = np.nextafter(last.t, np.inf)
        self.records.append(TraceRecord(t, ubd, glbd, nodes, qlen))
        self._last_emit = t


def solve(model: MiqpModel, options: Optional[BnbOptions] = None) -> BnbResult:
    opts = options or BnbOptions()
    strategy = Strategy(opts.strategy)
    workers = 1 if opts.deterministic else max(1, int(opts.workers))
    t0 = time.perf_counter()
    tracer = _Tracer(t0, opts.trace_interval)
    data, spec = model.data, model.spec
    n, K = model.n, model.K
    cons = list(model.constraints)
    flags = param_flags(cons)

    def finish(status, inc, ubd, glbd, explored, fathomed, qlen=0):
        tg = true_bound_correction(glbd, n, model.e_max) if np.isfinite(glbd) else glbd
        tracer.emit(ubd, glbd, explored, qlen, force=True)
        return BnbResult(inc, ubd, glbd, tg, relative_gap(ubd, glbd), explored, fathomed,
                         tracer.records, status, time.perf_counter() - t0, model.e_max)

    if model.validation is not None and not model.validation.ok:
        log.info("constraint validation failed: %s", model.validation.conflicts)
        return finish(Status.INFEASIBLE, None, np.inf, np.inf, 0, 0)
    symmetric = label_symmetric(model)
    root = _close((), (), cons, n, K, symmetric)
    if root is None:
        return finish(Status.INFEASIBLE, None, np.inf, np.inf, 0, 0)

    counter = itertools.count()
    heap: list = []
    heapq.heappush(heap, (-np.inf, next(counter), Node(root[0], root[1], -np.inf, 0)))
    inc: Optional[MapSolution] = None
    ubd = np.inf
    resolved_min = np.inf  # bounds of closed or fathomed leaves
    glbd = -np.inf
    explored = fathomed = 0
    seen: set = set()

    def offer(cand: Optional[MapSolution]):
        nonlocal inc, ubd
        if cand is None or not cand.feasible:
            return
        key = cand.labels.tobytes()
        if key in seen:
            return
        seen.add(key)
        cand = local_polish(cand, data, spec, cons)
        seen.add(cand.labels.tobytes())
        if cand.objective < ubd:
            inc, ubd = cand, cand.objective

    def current_glbd(extra=()):
        vals = [ubd, resolved_min]
        if heap:
            vals.append(heap[0][0])
        vals.extend(extra)
        return max(glbd, min(vals))

    tracer.emit(ubd, glbd, 0, len(heap), force=True)
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    status = None
    try:
        while heap:
            if opts.node_limit is not None and explored >= opts.node_limit:
                status = "limit"
                break
            if time.perf_counter() - t0 > opts.time_limit:
                status = "limit"
                break
            batch = []
            while heap and len(batch) < workers:
                key, _, node = heapq.heappop(heap)
                if key > ubd - FATHOM_SLACK:
                    fathomed += 1
                    resolved_min = min(resolved_min, key)
                    continue
                batch.append(node)
            if not batch:
                continue
            jobs = [(nd, nd.fix0, nd.fix1) for nd in batch]
            if pool is not None:
                sols = list(pool.map(lambda j: solve_relaxation(model, j[1], j[2], j[0].warm, opts.tol), jobs))
            else:
                sols = [solve_relaxation(model, nd.fix0, nd.fix1, nd.warm, opts.tol) for nd in batch]
            for node, sol in zip(batch, sols):
                explored += 1
                if sol.status is QpStatus.INFEASIBLE:
                    fathomed += 1
                    continue
                lb = max(sol.lower_bound, node.parent_lbd)
                if lb > ubd - FATHOM_SLACK:
                    fathomed += 1
                    resolved_min = min(resolved_min, lb)
                    continue
                offer(round_and_repair(sol, cons, model))
                fixed = node.fix0 | node.fix1
                br = select_branch_var(sol, strategy, model, fixed)
                if br is None:
                    z = np.rint(sol.primal[model.z_idx]).astype(int)
                    if np.all(z.sum(axis=1) == 1):
                        offer(solution_for(data, spec, Assignment(z), **flags))
                    # subtree solved exactly: its value bounds it, not the relaxation gap
                    resolved_min = min(resolved_min, max(lb, sol.objective))
                    continue
                if lb > ubd - FATHOM_SLACK:
                    fathomed += 1
                    resolved_min = min(resolved_min, lb)
                    continue
                i, k = br
                for f1, f0 in (({(i, k)}, set()), (set(), {(i, k)})):
                    child = _close(node.fix1 | f1, node.fix0 | f0, cons, n, K, symmetric)
                    if child is None:
                        fathomed += 1
                        continue
                    heapq.heappush(heap, (lb, next(counter), Node(child[0], child[1], lb, node.depth + 1, sol.primal)))
            glbd = current_glbd()
            tracer.emit(ubd, glbd, explored, len(heap))
            if inc is not None and relative_gap(ubd, glbd) <= opts.epsilon:
                status = "gap"
                break
    finally:
        if pool is not None:
            pool.shutdown()

    if status is None:  # queue exhausted
        glbd = max(glbd, min(ubd, resolved_min))
    else:
        glbd = current_glbd()
    if inc is None:
        st = Status.INFEASIBLE if status is None else Status.NO_INCUMBENT
        return finish(st, None, ubd, glbd, explored, fathomed, len(heap))
    st = Status.FEASIBLE if status == "limit" and relative_gap(ubd, glbd) > opts.epsilon else Status.OPTIMAL
    return finish(st, inc, ubd, glbd, explored, fathomed, len(heap))
