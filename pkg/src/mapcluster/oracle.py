"""Exhaustive global solver for tiny instances.

Every labelling is enumerated, side constraints are checked semantically and
parameters come from the closed-form conditional optimum.  Used as the
reference that the MIQP machinery is tested against.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from ._stats import LabelStats
from .constraints import MinSize, all_satisfied, assignment_constraints, param_flags, validate
from .model import Assignment, Dataset, MapSolution, ProblemSpec, solution_for

MAX_ASSIGNMENTS = 2**20
TIE_TOL = 1e-12


class OracleSizeError(ValueError):
    pass


def all_labelings(n: int, K: int, chunk: int = 4096):
    """Yield arrays of labellings in lexicographic order, ``chunk`` rows at a time."""
    total = K**n
    powers = K ** np.arange(n - 1, -1, -1)
    for start in range(0, total, chunk):
        codes = np.arange(start, min(start + chunk, total))
        yield (codes[:, None] // powers[None, :]) % K


def brute_force(data: Dataset, spec: ProblemSpec, constraints: Sequence = ()) -> Optional[MapSolution]:
    """Global minimizer over all K**n labellings, or None when none is feasible.

    Ties within 1e-12 (relative to max(1, |best|)) keep the lexicographically
    smallest labelling, which is the first one met in enumeration order.
    """
    n, K = data.n, spec.K
    if K**n > MAX_ASSIGNMENTS:
        raise OracleSizeError(f"K**n = {K}**{n} exceeds the enumeration guard {MAX_ASSIGNMENTS}")
    constraints = list(constraints)
    report = validate(constraints, data, K)
    if not report.ok:
        return None
    constraints = report.constraints
    flags = param_flags(constraints)
    stats = LabelStats(data, spec, np.zeros(n, dtype=int), **flags)
    best_lab, best_val = None, np.inf
    onehot = np.eye(K)
    sizes = [c for c in constraints if isinstance(c, MinSize)]
    others = [c for c in assignment_constraints(constraints) if not isinstance(c, MinSize)]
    for block in all_labelings(n, K):
        Z = onehot[block]  # (m, n, K)
        counts = Z.sum(axis=1)
        keep = np.ones(len(block), dtype=bool)
        for c in sizes:
            keep &= counts[:, c.k] >= c.L
        if others:
            keep &= np.array([all_satisfied(others, lab, K) for lab in block], dtype=bool)
        if not keep.any():
            continue
        Z, block, counts = Z[keep], block[keep], counts[keep]
        sums = np.einsum("mik,id->mkd", Z, data.points)
        sq = Z.transpose(0, 2, 1) @ stats.half_q
        vals = stats.objective_batch(counts, sums, sq)
        lo = vals.min()
        if not np.isfinite(lo):
            continue
        j = int(np.flatnonzero(vals <= lo + TIE_TOL * max(1.0, abs(lo)))[0])
        if _better(vals[j], best_val):
            best_lab, best_val = block[j].copy(), float(vals[j])
    if best_lab is None:
        return None
    return solution_for(data, spec, Assignment.from_labels(best_lab, K), **flags)


def _better(val: float, best: float) -> bool:
    if not np.isfinite(best):
        return val < best
    return val < best - TIE_TOL * max(1.0, abs(best))
