"""Side constraints on assignments and parameters.

Indices are 0-based in code; the JSON constraint file uses 1-based indices.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np


class ConstraintError(ValueError):
    """Malformed side constraint (bad index, duplicate set member, ...)."""


@dataclass(frozen=True)
class MustLink:
    i: int
    j: int


@dataclass(frozen=True)
class CannotLink:
    i: int
    j: int


@dataclass(frozen=True)
class AssignLabel:
    i: int
    k: int


@dataclass(frozen=True)
class OneWay:
    """If sample j goes to component k then sample i must too (z_jk <= z_ik)."""

    i: int
    j: int
    k: int


@dataclass(frozen=True)
class MinSize:
    k: int
    L: int


@dataclass(frozen=True)
class _SetConstraint:
    S: tuple
    k: int
    L: int

    def __post_init__(self):
        object.__setattr__(self, "S", tuple(int(s) for s in self.S))


class Pack(_SetConstraint):
    pass


class Partition(_SetConstraint):
    pass


class Cover(_SetConstraint):
    pass


@dataclass(frozen=True)
class OrderPi:
    enabled: bool = True


@dataclass(frozen=True)
class EstimatorLink:
    enabled: bool = True


SideConstraint = object  # any of the classes above

_SENSE = {Pack: "<=", Partition: "=", Cover: ">="}


@dataclass(frozen=True)
class LinearRow:
    """Sparse row ``sum coef * var (sense) rhs`` over symbolic variables.

    Variables are tuples: ("z", i, k) or ("pi", k).
    """

    coefs: tuple
    sense: str
    rhs: float

    @property
    def nnz(self) -> int:
        return len(self.coefs)


def check_indices(c, n: int, K: int) -> None:
    def samp(*idx):
        for v in idx:
            if not 0 <= v < n:
                raise ConstraintError(f"{type(c).__name__}: sample index {v} out of range [0, {n})")

    def comp(k):
        if not 0 <= k < K:
            raise ConstraintError(f"{type(c).__name__}: component index {k} out of range [0, {K})")

    if isinstance(c, (MustLink, CannotLink)):
        samp(c.i, c.j)
        if c.i == c.j:
            raise ConstraintError(f"{type(c).__name__}: pair must have distinct samples")
    elif isinstance(c, AssignLabel):
        samp(c.i)
        comp(c.k)
    elif isinstance(c, OneWay):
        samp(c.i, c.j)
        comp(c.k)
    elif isinstance(c, MinSize):
        comp(c.k)
        if c.L < 0:
            raise ConstraintError("MinSize: L must be >= 0")
    elif isinstance(c, _SetConstraint):
        comp(c.k)
        if not c.S:
            raise ConstraintError(f"{type(c).__name__}: set must be nonempty")
        if len(set(c.S)) != len(c.S):
            raise ConstraintError(f"{type(c).__name__}: set contains duplicates")
        samp(*c.S)
        if c.L < 0:
            raise ConstraintError(f"{type(c).__name__}: L must be >= 0")
    elif isinstance(c, (OrderPi, EstimatorLink)):
        pass
    else:
        raise ConstraintError(f"unknown constraint {c!r}")


def to_linear_rows(c, n: int, K: int) -> list[LinearRow]:
    check_indices(c, n, K)
    if isinstance(c, MustLink):
        return [LinearRow(((("z", c.i, k), 1.0), (("z", c.j, k), -1.0)), "=", 0.0) for k in range(K)]
    if isinstance(c, CannotLink):
        return [LinearRow(((("z", c.i, k), 1.0), (("z", c.j, k), 1.0)), "<=", 1.0) for k in range(K)]
    if isinstance(c, AssignLabel):
        return [LinearRow(((("z", c.i, c.k), 1.0),), "=", 1.0)]
    if isinstance(c, OneWay):
        return [LinearRow(((("z", c.j, c.k), 1.0), (("z", c.i, c.k), -1.0)), "<=", 0.0)]
    if isinstance(c, MinSize):
        return [LinearRow(tuple((("z", i, c.k), 1.0) for i in range(n)), ">=", float(c.L))]
    if isinstance(c, _SetConstraint):
        return [LinearRow(tuple((("z", i, c.k), 1.0) for i in c.S), _SENSE[type(c)], float(c.L))]
    if isinstance(c, OrderPi):
        if not c.enabled:
            return []
        return [LinearRow(((("pi", k), 1.0), (("pi", k + 1), -1.0)), "<=", 0.0) for k in range(K - 1)]
    if isinstance(c, EstimatorLink):
        if not c.enabled:
            return []
        return [
            LinearRow(((("pi", k), float(n)),) + tuple((("z", i, k), -1.0) for i in range(n)), "=", 0.0)
            for k in range(K)
        ]
    raise ConstraintError(f"unknown constraint {c!r}")


# -- semantic evaluation -------------------------------------------------------


def satisfied(c, labels: np.ndarray, K: int, pi: Optional[np.ndarray] = None) -> bool:
    """Direct check of one constraint on a hard labelling (and pi, if it matters)."""
    if isinstance(c, MustLink):
        return labels[c.i] == labels[c.j]
    if isinstance(c, CannotLink):
        return labels[c.i] != labels[c.j]
    if isinstance(c, AssignLabel):
        return labels[c.i] == c.k
    if isinstance(c, OneWay):
        return not (labels[c.j] == c.k and labels[c.i] != c.k)
    if isinstance(c, MinSize):
        return int(np.sum(labels == c.k)) >= c.L
    if isinstance(c, _SetConstraint):
        cnt = int(np.sum(labels[list(c.S)] == c.k))
        return {Pack: cnt <= c.L, Partition: cnt == c.L, Cover: cnt >= c.L}[type(c)]
    if isinstance(c, OrderPi):
        return pi is None or not c.enabled or bool(np.all(np.diff(pi) >= -1e-12))
    if isinstance(c, EstimatorLink):
        if pi is None or not c.enabled:
            return True
        counts = np.bincount(labels, minlength=K)
        return bool(np.allclose(pi, counts / labels.size, atol=1e-12))
    raise ConstraintError(f"unknown constraint {c!r}")


def assignment_constraints(constraints: Iterable) -> list:
    return [c for c in constraints if not isinstance(c, (OrderPi, EstimatorLink))]


def all_satisfied(constraints: Iterable, labels: np.ndarray, K: int) -> bool:
    return all(satisfied(c, labels, K) for c in assignment_constraints(constraints))


def violated(constraints: Iterable, labels: np.ndarray, K: int) -> list:
    return [c for c in assignment_constraints(constraints) if not satisfied(c, labels, K)]


def param_flags(constraints: Iterable) -> dict:
    """Keyword flags for :func:`mapcluster.model.conditional_params`."""
    cs = list(constraints)
    return {
        "order_pi": any(isinstance(c, OrderPi) and c.enabled for c in cs),
        "estimator_link": any(isinstance(c, EstimatorLink) and c.enabled for c in cs),
    }


# -- must-link groups -----------------------------------------------------------


def must_link_groups(constraints: Iterable, n: int) -> list[list[int]]:
    """Transitive closure of must-link pairs as a list of sorted groups (singletons included)."""
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for c in constraints:
        if isinstance(c, MustLink):
            ra, rb = find(c.i), find(c.j)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return sorted(groups.values())


def closed_must_links(constraints: Iterable, n: int) -> list[MustLink]:
    """Star-shaped must-link set spanning each closure group (same feasible set)."""
    out = []
    for g in must_link_groups(constraints, n):
        out.extend(MustLink(g[0], j) for j in g[1:])
    return out


# -- validation -----------------------------------------------------------------


@dataclass
class ValidationReport:
    conflicts: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    constraints: list = field(default_factory=list)  # effective set after policy

    @property
    def ok(self) -> bool:
        return not self.conflicts


def validate(constraints: Sequence, data, K: Optional[int] = None) -> ValidationReport:
    """Check for hard conflicts and apply the OrderPi / AssignLabel policy."""
    n = data.n if hasattr(data, "n") else int(data)
    rep = ValidationReport()
    cs = list(constraints)
    for c in cs:
        try:
            check_indices(c, n, K if K is not None else 10**9)
        except ConstraintError as e:
            rep.conflicts.append(str(e))
    if rep.conflicts:
        rep.constraints = cs
        return rep

    groups = must_link_groups(cs, n)
    group_of = {i: gi for gi, g in enumerate(groups) for i in g}
    for c in cs:
        if isinstance(c, CannotLink) and group_of[c.i] == group_of[c.j]:
            rep.conflicts.append(f"CannotLink({c.i}, {c.j}) contradicts must-link closure")

    pinned: dict[int, int] = {}
    for c in cs:
        if isinstance(c, AssignLabel):
            if c.i in pinned and pinned[c.i] != c.k:
                rep.conflicts.append(f"sample {c.i} assigned to both {pinned[c.i]} and {c.k}")
            pinned.setdefault(c.i, c.k)
    group_pin: dict[int, int] = {}
    for i, k in sorted(pinned.items()):
        g = group_of[i]
        if g in group_pin and group_pin[g] != k:
            rep.conflicts.append(f"must-link group of sample {i} pinned to components {group_pin[g]} and {k}")
        group_pin.setdefault(g, k)
    for c in cs:
        if isinstance(c, CannotLink):
            gi, gj = group_of[c.i], group_of[c.j]
            if gi in group_pin and gj in group_pin and group_pin[gi] == group_pin[gj]:
                rep.conflicts.append(
                    f"CannotLink({c.i}, {c.j}) joins groups both pinned to component {group_pin[gi]}"
                )
        if isinstance(c, Partition) and c.L > len(c.S):
            rep.conflicts.append(f"Partition requires {c.L} of a {len(c.S)}-element set")
        if isinstance(c, (Cover,)) and c.L > len(c.S):
            rep.conflicts.append(f"Cover requires {c.L} of a {len(c.S)}-element set")
        if isinstance(c, MinSize) and c.L > n:
            rep.conflicts.append(f"MinSize({c.k}, {c.L}) exceeds n={n}")

    has_labels = any(isinstance(c, AssignLabel) for c in cs)
    eff = []
    for c in cs:
        if isinstance(c, OrderPi) and c.enabled and has_labels:
            msg = "OrderPi disabled: fixed labels pin component identities"
            rep.warnings.append(msg)
            warnings.warn(msg, stacklevel=2)
            eff.append(OrderPi(False))
        else:
            eff.append(c)
    rep.constraints = eff
    return rep


# -- fixing propagation -------------------------------------------------------------


def propagate(fix1: Iterable, fix0: Iterable, constraints: Sequence, n: int, K: int):
    """Close a set of z fixings under the implication rules.

    Returns ``(fix1, fix0)`` as frozensets of (i, k) pairs, or ``None`` when
    the fixings are infeasible.
    """
    one = set(fix1)
    zero = set(fix0)
    if one & zero:
        return None
    cs = list(constraints)
    musts = [c for c in cs if isinstance(c, MustLink)]
    cannots = [c for c in cs if isinstance(c, CannotLink)]
    oneways = [c for c in cs if isinstance(c, OneWay)]
    minsizes = [c for c in cs if isinstance(c, MinSize)]
    partners: dict[int, list[int]] = {}
    for c in musts:
        partners.setdefault(c.i, []).append(c.j)
        partners.setdefault(c.j, []).append(c.i)
    for c in cs:
        if isinstance(c, AssignLabel):
            one.add((c.i, c.k))

    changed = True
    while changed:
        changed = False

        def put(s, item):
            nonlocal changed
            if item not in s:
                s.add(item)
                changed = True

        for i, k in list(one):
            for kk in range(K):
                if kk != k:
                    put(zero, (i, kk))
            for j in partners.get(i, ()):
                put(one, (j, k))
        for i, k in list(zero):
            for j in partners.get(i, ()):
                put(zero, (j, k))
        for c in cannots:
            for k in range(K):
                if (c.i, k) in one:
                    put(zero, (c.j, k))
                if (c.j, k) in one:
                    put(zero, (c.i, k))
        for c in oneways:
            if (c.i, c.k) in zero:
                put(zero, (c.j, c.k))
            if (c.j, c.k) in one:
                put(one, (c.i, c.k))
        for i in range(n):
            free = [k for k in range(K) if (i, k) not in zero]
            if not free:
                return None
            if len(free) == 1:
                put(one, (i, free[0]))
        if one & zero:
            return None
    for i in range(n):
        if sum((i, k) in one for k in range(K)) > 1:
            return None
    for c in minsizes:
        if sum((i, c.k) not in zero for i in range(n)) < c.L:
            return None
    for c in cs:
        if isinstance(c, _SetConstraint):
            ones = sum((i, c.k) in one for i in c.S)
            avail = sum((i, c.k) not in zero for i in c.S)
            if isinstance(c, (Pack, Partition)) and ones > c.L:
                return None
            if isinstance(c, (Cover, Partition)) and avail < c.L:
                return None
    return frozenset(one), frozenset(zero)


# -- constraint file format ------------------------------------------------------------

_TYPES = {
    "must_link": MustLink,
    "cannot_link": CannotLink,
    "assign": AssignLabel,
    "one_way": OneWay,
    "min_size": MinSize,
    "pack": Pack,
    "partition": Partition,
    "cover": Cover,
    "order_pi": OrderPi,
    "estimator_link": EstimatorLink,
}


def from_records(records: Sequence[dict], K: Optional[int] = None) -> list:
    """Parse constraint-file records (1-based indices) into constraint objects.

    A ``min_size`` record without ``k`` expands to one constraint per component
    (requires ``K``).
    """
    out = []
    for r in records:
        kind = r.get("type")
        if kind not in _TYPES:
            raise ConstraintError(f"unknown constraint type {kind!r}")
        try:
            if kind in ("must_link", "cannot_link"):
                out.append(_TYPES[kind](int(r["i"]) - 1, int(r["j"]) - 1))
            elif kind == "assign":
                out.append(AssignLabel(int(r["i"]) - 1, int(r["k"]) - 1))
            elif kind == "one_way":
                out.append(OneWay(int(r["i"]) - 1, int(r["j"]) - 1, int(r["k"]) - 1))
            elif kind == "min_size":
                if "k" in r:
                    out.append(MinSize(int(r["k"]) - 1, int(r["l"])))
                else:
                    if K is None:
                        raise ConstraintError("min_size without k needs K")
                    out.extend(MinSize(k, int(r["l"])) for k in range(K))
            elif kind in ("pack", "partition", "cover"):
                out.append(_TYPES[kind](tuple(int(s) - 1 for s in r["set"]), int(r["k"]) - 1, int(r["l"])))
            else:
                out.append(_TYPES[kind](bool(r.get("enabled", True))))
        except KeyError as e:
            raise ConstraintError(f"{kind} record missing field {e}") from None
    return out


def to_records(constraints: Iterable) -> list[dict]:
    inv = {v: k for k, v in _TYPES.items()}
    out = []
    for c in constraints:
        kind = inv[type(c)]
        if isinstance(c, (MustLink, CannotLink)):
            out.append({"type": kind, "i": c.i + 1, "j": c.j + 1})
        elif isinstance(c, AssignLabel):
            out.append({"type": kind, "i": c.i + 1, "k": c.k + 1})
        elif isinstance(c, OneWay):
            out.append({"type": kind, "i": c.i + 1, "j": c.j + 1, "k": c.k + 1})
        elif isinstance(c, MinSize):
            out.append({"type": kind, "k": c.k + 1, "l": c.L})
        elif isinstance(c, _SetConstraint):
            out.append({"type": kind, "set": [s + 1 for s in c.S], "k": c.k + 1, "l": c.L})
        else:
            out.append({"type": kind, "enabled": c.enabled})
    return out


def load_constraints(path, K: Optional[int] = None) -> list:
    with open(path, encoding="utf-8") as fh:
        records = json.load(fh)
    if not isinstance(records, list):
        raise ConstraintError("constraint file must hold a top-level list")
    return from_records(records, K)
