"""Sufficient statistics for fast profile-objective evaluation of hard labellings."""

from __future__ import annotations

import numpy as np

from .model import Dataset, ProblemSpec, optimal_mean, optimal_pi


class LabelStats:
    """Per-component count, sum and 0.5*y'Py totals for a labelling.

    ``objective()`` returns the objective at the conditional optimum of the
    parameters, i.e. the value a move would achieve after re-estimation.
    """

    def __init__(self, data: Dataset, spec: ProblemSpec, labels, *, order_pi=False, estimator_link=False):
        self.spec = spec
        self.y = data.points
        self.n = data.n
        self.K = spec.K
        self.P = spec.precision_matrix
        self.lam = spec.ridge
        self.order_pi = order_pi
        self.estimator_link = estimator_link
        self.half_q = 0.5 * np.einsum("id,de,ie->i", self.y, self.P, self.y)
        self.separable = spec.d == 1 or bool(np.allclose(self.P, np.diag(np.diag(self.P))))
        self.Pd = np.diag(self.P).copy()
        self.labels = np.asarray(labels, dtype=int).copy()
        self.counts = np.bincount(self.labels, minlength=self.K).astype(float)
        self.sums = np.zeros((self.K, spec.d))
        np.add.at(self.sums, self.labels, self.y)
        self.sq = np.bincount(self.labels, weights=self.half_q, minlength=self.K).astype(float)
        self._mid = 0.5 * (spec.mu_lower + spec.mu_upper)
        self._pi_cache: dict = {}

    def _pi(self, counts):
        key = counts.tobytes()
        pi = self._pi_cache.get(key)
        if pi is None:
            if self.estimator_link:
                pi = counts / self.n
                if np.any(pi < self.spec.pi_floor) or (self.order_pi and np.any(np.diff(pi) < 0)):
                    pi = None
            elif not self.order_pi and counts.min() >= self.spec.pi_floor * self.n:
                pi = counts / self.n
            else:
                pi = optimal_pi(counts, self.spec.pi_floor, ordered=self.order_pi)
            self._pi_cache[key] = pi
        return pi

    def means(self, counts, sums):
        if self.separable:
            h = counts[:, None] * self.Pd[None, :] + self.lam[None, :]
            with np.errstate(invalid="ignore", divide="ignore"):
                mu = np.where(h > 0, sums * self.Pd[None, :] / np.where(h > 0, h, 1.0), 0.0)
            mu = np.clip(mu, self.spec.mu_lower, self.spec.mu_upper)
            empty = counts == 0
            if np.any(empty):
                for k in np.flatnonzero(empty):
                    mu[k] = optimal_mean(sums[k], 0, self.spec, k)
            return mu
        return np.vstack([optimal_mean(sums[k], counts[k], self.spec, k) for k in range(self.K)])

    def objective(self, counts=None, sums=None, sq=None) -> float:
        counts = self.counts if counts is None else counts
        sums = self.sums if sums is None else sums
        sq = self.sq if sq is None else sq
        pi = self._pi(counts)
        if pi is None:
            return np.inf
        mu = self.means(counts, sums)
        PS = sums @ self.P
        muP = mu @ self.P
        quad = sq - np.einsum("kd,kd->k", mu, PS) + 0.5 * counts * np.einsum("kd,kd->k", muP, mu)
        occupied = counts > 0
        ent = -np.sum(counts[occupied] * np.log(pi[occupied]))
        return float(quad.sum() + ent + 0.5 * np.sum(self.lam * mu**2))

    def objective_batch(self, counts, sums, sq) -> np.ndarray:
        """Vectorized ``objective`` over a leading batch axis."""
        m = counts.shape[0]
        pis = np.empty_like(counts)
        ok = np.ones(m, dtype=bool)
        fast = (not self.order_pi) and (not self.estimator_link)
        simple = np.all(counts >= self.spec.pi_floor * self.n, axis=1) if fast else np.zeros(m, dtype=bool)
        pis[simple] = counts[simple] / self.n
        for r in np.flatnonzero(~simple):
            pi = self._pi(counts[r])
            if pi is None:
                ok[r] = False
                pis[r] = 1.0
            else:
                pis[r] = pi
        if self.separable:
            h = counts[..., None] * self.Pd + self.lam
            with np.errstate(invalid="ignore", divide="ignore"):
                mu = np.where(h > 0, sums * self.Pd / np.where(h > 0, h, 1.0), 0.0)
            mu = np.clip(mu, self.spec.mu_lower, self.spec.mu_upper)
            for r, k in zip(*np.nonzero(counts == 0)):
                mu[r, k] = optimal_mean(sums[r, k], 0, self.spec, k)
        else:
            mu = np.stack([self.means(counts[r], sums[r]) for r in range(m)])
        PS = sums @ self.P
        muP = mu @ self.P
        quad = sq - np.einsum("bkd,bkd->bk", mu, PS) + 0.5 * counts * np.einsum("bkd,bkd->bk", muP, mu)
        with np.errstate(divide="ignore", invalid="ignore"):
            ent = -np.where(counts > 0, counts * np.log(pis), 0.0)
        val = quad.sum(axis=1) + ent.sum(axis=1) + 0.5 * np.einsum("bkd,d->b", mu**2, self.lam)
        return np.where(ok, val, np.inf)

    def unit_moves(self, units) -> np.ndarray:
        """Objective after moving each unit to each component, shape (len(units), K).

        Entries for a unit's current component hold the current objective.
        """
        U, K = len(units), self.K
        cur = np.array([self.labels[g[0]] for g in units])
        m = np.array([len(g) for g in units], dtype=float)
        ys = np.stack([self.y[g].sum(axis=0) for g in units])
        qs = np.array([self.half_q[g].sum() for g in units])
        counts = np.repeat(self.counts[None], U * K, axis=0).reshape(U, K, K)
        sums = np.repeat(self.sums[None], U * K, axis=0).reshape(U, K, K, -1)
        sq = np.repeat(self.sq[None], U * K, axis=0).reshape(U, K, K)
        uu = np.arange(U)
        for b in range(K):
            counts[uu, b, cur] -= m
            counts[uu, b, b] += m
            sums[uu, b, cur] -= ys
            sums[uu, b, b] += ys
            sq[uu, b, cur] -= qs
            sq[uu, b, b] += qs
        vals = self.objective_batch(counts.reshape(U * K, K), sums.reshape(U * K, K, -1), sq.reshape(U * K, K))
        return vals.reshape(U, K)

    def moved(self, members, a: int, b: int):
        """Statistics after moving ``members`` from component a to b (not applied)."""
        cnt = self.counts.copy()
        sums = self.sums.copy()
        sq = self.sq.copy()
        m = len(members)
        ys = self.y[members].sum(axis=0)
        qs = self.half_q[members].sum()
        cnt[a] -= m
        cnt[b] += m
        sums[a] -= ys
        sums[b] += ys
        sq[a] -= qs
        sq[b] += qs
        return cnt, sums, sq

    def move_objective(self, members, a: int, b: int) -> float:
        return self.objective(*self.moved(members, a, b))

    def apply(self, members, a: int, b: int) -> None:
        self.counts, self.sums, self.sq = self.moved(members, a, b)
        self.labels[members] = b

    def relabel(self, perm) -> None:
        """Component perm[k] of the new labelling is old component k."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(perm.size)
        self.labels = perm[self.labels]
        self.counts = self.counts[inv]
        self.sums = self.sums[inv]
        self.sq = self.sq[inv]
