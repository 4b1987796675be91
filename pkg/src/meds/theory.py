"""Expected nearest-neighbour distance under random memories, computed exactly.

A memory of size ``m`` is drawn i.i.d. with replacement from a finite pool of
``N`` feature vectors. For a query ``q`` the spatial proportion
``pi(q, r) = #{z : |z - q| <= r} / N`` is a right-continuous step function of
``r`` whose jumps sit at the query-to-pool distances, so the survival function
``P(D > r) = (1 - pi(q, r))**m`` and every integral built from it can be
summed interval by interval without quadrature error.

The pipeline's banks are subsets drawn *without* replacement; the analysis
here follows the with-replacement model, and :func:`expected_nn_distance_mc`
offers ``replace=False`` for an empirical comparison only.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


def as_pool(pool):
    pool = np.asarray(pool, dtype=np.float64)
    if pool.ndim == 1:
        pool = pool[:, None]
    if pool.shape[0] < 2:
        raise ContractError("a finite pool needs N >= 2 vectors")
    if not np.all(np.isfinite(pool)):
        raise ContractError("pool vectors must be finite")
    return pool


def query_distances(q, pool):
    """Sorted distances from ``q`` to every pool vector."""
    pool = as_pool(pool)
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if q.shape[0] != pool.shape[1]:
        raise ContractError(f"query dim {q.shape[0]} != pool dim {pool.shape[1]}")
    return np.sort(np.sqrt(np.sum((pool - q) ** 2, axis=1)))


def spatial_proportion(q, pool, r):
    """Fraction of the pool within distance ``r`` (inclusive) of ``q``."""
    if r < 0:
        raise ContractError("radius must be non-negative")
    d = query_distances(q, pool)
    return np.searchsorted(d, r, side="right") / d.size


def _check_m(m):
    if m < 1 or int(m) != m:
        raise ContractError(f"memory size must be a positive integer, got {m}")
    return int(m)


def expected_nn_distance_exact(q, pool, m):
    """E[min distance] to ``m`` i.i.d. draws, via order statistics.

    With distinct sorted distances ``u_j`` and ``G_j = P(D >= u_j) =
    (#{d >= u_j} / N)**m`` (ties counted with multiplicity) the expectation is
    ``sum_j u_j * (G_j - G_{j+1})``.
    """
    m = _check_m(m)
    d = query_distances(q, pool)
    n = d.size
    values, first = np.unique(d, return_index=True)
    at_least = (n - first) / n
    g = at_least ** m
    g_next = np.append(g[1:], 0.0)
    return math.fsum(values * (g - g_next))


def expected_nn_distance_mc(q, pool, m, trials, seed, replace=True, chunk=20000):
    """Monte-Carlo estimate of the expected NN distance and its standard error."""
    m = _check_m(m)
    if trials < 1:
        raise ContractError("trials must be >= 1")
    d = query_distances(q, pool)
    n = d.size
    if not replace and m > n:
        raise ContractError("cannot draw more than N vectors without replacement")
    rng = np.random.default_rng(seed)
    mins = np.empty(trials)
    for start in range(0, trials, chunk):
        k = min(chunk, trials - start)
        if replace:
            idx = rng.integers(n, size=(k, m))
        else:
            idx = np.argsort(rng.random((k, n)), axis=1)[:, :m]
        mins[start:start + k] = d[idx].min(axis=1)
    se = mins.std(ddof=1) / math.sqrt(trials) if trials > 1 else math.inf
    return float(mins.mean()), float(se)


def enumerate_memories(q, pool, m):
    """Exact NN-distance distribution by listing all ``N**m`` ordered draws.

    Returns the sorted array of per-draw minimum distances; every entry has
    probability ``N**-m``. Only usable for tiny pools.
    """
    m = _check_m(m)
    pool = as_pool(pool)
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    # unsorted on purpose: enumeration must not lean on the sorted-distance path
    d = [math.sqrt(sum((a - b) ** 2 for a, b in zip(z, q))) for z in pool]
    return np.sort([min(d[i] for i in draw) for draw in itertools.product(range(len(d)), repeat=m)])


def gap(q_anom, q_norm, pool, m):
    """Difference of exact expected NN distances, anomalous minus normal."""
    return expected_nn_distance_exact(q_anom, pool, m) - expected_nn_distance_exact(q_norm, pool, m)


@dataclass
class GapAnalysis:
    """Step-function view of a (q_anom, q_norm) pair over the shared breakpoints.

    ``pi_norm[j]``, ``pi_anom[j]`` and ``delta[j]`` hold the constant values on
    ``[breakpoints[j], breakpoints[j + 1])``; ``lengths[j]`` is that interval's
    width. Past the last breakpoint both proportions equal 1.
    """

    breakpoints: np.ndarray
    pi_norm: np.ndarray
    pi_anom: np.ndarray
    n: int

    @classmethod
    def from_queries(cls, q_anom, q_norm, pool):
        da = query_distances(q_anom, pool)
        dn = query_distances(q_norm, pool)
        bps = np.unique(np.concatenate([[0.0], da, dn]))
        n = da.size
        pa = np.searchsorted(da, bps, side="right") / n
        pn = np.searchsorted(dn, bps, side="right") / n
        return cls(bps, pn, pa, n)

    @property
    def delta(self):
        return self.pi_norm - self.pi_anom

    @property
    def lengths(self):
        return np.append(np.diff(self.breakpoints), 0.0)

    def _integrate(self, values):
        return math.fsum(values * self.lengths)

    def expected(self, m, which="norm"):
        pi = self.pi_norm if which == "norm" else self.pi_anom
        return self._integrate((1.0 - pi) ** _check_m(m))

    def gap(self, m):
        """Integral of the gap density ``(1 - pi_anom)^m - (1 - pi_norm)^m``."""
        m = _check_m(m)
        return self._integrate((1.0 - self.pi_anom) ** m - (1.0 - self.pi_norm) ** m)

    def weight(self, m):
        return weight(_check_m(m), self.pi_norm)

    def gap_first_order(self, m):
        return self._integrate(self.delta * self.weight(m))

    def remainder_bound(self, m):
        """Upper bound on ``gap - gap_first_order`` from the Lagrange remainder.

        The intermediate point lies in ``(pi_anom, pi_norm)``, so
        ``(1 - xi)**(m - 2) <= (1 - pi_anom)**(m - 2)``.
        """
        m = _check_m(m)
        if m == 1:
            return 0.0
        coef = m * (m - 1) / 2.0
        return coef * self._integrate((1.0 - self.pi_anom) ** (m - 2) * self.delta ** 2)

    def separability(self):
        """``(dominates, strict)``: delta >= 0 everywhere, and delta > 0 with
        pi_norm < 1 on some interval of positive length."""
        dominates = bool(np.all(self.delta >= 0))
        strict = bool(np.any((self.lengths > 0) & (self.delta > 0) & (self.pi_norm < 1)))
        return dominates, strict

    def is_strictly_separable(self):
        dominates, strict = self.separability()
        return dominates and strict


def gap_first_order(q_anom, q_norm, pool, m):
    return GapAnalysis.from_queries(q_anom, q_norm, pool).gap_first_order(m)


def remainder_upper_bound(q_anom, q_norm, pool, m):
    return GapAnalysis.from_queries(q_anom, q_norm, pool).remainder_bound(m)


def weight(m, pi):
    """``m * (1 - pi)**(m - 1)``, the first-order weight of the gap density."""
    return m * (1.0 - np.asarray(pi, dtype=np.float64)) ** (m - 1)


def weight_unimodal_peak(pi):
    """Continuous maximiser ``-1 / ln(1 - pi)`` of ``m -> weight(m, pi)``."""
    if not 0 < pi < 1:
        raise ContractError(f"proportion must lie in (0, 1), got {pi}")
    return -1.0 / math.log1p(-pi)


def log_weight(m, pi):
    # log space keeps the tail from underflowing into subnormals, where rounding breaks monotonicity
    m = np.asarray(m, dtype=np.float64)
    return np.log(m) + (m - 1) * math.log1p(-pi)


def integer_weight_argmax(pi, m_max):
    ms = np.arange(1, m_max + 1)
    return int(ms[np.argmax(log_weight(ms, pi))])


def check_unimodal(pi, m_max):
    """Integer argmax sits at floor/ceil of the peak and the sequence rises then falls."""
    ms = np.arange(1, m_max + 1)
    w = log_weight(ms, pi)
    peak = weight_unimodal_peak(pi)
    best = int(ms[np.argmax(w)])
    near_peak = best in {max(1, math.floor(peak)), max(1, math.ceil(peak))}
    steps = np.sign(np.diff(w))
    falling = np.flatnonzero(steps < 0)
    rises_then_falls = falling.size == 0 or not np.any(steps[falling[0]:] > 0)
    return near_peak and rises_then_falls


# --------------------------------------------------------------------------
# Verification report

TOL = 1e-9


@dataclass
class GapRow:
    m: int
    gap: float
    first_order: float
    bound: float
    gap_positive: bool
    first_order_below_gap: bool
    remainder_within_bound: bool


@dataclass
class PairReport:
    index: int
    dominates: bool
    strict: bool
    unimodal: bool
    rows: list = field(default_factory=list)

    @property
    def separable(self):
        return self.dominates and self.strict

    @property
    def passed(self):
        return self.separable and self.unimodal and all(
            r.gap_positive and r.first_order_below_gap and r.remainder_within_bound for r in self.rows
        )


@dataclass
class TheoremReport:
    pairs: list
    m_grid: list

    @property
    def passed(self):
        return all(p.passed for p in self.pairs)

    def to_kv(self):
        lines = [f"report.m_grid = {','.join(str(m) for m in self.m_grid)}",
                 f"report.pairs = {len(self.pairs)}",
                 f"report.passed = {str(self.passed).lower()}"]
        for p in self.pairs:
            pre = f"pair.{p.index}"
            lines += [f"{pre}.dominates = {str(p.dominates).lower()}",
                      f"{pre}.strict = {str(p.strict).lower()}",
                      f"{pre}.unimodal = {str(p.unimodal).lower()}"]
            for r in p.rows:
                rp = f"{pre}.m{r.m}"
                lines += [f"{rp}.gap = {float(r.gap)!r}",
                          f"{rp}.first_order = {float(r.first_order)!r}",
                          f"{rp}.bound = {float(r.bound)!r}",
                          f"{rp}.gap_positive = {str(r.gap_positive).lower()}",
                          f"{rp}.first_order_below_gap = {str(r.first_order_below_gap).lower()}",
                          f"{rp}.remainder_within_bound = {str(r.remainder_within_bound).lower()}"]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_kv(cls, text):
        kv = {}
        for line in text.splitlines():
            if line.strip():
                key, _, value = line.partition(" = ")
                kv[key.strip()] = value.strip()
        m_grid = [int(v) for v in kv["report.m_grid"].split(",")]
        as_bool = {"true": True, "false": False}
        pairs = []
        for i in range(int(kv["report.pairs"])):
            pre = f"pair.{i}"
            rows = []
            for m in m_grid:
                rp = f"{pre}.m{m}"
                rows.append(GapRow(m, float(kv[f"{rp}.gap"]), float(kv[f"{rp}.first_order"]),
                                   float(kv[f"{rp}.bound"]), as_bool[kv[f"{rp}.gap_positive"]],
                                   as_bool[kv[f"{rp}.first_order_below_gap"]],
                                   as_bool[kv[f"{rp}.remainder_within_bound"]]))
            pairs.append(PairReport(i, as_bool[kv[f"{pre}.dominates"]], as_bool[kv[f"{pre}.strict"]],
                                    as_bool[kv[f"{pre}.unimodal"]], rows))
        return cls(pairs, m_grid)

    def to_table(self):
        head = f"{'pair':>4} {'m':>4} {'gap':>14} {'first_order':>14} {'bound':>14}  checks"
        out = [head, "-" * len(head)]
        for p in self.pairs:
            flag = "" if p.separable else "  NOT SEPARABLE"
            for r in p.rows:
                ok = r.gap_positive and r.first_order_below_gap and r.remainder_within_bound
                out.append(f"{p.index:>4} {r.m:>4} {r.gap:>14.6e} {r.first_order:>14.6e} "
                           f"{r.bound:>14.6e}  {'ok' if ok else 'FAIL'}{flag}")
            out.append(f"{p.index:>4} unimodal weight: {'ok' if p.unimodal else 'FAIL'}")
        out.append(f"overall: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(out) + "\n"


def verify_theorem(pool, query_pairs, m_grid, tol=TOL):
    """Check the gap decomposition for each ``(q_anom, q_norm)`` pair.

    Pairs that are not strictly separable are still evaluated; the report marks
    them instead of raising.
    """
    pool = as_pool(pool)
    n = pool.shape[0]
    m_grid = [int(m) for m in m_grid]
    pairs = []
    for i, (qa, qn) in enumerate(query_pairs):
        ga = GapAnalysis.from_queries(qa, qn, pool)
        dominates, strict = ga.separability()
        inner = ga.pi_norm[(ga.pi_norm > 0) & (ga.pi_norm < 1)]
        unimodal = all(check_unimodal(float(p), 10 * n) for p in np.unique(inner))
        rows = []
        for m in m_grid:
            g = gap(qa, qn, pool, m)
            g0 = ga.gap_first_order(m)
            b = ga.remainder_bound(m)
            rows.append(GapRow(m, g, g0, b, g > 0, g0 <= g + tol, g - g0 <= b + tol))
        pairs.append(PairReport(i, dominates, strict, unimodal, rows))
    return TheoremReport(pairs, m_grid)


def random_pool(rng, n, dim):
    """Anisotropic Gaussian pool of ``n`` vectors."""
    return rng.standard_normal((n, dim)) * rng.uniform(0.5, 2.0, size=dim)


def random_separable_pair(rng, pool, max_tries=1000):
    """Draw ``(q_anom, q_norm)`` on ``pool`` that passes the separability check.

    The normal query sits near the pool centre; the anomalous one is pushed
    out along a random direction by a random multiple of the pool radius and
    redrawn until the pair is strictly separable.
    """
    pool = as_pool(pool)
    dim = pool.shape[1]
    for _ in range(max_tries):
        q_norm = pool.mean(axis=0) + 0.1 * rng.standard_normal(dim)
        radius = np.sqrt(np.sum((pool - q_norm) ** 2, axis=1)).max()
        u = rng.standard_normal(dim)
        u /= np.linalg.norm(u)
        q_anom = q_norm + u * radius * rng.uniform(0.3, 2.5)
        if GapAnalysis.from_queries(q_anom, q_norm, pool).is_strictly_separable():
            return q_anom, q_norm
    raise RuntimeError("no separable pair found")


def random_separable_instance(rng, n, dim):
    pool = random_pool(rng, n, dim)
    return (pool,) + random_separable_pair(rng, pool)
