"""Resampling inference for c-indices.

Bootstrap resamples are event-stratified: events and censored patients are
drawn separately with replacement so every resample keeps the original
counts. Resample ``b`` draws from its own generator seeded with
``(seed, b)``, so results do not depend on how resamples are split across
workers. A resample is represented by a multiplicity vector ``w`` and its
c-index is ``w @ conc @ w / w @ perm @ w`` (see
:func:`bcrkit.concordance.pair_matrices`); all quantities are sums of
halves, hence exact in floating point regardless of summation order.
"""

from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .concordance import cindex, pair_matrices
from .errors import DataError, NumericalError, UndefinedCIndexError

logger = logging.getLogger(__name__)

MAX_REDRAWS = 1000


@dataclass(frozen=True)
class BootstrapConfig:
    n_resamples: int = 4000
    seed: int = 0
    workers: int = 1
    two_sided: bool = True

    def __post_init__(self):
        if self.n_resamples < 1:
            raise DataError("n_resamples must be >= 1")
        if self.workers < 1:
            raise DataError("workers must be >= 1")


@dataclass(frozen=True)
class BootstrapResult:
    estimate: float
    ci_low: float
    ci_high: float
    n_resamples: int
    n_redrawn: int
    replicates: np.ndarray = field(repr=False, compare=False)


@dataclass
class ComparisonResult:
    delta: float
    ci_low: float
    ci_high: float
    p: float
    q: float | None = None
    n_redrawn: int = 0
    label: str = ""
    cohort: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["significant"] = self.q is not None and self.q < 0.05
        return d


def stratified_indices(events, rng) -> np.ndarray:
    """One event-stratified resample of patient indices (events first, then censored)."""
    e = np.asarray(events).astype(bool)
    ev = np.flatnonzero(e)
    ce = np.flatnonzero(~e)
    parts = []
    if ev.size:
        parts.append(ev[rng.integers(0, ev.size, ev.size)])
    if ce.size:
        parts.append(ce[rng.integers(0, ce.size, ce.size)])
    return np.concatenate(parts)


def has_permissible_pair(times, events, present) -> bool:
    """True when the patients flagged in ``present`` admit a permissible pair.

    Such a pair exists iff some present patient outlives the earliest present
    event, or is censored at exactly that time.
    """
    ev = present & events
    if not ev.any():
        return False
    first = times[ev].min()
    return bool(np.any(present & (times > first)) or np.any(present & ~events & (times == first)))


def _weights_for(b, seed, times, events):
    """Multiplicities for resample ``b``, redrawing while no permissible pair exists."""
    rng = np.random.default_rng([seed, b])
    n = times.size
    for redraws in range(MAX_REDRAWS):
        w = np.bincount(stratified_indices(events, rng), minlength=n).astype(float)
        if has_permissible_pair(times, events, w > 0):
            return w, redraws
    raise NumericalError(f"resample {b}: c-index undefined after {MAX_REDRAWS} redraws")


def resample_weights(times, events, cfg: BootstrapConfig):
    """``(B, n)`` multiplicity matrix and total redraw count."""
    times = np.asarray(times, dtype=float)
    events = np.asarray(events).astype(bool)
    B = cfg.n_resamples

    def chunk(bs):
        return [_weights_for(b, cfg.seed, times, events) for b in bs]

    if cfg.workers == 1:
        results = chunk(range(B))
    else:
        bounds = np.linspace(0, B, cfg.workers + 1).astype(int)
        with ThreadPoolExecutor(cfg.workers) as pool:
            parts = pool.map(chunk, [range(a, b) for a, b in zip(bounds, bounds[1:])])
            results = [r for part in parts for r in part]
    W = np.vstack([w for w, _ in results])
    n_redrawn = sum(r for _, r in results)
    if n_redrawn:
        logger.info("redrew %d resamples with undefined c-index", n_redrawn)
    return W, n_redrawn


def _replicates(W, perm, conc):
    return np.einsum("bi,bi->b", W @ conc, W) / np.einsum("bi,bi->b", W @ perm, W)


def _check_outcomes(times, events):
    t = np.asarray(times, dtype=float)
    e = np.asarray(events).astype(bool)
    if t.size == 0:
        raise DataError("empty outcome set")
    return t, e


def bootstrap_ci(times, events, scores, cfg: BootstrapConfig = BootstrapConfig(), level=0.95):
    """Point c-index with an event-stratified percentile bootstrap interval."""
    t, e = _check_outcomes(times, events)
    perm, conc = pair_matrices(t, e, scores)
    if perm.sum() == 0:
        raise UndefinedCIndexError("c-index undefined on the full data")
    estimate = float(conc.sum() / perm.sum())
    W, n_redrawn = resample_weights(t, e, cfg)
    reps = _replicates(W, perm, conc)
    tail = 50.0 * (1.0 - level)
    lo, hi = np.percentile(reps, [tail, 100.0 - tail])
    return BootstrapResult(estimate, float(lo), float(hi), cfg.n_resamples, n_redrawn, reps)


def two_sided_p(deltas, corrected=True) -> float:
    """``2 * min(P(d <= 0), P(d >= 0))`` clipped to 1.

    With ``corrected`` each tail probability is ``(count + 1) / (B + 1)``.
    """
    d = np.asarray(deltas, dtype=float)
    le = np.count_nonzero(d <= 0)
    ge = np.count_nonzero(d >= 0)
    if corrected:
        tail = (min(le, ge) + 1) / (d.size + 1)
    else:
        tail = min(le, ge) / d.size
    return float(min(1.0, 2.0 * tail))


def _same_patients(times, events, other):
    t2, e2 = other
    if not (np.array_equal(np.asarray(times, float), np.asarray(t2, float))
            and np.array_equal(np.asarray(events).astype(bool), np.asarray(e2).astype(bool))):
        raise DataError("paired comparison requires identical times and events for both models")


def paired_compare(times, events, scores_a, scores_b, cfg: BootstrapConfig = BootstrapConfig(),
                   *, events_b=None, times_b=None, level=0.95, label="", cohort=""):
    """Paired bootstrap of ``cindex(A) - cindex(B)`` over shared resamples.

    ``times_b``/``events_b`` may be passed to assert both score sets refer to
    the same patients.
    """
    t, e = _check_outcomes(times, events)
    if times_b is not None or events_b is not None:
        _same_patients(t, e, (t if times_b is None else times_b, e if events_b is None else events_b))
    if len(scores_a) != t.size or len(scores_b) != t.size:
        raise DataError("score vectors must have one entry per patient")
    perm, conc_a = pair_matrices(t, e, scores_a)
    _, conc_b = pair_matrices(t, e, scores_b)
    if perm.sum() == 0:
        raise UndefinedCIndexError("c-index undefined on the full data")
    delta = float((conc_a.sum() - conc_b.sum()) / perm.sum())
    W, n_redrawn = resample_weights(t, e, cfg)
    denom = np.einsum("bi,bi->b", W @ perm, W)
    reps = (np.einsum("bi,bi->b", W @ conc_a, W) - np.einsum("bi,bi->b", W @ conc_b, W)) / denom
    tail = 50.0 * (1.0 - level)
    lo, hi = np.percentile(reps, [tail, 100.0 - tail])
    p = two_sided_p(reps, corrected=True)
    return ComparisonResult(delta, float(lo), float(hi), p, None, n_redrawn, label, cohort)


def _stratum_multisets(indices):
    """All multiplicity vectors of a with-replacement draw of size len(indices), with probabilities."""
    m = len(indices)
    for combo in itertools.combinations_with_replacement(range(m), m):
        counts = np.bincount(np.asarray(combo, dtype=int), minlength=m)
        ways = math.factorial(m)
        for c in counts:
            ways //= math.factorial(int(c))
        yield counts, ways / m**m


def paired_compare_exact(times, events, scores_a, scores_b):
    """Exact-enumeration counterpart of :func:`paired_compare` for tiny cohorts.

    Every event-stratified resample is visited once with its multinomial
    probability; resamples with undefined c-index are conditioned away (the
    limit of the redraw rule). Returns ``(delta, p)`` with the uncorrected
    two-sided tail probability.
    """
    t, e = _check_outcomes(times, events)
    perm, conc_a = pair_matrices(t, e, scores_a)
    _, conc_b = pair_matrices(t, e, scores_b)
    if perm.sum() == 0:
        raise UndefinedCIndexError("c-index undefined on the full data")
    ev, ce = np.flatnonzero(e), np.flatnonzero(~e)
    mass = le = ge = 0.0
    for (cnt_e, p_e), (cnt_c, p_c) in itertools.product(_stratum_multisets(ev), _stratum_multisets(ce)):
        w = np.zeros(t.size)
        w[ev] = cnt_e
        w[ce] = cnt_c
        d = w @ perm @ w
        if d == 0:
            continue
        prob = p_e * p_c
        diff = (w @ conc_a @ w - w @ conc_b @ w) / d
        mass += prob
        le += prob * (diff <= 0)
        ge += prob * (diff >= 0)
    if mass == 0:
        raise NumericalError("every resample has undefined c-index")
    delta = float((conc_a.sum() - conc_b.sum()) / perm.sum())
    return delta, float(min(1.0, 2.0 * min(le, ge) / mass))


def bh_adjust(p_values) -> np.ndarray:
    """Benjamini-Hochberg step-up q-values, returned in input order."""
    p = np.asarray(p_values, dtype=float)
    if p.size == 0:
        return p.copy()
    if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
        raise DataError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m / np.arange(1, m + 1)
    q_sorted = np.minimum.accumulate(scaled[::-1])[::-1]
    q = np.empty(m)
    q[order] = np.minimum(q_sorted, 1.0)
    return q


def adjust_family(results: list[ComparisonResult]) -> list[ComparisonResult]:
    """Fill ``q`` on every comparison of one FDR family, in place."""
    q = bh_adjust([r.p for r in results])
    for r, qi in zip(results, q):
        r.q = float(qi)
    return results


def cindex_or_none(times, events, scores):
    try:
        return cindex(times, events, scores)
    except UndefinedCIndexError:
        return None
