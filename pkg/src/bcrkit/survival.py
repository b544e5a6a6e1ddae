"""Discrete-time survival representation.

Follow-up time is cut into four half-open bins at the quartiles of the
observed event times. A model emits one hazard per bin; the survival curve
is the running product of ``1 - hazard``. Everything here is a pure function
of small numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from .errors import DataError, DegenerateBinsError

N_BINS = 4
HAZARD_EPS = 1e-7
DEFAULT_ALPHA = 0.25


@dataclass(frozen=True)
class TimeBins:
    """Five strictly increasing edges defining four intervals ``[t_k, t_k+1)``."""

    edges: tuple

    def __post_init__(self):
        edges = tuple(float(e) for e in self.edges)
        if len(edges) != N_BINS + 1:
            raise DegenerateBinsError(f"expected {N_BINS + 1} edges, got {len(edges)}")
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise DegenerateBinsError(f"bin edges must be strictly increasing: {edges}")
        object.__setattr__(self, "edges", edges)

    def assign(self, times) -> np.ndarray:
        """Bin index of each time. Times beyond the last edge fall in the last bin."""
        t = np.asarray(times, dtype=float)
        if np.any(t < self.edges[0]):
            raise DataError("time precedes the first bin edge")
        idx = np.searchsorted(np.asarray(self.edges), t, side="right") - 1
        return np.clip(idx, 0, N_BINS - 1)


@dataclass(frozen=True)
class SurvivalLabel:
    bin: int
    censored: bool

    def __post_init__(self):
        if not 0 <= int(self.bin) < N_BINS:
            raise DataError(f"bin {self.bin} outside 0..{N_BINS - 1}")


def make_bins(event_times: Sequence[float], max_time: float | None = None) -> TimeBins:
    """Quartile bins from the follow-up times of uncensored patients.

    Interior edges are the 25/50/75th percentiles (linear interpolation).
    The outer edges are 0 and ``max(max_time, max(event_times)) + 1``, a finite
    stand-in for +infinity.
    """
    t = np.asarray(event_times, dtype=float)
    if t.ndim != 1 or np.unique(t).size < N_BINS:
        raise DegenerateBinsError("need at least 4 distinct event times to form quartile bins")
    if np.any(t < 0) or not np.all(np.isfinite(t)):
        raise DataError("event times must be finite and non-negative")
    q = np.percentile(t, [25.0, 50.0, 75.0])
    upper = t.max() if max_time is None else max(float(max_time), t.max())
    return TimeBins((0.0, *q, upper + 1.0))


def make_labels(bins: TimeBins, times, events) -> list[SurvivalLabel]:
    idx = bins.assign(times)
    return [SurvivalLabel(int(b), not bool(e)) for b, e in zip(idx, np.asarray(events))]


def hazards_from_logits(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    return np.clip(expit(z), HAZARD_EPS, 1.0 - HAZARD_EPS)


def survival_curve(hazards) -> np.ndarray:
    """``S(b) = prod_{u<=b} (1 - h_u)`` for every bin b."""
    return np.cumprod(1.0 - np.asarray(hazards, dtype=float), axis=-1)


def nll_loss(hazards, label: SurvivalLabel, alpha: float = DEFAULT_ALPHA) -> float:
    """Censoring-aware negative log-likelihood with uncensored up-weighting.

    ``(1 - alpha) * L + alpha * L_uncensored`` where, for bin ``Y`` and
    censoring flag ``c``::

        L            = -c log S(Y) - (1 - c) log S(Y - 1) - (1 - c) log h(Y)
        L_uncensored =             - (1 - c) log S(Y - 1) - (1 - c) log h(Y)

    with ``S(-1) = 1``. Hazards are clamped to ``[1e-7, 1 - 1e-7]``.
    """
    h = np.clip(np.asarray(hazards, dtype=float), HAZARD_EPS, 1.0 - HAZARD_EPS)
    y = label.bin
    log_surv = np.concatenate(([0.0], np.cumsum(np.log1p(-h))))  # log S(b - 1) at index b
    if label.censored:
        # the uncensored terms vanish, leaving (1 - alpha) * -log S(Y)
        return float(-(1.0 - alpha) * log_surv[y + 1])
    return float(-log_surv[y] - np.log(h[y]))


def nll_gradient(hazards, label: SurvivalLabel, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    """Gradient of :func:`nll_loss` with respect to the hazard logits.

    Uses ``d log h / dz = 1 - h`` and ``d log(1 - h) / dz = -h`` for
    ``h = sigmoid(z)``; the clamp is treated as inactive.
    """
    h = np.asarray(hazards, dtype=float)
    y = label.bin
    grad = np.zeros(N_BINS)
    if label.censored:
        grad[: y + 1] = (1.0 - alpha) * h[: y + 1]
    else:
        grad[:y] = h[:y]
        grad[y] = -(1.0 - h[y])
    return grad


def risk_from_hazards(hazards) -> float | np.ndarray:
    """Scalar risk ``-sum_b S(b)``: minus the expected number of event-free bins.

    Ranges over ``(-4, 0)``; larger means earlier expected recurrence. Works on
    a single hazard vector or a ``(n, 4)`` stack.
    """
    r = -survival_curve(hazards).sum(axis=-1)
    return float(r) if np.ndim(r) == 0 else r


def ensemble_risk(per_fold_scores) -> float | np.ndarray:
    """Mean over fold models (axis 0)."""
    s = np.asarray(per_fold_scores, dtype=float)
    if s.size == 0 or s.shape[0] == 0:
        raise DataError("ensemble_risk needs at least one fold score")
    m = s.mean(axis=0)
    return float(m) if np.ndim(m) == 0 else m
