"""Harrell's concordance index for right-censored outcomes.

A pair (i, j) is permissible when i is known to fail first: ``t_i < t_j``
with an event at i, or ``t_i == t_j`` with an event at i and censoring at j.
Both-event ties are excluded. Score ties count one half.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable

import numpy as np

from .errors import DataError, UndefinedCIndexError


@dataclass(frozen=True)
class OutcomePair:
    time: float
    event: bool
    score: float
    group: Hashable = None


def _check(times, events, scores):
    t = np.asarray(times, dtype=float)
    e = np.asarray(events).astype(bool)
    s = np.asarray(scores, dtype=float)
    if not (t.shape == e.shape == s.shape) or t.ndim != 1:
        raise DataError("times, events and scores must be 1-D arrays of equal length")
    if not np.all(np.isfinite(s)):
        raise DataError("scores must be finite")
    if not np.all(np.isfinite(t)):
        raise DataError("times must be finite")
    return t, e, s


def pair_matrices(times, events, scores):
    """Permissibility and concordance-credit matrices.

    ``perm[i, j]`` is 1 when (i, j) is permissible with i the earlier failure;
    ``conc[i, j]`` is ``perm[i, j]`` times 1 / 0.5 / 0 for ``s_i >`` / ``==`` /
    ``< s_j``. The c-index is ``conc.sum() / perm.sum()``, and a bootstrap
    resample with multiplicities w gives ``w @ conc @ w / w @ perm @ w``.
    """
    t, e, s = _check(times, events, scores)
    ti, tj = t[:, None], t[None, :]
    ei, ej = e[:, None], e[None, :]
    perm = ei & ((ti < tj) | ((ti == tj) & ~ej))
    credit = np.where(s[:, None] > s[None, :], 1.0, np.where(s[:, None] == s[None, :], 0.5, 0.0))
    permf = perm.astype(float)
    return permf, permf * credit


def cindex(times, events, scores) -> float:
    """Harrell's c-index; higher scores are expected to fail earlier."""
    perm, conc = pair_matrices(times, events, scores)
    n_perm = perm.sum()
    if n_perm == 0:
        raise UndefinedCIndexError("no permissible pair (e.g. all patients censored)")
    return float(conc.sum() / n_perm)


def cindex_pairs(pairs) -> float:
    """:func:`cindex` over a sequence of :class:`OutcomePair`."""
    return cindex([p.time for p in pairs], [p.event for p in pairs], [p.score for p in pairs])


def cindex_by_group(times, events, scores, groups) -> dict:
    """C-index within each group; groups without a permissible pair map to ``None``."""
    t, e, s = _check(times, events, scores)
    g = np.asarray(groups, dtype=object)
    if g.shape != t.shape:
        raise DataError("groups must align with times")
    out = {}
    for key in sorted(set(g.tolist()), key=lambda k: (str(type(k)), k)):
        m = g == key
        try:
            out[key] = cindex(t[m], e[m], s[m])
        except UndefinedCIndexError:
            out[key] = None
    return out
