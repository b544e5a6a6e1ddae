"""Multi-label stratified k-fold assignment by iterative stratification.

Each patient carries one value per label dimension (recurrence status, ISUP
grade, surgery era). Every (dimension, value) pair is treated as a label.
The greedy loop repeatedly takes the label with the fewest unassigned
patients and hands each of them to the fold that still wants that label
most. Ties go to the fold wanting the patient's other labels most, then to
remaining capacity, then to a seeded draw. A hard cap keeps fold sizes
within one of each other.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError

ERA_BOUNDARY = 2005


def era_flag(surgery_year: int) -> int:
    """0 for surgery before 2005, 1 for 2005 and later."""
    return int(int(surgery_year) >= ERA_BOUNDARY)


@dataclass(frozen=True)
class StratumLabels:
    recurrence: bool
    isup: int
    era: int

    def __post_init__(self):
        if not 1 <= int(self.isup) <= 5:
            raise DataError(f"ISUP grade {self.isup} outside 1..5")
        if int(self.era) not in (0, 1):
            raise DataError("era flag must be 0 or 1")

    def as_tuple(self):
        return (int(bool(self.recurrence)), int(self.isup), int(self.era))


@dataclass(frozen=True)
class FoldAssignment:
    fold: np.ndarray
    k: int
    patient_ids: tuple = ()

    def members(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.fold == j)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.fold, minlength=self.k)

    def counts(self, labels) -> dict:
        """``{(dimension, value): per-fold counts}``."""
        rows = _as_matrix(labels)
        out = {}
        for d in range(rows.shape[1]):
            for v in np.unique(rows[:, d]):
                out[(d, int(v))] = np.bincount(self.fold[rows[:, d] == v], minlength=self.k)
        return out

    def to_csv(self, path, header_lines: Sequence[str] = ()):
        ids = self.patient_ids or tuple(str(i) for i in range(self.fold.size))
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["patient_id", "fold"])
            for pid, f in zip(ids, self.fold):
                w.writerow([pid, int(f)])


def _as_matrix(labels) -> np.ndarray:
    rows = [lab.as_tuple() if isinstance(lab, StratumLabels) else tuple(lab) for lab in labels]
    m = np.asarray(rows, dtype=int)
    if m.ndim == 1:
        m = m[:, None]
    return m


def stratified_kfold(labels, k: int = 5, seed: int = 0, patient_ids=None) -> FoldAssignment:
    """Assign every patient to one of ``k`` folds.

    ``labels`` is a sequence of :class:`StratumLabels` or of equal-length
    tuples of discrete values (one per label dimension).
    """
    rows = _as_matrix(labels)
    n = rows.shape[0]
    if k < 2:
        raise DataError("k must be at least 2")
    if k > n:
        raise DataError(f"cannot split {n} patients into {k} folds")
    rng = np.random.default_rng(seed)

    # one-hot over (dimension, value) pairs
    keys = [(d, v) for d in range(rows.shape[1]) for v in np.unique(rows[:, d])]
    Y = np.column_stack([rows[:, d] == v for d, v in keys])

    capacity = np.full(k, n / k)
    size = np.zeros(k, dtype=int)
    base, extra = divmod(n, k)
    demand = np.tile(Y.sum(axis=0) / k, (k, 1))  # (k, n_labels)
    fold = np.full(n, -1)
    remaining = np.ones(n, dtype=bool)

    while remaining.any():
        counts = Y[remaining].sum(axis=0)
        avail = np.flatnonzero(counts > 0)
        fewest = counts[avail].min()
        label = rng.choice(avail[counts[avail] == fewest])
        patients = np.flatnonzero(remaining & Y[:, label])
        for i in rng.permutation(patients):
            # hard cap keeps fold sizes within one of each other
            limit = base + (1 if np.count_nonzero(size > base) < extra else 0)
            open_folds = np.flatnonzero(size < limit)
            want = demand[open_folds, label]
            cand = open_folds[want == want.max()]
            if cand.size > 1:
                joint = demand[np.ix_(cand, np.flatnonzero(Y[i]))].sum(axis=1)
                cand = cand[joint == joint.max()]
            if cand.size > 1:
                cap = capacity[cand]
                cand = cand[cap == cap.max()]
            j = cand[0] if cand.size == 1 else rng.choice(cand)
            fold[i] = j
            remaining[i] = False
            demand[j] -= Y[i]
            capacity[j] -= 1
            size[j] += 1
    return FoldAssignment(fold, k, tuple(patient_ids) if patient_ids is not None else ())


def read_folds(path) -> dict:
    """``{patient_id: fold}`` from a CSV written by :meth:`FoldAssignment.to_csv`."""
    with open(path, newline="") as fh:
        rows = [ln for ln in fh if not ln.startswith("#")]
    out = {}
    for rec in csv.DictReader(rows):
        try:
            out[rec["patient_id"]] = int(rec["fold"])
        except (KeyError, ValueError) as exc:
            raise DataError(f"malformed fold file {path}: {exc}") from None
    return out
