"""CAPRA-S postoperative risk score.

Points per component:

    PSA (ng/mL)   <=6: 0   6-10: 1   10-20: 2   >20: 3
    Gleason       <=6: 0   3+4: 1    4+3: 2     8-10: 3
    margin +: 2   SVI: 2   ECE: 1    LNI: 1

Totals 0-2 are low, 3-5 intermediate and 6-12 high risk. Missing binary
findings can be inferred from pathological stage, and anything still missing
is imputed from the cohort.
"""

from __future__ import annotations

import re
import statistics
from collections import Counter
from dataclasses import dataclass, field, replace

from .errors import DataError

T_STAGES = (
    "T0", "T1", "T1a", "T1b", "T1c",
    "T2", "T2a", "T2b", "T2c",
    "T3", "T3a", "T3b", "T3c",
    "T4", "T4a", "T4b",
)
N_STAGES = ("N0", "N1", "NX")
AJCC_EDITIONS = (4, 5, 6, 7, 8)

_BINARY_FIELDS = ("sm", "ece", "svi", "lni")


def parse_t_stage(token: str) -> tuple[int, str]:
    """Canonical ordering key of a pT token; accepts ``pT3a``, ``t3A``, ``T3``."""
    m = re.fullmatch(r"p?(t[0-4][a-c]?)", token.strip().lower())
    canon = None if m is None else "T" + m.group(1)[1:]
    if canon not in T_STAGES:
        raise DataError(f"unknown pT stage {token!r}; valid: {', '.join(T_STAGES)} (optional 'p' prefix)")
    return int(canon[1]), canon[2:]


def parse_n_stage(token: str) -> str:
    m = re.fullmatch(r"p?(n[01x])", token.strip().lower())
    if m is None:
        raise DataError(f"unknown pN stage {token!r}; valid: {', '.join(N_STAGES)} (optional 'p' prefix)")
    return m.group(1).upper()


def _at_least(stage, threshold: str) -> bool:
    return stage >= parse_t_stage(threshold)


@dataclass(frozen=True)
class ClinRecord:
    psa: float | None = None
    gleason_primary: int | None = None
    gleason_secondary: int | None = None
    sm: bool | None = None
    ece: bool | None = None
    svi: bool | None = None
    lni: bool | None = None
    pt_stage: str | None = None
    pn_stage: str | None = None
    ajcc_edition: int = 8
    imputed: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if self.psa is not None and not self.psa >= 0:
            raise DataError(f"PSA must be non-negative, got {self.psa}")
        for g in (self.gleason_primary, self.gleason_secondary):
            if g is not None and not 1 <= g <= 5:
                raise DataError(f"Gleason pattern {g} outside 1..5")
        if (self.gleason_primary is None) != (self.gleason_secondary is None):
            raise DataError("Gleason primary and secondary patterns must be given together")
        if self.ajcc_edition not in AJCC_EDITIONS:
            raise DataError(f"unsupported AJCC edition {self.ajcc_edition}")
        if self.pt_stage is not None:
            parse_t_stage(self.pt_stage)
        if self.pn_stage is not None:
            parse_n_stage(self.pn_stage)


@dataclass(frozen=True)
class CapraScore:
    points: int
    group: str
    components: dict
    imputed: frozenset = frozenset()


def risk_group(points: int) -> str:
    if not 0 <= points <= 12:
        raise DataError(f"CAPRA-S points {points} outside 0..12")
    if points <= 2:
        return "low"
    return "intermediate" if points <= 5 else "high"


def infer_surrogates(rec: ClinRecord) -> ClinRecord:
    """Fill missing SM/ECE/SVI/LNI from pT/pN stage; explicit values are kept.

    ECE for pT >= T3a, SM+ for pT >= T3, SVI for pT >= T3b (AJCC 5th and
    later) or pT >= T3c (AJCC 4th, where T3b denoted bilateral extension), LNI
    for pN1. Below a threshold the finding is taken as absent.
    """
    updates = {}
    if rec.pt_stage is not None:
        stage = parse_t_stage(rec.pt_stage)
        svi_from = "T3c" if rec.ajcc_edition == 4 else "T3b"
        inferred = {
            "ece": _at_least(stage, "T3a"),
            "sm": _at_least(stage, "T3"),
            "svi": _at_least(stage, svi_from),
        }
        updates.update({k: v for k, v in inferred.items() if getattr(rec, k) is None})
    if rec.lni is None and rec.pn_stage is not None:
        n = parse_n_stage(rec.pn_stage)
        if n != "NX":
            updates["lni"] = n == "N1"
    return replace(rec, **updates) if updates else rec


def psa_points(psa: float) -> int:
    if psa <= 6:
        return 0
    if psa <= 10:
        return 1
    return 2 if psa <= 20 else 3


def gleason_points(primary: int, secondary: int) -> int:
    total = primary + secondary
    if total <= 6:
        return 0
    if total >= 8:
        return 3
    # total 7: 3+4 -> 1, 4+3 -> 2; the rare 2+5 / 5+2 follow the dominant pattern
    return 2 if primary >= 4 else 1


def score(rec: ClinRecord) -> CapraScore:
    missing = [name for name in ("psa", "gleason_primary", *_BINARY_FIELDS) if getattr(rec, name) is None]
    if missing:
        raise DataError(f"cannot score record, missing: {', '.join(missing)}")
    components = {
        "psa": psa_points(rec.psa),
        "gleason": gleason_points(rec.gleason_primary, rec.gleason_secondary),
        "sm": 2 * rec.sm,
        "svi": 2 * rec.svi,
        "ece": int(rec.ece),
        "lni": int(rec.lni),
    }
    points = int(sum(components.values()))
    return CapraScore(points, risk_group(points), components, rec.imputed)


def _mode_benign(values, benign_key):
    counts = Counter(values)
    top = max(counts.values())
    return min((v for v, c in counts.items() if c == top), key=benign_key)


def impute_cohort(records: list[ClinRecord]) -> list[ClinRecord]:
    """Cohort-level fills: median PSA, modal Gleason pair and modal binary findings.

    Mode ties resolve to the benign value (absent finding, lowest Gleason
    pair). A field missing from every record raises, but only if some record
    actually needs it.
    """
    if not records:
        raise DataError("cannot impute an empty cohort")
    fills = {}

    psa = [r.psa for r in records if r.psa is not None]
    if len(psa) < len(records):
        if not psa:
            raise DataError("PSA missing in every record; cannot impute")
        fills["psa"] = float(statistics.median(psa))

    pairs = [(r.gleason_primary, r.gleason_secondary) for r in records if r.gleason_primary is not None]
    if len(pairs) < len(records):
        if not pairs:
            raise DataError("Gleason missing in every record; cannot impute")
        fills["gleason"] = _mode_benign(pairs, lambda p: (gleason_points(*p), p[0] + p[1], p))

    for name in _BINARY_FIELDS:
        vals = [getattr(r, name) for r in records if getattr(r, name) is not None]
        if len(vals) < len(records):
            if not vals:
                raise DataError(f"{name} missing in every record; cannot impute")
            fills[name] = _mode_benign(vals, lambda v: v)

    out = []
    for r in records:
        updates = {}
        if r.psa is None and "psa" in fills:
            updates["psa"] = fills["psa"]
        if r.gleason_primary is None and "gleason" in fills:
            updates["gleason_primary"], updates["gleason_secondary"] = fills["gleason"]
        for name in _BINARY_FIELDS:
            if getattr(r, name) is None and name in fills:
                updates[name] = fills[name]
        if updates:
            flags = {"gleason" if k.startswith("gleason") else k for k in updates}
            r = replace(r, imputed=r.imputed | flags, **updates)
        out.append(r)
    return out


def score_cohort(records: list[ClinRecord]) -> list[CapraScore]:
    """Surrogate inference, cohort imputation and scoring in one pass."""
    inferred = [infer_surrogates(r) for r in records]
    return [score(r) for r in impute_cohort(inferred)]
