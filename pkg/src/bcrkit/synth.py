"""Synthetic cohorts with planted signal, for desk-scale verification."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .capra import ClinRecord
from .mil import TILES_PER_REGION, FeatureBag


def exponential_survival(rng, log_hazard, base_rate=0.02, censor_max=None, censor_frac=None):
    """Event times ``Exp(base_rate * exp(log_hazard))`` with uniform censoring.

    Give either ``censor_max`` (censoring ~ U(0, censor_max)) or a target
    ``censor_frac``, for which ``censor_max`` is tuned by bisection on the
    drawn event times.
    """
    lh = np.asarray(log_hazard, dtype=float)
    t_event = rng.exponential(1.0 / (base_rate * np.exp(lh)))
    u = rng.random(lh.size)
    if censor_frac is not None:
        lo, hi = 1e-6, 100.0 * t_event.max()
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if np.mean(u * mid < t_event) > censor_frac:
                lo = mid
            else:
                hi = mid
        censor_max = 0.5 * (lo + hi)
    if censor_max is None:
        return t_event, np.ones(lh.size, bool)
    t_cens = u * censor_max
    event = t_event <= t_cens
    time = np.where(event, t_event, t_cens)
    return np.maximum(time, 1e-3), event


def marker_direction(d: int, seed: int = 12345) -> np.ndarray:
    v = np.random.default_rng(seed).normal(size=d)
    return v / np.linalg.norm(v)


def planted_bag(rng, load: float, d: int = 16, n_regions: int = 3, marker=None, strength: float = 2.0,
                tiles: int = TILES_PER_REGION, hot_fraction: float = 1.0, noise: float = 1.0,
                patient_id: str = "") -> FeatureBag:
    """Gaussian tiles shifted by ``strength * load`` along ``marker``.

    Only a random ``hot_fraction`` of tiles carries the shift, so attention
    has something to find when it is below one.
    """
    marker = marker_direction(d) if marker is None else marker
    X = noise * rng.normal(size=(n_regions, tiles, d))
    hot = rng.random((n_regions, tiles)) < hot_fraction
    X[hot] += strength * load * marker
    return FeatureBag(X, patient_id=patient_id)


@dataclass
class SyntheticBags:
    bags: list
    latent: np.ndarray
    time: np.ndarray
    event: np.ndarray


def planted_bags(n=200, d=16, seed=0, effect=2.5, time_noise=0.05, censor_frac=0.3, min_regions=1,
                 max_regions=4, strength=2.0, hot_fraction=1.0, noise=0.1, scale=60.0,
                 latent=None) -> SyntheticBags:
    """Bags whose marker load sets follow-up time almost deterministically.

    ``time = scale * exp(-effect * latent + time_noise * N(0, 1))``; a random
    ``censor_frac`` of patients is censored uniformly before their event.
    """
    rng = np.random.default_rng(seed)
    latent = rng.random(n) if latent is None else np.asarray(latent, float)
    marker = marker_direction(d)
    bags = [
        planted_bag(rng, latent[i], d, int(rng.integers(min_regions, max_regions + 1)), marker,
                    strength, hot_fraction=hot_fraction, noise=noise, patient_id=f"P{i:04d}")
        for i in range(n)
    ]
    t_event = scale * np.exp(-effect * latent + time_noise * rng.normal(size=n))
    censored = rng.random(n) < censor_frac
    time = np.where(censored, t_event * rng.uniform(0.2, 1.0, n), t_event)
    return SyntheticBags(bags, latent, time, ~censored)


@dataclass
class SyntheticCohort:
    patient_id: list
    records: list
    image_latent: np.ndarray
    clinical_latent: np.ndarray
    isup: np.ndarray
    surgery_year: np.ndarray
    time: np.ndarray
    event: np.ndarray


_GLEASON_BY_ISUP = {1: (3, 3), 2: (3, 4), 3: (4, 3), 4: (4, 4), 5: (4, 5)}


def clinical_cohort(n=400, seed=0, clin_effect=1.2, image_effect=1.2, censor_frac=0.4,
                    id_prefix="S") -> SyntheticCohort:
    """Patients whose hazard combines a clinical latent (expressed through CAPRA
    inputs) and an independent image latent (to be planted in bags)."""
    rng = np.random.default_rng(seed)
    clin = rng.normal(size=n)
    img = rng.normal(size=n)
    records, isup = [], np.empty(n, int)
    for i in range(n):
        c = clin[i]
        psa = float(np.round(np.exp(1.9 + 0.6 * c + 0.3 * rng.normal()), 2))
        grade = int(np.clip(np.round(2.2 + 1.1 * c + 0.5 * rng.normal()), 1, 5))
        isup[i] = grade
        gp, gs = _GLEASON_BY_ISUP[grade]
        pt = "T2" if c + 0.5 * rng.normal() < 0.3 else ("T3a" if c + 0.5 * rng.normal() < 1.2 else "T3b")
        records.append(ClinRecord(
            psa=psa, gleason_primary=gp, gleason_secondary=gs,
            sm=bool(rng.random() < 1 / (1 + np.exp(-(c - 0.8)))),
            pt_stage=pt, pn_stage="N1" if c + 0.4 * rng.normal() > 1.8 else "N0",
        ))
    log_h = clin_effect * clin + image_effect * img
    time, event = exponential_survival(rng, log_h, base_rate=0.01, censor_frac=censor_frac)
    year = rng.integers(1992, 2016, n)
    return SyntheticCohort([f"{id_prefix}{i:04d}" for i in range(n)], records, img, clin, isup, year,
                           time, event)
