"""File formats: cohort CSV, score tables, feature-bag manifests, tissue masks.

Comment lines starting with ``#`` are skipped in every CSV reader, so
provenance headers survive round trips.

Feature-bag manifest (JSON)::

    {"dim": 16,
     "bags": [{"patient_id": "P0001", "tiles": "P0001.npy"},
              {"patient_id": "P0002", "regions": ["P0002_r0.csv", "P0002_r1.csv"]}]}

``tiles`` names one ``.npy`` array of shape (regions, 64, dim); ``regions``
lists one 64 x dim matrix per region as ``.npy`` or headerless ``.csv``.
Paths are relative to the manifest.

Slide manifest (JSON), boxes in pixels of the extraction level::

    {"patient_id": "P0001", "spacings": [0.25, 0.5, 1.0],
     "crops": [{"slide_id": "S1", "box": [0, 0, 4096, 4096], "mask": "S1_mask.png"}]}
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .capra import ClinRecord
from .errors import DataError
from .mil import FeatureBag
from .tiling import TissueCrop

COHORT_COLUMNS = (
    "patient_id", "time_months", "event", "psa", "gleason_primary", "gleason_secondary", "pt_stage",
    "pn_stage", "sm", "ece", "svi", "lni", "isup", "surgery_year", "ajcc_edition",
)
_TRUE = {"1", "true", "yes", "y", "t"}
_FALSE = {"0", "false", "no", "n", "f"}


def read_rows(path) -> tuple[list[str], list[tuple[int, dict]]]:
    """Header and ``(line number, row)`` pairs of a CSV, skipping ``#`` lines and blank lines."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    with open(path, newline="") as fh:
        lines = [(i, ln) for i, ln in enumerate(fh, start=1) if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise DataError(f"{path} is empty")
    reader = csv.reader([ln for _, ln in lines])
    header = [h.strip() for h in next(reader)]
    if len(set(header)) != len(header):
        raise DataError(f"{path}: duplicate column names")
    rows = []
    for (lineno, _), values in zip(lines[1:], reader):
        if len(values) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(values)}")
        rows.append((lineno, {h: v.strip() for h, v in zip(header, values)}))
    return header, rows


def _opt(cast, value, name, where):
    if value == "":
        return None
    try:
        return cast(value)
    except (TypeError, ValueError):
        raise DataError(f"{where}: bad {name} value {value!r}") from None


def _bool(value: str) -> bool:
    v = value.lower()
    if v in _TRUE:
        return True
    if v in _FALSE:
        return False
    raise ValueError(value)


@dataclass
class Cohort:
    patient_id: list
    time: np.ndarray
    event: np.ndarray
    records: list
    isup: list
    surgery_year: list

    def __len__(self):
        return len(self.patient_id)

    def index(self) -> dict:
        return {p: i for i, p in enumerate(self.patient_id)}


def read_cohort(path, require_outcome: bool = True) -> Cohort:
    """Parse a cohort CSV; every malformed row is reported with its line number."""
    header, rows = read_rows(path)
    if "patient_id" not in header:
        raise DataError(f"{path}: missing patient_id column")
    if require_outcome:
        missing = {"time_months", "event"} - set(header)
        if missing:
            raise DataError(f"{path}: missing columns {sorted(missing)}")
    if not rows:
        raise DataError(f"{path}: no data rows")
    ids, times, events, records, isup, years, errors = [], [], [], [], [], [], []
    seen = set()
    for lineno, r in rows:
        where = f"{path}:{lineno}"
        try:
            pid = r["patient_id"]
            if not pid:
                raise DataError(f"{where}: empty patient_id")
            if pid in seen:
                raise DataError(f"{where}: duplicate patient_id {pid!r}")
            seen.add(pid)
            t = _opt(float, r.get("time_months", ""), "time_months", where)
            e = _opt(int, r.get("event", ""), "event", where)
            if require_outcome:
                if t is None or not math.isfinite(t) or t <= 0:
                    raise DataError(f"{where}: time_months must be positive")
                if e not in (0, 1):
                    raise DataError(f"{where}: event must be 0 or 1")
            edition = _opt(int, r.get("ajcc_edition", ""), "ajcc_edition", where)
            rec = ClinRecord(
                psa=_opt(float, r.get("psa", ""), "psa", where),
                gleason_primary=_opt(int, r.get("gleason_primary", ""), "gleason_primary", where),
                gleason_secondary=_opt(int, r.get("gleason_secondary", ""), "gleason_secondary", where),
                sm=_opt(_bool, r.get("sm", ""), "sm", where),
                ece=_opt(_bool, r.get("ece", ""), "ece", where),
                svi=_opt(_bool, r.get("svi", ""), "svi", where),
                lni=_opt(_bool, r.get("lni", ""), "lni", where),
                pt_stage=r.get("pt_stage") or None,
                pn_stage=r.get("pn_stage") or None,
                ajcc_edition=8 if edition is None else edition,
            )
            grade = _opt(int, r.get("isup", ""), "isup", where)
            year = _opt(int, r.get("surgery_year", ""), "surgery_year", where)
        except DataError as exc:
            msg = str(exc)
            errors.append(msg if msg.startswith(where) else f"{where}: {msg}")
            continue
        ids.append(pid)
        times.append(np.nan if t is None else t)
        events.append(0 if e is None else e)
        records.append(rec)
        isup.append(grade)
        years.append(year)
    if errors:
        raise DataError("malformed cohort rows:\n  " + "\n  ".join(errors))
    return Cohort(ids, np.asarray(times, float), np.asarray(events, bool), records, isup, years)


def read_scores(path, column: str | None = None) -> dict:
    """``{patient_id: float}`` from a table; ``column`` defaults to the first
    numeric column other than ``patient_id``."""
    header, rows = read_rows(path)
    if "patient_id" not in header:
        raise DataError(f"{path}: missing patient_id column")
    if column is None:
        candidates = [h for h in header if h != "patient_id"]
        if not candidates:
            raise DataError(f"{path}: no score column")
        column = candidates[0]
    elif column not in header:
        raise DataError(f"{path}: no column {column!r}; have {header}")
    out = {}
    for lineno, r in rows:
        try:
            v = float(r[column])
        except ValueError:
            raise DataError(f"{path}:{lineno}: bad {column} value {r[column]!r}") from None
        if not math.isfinite(v):
            raise DataError(f"{path}:{lineno}: non-finite {column}")
        out[r["patient_id"]] = v
    return out


def read_column(path, column: str) -> dict:
    """``{patient_id: raw string}`` for one column."""
    header, rows = read_rows(path)
    if column not in header:
        raise DataError(f"{path}: no column {column!r}; have {header}")
    return {r["patient_id"]: r[column] for _, r in rows}


def write_csv(path, header, rows, header_lines=()) -> None:
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _load_matrix(path: Path) -> np.ndarray:
    if not path.exists():
        raise DataError(f"feature file not found: {path}")
    if path.suffix == ".npy":
        return np.load(path, allow_pickle=False)
    if path.suffix == ".csv":
        return np.loadtxt(path, delimiter=",", ndmin=2)
    raise DataError(f"unsupported feature file {path}; use .npy or .csv")


def read_bags(manifest) -> list[FeatureBag]:
    manifest = Path(manifest)
    if not manifest.exists():
        raise DataError(f"manifest not found: {manifest}")
    try:
        doc = json.loads(manifest.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{manifest}: invalid JSON ({exc})") from None
    root = manifest.parent
    dim = doc.get("dim")
    bags = []
    for entry in doc.get("bags", []):
        pid = str(entry.get("patient_id", ""))
        if "tiles" in entry:
            tiles = _load_matrix(root / entry["tiles"])
            if tiles.ndim != 3:
                raise DataError(f"{pid}: tile array must be 3-D (regions, tiles, dim)")
            bag = FeatureBag(tiles, patient_id=pid)
        elif "regions" in entry:
            bag = FeatureBag.from_regions([_load_matrix(root / p) for p in entry["regions"]], pid)
        else:
            raise DataError(f"bag {pid!r} lists neither 'tiles' nor 'regions'")
        if dim is not None and bag.dim != dim:
            raise DataError(f"bag {pid!r} has dim {bag.dim}, manifest says {dim}")
        bags.append(bag)
    if not bags:
        raise DataError(f"{manifest}: no bags")
    return bags


def write_bags(manifest, bags, fmt: str = "npy") -> None:
    """Write bags next to ``manifest``; ``fmt`` is ``npy`` (one array per bag)
    or ``csv`` (one file per region). Masked tiles are not representable."""
    manifest = Path(manifest)
    root = manifest.parent
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, bag in enumerate(bags):
        if not bag.mask.all():
            raise DataError(f"bag {bag.patient_id!r} has masked tiles; write full bags only")
        stem = bag.patient_id or f"bag{i:04d}"
        if fmt == "npy":
            np.save(root / f"{stem}.npy", bag.tiles)
            entries.append({"patient_id": bag.patient_id, "tiles": f"{stem}.npy"})
        elif fmt == "csv":
            names = []
            for m in range(bag.n_regions):
                name = f"{stem}_r{m}.csv"
                np.savetxt(root / name, bag.tiles[m], delimiter=",", fmt="%.17g")
                names.append(name)
            entries.append({"patient_id": bag.patient_id, "regions": names})
        else:
            raise DataError(f"unknown bag format {fmt!r}")
    dims = {b.dim for b in bags}
    manifest.write_text(json.dumps({"dim": dims.pop() if len(dims) == 1 else None, "bags": entries}, indent=1))


def read_mask(path) -> np.ndarray:
    """Binary mask from PGM/PNG/any Pillow raster; nonzero pixels are tissue."""
    from PIL import Image

    path = Path(path)
    if not path.exists():
        raise DataError(f"mask not found: {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 0


def write_mask(path, mask) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(mask, bool).astype(np.uint8) * 255, mode="L").save(str(path))


@dataclass
class SlideManifest:
    patient_id: str
    spacings: list
    crops: list


def read_slide_manifest(path) -> SlideManifest:
    path = Path(path)
    if not path.exists():
        raise DataError(f"slide manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    spacings = doc.get("spacings")
    if not spacings:
        raise DataError(f"{path}: 'spacings' must list the available levels")
    crops = []
    for c in doc.get("crops", []):
        if "box" not in c or len(c["box"]) != 4:
            raise DataError(f"{path}: every crop needs a 4-value box")
        mask = read_mask(path.parent / c["mask"]) if c.get("mask") else None
        crops.append(TissueCrop(str(c.get("slide_id", "")), tuple(int(v) for v in c["box"]),
                                float(c.get("spacing", spacings[0])), mask))
    if not crops:
        raise DataError(f"{path}: no crops")
    return SlideManifest(str(doc.get("patient_id", "")), [float(s) for s in spacings], crops)
