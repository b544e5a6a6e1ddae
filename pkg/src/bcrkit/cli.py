"""``bcrkit`` command line.

Every command is deterministic given its inputs, config and ``--seed``.
Random streams for splitting, training, bootstrapping and synthesis are
derived from the seed independently, so changing one stage's usage does not
shift another's. CSV outputs start with a ``# provenance: {...}`` line and
JSON outputs carry a ``provenance`` key.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from collections import Counter
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__, capra, cox, folds, interpret, io, mil, stats, survival, synth, tiling
from .concordance import cindex_by_group
from .errors import BcrError, DataError, NumericalError

logger = logging.getLogger("bcrkit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
STREAMS = {"split": 1, "train": 2, "bootstrap": 3, "synth": 4}

DEFAULTS = {
    "seed": 0,
    "bootstrap": 4000,
    "alpha": survival.DEFAULT_ALPHA,
    "k": 5,
    "tau": 0.05,
    "level": 0.95,
    "workers": 1,
    "region_min_coverage": 0.01,
    "tile_min_coverage": None,
    "occlusion_k": interpret.DEFAULT_K,
    "threshold": 0.5,
    "sigma": interpret.DEFAULT_SIGMA,
    "gamma": 1.0,
    "train": {},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def stream_seed(seed: int, name: str) -> int:
    return int(np.random.SeedSequence([int(seed), STREAMS[name]]).generate_state(1)[0])


def effective_config(args) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS))
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise DataError(f"config not found: {path}")
        try:
            user = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc})") from None
        unknown = set(user) - set(DEFAULTS)
        if unknown:
            raise DataError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(user)
    for key in ("seed", "bootstrap", "alpha", "tau"):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def provenance(args, cfg) -> dict:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return {
        "tool": "bcrkit",
        "version": __version__,
        "command": args.command,
        "seed": cfg["seed"],
        "config_hash": hashlib.sha256(blob.encode()).hexdigest()[:16],
    }


def _csv_header(prov) -> list[str]:
    return [f"provenance: {json.dumps(prov, sort_keys=True)}"]


def _emit_json(obj, out) -> None:
    text = json.dumps(obj, indent=2, sort_keys=False) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _fmt(x) -> str:
    return repr(float(x))


def _aligned(cohort: io.Cohort, scores: dict, what: str) -> np.ndarray:
    missing = [p for p in cohort.patient_id if p not in scores]
    if missing:
        raise DataError(f"{what}: no score for {len(missing)} patient(s), e.g. {missing[:3]}")
    return np.array([scores[p] for p in cohort.patient_id], float)


def _named_path(token: str) -> tuple[str, str, str | None]:
    """``[NAME=]PATH[@COLUMN]`` -> (name, path, column)."""
    name, path = token.split("=", 1) if "=" in token else (None, token)
    path, column = path.rsplit("@", 1) if "@" in path else (path, None)
    return name or Path(path).stem, path, column


# -- commands ---------------------------------------------------------------

def cmd_capra(args, cfg, prov):
    cohort = io.read_cohort(args.cohort, require_outcome=False)
    scores = capra.score_cohort(cohort.records)
    rows = [[pid, s.points, s.group, s.components["psa"], s.components["gleason"], s.components["sm"],
             s.components["svi"], s.components["ece"], s.components["lni"], ";".join(sorted(s.imputed))]
            for pid, s in zip(cohort.patient_id, scores)]
    header = ["patient_id", "capra_s", "group", "psa_pts", "gleason_pts", "sm_pts", "svi_pts", "ece_pts",
              "lni_pts", "imputed"]
    if args.out:
        io.write_csv(args.out, header, rows, _csv_header(prov))
    counts = Counter(s.group for s in scores)
    summary = {"provenance": prov, "n": len(scores),
               "groups": {g: counts.get(g, 0) for g in ("low", "intermediate", "high")},
               "n_imputed": sum(1 for s in scores if s.imputed)}
    _emit_json(summary, args.summary)


def cmd_evaluate(args, cfg, prov):
    cohort = io.read_cohort(args.cohort)
    s = _aligned(cohort, io.read_scores(args.scores, args.column), args.scores)
    bcfg = stats.BootstrapConfig(int(cfg["bootstrap"]), stream_seed(cfg["seed"], "bootstrap"), int(cfg["workers"]))
    res = stats.bootstrap_ci(cohort.time, cohort.event, s, bcfg, cfg["level"])
    report = {"provenance": prov, "n": len(cohort), "n_events": int(cohort.event.sum()),
              "cindex": res.estimate, "ci_low": res.ci_low, "ci_high": res.ci_high,
              "level": cfg["level"], "n_resamples": res.n_resamples, "n_redrawn": res.n_redrawn}
    if args.group_by:
        groups = _group_column(args, cohort)
        by = cindex_by_group(cohort.time, cohort.event, s, groups)
        report["groups"] = [{"group": g, "n": int(np.sum(np.asarray(groups) == g)), "cindex": c}
                            for g, c in by.items()]
    _emit_json(report, args.out)


def _group_column(args, cohort):
    col = args.group_by
    for source in (args.scores, args.cohort):
        header, _ = io.read_rows(source)
        if col in header:
            values = io.read_column(source, col)
            return [values.get(p, "") for p in cohort.patient_id]
    raise DataError(f"group column {col!r} found in neither scores nor cohort file")


def cmd_compare(args, cfg, prov):
    cohort = io.read_cohort(args.cohort)
    models = [_named_path(t) for t in args.scores]
    if len(models) < 2:
        raise UsageError("compare needs at least two score files")
    names = [m[0] for m in models]
    if len(set(names)) != len(names):
        raise UsageError(f"model names must be unique: {names}")
    vectors = {name: _aligned(cohort, io.read_scores(path, column or args.column), path)
               for name, path, column in models}
    bcfg = stats.BootstrapConfig(int(cfg["bootstrap"]), stream_seed(cfg["seed"], "bootstrap"), int(cfg["workers"]))
    results = []
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            a, b = names[i], names[j]
            results.append(stats.paired_compare(cohort.time, cohort.event, vectors[a], vectors[b], bcfg,
                                                level=cfg["level"], label=f"{a} vs {b}", cohort=args.cohort_name))
    stats.adjust_family(results)
    _emit_json({"provenance": prov, "family_size": len(results), "n_resamples": bcfg.n_resamples,
                "comparisons": [r.to_dict() for r in results]}, args.out)


def cmd_cox(args, cfg, prov):
    cohort = io.read_cohort(args.cohort)
    dlrs = _aligned(cohort, io.read_scores(args.scores, args.column), args.scores)
    if args.capra:
        cap = _aligned(cohort, io.read_scores(args.capra, "capra_s"), args.capra)
    else:
        cap = np.array([s.points for s in capra.score_cohort(cohort.records)], float)
    scale = "raw"
    if args.standardize:
        sd = dlrs.std()
        if sd == 0:
            raise NumericalError("DLRS has zero variance; cannot standardize")
        dlrs = (dlrs - dlrs.mean()) / sd
        scale = "standardized (z-score)"
    X = np.column_stack([dlrs, cap])
    fit = cox.fit(X, cohort.time, cohort.event, names=("dlrs", "capra_s"))
    report = {
        "provenance": prov,
        "n": len(cohort),
        "n_events": int(cohort.event.sum()),
        "dlrs_scale": scale,
        "ensemble": {"cindex": stats.cindex_or_none(cohort.time, cohort.event, dlrs)},
        "capra_s": {"cindex": stats.cindex_or_none(cohort.time, cohort.event, cap)},
        "joint": {"cindex": cox.joint_cindex(fit, X, cohort.time, cohort.event),
                  "loglik": fit.loglik, "converged": fit.converged, "iterations": fit.n_iter,
                  "covariates": fit.summary()},
    }
    _emit_json(report, args.out)


def cmd_split(args, cfg, prov):
    cohort = io.read_cohort(args.cohort)
    labels = []
    for pid, e, g, y in zip(cohort.patient_id, cohort.event, cohort.isup, cohort.surgery_year):
        if g is None or y is None:
            raise DataError(f"patient {pid}: isup and surgery_year are required for stratified splitting")
        labels.append(folds.StratumLabels(bool(e), g, folds.era_flag(y)))
    k = int(args.k if args.k is not None else cfg["k"])
    assignment = folds.stratified_kfold(labels, k, stream_seed(cfg["seed"], "split"), cohort.patient_id)
    if not args.out:
        raise UsageError("split needs --out")
    assignment.to_csv(args.out, _csv_header(prov))
    sizes = assignment.sizes()
    _emit_json({"provenance": prov, "k": k, "sizes": [int(v) for v in sizes]}, None)


def cmd_tileplan(args, cfg, prov):
    manifest = io.read_slide_manifest(args.manifest)
    policy = tiling.SpacingPolicy(tiling.TARGET_SPACING, float(cfg["tau"]))
    plan = tiling.plan_patient(manifest.crops, manifest.spacings, policy,
                               region_min_coverage=float(cfg["region_min_coverage"]),
                               tile_min_coverage=cfg["tile_min_coverage"])
    out = {"provenance": prov, "patient_id": manifest.patient_id, **plan.to_dict()}
    _emit_json(out, args.out)


def _train_config(cfg, seed) -> mil.TrainConfig:
    names = {f.name for f in fields(mil.TrainConfig)}
    user = dict(cfg["train"])
    unknown = set(user) - names
    if unknown:
        raise DataError(f"unknown train config keys: {sorted(unknown)}")
    user.setdefault("alpha", cfg["alpha"])
    user["seed"] = seed
    if "frozen" in user:
        user["frozen"] = tuple(user["frozen"])
    return mil.TrainConfig(**user)


def _bag_dataset(cohort, bags):
    index = cohort.index()
    missing = [b.patient_id for b in bags if b.patient_id not in index]
    if missing:
        raise DataError(f"bags without cohort rows: {missing[:3]}")
    return [index[b.patient_id] for b in bags]


def cmd_train(args, cfg, prov):
    cohort = io.read_cohort(args.cohort)
    bags = io.read_bags(args.bags)
    rows = _bag_dataset(cohort, bags)
    t, e = cohort.time[rows], cohort.event[rows]
    if args.folds:
        assign = folds.read_folds(args.folds)
        fold_of = np.array([assign.get(b.patient_id, -1) for b in bags])
        if np.any(fold_of < 0):
            raise DataError("some bags have no fold assignment")
        fold_ids = sorted(set(fold_of.tolist()))
    else:
        fold_of = np.full(len(bags), -1)
        fold_ids = [None]
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    base_seed = stream_seed(cfg["seed"], "train")
    models = []
    for j in fold_ids:
        train_idx = np.flatnonzero(fold_of != j) if j is not None else np.arange(len(bags))
        bins = survival.make_bins(t[train_idx][e[train_idx]], float(t.max()))
        labels = survival.make_labels(bins, t[train_idx], e[train_idx])
        tcfg = _train_config(cfg, base_seed + (0 if j is None else j))
        res = mil.train([(bags[i], y) for i, y in zip(train_idx, labels)], tcfg)
        name = "model.npz" if j is None else f"fold{j}.npz"
        res.params.save(out / name)
        models.append({"file": name, "held_out_fold": j, "best_epoch": res.best_epoch,
                       "bin_edges": list(bins.edges), "n_train": int(train_idx.size),
                       "final_tune_loss": res.tune_loss[res.best_epoch - 1] if res.tune_loss else None})
        logger.info("trained %s (best epoch %d)", name, res.best_epoch)
    _emit_json({"provenance": prov, "models": models}, out / "models.json")


def _load_models(path):
    path = Path(path)
    if path.is_dir():
        meta_path = path / "models.json"
        if not meta_path.exists():
            raise DataError(f"{path} has no models.json")
        meta = json.loads(meta_path.read_text())
        return [(m["held_out_fold"], mil.AggregatorParams.load(path / m["file"])) for m in meta["models"]]
    if not path.exists():
        raise DataError(f"model not found: {path}")
    return [(None, mil.AggregatorParams.load(path))]


def cmd_predict(args, cfg, prov):
    bags = io.read_bags(args.bags)
    models = _load_models(args.models)
    assign = folds.read_folds(args.folds) if args.folds else None
    rows = []
    for bag in bags:
        risks = {j: mil.predict_risk(bag, p) for j, p in models}
        if assign is not None:
            j = assign.get(bag.patient_id)
            if j not in risks:
                raise DataError(f"no model held out fold {j} for patient {bag.patient_id}")
            r = risks[j]
        else:
            r = survival.ensemble_risk(list(risks.values()))
        rows.append([bag.patient_id, _fmt(r)])
    if not args.out:
        raise UsageError("predict needs --out")
    io.write_csv(args.out, ["patient_id", "dlrs"], rows, _csv_header(prov))


def _single_model(path) -> mil.AggregatorParams:
    models = _load_models(path)
    if len(models) != 1:
        raise UsageError("pass one model file (.npz), not a fold directory")
    return models[0][1]


def cmd_occlude(args, cfg, prov):
    bags = io.read_bags(args.bags)
    params = _single_model(args.model)
    k = int(args.k if args.k is not None else cfg["occlusion_k"])
    model = interpret.model_risk(params)
    occ = interpret.normalize_cohort([interpret.occlusion_scores(b, model, k) for b in bags])
    pooled = np.concatenate([o.raw for o in occ])
    q = np.percentile(pooled, [5, 95])
    header = _csv_header(prov) + [f"quantiles: q5={_fmt(q[0])} q95={_fmt(q[1])}"]
    if not args.out:
        raise UsageError("occlude needs --out")
    interpret.write_contributions(args.out, occ, header, selected_only=not args.all_tiles)


def cmd_attention(args, cfg, prov):
    bags = {b.patient_id: b for b in io.read_bags(args.bags)}
    if args.patient not in bags:
        raise DataError(f"patient {args.patient!r} not in bag manifest")
    params = _single_model(args.model)
    plan_path = Path(args.plan)
    if not plan_path.exists():
        raise DataError(f"plan not found: {plan_path}")
    plan = tiling.TilePlan.from_dict(json.loads(plan_path.read_text()))
    tile_r, region_r = interpret.attention_rasters(bags[args.patient], params, plan)
    frozen = set(args.frozen or ())
    stack = interpret.AttentionStack((tile_r, region_r), ("tile" in frozen, "region" in frozen),
                                     float(cfg["gamma"]))
    heat = interpret.render_heatmap(interpret.factorized_attention(stack), float(cfg["threshold"]),
                                    float(cfg["sigma"]))
    if not args.out:
        raise UsageError("attention needs --out")
    heat.save(args.out)
    grid_path = Path(args.out).with_suffix(".json")
    grid_path.write_text(heat.grid_json(provenance=prov, patient_id=args.patient,
                                        cell_px=plan.region_px // tiling.TILES_PER_SIDE) + "\n")


def cmd_synth(args, cfg, prov):
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    seed = stream_seed(cfg["seed"], "synth")
    coh = synth.clinical_cohort(args.n, seed=seed)
    rng = np.random.default_rng(seed + 1)
    marker = synth.marker_direction(16)
    bags = [synth.planted_bag(rng, coh.image_latent[i], 16, int(rng.integers(1, 4)), marker, strength=1.0,
                              noise=0.1, patient_id=pid)
            for i, pid in enumerate(coh.patient_id)]
    io.write_bags(out / "bags.json", bags)
    rows = []
    for pid, rec, t, e, g, y in zip(coh.patient_id, coh.records, coh.time, coh.event, coh.isup, coh.surgery_year):
        rows.append([pid, _fmt(t), int(e), _fmt(rec.psa), rec.gleason_primary, rec.gleason_secondary, rec.pt_stage,
                     rec.pn_stage, "" if rec.sm is None else int(rec.sm), "", "", "", int(g), int(y),
                     rec.ajcc_edition])
    io.write_csv(out / "cohort.csv", io.COHORT_COLUMNS, rows, _csv_header(prov))
    _emit_json({"provenance": prov, "n": args.n, "n_events": int(coh.event.sum())}, None)


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON file overriding defaults")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output path (stdout for JSON reports when omitted)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="bcrkit", description="Recurrence-risk modeling toolkit")
    p.add_argument("--version", action="version", version=f"bcrkit {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("capra", parents=[common], help="CAPRA-S scores from a cohort CSV")
    s.add_argument("cohort")
    s.add_argument("--summary", help="write the group summary JSON here instead of stdout")
    s.set_defaults(func=cmd_capra)

    s = sub.add_parser("evaluate", parents=[common], help="c-index with bootstrap CI")
    s.add_argument("--cohort", required=True)
    s.add_argument("--scores", required=True)
    s.add_argument("--column")
    s.add_argument("--group-by")
    s.add_argument("--bootstrap", type=int)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("compare", parents=[common], help="paired bootstrap comparison, BH across the family")
    s.add_argument("--cohort", required=True)
    s.add_argument("--scores", nargs="+", required=True, metavar="[NAME=]PATH[@COLUMN]")
    s.add_argument("--column")
    s.add_argument("--cohort-name", default="")
    s.add_argument("--bootstrap", type=int)
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("cox", parents=[common], help="joint Cox model of DLRS and CAPRA-S")
    s.add_argument("--cohort", required=True)
    s.add_argument("--scores", required=True, help="DLRS table")
    s.add_argument("--column")
    s.add_argument("--capra", help="CAPRA-S table from `bcrkit capra`; computed from the cohort if omitted")
    s.add_argument("--standardize", action="store_true", help="z-score DLRS before fitting")
    s.set_defaults(func=cmd_cox)

    s = sub.add_parser("split", parents=[common], help="stratified k-fold assignment")
    s.add_argument("--cohort", required=True)
    s.add_argument("--k", type=int)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("tileplan", parents=[common], help="region/tile plan from a slide manifest")
    s.add_argument("manifest")
    s.add_argument("--tau", type=float)
    s.set_defaults(func=cmd_tileplan)

    s = sub.add_parser("train", parents=[common], help="train the aggregator, one model per fold")
    s.add_argument("--cohort", required=True)
    s.add_argument("--bags", required=True)
    s.add_argument("--folds")
    s.add_argument("--alpha", type=float)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", parents=[common], help="risk scores from trained models")
    s.add_argument("--bags", required=True)
    s.add_argument("--models", required=True, help="model .npz or training output directory")
    s.add_argument("--folds", help="use each patient's held-out model")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("occlude", parents=[common], help="leave-one-tile-out contributions")
    s.add_argument("--bags", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--k", type=int)
    s.add_argument("--all-tiles", action="store_true")
    s.set_defaults(func=cmd_occlude)

    s = sub.add_parser("attention", parents=[common], help="factorized attention heatmap")
    s.add_argument("--bags", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--plan", required=True)
    s.add_argument("--patient", required=True)
    s.add_argument("--frozen", nargs="*", choices=["tile", "region"])
    s.set_defaults(func=cmd_attention)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic cohort and bags")
    s.add_argument("--n", type=int, default=200)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = effective_config(args)
        args.func(args, cfg, provenance(args, cfg))
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"bcrkit: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, OSError) as exc:
        print(f"bcrkit: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except BcrError as exc:
        print(f"bcrkit: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
