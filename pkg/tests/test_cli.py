import csv
import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from bcrkit import capra, cox, io, mil, tiling
from bcrkit.cli import main
from bcrkit.concordance import cindex, cindex_by_group

FIXTURES = Path(__file__).parent / "fixtures"
FAST_TRAIN = {"train": {"lr": 0.1, "accumulation": 8, "weight_decay": 0.01, "max_epochs": 3, "min_epochs": 1,
                        "patience": 3}}


def run(*argv, capsys=None):
    code = main([str(a) for a in argv])
    if capsys is None:
        return code
    out = capsys.readouterr()
    return code, out.out, out.err


def body(path):
    return [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]


def write_scores(path, ids, values, column="score"):
    io.write_csv(path, ["patient_id", column], [[p, repr(float(v))] for p, v in zip(ids, values)])
    return path


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--n", "150", "--seed", "3", "--out", str(d)]) == 0
    main(["capra", str(d / "cohort.csv"), "--out", str(d / "capra.csv"), "--summary", str(d / "summary.json")])
    (d / "fast.json").write_text(json.dumps(FAST_TRAIN))
    return d


@pytest.fixture(scope="module")
def cohort(synth_dir):
    return io.read_cohort(synth_dir / "cohort.csv")


def test_capra_golden_fixture(tmp_path):
    out = tmp_path / "capra.csv"
    assert run("capra", FIXTURES / "capra_cohort.csv", "--out", out, "--summary", tmp_path / "s.json") == 0
    assert out.read_bytes() == (FIXTURES / "capra_expected.csv").read_bytes()
    summary = json.loads((tmp_path / "s.json").read_text())
    assert summary["groups"] == {"low": 2, "intermediate": 2, "high": 2} and summary["n_imputed"] == 1


def test_capra_summary_to_stdout(capsys):
    code, out, _ = run("capra", FIXTURES / "capra_cohort.csv", capsys=capsys)
    assert code == 0 and json.loads(out)["n"] == 6


def test_empty_file_is_data_error(tmp_path, capsys):
    (tmp_path / "e.csv").write_text("")
    code, _, err = run("capra", tmp_path / "e.csv", capsys=capsys)
    assert code == 2 and "empty" in err


def test_unknown_stage_names_row(tmp_path, capsys):
    rows = (FIXTURES / "capra_cohort.csv").read_text().splitlines()
    rows[3] = rows[3].replace("pT3b", "pT9")
    (tmp_path / "c.csv").write_text("\n".join(rows) + "\n")
    code, _, err = run("capra", tmp_path / "c.csv", capsys=capsys)
    assert code == 2 and "c.csv:4:" in err and "pT9" in err and "valid:" in err


def test_missing_file_exit_code(tmp_path, capsys):
    code, _, err = run("capra", tmp_path / "nope.csv", capsys=capsys)
    assert code == 2 and "not found" in err


@pytest.mark.parametrize("argv", [["frobnicate"], [], ["evaluate", "--cohort", "x.csv"], ["split", "--k", "two"]])
def test_usage_errors_exit_one(argv, capsys):
    assert run(*argv, capsys=capsys)[0] == 1


def test_unknown_config_key(tmp_path, capsys):
    (tmp_path / "cfg.json").write_text('{"bootstrapp": 10}')
    code, _, err = run("capra", FIXTURES / "capra_cohort.csv", "--config", tmp_path / "cfg.json", capsys=capsys)
    assert code == 2 and "bootstrapp" in err


def test_evaluate_perfect_scores(synth_dir, cohort, tmp_path):
    s = write_scores(tmp_path / "s.csv", cohort.patient_id, -cohort.time)
    out = tmp_path / "r.json"
    assert run("evaluate", "--cohort", synth_dir / "cohort.csv", "--scores", s, "--bootstrap", 200,
               "--out", out) == 0
    r = json.loads(out.read_text())
    assert (r["cindex"], r["ci_low"], r["ci_high"]) == (1.0, 1.0, 1.0)
    assert r["provenance"]["command"] == "evaluate"


def test_evaluate_capra_on_synthetic_cohort(synth_dir, cohort, tmp_path):
    out = tmp_path / "r.json"
    assert run("evaluate", "--cohort", synth_dir / "cohort.csv", "--scores", synth_dir / "capra.csv",
               "--column", "capra_s", "--bootstrap", 200, "--out", out) == 0
    r = json.loads(out.read_text())
    assert r["cindex"] > 0.7 and r["ci_low"] <= r["cindex"] <= r["ci_high"]
    ref = np.array([s.points for s in capra.score_cohort(cohort.records)])
    assert r["cindex"] == cindex(cohort.time, cohort.event, ref)


def test_evaluate_group_by(synth_dir, cohort, tmp_path):
    out = tmp_path / "r.json"
    assert run("evaluate", "--cohort", synth_dir / "cohort.csv", "--scores", synth_dir / "capra.csv",
               "--column", "capra_s", "--group-by", "group", "--bootstrap", 50, "--out", out) == 0
    groups = {g["group"]: g["cindex"] for g in json.loads(out.read_text())["groups"]}
    table = io.read_column(synth_dir / "capra.csv", "group")
    score = io.read_scores(synth_dir / "capra.csv", "capra_s")
    ref = cindex_by_group(cohort.time, cohort.event, [score[p] for p in cohort.patient_id],
                          [table[p] for p in cohort.patient_id])
    assert groups == ref


def test_seed_determinism(synth_dir, tmp_path):
    def ci(seed, name):
        out = tmp_path / name
        run("evaluate", "--cohort", synth_dir / "cohort.csv", "--scores", synth_dir / "capra.csv",
            "--column", "capra_s", "--bootstrap", 100, "--seed", seed, "--out", out)
        r = json.loads(out.read_text())
        return r["ci_low"], r["ci_high"]

    assert ci(5, "a.json") == ci(5, "b.json")
    assert ci(5, "a.json") != ci(6, "c.json")


def test_compare_identical_models(synth_dir, tmp_path):
    out = tmp_path / "r.json"
    cap = synth_dir / "capra.csv"
    assert run("compare", "--cohort", synth_dir / "cohort.csv", "--scores", f"a={cap}@capra_s",
               f"b={cap}@capra_s", "--bootstrap", 100, "--out", out) == 0
    (c,) = json.loads(out.read_text())["comparisons"]
    assert c["delta"] == 0.0 and c["p"] == 1.0


def test_compare_family_gets_bh(synth_dir, cohort, tmp_path):
    rng = np.random.default_rng(0)
    noise = write_scores(tmp_path / "noise.csv", cohort.patient_id, rng.normal(size=len(cohort)))
    perfect = write_scores(tmp_path / "perfect.csv", cohort.patient_id, -cohort.time)
    out = tmp_path / "r.json"
    assert run("compare", "--cohort", synth_dir / "cohort.csv", "--scores", f"capra={synth_dir / 'capra.csv'}@capra_s",
               noise, perfect, "--bootstrap", 200, "--cohort-name", "synthetic", "--out", out) == 0
    r = json.loads(out.read_text())
    assert r["family_size"] == 3
    ps = [c["p"] for c in r["comparisons"]]
    qs = [c["q"] for c in r["comparisons"]]
    assert all(q >= p for p, q in zip(ps, qs))
    order = np.argsort(ps)
    assert qs[order[-1]] == pytest.approx(max(ps))
    assert [c["label"] for c in r["comparisons"]] == ["capra vs noise", "capra vs perfect", "noise vs perfect"]


def test_compare_needs_two(synth_dir, capsys):
    code, *_ = run("compare", "--cohort", synth_dir / "cohort.csv", "--scores", synth_dir / "capra.csv",
                   capsys=capsys)
    assert code == 1


def test_cox_matches_library(synth_dir, cohort, tmp_path):
    rng = np.random.default_rng(1)
    dlrs = -np.log(cohort.time) + rng.normal(0, 0.5, len(cohort))
    s = write_scores(tmp_path / "d.csv", cohort.patient_id, dlrs, "dlrs")
    out = tmp_path / "cox.json"
    assert run("cox", "--cohort", synth_dir / "cohort.csv", "--scores", s, "--capra", synth_dir / "capra.csv",
               "--out", out) == 0
    r = json.loads(out.read_text())
    cap = np.array([s.points for s in capra.score_cohort(cohort.records)], float)
    X = np.column_stack([dlrs, cap])
    fit = cox.fit(X, cohort.time, cohort.event, names=("dlrs", "capra_s"))
    assert [c["coef"] for c in r["joint"]["covariates"]] == pytest.approx(list(fit.coef), rel=1e-12)
    assert r["joint"]["cindex"] == cox.joint_cindex(fit, X, cohort.time, cohort.event)
    assert r["capra_s"]["cindex"] == cindex(cohort.time, cohort.event, cap)
    assert r["dlrs_scale"] == "raw"


def test_cox_standardize_only_rescales(synth_dir, cohort, tmp_path):
    dlrs = 3.0 * np.random.default_rng(2).normal(size=len(cohort)) - np.log(cohort.time)
    s = write_scores(tmp_path / "d.csv", cohort.patient_id, dlrs)
    raw, std = tmp_path / "raw.json", tmp_path / "std.json"
    run("cox", "--cohort", synth_dir / "cohort.csv", "--scores", s, "--out", raw)
    run("cox", "--cohort", synth_dir / "cohort.csv", "--scores", s, "--standardize", "--out", std)
    a, b = (json.loads(p.read_text())["joint"] for p in (raw, std))
    assert a["cindex"] == pytest.approx(b["cindex"], abs=1e-12)
    assert a["covariates"][0]["z"] == pytest.approx(b["covariates"][0]["z"], rel=1e-8)


@pytest.mark.parametrize("standardize", [False, True])
def test_cox_constant_dlrs_is_numerical_failure(synth_dir, cohort, tmp_path, capsys, standardize):
    s = write_scores(tmp_path / "d.csv", cohort.patient_id, np.full(len(cohort), 0.3))
    extra = ["--standardize"] if standardize else []
    code, _, err = run("cox", "--cohort", synth_dir / "cohort.csv", "--scores", s, *extra, capsys=capsys)
    assert code == 3 and ("dlrs" in err.lower())


def test_split_writes_balanced_folds(synth_dir, tmp_path, capsys):
    out = tmp_path / "folds.csv"
    code, stdout, _ = run("split", "--cohort", synth_dir / "cohort.csv", "--k", 5, "--out", out, capsys=capsys)
    assert code == 0
    sizes = json.loads(stdout)["sizes"]
    assert sum(sizes) == 150 and max(sizes) - min(sizes) <= 1
    assert out.read_text().startswith("# provenance: ")
    again = tmp_path / "again.csv"
    run("split", "--cohort", synth_dir / "cohort.csv", "--k", 5, "--out", again)
    assert out.read_bytes() == again.read_bytes()


def test_tileplan(tmp_path):
    mask = np.zeros((2048, 4096), bool)
    mask[:, :2048] = True
    io.write_mask(tmp_path / "m.png", mask)
    (tmp_path / "slides.json").write_text(json.dumps(
        {"patient_id": "P", "spacings": [0.5], "crops": [{"slide_id": "S", "box": [0, 0, 4096, 2048],
                                                          "mask": "m.png"}]}))
    out = tmp_path / "plan.json"
    assert run("tileplan", tmp_path / "slides.json", "--out", out) == 0
    plan = json.loads(out.read_text())
    assert plan["patient_id"] == "P" and len(plan["regions"]) == 1 and plan["regions"][0]["coverage"] == 1.0
    tiling.TilePlan.from_dict(plan)


def test_tileplan_no_valid_spacing(tmp_path, capsys):
    (tmp_path / "s.json").write_text(json.dumps({"patient_id": "P", "spacings": [1.0],
                                                 "crops": [{"slide_id": "S", "box": [0, 0, 100, 100]}]}))
    assert run("tileplan", tmp_path / "s.json", capsys=capsys)[0] == 2


@pytest.fixture(scope="module")
def trained(synth_dir, tmp_path_factory):
    d = tmp_path_factory.mktemp("models")
    assert main(["split", "--cohort", str(synth_dir / "cohort.csv"), "--k", "3", "--out", str(d / "folds.csv")]) == 0
    assert main(["train", "--cohort", str(synth_dir / "cohort.csv"), "--bags", str(synth_dir / "bags.json"),
                 "--folds", str(d / "folds.csv"), "--config", str(synth_dir / "fast.json"), "--out", str(d)]) == 0
    return d


def test_train_writes_fold_models(trained):
    meta = json.loads((trained / "models.json").read_text())
    assert [m["held_out_fold"] for m in meta["models"]] == [0, 1, 2]
    for m in meta["models"]:
        assert (trained / m["file"]).exists() and len(m["bin_edges"]) == 5 and m["n_train"] == 100


def test_predict_held_out_and_ensemble(synth_dir, trained, tmp_path):
    held, ens = tmp_path / "held.csv", tmp_path / "ens.csv"
    assert run("predict", "--bags", synth_dir / "bags.json", "--models", trained, "--folds",
               trained / "folds.csv", "--out", held) == 0
    assert run("predict", "--bags", synth_dir / "bags.json", "--models", trained, "--out", ens) == 0
    bags = io.read_bags(synth_dir / "bags.json")
    assign = {p: int(f) for p, f in io.read_column(trained / "folds.csv", "fold").items()}
    scores = io.read_scores(held, "dlrs")
    for bag in bags[:5]:
        p = mil.AggregatorParams.load(trained / f"fold{assign[bag.patient_id]}.npz")
        assert scores[bag.patient_id] == mil.predict_risk(bag, p)
    assert set(io.read_scores(ens)) == set(scores)


def test_train_is_seed_deterministic(synth_dir, trained, tmp_path):
    assert run("train", "--cohort", synth_dir / "cohort.csv", "--bags", synth_dir / "bags.json", "--folds",
               trained / "folds.csv", "--config", synth_dir / "fast.json", "--out", tmp_path) == 0
    a = mil.AggregatorParams.load(trained / "fold1.npz").flat()
    b = mil.AggregatorParams.load(tmp_path / "fold1.npz").flat()
    assert a.tobytes() == b.tobytes()


def test_occlude(synth_dir, trained, tmp_path):
    out = tmp_path / "occ.csv"
    assert run("occlude", "--bags", synth_dir / "bags.json", "--model", trained / "fold0.npz", "--k", 3,
               "--out", out) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("# provenance: ") and lines[1].startswith("# quantiles: q5=")
    rows = list(csv.DictReader(lines[2:]))
    assert len(rows) == 150 * 6
    assert all(-1.0 <= float(r["normalized"]) <= 1.0 for r in rows)


def test_occlude_rejects_fold_directory(synth_dir, trained, capsys):
    assert run("occlude", "--bags", synth_dir / "bags.json", "--model", trained, "--out", "x.csv",
               capsys=capsys)[0] == 1


def test_attention_heatmap(synth_dir, trained, tmp_path):
    bags = io.read_bags(synth_dir / "bags.json")
    bag = bags[0]
    m = bag.n_regions
    plan = tiling.plan_tiles(np.ones((2048, 2048 * m), bool), tiling.SpacingChoice(0.5, 1.0, 2048))
    (tmp_path / "plan.json").write_text(plan.to_json())
    out = tmp_path / "heat.png"
    assert run("attention", "--bags", synth_dir / "bags.json", "--model", trained / "fold0.npz", "--plan",
               tmp_path / "plan.json", "--patient", bag.patient_id, "--frozen", "region", "--out", out) == 0
    img = np.asarray(Image.open(out))
    assert img.shape == (8, 8 * m, 4) and set(np.unique(img[..., 3])) <= {0, 128}
    grid = json.loads(out.with_suffix(".json").read_text())
    assert grid["patient_id"] == bag.patient_id and grid["cell_px"] == 256


def test_attention_unknown_patient(synth_dir, trained, tmp_path, capsys):
    (tmp_path / "plan.json").write_text("{}")
    code, _, err = run("attention", "--bags", synth_dir / "bags.json", "--model", trained / "fold0.npz",
                       "--plan", tmp_path / "plan.json", "--patient", "nobody", "--out", tmp_path / "h.png",
                       capsys=capsys)
    assert code == 2 and "nobody" in err


def test_synth_is_seed_deterministic(tmp_path):
    run("synth", "--n", 20, "--seed", 9, "--out", tmp_path / "a")
    run("synth", "--n", 20, "--seed", 9, "--out", tmp_path / "b")
    assert (tmp_path / "a" / "cohort.csv").read_bytes() == (tmp_path / "b" / "cohort.csv").read_bytes()
    assert body(tmp_path / "a" / "cohort.csv")[0] == ",".join(io.COHORT_COLUMNS)
