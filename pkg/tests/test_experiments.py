import json
import math

import numpy as np
import pytest
import yaml
from scipy.optimize import minimize
from scipy.special import logsumexp

from evprobe import experiments as ex
from evprobe.evidence import MarglikConfig
from evprobe.probes import ProbeArchitecture
from evprobe.synthetic import linear_task, random_label_task, sparse_task, write_embedding_task
from evprobe.training import TrainConfig

FAST = {"epochs": 20}


def _config(tmp_path, reps=None, seeds=(0,), **extra):
    ds, emb = write_embedding_task(tmp_path / "data", 240, 8, 3, seed=0, weight_scale=1.5)
    raw = {
        "tasks": [{"name": "synth", "path": str(ds)}],
        "representations": reps or [
            {"name": "emb", "kind": "file", "dim": 8, "source_path": str(emb)},
            {"name": "rand", "kind": "random", "dim": 8, "seed": 3},
        ],
        "depths": [0, 1], "hidden_width": 8, "train": FAST, "seeds": list(seeds),
        "output_dir": str(tmp_path / "out"), **extra,
    }
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(raw))
    return path


def _logreg_accuracy(Xtr, ytr, Xte, yte, C):
    D = Xtr.shape[1]

    def f(w):
        W = w.reshape(C, D)
        Z = Xtr @ W.T
        lse = logsumexp(Z, axis=1)
        P = np.exp(Z - lse[:, None])
        P[np.arange(len(ytr)), ytr] -= 1
        return (lse - Z[np.arange(len(ytr)), ytr]).sum() + 0.5 * w @ w, (P.T @ Xtr).ravel() + w

    w = minimize(f, np.zeros(C * D), jac=True, method="L-BFGS-B").x
    return np.mean((Xte @ w.reshape(C, D).T).argmax(1) == yte)


def test_config_round_trip_and_paths(tmp_path):
    cfg = ex.load_config(_config(tmp_path))
    assert cfg.tasks[0].name == "synth" and cfg.depths == (0, 1)
    assert cfg.train.epochs == 20 and cfg.train.lr == 0.1
    assert cfg.marglik == MarglikConfig()
    rel = tmp_path / "rel.yaml"
    rel.write_text(yaml.safe_dump({"tasks": [{"name": "t", "path": "d/x.jsonl"}],
                                   "representations": [{"kind": "random", "seed": 0}],
                                   "output_dir": "o"}))
    cfg = ex.load_config(rel)
    assert cfg.tasks[0].path == str(tmp_path / "d/x.jsonl")
    assert cfg.output_dir == str(tmp_path / "o")
    json.dumps(cfg.to_dict())


@pytest.mark.parametrize("patch,match", [
    ({"representations": []}, "representation"),
    ({"seeds": []}, "seed"),
    ({"depths": [3]}, "depths"),
    ({"colour": 1}, "unknown"),
    ({"representations": [{"kind": "random", "seed": 0}, {"kind": "random", "seed": 1}]},
     "duplicate"),
])
def test_config_validation(tmp_path, patch, match):
    raw = yaml.safe_load(_config(tmp_path).read_text())
    raw.update(patch)
    with pytest.raises(ValueError, match=match):
        ex.ExperimentConfig.from_dict(raw)


def test_comparison_structure_and_best_flag(tmp_path):
    cfg = ex.load_config(_config(tmp_path))
    table = ex.run_comparison(cfg)
    assert len(table["cells"]) == 2 and table["failed_jobs"] == 0
    assert [c["best"] for c in table["cells"]].count(True) == 1
    assert table["best"] == {"synth": "emb"}
    for c in table["cells"]:
        assert c["depth"] in (0, 1, 2)
    # the ordering agrees with a plain logistic-regression oracle on the held-out split
    accs = {}
    for rep in cfg.representations:
        d = ex.load_task_matrix(cfg.tasks[0], rep)
        accs[rep.name] = _logreg_accuracy(d.X_train, d.y_train, d.X_test, d.y_test, 3)
    assert accs["emb"] > accs["rand"] + 0.2
    out = tmp_path / "out"
    assert (out / "comparison.csv").read_text().splitlines()[0].split(",") == ex.TABLE_FIELDS
    assert len(list((out / "checkpoints").glob("*.json"))) == 4


def test_report_regenerates_identically(tmp_path):
    cfg = ex.load_config(_config(tmp_path, seeds=(0, 1)))
    ex.run_comparison(cfg, checkpoints=False)
    out = tmp_path / "out"
    before = {p: (out / p).read_bytes() for p in ("comparison.json", "comparison.csv")}
    for p in before:
        (out / p).unlink()
    ex.report(out)
    assert {p: (out / p).read_bytes() for p in before} == before
    cell = json.loads(before["comparison.json"])["cells"][0]
    assert cell["n_runs"] == 2 and len(cell["runs"]) == 2
    assert cell["spread"] == pytest.approx(np.std(cell["runs"]))


def test_failed_job_recorded_not_fatal(tmp_path):
    reps = [{"name": "rand", "kind": "random", "dim": 8, "seed": 3},
            {"name": "missing", "kind": "file", "dim": 8, "source_path": "nope.vec"}]
    table = ex.run_comparison(ex.load_config(_config(tmp_path, reps=reps)))
    assert table["failed_jobs"] == 1
    cells = {c["representation"]: c for c in table["cells"]}
    assert cells["rand"]["n_runs"] == 1 and cells["rand"]["best"]
    assert cells["missing"]["n_failed"] == 1 and cells["missing"]["errors"]
    assert cells["missing"]["log_evidence_per_example"] is None


def test_build_table_aggregation():
    def rec(rep, seed, z, depth, n=100):
        return {"task": "t", "representation": rep, "seed": seed, "status": "ok", "error": None,
                "n_train": n, "selection": {"inductive_bias": z, "chosen_depth": depth}}
    table = ex.build_table([rec("a", 0, -50.0, 1), rec("a", 1, -70.0, 0), rec("a", 2, -60.0, 1),
                            rec("b", 0, -90.0, 0)], ["t"], ["a", "b"])
    a, b = table["cells"]
    assert a["log_evidence_per_example"] == pytest.approx(-0.6)
    assert a["spread"] == pytest.approx(np.std([-0.5, -0.7, -0.6]))
    assert a["depth"] == 1 and a["best"] and not b["best"]
    tie = ex.build_table([rec("a", 0, -1.0, 2), rec("a", 1, -1.0, 0)], ["t"], ["a"])
    assert tie["cells"][0]["depth"] == 0


def test_decay_sweep_prior_dominated_limit():
    X, y, _ = linear_task(300, 10, 3, 0)
    recs = ex.run_decay_sweep(X[:200], y[:200], X[200:], y[200:], ProbeArchitecture(10, 3),
                              [1e-2, 1e6], TrainConfig(epochs=100))
    strong = recs[-1]
    assert strong["theta_norm"] < 1e-2
    assert strong["train_ce"] == pytest.approx(math.log(3), abs=0.02)
    assert recs[0]["train_ce"] < strong["train_ce"]
    with pytest.raises(ValueError):
        ex.run_decay_sweep(X, y, X, y, ProbeArchitecture(10, 3), [], TrainConfig())


def test_decay_sweep_gap_shrinks_with_regularization(tmp_path):
    X, y, _ = linear_task(400, 300, 3, 1, weight_scale=0.2)
    recs = ex.run_decay_sweep(X[:100], y[:100], X[100:], y[100:], ProbeArchitecture(300, 3),
                              ex.default_decay_grid(), TrainConfig())
    gaps = [r["test_ce"] - r["train_ce"] for r in recs]
    assert all(b <= a + 0.01 for a, b in zip(gaps, gaps[1:]))
    ex.write_records_csv(recs, ex.SWEEP_FIELDS, tmp_path / "s.csv")
    rows = ex.read_records_csv(tmp_path / "s.csv")
    assert list(rows[0]) == ex.SWEEP_FIELDS and len(rows) == 13
    assert float(rows[3]["lambda"]) == pytest.approx(0.1)


def test_default_decay_grid():
    grid = ex.default_decay_grid()
    assert len(grid) == 13 and grid[0] == pytest.approx(1e-4) and grid[-1] == pytest.approx(1e8)


def test_is_bimodal():
    rng = np.random.default_rng(0)
    two = np.concatenate([rng.normal(-2, 0.5, 300), rng.normal(9, 0.5, 300)])
    assert ex.is_bimodal(two)
    assert not ex.is_bimodal(rng.normal(0, 1, 600))
    assert not ex.is_bimodal(np.concatenate([rng.normal(0, 1, 600), [10.0]]))
    assert ex.count_modes(np.ones(10)) == 1


def test_ard_histogram_and_fractions():
    X, y, rel = sparse_task(200, 20, 3, 0, n_relevant=4)
    res = ex.run_ard(X, y, TrainConfig(epochs=100), relevant_dims=rel)
    assert sum(r["count"] for r in res.histogram) == res.summary["n_params"] == 63
    assert sum(r["weights"] for r in res.histogram) == 60
    s = res.summary
    assert 0.0 <= s["fraction_zeroed_bound"] <= s["fraction_zeroed_prior_dominated"] <= 1.0
    assert s["irrelevant_zeroed_prior_dominated"] > s["relevant_zeroed_prior_dominated"]
    with pytest.raises(ValueError):
        res.zeroed("median")
    with pytest.raises(ValueError):
        ex.run_ard(X, y, TrainConfig(epochs=1), MarglikConfig())


def test_ard_random_labels_prune_more():
    X, y, _ = sparse_task(300, 30, 3, 1, n_relevant=15, weight_scale=0.6)
    Xr, yr = random_label_task(300, 30, 3, 1)
    a = ex.run_ard(X, y, TrainConfig(epochs=200))
    b = ex.run_ard(Xr, yr, TrainConfig(epochs=200))
    assert (b.summary["fraction_zeroed_prior_dominated"]
            > a.summary["fraction_zeroed_prior_dominated"])


def test_toy_outputs(tmp_path):
    res = ex.run_toy(tmp_path, seed=0, n=120, grid_size=7, cfg=TrainConfig(epochs=40))
    assert set(res.fits) == {"informative/neural", "informative/linear", "random/neural",
                             "random/linear"}
    for probs in res.grid_probs.values():
        assert probs.shape == (7, 7, 2)
        assert np.all((probs >= 0) & (probs <= 1))
        assert np.allclose(probs.sum(axis=-1), 1.0)
    saved = json.loads((tmp_path / "toy.json").read_text())
    assert saved["log_evidence"]["random/linear"] == res.log_evidence("random", "linear")
    rows = ex.read_records_csv(tmp_path / "toy_grid.csv")
    assert len(rows) == 2 * 49 and list(rows[0]) == ex.TOY_GRID_FIELDS
