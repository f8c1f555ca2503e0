import json
import subprocess
import sys
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asot import cli, pipeline
from asot.anchor import load_anchor_space
from asot.dictionary import DlModel, DlTrainConfig, init_dl_model
from asot.errors import InvalidArgumentError, NumericalError
from asot.pipeline import RunConfig, evaluate, rmse

from conftest import mutag_root

BLOBS = "blobs:n_graphs=6,nodes=3-5,n_clusters=2,seed=1"


def run_cli(*argv):
    return cli.main([str(a) for a in argv])


def read_csv(path):
    return np.loadtxt(path, delimiter=",", ndmin=2)


# --- RMSE ---------------------------------------------------------------


def test_rmse_identical_is_zero(rng):
    M = rng.uniform(size=(4, 4))
    assert rmse(M, M) == 0.0


def test_rmse_two_by_two():
    truth = np.array([[0.0, 1.0], [1.0, 0.0]])
    approx = np.array([[0.0, 1.1], [1.1, 0.0]])
    assert rmse(approx, truth) == pytest.approx(0.1, abs=1e-12)


def test_rmse_scalar_oracle(rng):
    A, B = rng.uniform(size=(6, 6)), rng.uniform(size=(6, 6))
    total, count = 0.0, 0
    for i in range(6):
        for j in range(i + 1, 6):
            total += (A[i, j] - B[i, j]) ** 2
            count += 1
    assert abs(rmse(A, B) - (total / count) ** 0.5) <= 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2**31 - 1))
def test_rmse_permutation_covariant(n, seed):
    rng = np.random.default_rng(seed)
    A, B = rng.uniform(size=(n, n)), rng.uniform(size=(n, n))
    A, B = A + A.T, B + B.T
    p = rng.permutation(n)
    assert abs(rmse(A[p][:, p], B[p][:, p]) - rmse(A, B)) <= 1e-12
    assert rmse(A, B) >= 0


def test_rmse_shape_mismatch():
    with pytest.raises(InvalidArgumentError):
        rmse(np.zeros((2, 2)), np.zeros((3, 3)))


def test_eval_report_times():
    report = evaluate(np.zeros((3, 3)), np.ones((3, 3)), train_time=1.5, dist_time=0.25)
    assert report.total_time == 1.75 and report.n_pairs == 3 and report.rmse == 1.0


# --- configuration ------------------------------------------------------


def test_run_config_validation():
    with pytest.raises(InvalidArgumentError):
        RunConfig(method="fast-ot")
    with pytest.raises(InvalidArgumentError):
        RunConfig(k=0)
    with pytest.raises(InvalidArgumentError):
        RunConfig.from_mapping({"bogus": 1})
    assert RunConfig(method="easot-dl").family == "dl" and RunConfig(method="easot-dl").entropic
    assert RunConfig(method="bds-eot").family is None


def test_load_dataset_specs(tmp_path, toy_root):
    ds = pipeline.load_dataset("blobs:n_graphs=3,nodes=2-2,seed=4,dim=3", tmp_path)
    assert len(ds) == 3 and ds.feature_dim == 3
    assert len(pipeline.load_dataset("TOY", toy_root)) == 2
    assert len(pipeline.load_dataset("TOY", toy_root.parent)) == 2
    with pytest.raises(InvalidArgumentError):
        pipeline.load_dataset("blobs:colour=red", tmp_path)
    with pytest.raises(Exception):
        pipeline.load_dataset("NOPE", tmp_path)


# --- distance matrices --------------------------------------------------


def test_ot_emd_three_graphs_symmetric():
    cfg = RunConfig(dataset="blobs:n_graphs=3,nodes=2-4,seed=0", method="ot-emd")
    ds = pipeline.prepare_dataset(pipeline.load_dataset(cfg.dataset, "."), cfg)
    M = pipeline.distance_matrix(ds, cfg)[0].to_dense()
    assert M.shape == (3, 3) and np.array_equal(M, M.T) and np.all(np.diag(M) == 0)
    assert np.all(M[np.triu_indices(3, 1)] > 0)


def test_easot_k_matches_asot_k_at_small_epsilon():
    base = dict(dataset="blobs:n_graphs=5,nodes=3-5,seed=2", k=4, epsilon=0.01, iterations=2000)
    exact_cfg = RunConfig(method="asot-k", **base)
    ds = pipeline.prepare_dataset(pipeline.load_dataset(exact_cfg.dataset, "."), exact_cfg)
    fitted = pipeline.fit_anchors(ds, exact_cfg)
    exact = pipeline.distance_matrix(ds, exact_cfg, fitted)[0].to_dense()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        approx = pipeline.distance_matrix(ds, RunConfig(method="easot-k", **base), fitted)[0].to_dense()
    assert np.max(np.abs(approx - exact)) <= 1e-3


def test_run_reports_timing_split():
    cfg = RunConfig(dataset=BLOBS, method="asot-k", k=3)
    report, values, truth, fitted = pipeline.run(cfg)
    assert report.train_time > 0 and report.dist_time > 0
    assert report.total_time == report.train_time + report.dist_time
    assert report.meta["k"] == 3 and values.shape == truth.shape == (6, 6)
    with pytest.raises(InvalidArgumentError):
        pipeline.distance_matrix(pipeline.prepare_dataset(pipeline.load_dataset(BLOBS, "."), cfg), cfg)


def test_all_distinct_anchors_collapse_rmse():
    cfg = RunConfig(dataset="blobs:n_graphs=4,nodes=2-3,seed=3", method="asot-k", fit_on="all")
    ds = pipeline.prepare_dataset(pipeline.load_dataset(cfg.dataset, "."), cfg)
    k = np.unique(ds.pooled_features(), axis=0).shape[0]
    report, *_ = pipeline.run(RunConfig(**{**cfg.to_dict(), "k": k}), ds)
    assert report.rmse <= 1e-9


# --- CLI ----------------------------------------------------------------


def test_cli_train_and_dist_asot_k(tmp_path):
    out = tmp_path / "model"
    assert run_cli("train", "--dataset", BLOBS, "--method", "asot-k", "--k", 4, "--out", out) == 0
    space, record = load_anchor_space(out / "anchors.json")
    assert space.k == 4 and record["kind"] == "k"
    meta = json.loads((out / "meta.json").read_text())
    assert meta["config"]["seed"] == 0 and "anchors.json" in meta["artifacts"]

    csv = tmp_path / "d.csv"
    assert run_cli("dist", "--dataset", BLOBS, "--method", "asot-k", "--anchors", out / "anchors.json",
                   "--out", csv, "--threads", 1) == 0
    M = read_csv(csv)
    assert M.shape == (6, 6) and np.allclose(M, M.T) and np.all(np.diag(M) == 0)
    side = json.loads((tmp_path / "d.csv.json").read_text())
    assert side["total_time"] == pytest.approx(side["train_time"] + side["dist_time"])
    assert side["config"]["method"] == "asot-k" and set(side["artifacts"]) == {"d.csv", "anchors.json"}


def test_cli_dist_is_bit_identical(tmp_path):
    paths = []
    for name in ("a", "b"):
        model = tmp_path / f"m{name}"
        run_cli("train", "--dataset", BLOBS, "--method", "easot-ml", "--k", 3, "--epochs", 3, "--out", model)
        csv = tmp_path / f"{name}.csv"
        run_cli("dist", "--dataset", BLOBS, "--method", "easot-ml", "--anchors", model / "anchors.json",
                "--out", csv, "--threads", 1)
        paths.append(csv)
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_cli_dist_asot_dl_zero_epochs_is_init(tmp_path):
    out = tmp_path / "dl"
    assert run_cli("train", "--dataset", BLOBS, "--method", "asot-dl", "--k", 3, "--epochs", 0, "--out", out) == 0
    space, record = load_anchor_space(out / "anchors.json")
    model = DlModel.from_record(record)
    cfg = RunConfig(dataset=BLOBS, method="asot-dl", k=3)
    ds = pipeline.prepare_dataset(pipeline.load_dataset(BLOBS, "."), cfg)
    idx = pipeline.train_indices(len(ds), cfg.train_fraction, cfg.seed)
    ref = init_dl_model(ds.pooled_features(idx), DlTrainConfig(3, epochs=0))
    assert all(np.array_equal(a, b) for a, b in zip(model.params(), ref.params()))
    assert record["trace"] == []


def test_cli_rmse(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    cli.write_matrix(a, np.array([[0.0, 1.1], [1.1, 0.0]]))
    cli.write_matrix(b, np.array([[0.0, 1.0], [1.0, 0.0]]))
    report = tmp_path / "r.json"
    assert run_cli("rmse", a, b, "--out", report) == 0
    assert json.loads(report.read_text())["rmse"] == pytest.approx(0.1, abs=1e-12)
    cli.write_matrix(b, np.zeros((3, 3)))
    assert run_cli("rmse", a, b) == 1


def test_cli_ablate_k_nested(tmp_path):
    out = tmp_path / "ab.csv"
    assert run_cli("ablate-k", "--dataset", "blobs:n_graphs=8,nodes=4-6,n_clusters=4,seed=5",
                   "--method", "asot-k", "--k-list", "2,4,8", "--nested", "--fit-on", "all", "--out", out) == 0
    rows = read_csv(out)
    assert rows[:, 0].tolist() == [2, 4, 8]
    assert np.all(np.diff(rows[:, 1]) <= 1e-12)
    meta = json.loads((tmp_path / "ab.csv.json").read_text())
    assert meta["columns"] == ["k", "rmse", "train_time", "dist_time"] and meta["failures"] == {}


def test_cli_ablate_k_records_failures(tmp_path, monkeypatch):
    real = pipeline.fit_anchors

    def flaky(dataset, cfg, k=None, init=None):
        if k == 3:
            raise NumericalError("diverged")
        return real(dataset, cfg, k=k, init=init)

    monkeypatch.setattr(pipeline, "fit_anchors", flaky)
    out = tmp_path / "ab.csv"
    assert run_cli("ablate-k", "--dataset", BLOBS, "--method", "asot-k", "--k-list", "2,3", "--out", out) == 0
    rows = read_csv(out)
    assert rows.shape == (2, 4) and np.isfinite(rows[0, 1]) and np.isnan(rows[1, 1])
    assert "3" in json.loads((tmp_path / "ab.csv.json").read_text())["failures"]


def test_cli_bench(tmp_path):
    out = tmp_path / "bench.csv"
    assert run_cli("bench", "--dataset", BLOBS, "--methods", "eot,bds-eot,easot-k", "--k", 3, "--out", out) == 0
    lines = out.read_text().splitlines()
    assert [line.split(",")[0] for line in lines] == ["ot-emd", "eot", "bds-eot", "easot-k"]
    eot = [line for line in lines if line.startswith("eot,")][0].split(",")
    assert float(eot[4]) == 1.0
    assert run_cli("bench", "--dataset", BLOBS, "--methods", "fast") == 1


def test_cli_config_file_and_override(tmp_path):
    conf = tmp_path / "run.toml"
    conf.write_text(f'dataset = "{BLOBS}"\nmethod = "asot-k"\nk = 2\nseed = 4\n')
    out = tmp_path / "m"
    assert run_cli("train", "--config", conf, "--k", 3, "--out", out) == 0
    meta = json.loads((out / "meta.json").read_text())
    assert meta["config"]["k"] == 3 and meta["config"]["seed"] == 4
    conf_json = tmp_path / "run.json"
    conf_json.write_text(json.dumps({"dataset": BLOBS, "method": "ot-emd", "out": str(tmp_path / "e.csv")}))
    assert run_cli("dist", "--config", conf_json) == 0
    assert read_csv(tmp_path / "e.csv").shape == (6, 6)
    conf_json.write_text(json.dumps({"colour": "red"}))
    assert run_cli("dist", "--config", conf_json) == 1


def test_cli_exit_codes(tmp_path, monkeypatch):
    # usage: learning method without anchors, non-learning train
    assert run_cli("dist", "--dataset", BLOBS, "--method", "asot-k", "--out", tmp_path / "x.csv") == 1
    assert run_cli("train", "--dataset", BLOBS, "--method", "eot", "--out", tmp_path / "m") == 1
    with pytest.raises(SystemExit) as info:
        run_cli("dist", "--method", "warp")
    assert info.value.code == 1
    # data: missing dataset, missing artifact
    assert run_cli("dist", "--dataset", "NOPE", "--method", "ot-emd", "--data-root", tmp_path,
                   "--out", tmp_path / "x.csv") == 2
    assert run_cli("dist", "--dataset", BLOBS, "--method", "asot-k", "--anchors", tmp_path / "missing.json",
                   "--out", tmp_path / "x.csv") == 2

    def boom(*args, **kwargs):
        raise NumericalError("non-finite gradient")

    monkeypatch.setattr(pipeline, "fit_anchors", boom)
    assert run_cli("train", "--dataset", BLOBS, "--method", "asot-ml", "--out", tmp_path / "m") == 3


def test_cli_missing_artifact_diagnostic(tmp_path, capsys):
    run_cli("dist", "--dataset", BLOBS, "--method", "easot-k", "--anchors", tmp_path / "gone.json")
    assert "gone.json" in capsys.readouterr().err


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "asot.cli", "rmse", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "approx" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "asot.cli", "frobnicate"], capture_output=True, text=True)
    assert proc.returncode == 1


@pytest.mark.skipif(mutag_root() is None, reason="MUTAG files not available")
def test_asot_ml_mutag_loss_trend(tmp_path):
    out = tmp_path / "ml"
    assert run_cli("train", "--dataset", "MUTAG", "--data-root", mutag_root(), "--method", "asot-ml",
                   "--k", 28, "--epochs", 150, "--out", out) == 0
    meta = json.loads((out / "meta.json").read_text())
    assert meta["train_time"] > 0
    trace = read_csv(out / "loss_trace.csv")[:, 1]
    windows = trace.reshape(-1, 50).mean(axis=1)
    assert windows[-1] < windows[0]
