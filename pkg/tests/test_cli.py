import csv
import json

import numpy as np
import pytest

from rogmc.cli import build_config, main
from rogmc.model import init_params, save_checkpoint


@pytest.fixture
def raw_file(tmp_path):
    rng = np.random.default_rng(0)
    lines = []
    for u in range(1, 13):
        for i in rng.choice(np.arange(100, 130), size=14, replace=False):
            lines.append(f"{u}\t{i}\t{rng.integers(1, 6)}\t{rng.integers(8e8, 9e8)}")
    path = tmp_path / "u.data"
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture
def config_file(tmp_path, raw_file):
    cfg = {"dataset": str(raw_file), "k": 3, "dim": 4, "epochs": 8, "patience": 3,
           "learning_rate": 0.02, "seeds": [1, 2], "out": str(tmp_path / "runs")}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def only_run(tmp_path, prefix):
    runs = sorted((tmp_path / "runs").glob(f"{prefix}-*"))
    assert runs, f"no {prefix} run directory"
    return runs[-1]


def test_prepare_writes_canonical_files(tmp_path, config_file, capsys):
    assert main(["prepare", "--config", str(config_file), "--frac", "0.25"]) == 0
    run = only_run(tmp_path, "prepare")
    meta = json.loads((run / "metadata.json").read_text())
    n_train = meta["counts"]["train"]
    assert meta["num_unknown_train"] == n_train - round(0.25 * n_train)
    assert meta["raw"]["num_interactions"] == 12 * 14
    assert {p.name for p in run.iterdir()} >= {"train.tsv", "val.tsv", "test.tsv", "metadata.json",
                                               "manifest.json"}
    out = capsys.readouterr().out
    assert "raw:" in out and "3-core:" in out


def test_prepare_is_reproducible(tmp_path, config_file):
    assert main(["prepare", "--config", str(config_file)]) == 0
    assert main(["prepare", "--config", str(config_file)]) == 0
    a, b = sorted((tmp_path / "runs").glob("prepare-*"))
    for name in ("train.tsv", "val.tsv", "test.tsv", "metadata.json", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_prepare_parse_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.data"
    bad.write_text("1\t2\tx\t0\n")
    assert main(["prepare", "--dataset", str(bad), "--out", str(tmp_path / "runs")]) == 1
    assert ":1:" in capsys.readouterr().err


def test_train_from_prepared(tmp_path, config_file):
    assert main(["prepare", "--config", str(config_file)]) == 0
    data = only_run(tmp_path, "prepare")
    assert main(["train", "--config", str(config_file), "--data", str(data), "--variant", "exact"]) == 0
    run = only_run(tmp_path, "train")
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["decomposition_mode"] == "exact"
    assert manifest["status"] == "ok"
    assert np.isfinite(manifest["test_rmse"])
    assert len(manifest["config_hash"]) == 64


def test_train_alpha_zero_bpr_column(tmp_path, config_file):
    assert main(["train", "--config", str(config_file), "--alpha", "0"]) == 0
    run = only_run(tmp_path, "train")
    rows = list(csv.DictReader((run / "history.csv").open()))
    assert rows and all(float(r["bpr"]) == 0.0 for r in rows)


def test_train_deterministic(tmp_path, config_file):
    for k in range(2):
        assert main(["train", "--config", str(config_file), "--deterministic", "--seed", "5",
                     "--out", str(tmp_path / f"out{k}")]) == 0
    (a,), (b,) = (list((tmp_path / f"out{k}").glob("train-*")) for k in range(2))
    for name in ("checkpoint.bin", "history.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_digest_ignores_output_location():
    assert build_config({"out": "a"}).digest() == build_config({"out": "b"}).digest()
    assert build_config({"seed": 1}).digest() != build_config({"seed": 2}).digest()


def test_train_divergence_recorded(tmp_path, config_file):
    assert main(["train", "--config", str(config_file), "--epochs", "40"]
                + ["--seed", "0"]) == 0
    cfg = json.loads(config_file.read_text())
    cfg["learning_rate"] = 1e300
    config_file.write_text(json.dumps(cfg))
    assert main(["train", "--config", str(config_file)]) == 1
    manifests = [json.loads((p / "manifest.json").read_text())
                 for p in (tmp_path / "runs").glob("train-*")]
    assert any(m["status"] == "diverged" for m in manifests)


def test_ablate_table(tmp_path, config_file):
    assert main(["ablate", "--config", str(config_file)]) == 0
    run = only_run(tmp_path, "ablate")
    rows = list(csv.DictReader((run / "ablation.csv").open()))
    detail = [r for r in rows if r["seed"] != "mean"]
    agg = [r for r in rows if r["seed"] == "mean"]
    assert len(detail) == 7 * 2 and len(agg) == 7
    for a in agg:
        vals = [float(r["test_rmse"]) for r in detail if r["variant"] == a["variant"]]
        assert float(a["test_rmse"]) == pytest.approx(np.mean(vals), rel=1e-12)


def test_analyze_distance_and_sweep(tmp_path, config_file):
    cfg = json.loads(config_file.read_text())
    cfg.update({"seeds": [1], "epochs": 2})
    config_file.write_text(json.dumps(cfg))
    assert main(["prepare", "--config", str(config_file)]) == 0
    data = only_run(tmp_path, "prepare")
    meta = json.loads((data / "metadata.json").read_text())
    n = meta["num_users"] + meta["num_items"]
    ck = tmp_path / "random.bin"
    save_checkpoint(ck, init_params(n, 4, meta["rating_set"], np.random.default_rng(0)),
                    T=meta["rating_set"], mode="cumulative", seed=0)
    assert main(["analyze", str(ck), "--config", str(config_file), "--data", str(data),
                 "--sweep"]) == 0
    run = only_run(tmp_path, "analyze")
    m = np.loadtxt(run / "distances.csv", delimiter=",", skiprows=1)[:, 1:]
    assert np.allclose(m, m.T) and not np.diag(m).any()
    sweep = list(csv.DictReader((run / "sweep.csv").open()))
    assert len(sweep) == 5 * 4


def test_analyze_header_mismatch(tmp_path, config_file, capsys):
    assert main(["prepare", "--config", str(config_file)]) == 0
    data = only_run(tmp_path, "prepare")
    ck = tmp_path / "wrong.bin"
    save_checkpoint(ck, init_params(3, 4, [1, 2, 3, 4, 5], np.random.default_rng(0)),
                    T=[1, 2, 3, 4, 5], mode="cumulative", seed=0)
    assert main(["analyze", str(ck), "--config", str(config_file), "--data", str(data)]) == 1
    assert "'N'" in capsys.readouterr().err


def test_config_precedence(tmp_path, config_file):
    cfg = build_config({"lambda": 2.0, "alpha": 0.1, "seeds": [4]})
    assert cfg.train.lam == 2.0 and cfg.train.alpha == 0.1 and cfg.seeds == (4,)
    assert main(["train", "--config", str(config_file), "--lambda", "0.3"]) == 0
    manifest = json.loads((only_run(tmp_path, "train") / "manifest.json").read_text())
    assert manifest["config"]["lam"] == 0.3
    assert manifest["config"]["epochs"] == 8


def test_invalid_config_rejected(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"alpha": -1}))
    assert main(["train", "--config", str(path)]) == 1
    path.write_text(json.dumps({"bogus": 1}))
    assert main(["train", "--config", str(path)]) == 1
