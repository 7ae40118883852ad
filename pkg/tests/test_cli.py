import csv
import json
from pathlib import Path

import numpy as np
import pytest

from ttnet import cli
from ttnet.dataset import read_shard, read_shard_header

SMALL = ["--n-in", "2", "--n-out", "4", "--freq-lo", "100", "--freq-hi", "900", "--freq-step", "400",
         "--n-train", "6", "--n-val", "2", "--n-test", "3", "--seed", "3"]
TINY_NET = ["--j-hidden", "4", "--y-hidden", "4", "--tac-hidden", "6", "--ff-mult", "1", "--batch-size", "4"]


def run(capsys, *argv):
    rc = cli.main([str(a) for a in argv])
    out = capsys.readouterr().out.strip().splitlines()
    return rc, (Path(out[-1]) if out else None)


def manifest(d):
    return json.loads((d / cli.MANIFEST).read_text())


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert cli.main(["gen-data", *SMALL, "--out", str(root)]) == 0
    (d,) = root.iterdir()
    return d


@pytest.fixture(scope="module")
def ckpt_dir(data_dir, tmp_path_factory):
    root = tmp_path_factory.mktemp("train")
    rc = cli.main(["train", "--train-shard", str(data_dir / "train.shard"), "--val-shard", str(data_dir / "val.shard"),
                   *TINY_NET, "--epochs-per-stage", "1", "--out", str(root)])
    assert rc == 0
    (d,) = root.iterdir()
    return d


# ---------------------------------------------------------------- manifests

def test_git_hash_matches_git():
    # `printf 'hello\n' | git hash-object --stdin`
    assert cli.git_hash(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_manifest_round_trip(data_dir):
    doc = manifest(data_dir)
    m = cli.RunManifest.from_dict(doc)
    assert m.run_id == doc["run_id"] and data_dir.name == f"gen-data-{m.run_id[:12]}"
    assert set(doc["outputs"]) == {"train.shard", "val.shard", "test.shard", "dataset_config.json"}
    assert doc["seeds"] == {"dataset": 3}
    for name, h in doc["outputs"].items():
        assert cli.hash_path(data_dir / name) == h


# ---------------------------------------------------------------- gen-data

def test_gen_data_default_regime(tmp_path, capsys):
    rc, d = run(capsys, "gen-data", "--count", 1, "--splits", "test", "--out", tmp_path)
    assert rc == 0
    header, _ = read_shard_header(d / "test.shard")
    cfg = header["config"]
    assert (cfg["n_in"], cfg["n_out"]) == (4, 8)
    exs, dcfg = read_shard(d / "test.shard")
    assert dcfg.k_bins == 30 and exs[0].inputs.shape[1:] == (30, 25) and exs[0].target.shape == (30, 81)


def test_gen_data_count_zero(tmp_path, capsys):
    rc, d = run(capsys, "gen-data", *SMALL, "--count", 0, "--out", tmp_path)
    assert rc == 0
    for split in ("train", "val", "test"):
        assert read_shard(d / f"{split}.shard")[0] == []


def test_gen_data_config_file_and_flags(tmp_path, capsys):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"n_in": 1, "n_out": 2, "freq_lo": 200.0, "freq_hi": 200.0, "n_train": 2}))
    rc, d = run(capsys, "gen-data", "--config", path, "--n-out", 3, "--splits", "train", "--out", tmp_path / "r")
    assert rc == 0
    cfg = json.loads((d / "dataset_config.json").read_text())
    assert (cfg["n_in"], cfg["n_out"]) == (1, 3)
    assert "config" in manifest(d)["inputs"]


def test_gen_data_bad_config(tmp_path, capsys):
    assert run(capsys, "gen-data", "--q-lo", 2, "--out", tmp_path)[0] == cli.EXIT_CONFIG
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"bogus": 1}))
    assert run(capsys, "gen-data", "--config", path, "--out", tmp_path)[0] == cli.EXIT_CONFIG


def test_gen_data_unwritable(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run(capsys, "gen-data", *SMALL, "--count", 0, "--out", blocker / "sub")[0] == cli.EXIT_IO


# ---------------------------------------------------------------- lsm

def test_lsm_noise_free_exact(tmp_path, capsys):
    # plane waves are not band-limited; orders above n_out leak into the locals
    # in proportion to kd, so exact recovery needs small kd
    rc, d = run(capsys, "gen-data", "--noise-free", "--n-in", 2, "--n-out", 4, "--freq-lo", 20, "--freq-hi", 60,
                "--freq-step", 20, "--dist-hi", 0.3, "--q-lo", 8, "--q-hi", 8, "--count", 5, "--splits", "test",
                "--out", tmp_path)
    assert rc == 0
    rc, out = run(capsys, "lsm", "--shard", d / "test.shard", "--lam", 0, "--out", tmp_path)
    assert rc == 0
    (summary,) = json.loads((out / "report.json").read_text())
    assert summary["coss"] >= 0.999


def test_lsm_lambda_sweep(data_dir, tmp_path, capsys):
    rc, out = run(capsys, "lsm", "--shard", data_dir / "test.shard", "--lam", "0,1e-3,1e-1", "--out", tmp_path)
    assert rc == 0
    summary = json.loads((out / "report.json").read_text())
    assert [s["sweep_value"] for s in summary] == [0, 0.001, 0.1]
    rows = list(csv.DictReader((out / "cond.csv").open()))
    assert len(rows) == 3 * 3 * 3  # lambdas x items x frequencies
    assert all(float(r["cond"]) >= 1 for r in rows)
    est = np.load(out / "estimates.npy")
    assert est.shape == (3, 3, 3, 25)


def test_lsm_dimension_mismatch(data_dir, tmp_path, capsys):
    assert run(capsys, "lsm", "--shard", data_dir / "test.shard", "--n-local", 3, "--out", tmp_path)[0] == 2
    assert run(capsys, "lsm", "--shard", data_dir / "test.shard", "--n-global", 5, "--out", tmp_path)[0] == 2


def test_lsm_corrupt_shard(data_dir, tmp_path, capsys):
    bad = tmp_path / "bad.shard"
    raw = bytearray((data_dir / "test.shard").read_bytes())
    raw[-3] ^= 0xFF
    bad.write_bytes(bytes(raw))
    assert run(capsys, "lsm", "--shard", bad, "--out", tmp_path)[0] == cli.EXIT_IO
    assert run(capsys, "lsm", "--shard", tmp_path / "missing.shard", "--out", tmp_path)[0] == cli.EXIT_IO


# ---------------------------------------------------------------- train

def test_train_outputs(ckpt_dir):
    doc = json.loads((ckpt_dir / "checkpoint.json").read_text())
    assert doc["model_config"]["layers"] == [[2, 3], [3, 4], [4, 4]]
    rows = list(csv.DictReader((ckpt_dir / "curve.csv").open()))
    stages = [int(r["q_stage"]) for r in rows if r["split"] == "train"]
    assert stages == sorted(stages, reverse=True) and len(set(stages)) > 1
    assert manifest(ckpt_dir)["config"]["train"]["curriculum"] == "lrg2sml"


def test_train_layers_flag_gives_single_upscale(tmp_path, capsys):
    rc, d = run(capsys, "gen-data", "--count", 2, "--splits", "train", "--freq-lo", 100, "--freq-hi", 200,
                "--out", tmp_path)
    assert rc == 0
    rc, t = run(capsys, "train", "--train-shard", d / "train.shard", "--layers", 1, *TINY_NET, "--max-epochs", 1,
                "--out", tmp_path)
    assert rc == 0
    doc = json.loads((t / "checkpoint.json").read_text())
    assert doc["model_config"]["layers"] == [[4, 8], [8, 8]]


def test_train_resume_identical(data_dir, tmp_path, capsys):
    argv = ["train", "--train-shard", data_dir / "train.shard", *TINY_NET, "--epochs-per-stage", 2, "--seed", 4]
    rc, full = run(capsys, *argv, "--out", tmp_path / "a")
    assert rc == 0
    rc, part = run(capsys, *argv, "--stop-after", 3, "--out", tmp_path / "b")
    assert rc == 0 and len(list(csv.reader((part / "curve.csv").open()))) == 4
    rc, rest = run(capsys, *argv, "--resume", "--out", tmp_path / "b")
    assert rc == 0 and rest == part
    assert (rest / "curve.csv").read_bytes() == (full / "curve.csv").read_bytes()
    assert manifest(rest)["outputs"] == manifest(full)["outputs"]


def test_numerical_failure_exit_code(data_dir, tmp_path, capsys, monkeypatch):
    def boom(args):
        raise FloatingPointError("non-finite loss")

    monkeypatch.setattr(cli, "cmd_train", boom)
    assert run(capsys, "train", "--train-shard", data_dir / "train.shard", "--out", tmp_path)[0] == cli.EXIT_NUMERIC


# ---------------------------------------------------------------- eval

def _summary(d):
    return json.loads((d / "report.json").read_text())


def test_eval_snr_sweep_groups(data_dir, ckpt_dir, tmp_path, capsys):
    rc, d = run(capsys, "eval", "--shard", data_dir / "test.shard", "--lsm", "--checkpoint", ckpt_dir,
                "--sweep", "snr", "10,20,30", "--out", tmp_path)
    assert rc == 0
    summary = _summary(d)
    for method in ("lsm", "ttnet"):
        assert [s["sweep_value"] for s in summary if s["method"] == method] == [10, 20, 30]
    rows = list(csv.reader((d / "report.csv").open()))
    assert len(rows) == 1 + 2 * 3 * (3 + 1)


def test_eval_q_sweep_beyond_training(data_dir, tmp_path, capsys):
    rc, d = run(capsys, "eval", "--shard", data_dir / "test.shard", "--lsm", "--sweep", "q", "4,7,10,13",
                "--no-sdr", "--out", tmp_path)
    assert rc == 0
    assert [s["sweep_value"] for s in _summary(d)] == [4, 7, 10, 13]
    rows = list(csv.DictReader((d / "cond.csv").open()))
    assert {r["label"] for r in rows} == {"4", "7", "10", "13"}


@pytest.mark.parametrize("axis,values", [("distance", "0.5,1.5"), ("sources", "1,4")])
def test_eval_other_sweeps(data_dir, tmp_path, capsys, axis, values):
    rc, d = run(capsys, "eval", "--shard", data_dir / "test.shard", "--lsm", "--sweep", axis, values,
                "--no-sdr", "--out", tmp_path)
    assert rc == 0 and len(_summary(d)) == 2


def test_eval_ideal_is_perfect(data_dir, tmp_path, capsys):
    rc, d = run(capsys, "eval", "--shard", data_dir / "test.shard", "--ideal", "--out", tmp_path)
    assert rc == 0
    (s,) = _summary(d)
    assert s["edm"] == 0 and s["coss"] == pytest.approx(1.0) and s["sdr_db"] == 300.0


def test_eval_rejects_incompatible_checkpoint(ckpt_dir, tmp_path, capsys):
    rc, d = run(capsys, "gen-data", "--n-in", 1, "--n-out", 4, "--freq-lo", 100, "--freq-hi", 900, "--freq-step", 400,
                "--count", 1, "--splits", "test", "--out", tmp_path)
    assert rc == 0
    assert run(capsys, "eval", "--shard", d / "test.shard", "--checkpoint", ckpt_dir, "--out", tmp_path)[0] == 2


def test_eval_bad_sweep(data_dir, tmp_path, capsys):
    assert run(capsys, "eval", "--shard", data_dir / "test.shard", "--lsm", "--sweep", "angle", "1",
               "--out", tmp_path)[0] == 2
    assert run(capsys, "eval", "--shard", data_dir / "test.shard", "--out", tmp_path)[0] == 2


# ---------------------------------------------------------------- render

def test_render_grid_size(tmp_path, capsys):
    rc, d = run(capsys, "gen-data", "--count", 1, "--splits", "test", "--freq-lo", 100, "--freq-hi", 1800,
                "--out", tmp_path)
    assert rc == 0
    rc, r = run(capsys, "render", "--shard", d / "test.shard", "--freq", 1000, "--extent", 2.0, "--step", 0.02,
                "--methods", "ideal", "--out", tmp_path)
    assert rc == 0
    rows = list(csv.reader((r / "grid_ideal_1000Hz.csv").open()))
    assert rows[0] == ["x", "y", "re", "im"] and len(rows) == 1 + 101 * 101


def test_render_off_grid_frequency(tmp_path, capsys):
    rc, d = run(capsys, "gen-data", "--count", 1, "--splits", "test", "--freq-lo", 100, "--freq-hi", 1800,
                "--out", tmp_path)
    rc = cli.main(["render", "--shard", str(d / "test.shard"), "--freq", "1750", "--out", str(tmp_path)])
    assert rc == cli.EXIT_CONFIG
    assert "frequency not on grid" in capsys.readouterr().err


def test_render_triple(data_dir, ckpt_dir, tmp_path, capsys):
    rc, r = run(capsys, "render", "--shard", data_dir / "test.shard", "--freq", 500, "--freq", 900,
                "--checkpoint", ckpt_dir, "--extent", 1.0, "--step", 0.1, "--out", tmp_path)
    assert rc == 0
    names = {p.name for p in r.glob("grid_*.csv")}
    assert names == {f"grid_{m}_{f}Hz.csv" for m in ("ideal", "lsm", "ttnet") for f in (500, 900)}


# ---------------------------------------------------------------- reproducibility

def test_gen_data_rerun_identical(tmp_path, capsys):
    _, a = run(capsys, "gen-data", *SMALL, "--out", tmp_path / "a")
    _, b = run(capsys, "gen-data", *SMALL, "--out", tmp_path / "b")
    assert a.name == b.name and manifest(a)["outputs"] == manifest(b)["outputs"]


def test_verify_replays_every_subcommand(data_dir, ckpt_dir, tmp_path, capsys):
    runs = [data_dir, ckpt_dir]
    for argv in (["lsm", "--shard", data_dir / "test.shard", "--lam", "0,1e-2"],
                 ["eval", "--shard", data_dir / "test.shard", "--lsm", "--checkpoint", ckpt_dir, "--sweep", "q", "4,13"],
                 ["render", "--shard", data_dir / "test.shard", "--freq", 500, "--checkpoint", ckpt_dir,
                  "--step", 0.1]):
        rc, d = run(capsys, *argv, "--out", tmp_path / "first")
        assert rc == 0
        runs.append(d)
    for d in runs:
        rc = cli.main(["verify", str(d / cli.MANIFEST), "--out", str(tmp_path / "replay")])
        assert rc == cli.EXIT_OK, d.name
        again = tmp_path / "replay" / d.name
        assert manifest(again)["outputs"] == manifest(d)["outputs"]


def test_verify_detects_mismatch(data_dir, tmp_path, capsys):
    rc, d = run(capsys, "lsm", "--shard", data_dir / "test.shard", "--out", tmp_path / "a")
    doc = manifest(d)
    doc["outputs"]["report.csv"] = "0" * 40
    (d / cli.MANIFEST).write_text(json.dumps(doc))
    assert cli.main(["verify", str(d / cli.MANIFEST), "--out", str(tmp_path / "b")]) == cli.EXIT_MISMATCH


def test_verify_rejects_changed_input(data_dir, tmp_path, capsys):
    shard = tmp_path / "copy.shard"
    shard.write_bytes((data_dir / "test.shard").read_bytes())
    rc, d = run(capsys, "lsm", "--shard", shard, "--out", tmp_path / "a")
    assert rc == 0
    shard.write_bytes((data_dir / "val.shard").read_bytes())
    assert cli.main(["verify", str(d / cli.MANIFEST), "--out", str(tmp_path / "b")]) == cli.EXIT_CONFIG
