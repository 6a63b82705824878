import csv
import json

import numpy as np
import pytest

from egwalign import load_csv
from egwalign.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr().out
    return code, out


def run_json(capsys, *argv):
    code, out = run(capsys, *argv)
    return code, json.loads(out)


def gen_pair(tmp_path, capsys, n=1, d=1, seeds=(7, 8)):
    paths = []
    for tag, seed in zip("xy", seeds):
        p = tmp_path / f"{tag}.csv"
        code, _ = run(
            capsys, "gen", "--d", str(d), "--n", str(n), "--seed", str(seed),
            "--out", str(p),
        )
        assert code == 0
        paths.append(str(p))
    return paths


def test_gen_writes_csv_and_meta(tmp_path, capsys):
    out = tmp_path / "cloud.csv"
    code, meta = run_json(
        capsys, "gen", "--dist", "uniform-cube", "--d", "3", "--n", "10",
        "--seed", "5", "--out", str(out),
    )
    assert code == 0
    pts = load_csv(out)
    assert pts.n == 10 and pts.d == 3
    assert np.abs(pts.points).max() <= 1.0 / np.sqrt(3.0)
    assert meta["schema"] == 1 and meta["dist"] == "uniform-cube"
    assert meta["d"] == 3 and meta["n"] == 10 and meta["seed"] == 5
    assert (tmp_path / "cloud.csv.meta.json").exists()


def test_gen_rerun_byte_identical(tmp_path, capsys):
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    for p in (a, b):
        code, _ = run(capsys, "gen", "--d", "2", "--n", "6", "--seed", "9",
                      "--out", str(p))
        assert code == 0
    assert a.read_bytes() == b.read_bytes()


def test_gen_gaussian_cov_meta_has_factor(tmp_path, capsys):
    out = tmp_path / "g.csv"
    code, meta = run_json(
        capsys, "gen", "--dist", "gaussian-cov", "--d", "2", "--n", "5",
        "--out", str(out),
    )
    assert code == 0
    factor = np.asarray(meta["cov_factor"])
    assert factor.shape == (2, 2)


def test_gen_rejects_bad_dims(tmp_path, capsys):
    code, _ = run(capsys, "gen", "--d", "0", "--n", "4",
                  "--out", str(tmp_path / "z.csv"))
    assert code == 2
    code, _ = run(capsys, "gen", "--d", "2", "--n", "0",
                  "--out", str(tmp_path / "z.csv"))
    assert code == 2
    code, _ = run(capsys, "gen", "--dist", "nope", "--d", "2", "--n", "4",
                  "--out", str(tmp_path / "z.csv"))
    assert code == 2


def test_estimate_single_point_zero(tmp_path, capsys):
    x, y = gen_pair(tmp_path, capsys, n=1)
    code, rep = run_json(
        capsys, "estimate", "--x", x, "--y", y, "--out", str(tmp_path / "e"),
    )
    assert code == 0
    assert rep["total"] == 0.0
    assert rep["kind"] == "quadratic" and rep["n"] == 1
    assert (tmp_path / "e.json").exists()


def test_estimate_rerun_identical_json(tmp_path, capsys):
    x, y = gen_pair(tmp_path, capsys, n=6, d=2)
    argv = ["estimate", "--x", x, "--y", y, "--epochs", "3", "--max-outer", "4",
            "--grad-tol", "1e-12", "--out", str(tmp_path / "e")]
    code1, out1 = run(capsys, *argv)
    code2, out2 = run(capsys, *argv)
    assert code1 == code2 == 0
    assert out1 == out2


def test_estimate_inner_kind_shape(tmp_path, capsys):
    x, y = gen_pair(tmp_path, capsys, n=4)
    code, rep = run_json(
        capsys, "estimate", "--x", x, "--y", y, "--kind", "inner",
        "--epochs", "2", "--max-outer", "3", "--out", str(tmp_path / "e"),
    )
    assert code == 0
    assert rep["kind"] == "inner_product"
    assert np.asarray(rep["a_star"]).shape == (1, 1)


def test_estimate_export_coupling(tmp_path, capsys):
    x, y = gen_pair(tmp_path, capsys, n=3)
    code, rep = run_json(
        capsys, "estimate", "--x", x, "--y", y, "--epochs", "2",
        "--max-outer", "2", "--export-coupling", "--out", str(tmp_path / "e"),
    )
    assert code == 0
    pi = load_csv(tmp_path / rep["exports"]["coupling"])
    np.testing.assert_allclose(pi.points.sum(axis=0), 1.0 / 3.0, atol=1e-12)


def test_nondeterministic_adds_elapsed(tmp_path, capsys):
    x, y = gen_pair(tmp_path, capsys, n=1)
    code, rep = run_json(
        capsys, "estimate", "--no-deterministic", "--x", x, "--y", y,
        "--out", str(tmp_path / "e"),
    )
    assert code == 0
    assert rep["elapsed_seconds"] >= 0.0


def test_rate_stub_slope(tmp_path, capsys):
    code, rep = run_json(
        capsys, "rate", "--stub-slope", "--n-grid", "64,256,1024",
        "--runs", "2", "--out", str(tmp_path / "r"),
    )
    assert code == 0
    assert abs(rep["slope"] - (-0.5)) < 1e-12
    assert abs(rep["r2"] - 1.0) < 1e-12
    with (tmp_path / "r.summary.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert set(rows[0]) == {"n", "mean_error", "std_error"}
    assert all(float(r["std_error"]) == 0.0 for r in rows)


def test_rate_single_run_drops_variance_column(tmp_path, capsys):
    code, _ = run_json(
        capsys, "rate", "--stub-slope", "--n-grid", "8,16,32",
        "--runs", "1", "--out", str(tmp_path / "r"),
    )
    assert code == 0
    with (tmp_path / "r.summary.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert set(rows[0]) == {"n", "mean_error"}


def test_rate_raw_and_summary_consistent(tmp_path, capsys):
    code, rep = run_json(
        capsys, "rate", "--stub-slope", "--n-grid", "16,64,256",
        "--runs", "3", "--out", str(tmp_path / "r"),
    )
    assert code == 0
    with (tmp_path / "r.raw.csv").open() as fh:
        raw = list(csv.DictReader(fh))
    assert len(raw) == 9
    for k, n in enumerate(rep["n_grid"]):
        per = [float(r["rel_error"]) for r in raw if int(r["n"]) == n]
        assert abs(sum(per) / len(per) - rep["mean_errors"][k]) < 1e-15


def test_rate_real_threads_match_serial(tmp_path, capsys):
    argv = ["rate", "--d", "1", "--n-grid", "4,8,16", "--runs", "2",
            "--epochs", "3", "--max-outer", "3", "--ref-runs", "1",
            "--ref-epochs-factor", "1"]
    code1, rep1 = run_json(capsys, *argv, "--threads", "1",
                           "--out", str(tmp_path / "r1"))
    code2, rep2 = run_json(capsys, *argv, "--threads", "2",
                           "--out", str(tmp_path / "r2"))
    assert code1 == code2 == 0
    assert rep1["mean_errors"] == rep2["mean_errors"]
    assert rep1["slope"] == rep2["slope"]
    assert rep1["stub"] is False


def test_rate_needs_three_grid_points(tmp_path, capsys):
    code, _ = run(capsys, "rate", "--stub-slope", "--n-grid", "8,16",
                  "--out", str(tmp_path / "r"))
    assert code == 2


def test_env_threads_bad_value(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("EGW_THREADS", "many")
    code, _ = run(capsys, "rate", "--stub-slope", "--n-grid", "8,16,32",
                  "--out", str(tmp_path / "r"))
    assert code == 2


def test_env_threads_used_when_flag_absent(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("EGW_THREADS", "2")
    argv = ["rate", "--d", "1", "--n-grid", "4,8,16", "--runs", "1",
            "--epochs", "2", "--max-outer", "2", "--ref-runs", "1",
            "--ref-epochs-factor", "1"]
    code, rep = run_json(capsys, *argv, "--out", str(tmp_path / "r"))
    assert code == 0
    assert len(rep["mean_errors"]) == 3


def test_config_merge_precedence(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"eps": 1.0, "epochs": 2, "max_outer": 2}))
    x, y = gen_pair(tmp_path, capsys, n=2)
    base = ["estimate", "--x", x, "--y", y, "--config", str(cfg),
            "--out", str(tmp_path / "e")]
    code, rep = run_json(capsys, *base)
    assert code == 0 and rep["eps"] == 1.0
    code, rep = run_json(capsys, *base, "--eps", "2.0")
    assert code == 0 and rep["eps"] == 2.0


def test_config_unknown_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"epsilon": 1.0}))
    x, y = gen_pair(tmp_path, capsys, n=2)
    code, _ = run(capsys, "estimate", "--x", x, "--y", y, "--config", str(cfg),
                  "--out", str(tmp_path / "e"))
    assert code == 2


def test_oracle_compare_small_instance(tmp_path, capsys):
    code, rep = run_json(
        capsys, "oracle-compare", "--n", "8", "--eps", "1.0", "--seed", "3",
        "--epochs", "200", "--rate", "0.02", "--max-outer", "40",
        "--grid-points", "201", "--out", str(tmp_path / "o"),
    )
    assert code == 0
    assert rep["pass"] is True
    assert rep["restricted_sup"]["margin"] <= 1e-8
    assert rep["relative_gap"] < 0.02


def test_invariance_identity_rotation_zero_gap(tmp_path, capsys):
    code, rep = run_json(
        capsys, "invariance", "--identity-rotation", "--d", "2",
        "--n-grid", "8,16", "--runs", "1", "--epochs", "3", "--max-outer", "3",
        "--out", str(tmp_path / "i"),
    )
    assert code == 0
    assert rep["kind"] == "inner_product"
    assert rep["mean_gaps"] == [0.0, 0.0]


def test_invariance_real_rotation_small_gap(tmp_path, capsys):
    code, rep = run_json(
        capsys, "invariance", "--d", "1", "--n-grid", "16,32", "--runs", "1",
        "--epochs", "40", "--max-outer", "15", "--out", str(tmp_path / "i"),
    )
    assert code == 0
    # d=1 rotations are sign flips, an exact invariance of the objective
    assert max(rep["mean_gaps"]) < 1e-2


def test_out_dir_prefix(tmp_path, capsys):
    code, _ = run_json(
        capsys, "rate", "--stub-slope", "--n-grid", "8,16,32",
        "--out-dir", str(tmp_path / "sub"), "--out", "r",
    )
    assert code == 0
    assert (tmp_path / "sub" / "r.slope.json").exists()


def test_missing_subcommand_exits_two(capsys):
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2
