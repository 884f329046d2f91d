import json

import numpy as np
import pytest

from sparse_rl import cli
from sparse_rl.cli import UsageError, parse_grid, parse_seeds
from sparse_rl.harness import read_run_csv


@pytest.fixture(autouse=True)
def out_root(tmp_path, monkeypatch):
    monkeypatch.setenv("SPARSE_RL_OUT", str(tmp_path / "out"))
    return tmp_path


def write_config(tmp_path, **kw):
    doc = dict(
        algo="stream_ac",
        env_id="pendulum",
        method="er",
        sparsity=0.5,
        seed=1,
        total_steps=30,
        eval_every=30,
        eval_episodes=1,
        metrics_every=50,
    )
    doc.update(kw)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return path


# ---------------------------------------------------------------------------
# grid parsing


def test_parse_grid_range_inclusive():
    grid = parse_grid("0.1:0.9:0.1")
    assert grid == pytest.approx([0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])


def test_parse_grid_comma_list_and_ints():
    assert parse_grid("0.0,0.5") == [0.0, 0.5]
    assert parse_grid("1,2", cast=int) == [1, 2]


def test_parse_seeds_forms():
    assert parse_seeds("1..8") == [1, 2, 3, 4, 5, 6, 7, 8]
    assert parse_seeds("3,5") == [3, 5]
    assert parse_seeds("7") == [7]


def test_parse_grid_rejects_garbage():
    with pytest.raises(UsageError):
        parse_grid("0.5:0.1:0.1")
    with pytest.raises(UsageError):
        parse_seeds("one..two")


# ---------------------------------------------------------------------------
# train


def test_train_with_config_and_flag_overrides(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = tmp_path / "run1"
    code = cli.main(
        ["train", "--config", str(cfg), "--sparsity", "0.8", "--seed", "3", "--quiet",
         "--out", str(out)]
    )
    assert code == 0
    assert (out / "run.csv").exists()
    assert (out / "checkpoint.npz").exists()
    assert (out / "config.json").exists()
    log = read_run_csv(out / "run.csv")
    assert log.metadata["sparsity"] == 0.8  # flag beats config file
    assert log.metadata["seed"] == 3
    assert log.values("eval_return")


def test_train_steps_alias(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "run2"
    code = cli.main(["train", "--config", str(cfg), "--steps", "20", "--eval-every", "20",
                     "--quiet", "--out", str(out)])
    assert code == 0
    assert read_run_csv(out / "run.csv").metadata["total_steps"] == 20


def test_train_missing_config_no_partial_outputs(tmp_path, capsys):
    out = tmp_path / "never"
    code = cli.main(["train", "--config", str(tmp_path / "nope.json"), "--out", str(out)])
    assert code == 1
    assert not out.exists()


def test_train_rejects_unknown_flag(tmp_path):
    assert cli.main(["train", "--bogus-flag", "1"]) == 1


def test_train_rejects_invalid_config_values(tmp_path):
    cfg = write_config(tmp_path, sparsity=1.5)
    assert cli.main(["train", "--config", str(cfg), "--quiet"]) == 1


def test_train_is_idempotent_across_directories(tmp_path):
    cfg = write_config(tmp_path, total_steps=20, eval_every=20)
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["train", "--config", str(cfg), "--quiet", "--out", str(out_a)]) == 0
    assert cli.main(["train", "--config", str(cfg), "--quiet", "--out", str(out_b)]) == 0
    assert (out_a / "run.csv").read_bytes() == (out_b / "run.csv").read_bytes()


# ---------------------------------------------------------------------------
# sweep


def test_sweep_grid_counts(tmp_path):
    cfg = write_config(tmp_path, total_steps=15, eval_every=15)
    out = tmp_path / "sweep"
    code = cli.main(
        ["sweep", "--config", str(cfg), "--sparsity", "0.0,0.5", "--width", "1",
         "--seeds", "1..2", "--out", str(out)]
    )
    assert code == 0
    runs = list(out.glob("run_*.csv"))
    assert len(runs) == 4
    summary = (out / "summary.csv").read_text().strip().splitlines()
    assert len(summary) == 1 + 2  # header + one row per setting


def test_sweep_malformed_grid(tmp_path):
    cfg = write_config(tmp_path)
    assert cli.main(["sweep", "--config", str(cfg), "--sparsity", "a:b:c"]) == 1


# ---------------------------------------------------------------------------
# diagnose


def test_diagnose_twice_is_identical(tmp_path):
    cfg = write_config(tmp_path, total_steps=20, eval_every=20)
    out = tmp_path / "run"
    assert cli.main(["train", "--config", str(cfg), "--quiet", "--out", str(out)]) == 0
    d1, d2 = tmp_path / "d1.json", tmp_path / "d2.json"
    assert cli.main(["diagnose", "--checkpoint", str(out / "checkpoint.npz"),
                     "--probes", "16", "--out", str(d1)]) == 0
    assert cli.main(["diagnose", "--checkpoint", str(out / "checkpoint.npz"),
                     "--probes", "16", "--out", str(d2)]) == 0
    assert d1.read_text() == d2.read_text()
    doc = json.loads(d1.read_text())
    assert 0.0 <= doc["measured_sparsity"] < 1.0
    assert doc["srank"] >= 1


def test_diagnose_corrupt_checkpoint(tmp_path):
    bad = tmp_path / "bad.npz"
    bad.write_bytes(b"garbage")
    assert cli.main(["diagnose", "--checkpoint", str(bad)]) == 2


# ---------------------------------------------------------------------------
# export


def test_export_merges_all_rows(tmp_path):
    cfg = write_config(tmp_path, total_steps=15, eval_every=15)
    out = tmp_path / "sweep"
    cli.main(["sweep", "--config", str(cfg), "--sparsity", "0.0,0.5", "--seeds", "1",
              "--out", str(out)])
    assert cli.main(["export", "--run-dir", str(out)]) == 0
    merged = (out / "merged.csv").read_text().strip().splitlines()
    n_rows = sum(
        len(read_run_csv(p).rows) for p in out.glob("run_*.csv")
    )
    assert len(merged) == 1 + n_rows


def test_export_rejects_malformed_csv(tmp_path, capsys):
    run_dir = tmp_path / "runs"
    run_dir.mkdir()
    (run_dir / "run_bad.csv").write_text(
        '# algo="sac"\nstep,metric,value\n5,critic_loss,not_a_number\n'
    )
    code = cli.main(["export", "--run-dir", str(run_dir)])
    assert code == 3
    assert "row 3" in capsys.readouterr().err


def test_export_missing_dir(tmp_path):
    assert cli.main(["export", "--run-dir", str(tmp_path / "missing")]) == 1


# ---------------------------------------------------------------------------
# help


def test_help_exits_zero(capsys):
    assert cli.main(["--help"]) == 0
    for sub in ("train", "sweep", "diagnose", "export"):
        assert cli.main([sub, "--help"]) == 0


def test_train_help_lists_every_config_field(capsys):
    cli.main(["train", "--help"])
    text = capsys.readouterr().out
    for flag in ("--algo", "--env-id", "--width-scale", "--depth-scale", "--sparsity",
                 "--method", "--seed", "--total-steps", "--eval-every", "--eval-episodes",
                 "--metrics-every", "--reset-interval", "--override", "--out"):
        assert flag in text


def test_diagnose_covariance_dump(tmp_path):
    cfg = write_config(tmp_path, total_steps=15, eval_every=15)
    out = tmp_path / "run"
    assert cli.main(["train", "--config", str(cfg), "--quiet", "--out", str(out)]) == 0
    cov_path = tmp_path / "cov.csv"
    assert cli.main(["diagnose", "--checkpoint", str(out / "checkpoint.npz"),
                     "--probes", "12", "--out", str(tmp_path / "d.json"),
                     "--cov-out", str(cov_path)]) == 0
    lines = cov_path.read_text().strip().splitlines()
    k = int(lines[0])
    assert k == 12
    assert len(lines) == 1 + k
