import json

import pytest

from prefdiff.cli import main
from prefdiff.config import RunConfig, serialize_config

from conftest import TINY


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, [json.loads(line) for line in out.splitlines() if line.startswith("{")], err


def tiny_flags():
    flags = []
    for k, v in TINY.items():
        flags += ["--" + k.replace("_", "-"), v]
    return flags


def test_gen_data_is_byte_identical_and_inspectable(tmp_path, capsys):
    a, b = tmp_path / "a.campds", tmp_path / "b.campds"
    for path in (a, b):
        code, _, _ = run(capsys, "gen-data", "--tasks", 3, "--seed", 7, "--episodes-per-task", 3,
                         "--pairs-per-task", 10, "--out", path)
        assert code == 0
    assert a.read_bytes() == b.read_bytes()
    code, (head,), _ = run(capsys, "inspect", a)
    assert code == 0 and head["m"] == 3 and head["h"] == 16 and head["seed"] == 7
    assert head["pair_count"] == 30 and head["segment_count"] == 3 * 3 * 2


def test_unknown_config_key_is_usage_error(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("zeta_typo = 0.2\n")
    code, _, err = run(capsys, "train", "--config", cfg)
    assert code == 2 and "zeta_typo" in err
    assert err.startswith("prefdiff: error[usage]:") and len(err.strip().splitlines()) == 1


@pytest.mark.parametrize("argv", [
    ["train", "--bogus-flag"],
    ["train"],                               # no dataset configured
    ["eval", "--checkpoint", "missing.campckpt"],
    ["frobnicate"],
    ["gen-data", "--out", "x", "--k", "0"],
])
def test_usage_errors_exit_2(tmp_path, capsys, argv, monkeypatch):
    monkeypatch.chdir(tmp_path)
    code, _, err = run(capsys, *argv)
    assert code == 2 and "error[usage]" in err


def test_corrupt_file_is_runtime_error(tmp_path, capsys):
    bad = tmp_path / "bad.campckpt"
    bad.write_bytes(b"CAMPCKPT" + b"\xff" * 20)
    code, _, err = run(capsys, "inspect", bad)
    assert code == 1 and "error[runtime]" in err


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "gen-data" in capsys.readouterr().out
    assert main(["train", "--help"]) == 0
    text = capsys.readouterr().out
    assert "--guidance" in text and "--config" in text


def test_flags_override_config_file(tmp_path, capsys):
    data = tmp_path / "d.campds"
    run(capsys, "gen-data", *tiny_flags(), "--out", data)
    cfg = tmp_path / "c.cfg"
    cfg.write_text(serialize_config(RunConfig(**TINY, seed=3, zeta=0.5)))
    run_dir = tmp_path / "run"
    code, _, _ = run(capsys, "train", "--config", cfg, "--zeta", 0.0, "--dataset", data, "--run-dir", run_dir)
    assert code == 0
    snap = (run_dir / "config.cfg").read_text()
    assert "zeta = 0.0" in snap and "seed = 3" in snap


def test_full_command_chain(tmp_path, capsys):
    data = tmp_path / "d.campds"
    run_dir = tmp_path / "run"
    assert run(capsys, "gen-data", *tiny_flags(), "--out", data)[0] == 0
    code, (res,), _ = run(capsys, "train", *tiny_flags(), "--dataset", data, "--run-dir", run_dir)
    assert code == 0 and res["steps"] == 4
    ckpt = run_dir / "checkpoints" / "final.campckpt"
    code, rows, _ = run(capsys, "eval", "--checkpoint", ckpt, "--episodes", 2, "--baselines")
    assert code == 0 and [r["task"] for r in rows] == [0, 1] and "expert_success" in rows[0]
    code, rows, _ = run(capsys, "eval", "--checkpoint", ckpt, "--task", 0, "--cond-task", 1, "--episodes", 2)
    assert rows[0]["cond_task"] == 1
    assert run(capsys, "eval", "--checkpoint", ckpt, "--task", 9)[0] == 2
    code, (al,), _ = run(capsys, "align", "--checkpoint", ckpt, "--coefficients", "0,1", "--episodes", 2,
                         "--out", tmp_path / "al.csv", "--plot", tmp_path / "al.svg")
    assert code == 0 and len(al["mean_returns"]) == 2 and (tmp_path / "al.svg").is_file()
    assert run(capsys, "align", "--checkpoint", ckpt, "--coefficients", "1")[0] == 2
    code, (rep,), _ = run(capsys, "embed-report", "--checkpoint", ckpt, "--data", data, "--out-dir", tmp_path / "e")
    assert code == 0 and (tmp_path / "e" / "embedding_pca.svg").is_file()
    code, rows, _ = run(capsys, "ablate", *tiny_flags(), "--dataset", data, "--param", "w_dim", "--values", "2,4",
                        "--out", tmp_path / "ab.csv")
    assert code == 0 and [r["value"] for r in rows] == [2, 4]
    assert run(capsys, "ablate", "--dataset", data, "--param", "nope", "--values", "1", "--out", "x")[0] == 2
    for path in [data, ckpt, run_dir / "config.cfg", run_dir / "metrics.csv", tmp_path / "ab.csv",
                 tmp_path / "al.csv", tmp_path / "e" / "embedding_pca.csv"]:
        code, (info,), _ = run(capsys, "inspect", path)
        assert code == 0, path
