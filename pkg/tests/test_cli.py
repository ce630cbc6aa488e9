import json
import subprocess
import sys

import pytest

from qffl.cli import main

CONFIG = """
[synthetic]
num_devices = 8
size_max = 150
seed = 2

[solver]
eta = 0.01
L = 100.0
scale_delta_by_L = true
devices_per_round = 3
max_rounds = 5

[sweep]
q_grid = [0, 1]
seeds = [0, 1]

[efficiency]
modes = ["noniid", "iid"]
rounds = 4
"""


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "exp.toml"
    p.write_text(CONFIG)
    return str(p)


@pytest.fixture
def manifest(tmp_path, cfg):
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "data")]) == 0
    return str(tmp_path / "data" / "manifest.json")


def test_train_and_report(tmp_path, cfg, manifest, capsys):
    for seed in (0, 1):
        out = tmp_path / f"run{seed}.json"
        assert main(["train", "--config", cfg, "--data", manifest, "--q", "1", "--seed", str(seed),
                     "--out", str(out)]) == 0
        assert json.loads(out.read_text())["config"]["q"] == 1.0
    capsys.readouterr()
    hist = tmp_path / "hist.csv"
    assert main(["report", str(tmp_path / "run0.json"), str(tmp_path / "run1.json"),
                 "--histogram", str(hist)]) == 0
    assert "n=2" in capsys.readouterr().out
    assert hist.read_text().startswith("bin_lo,bin_hi,count\n")


def test_sweep_outputs(tmp_path, cfg, manifest, capsys):
    out = tmp_path / "sw"
    assert main(["sweep", "--config", cfg, "--data", manifest, "--out", str(out)]) == 0
    assert capsys.readouterr().out.strip().splitlines()[-1].startswith("selected_q=")
    assert {p.name for p in out.iterdir()} == {"sweep.json", "summary.csv", "summary_train.csv", "histograms"}
    assert len(list((out / "histograms").iterdir())) == 4
    assert main(["report", str(out / "sweep.json")]) == 0


def test_efficiency_outputs(tmp_path, cfg):
    out = tmp_path / "eff"
    assert main(["efficiency", "--config", cfg, "--out", str(out)]) == 0
    lines = (out / "curves.csv").read_text().splitlines()
    assert lines[0] == "dataset,solver,round,objective,worst_test_acc"
    assert len(lines) == 1 + 2 * 2 * 4


def _snapshot(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_rerun_byte_identical(tmp_path, cfg):
    snaps = []
    for k in range(2):
        base = tmp_path / f"r{k}"
        assert main(["generate", "--config", cfg, "--out", str(base / "data")]) == 0
        m = str(base / "data" / "manifest.json")
        assert main(["train", "--config", cfg, "--data", m, "--out", str(base / "run.json")]) == 0
        assert main(["sweep", "--config", cfg, "--data", m, "--out", str(base / "sweep")]) == 0
        snaps.append(_snapshot(base))
    assert snaps[0] == snaps[1]


@pytest.mark.parametrize("argv,msg", [
    (["train", "--algorithm", "bogus"], "unknown algorithm"),
    (["train"], "--data is required"),
    (["report"], "at least one"),
    (["report", "/no/such.json"], "file not found"),
])
def test_usage_errors(argv, msg, capsys, manifest):
    if argv[0] == "train" and len(argv) > 1:
        argv = argv + ["--data", manifest]
    assert main(argv) == 2
    assert msg in capsys.readouterr().err


def test_bad_config(tmp_path, capsys):
    p = tmp_path / "bad.toml"
    p.write_text("[solver]\nlearning_rate = 1\n")
    assert main(["generate", "--config", str(p)]) == 2
    assert "unknown key(s) in [solver]: learning_rate" in capsys.readouterr().err
    p.write_text("[nope]\n")
    assert main(["generate", "--config", str(p)]) == 2
    p.write_text("[solver\n")
    assert main(["generate", "--config", str(p)]) == 2
    p.write_text("[synthetic]\nmode = 'ring'\n")
    assert main(["generate", "--config", str(p)]) == 2


def test_report_rejects_mixed_datasets(tmp_path, cfg, manifest, capsys):
    a = tmp_path / "a.json"
    main(["train", "--config", cfg, "--data", manifest, "--out", str(a)])
    main(["generate", "--config", cfg, "--seed", "9", "--out", str(tmp_path / "other")])
    b = tmp_path / "b.json"
    main(["train", "--config", cfg, "--data", str(tmp_path / "other" / "manifest.json"), "--out", str(b)])
    capsys.readouterr()
    assert main(["report", str(a), str(b)]) == 2
    assert "different" in capsys.readouterr().err
    (tmp_path / "junk.json").write_text('{"x": }')
    assert main(["report", str(tmp_path / "junk.json")]) == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "qffl", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "generate" in res.stdout
