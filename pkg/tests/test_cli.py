import json

import numpy as np
import pytest

from mtsh import cli
from mtsh.config import load_config
from mtsh.harness import load_data
from mtsh.metrics import MetricsReport, success_rate_curve
from mtsh.trainer import evaluate, load_checkpoint

TINY = """
[experiment]
max_steps = 3
[dataset]
n_train = 8
n_test = 4
n_subjects = 4
[model]
num_stacks = 2
features = 8
depth = 2
resolution = 16
input_resolution = 64
[train]
batch_size = 4
"""


@pytest.fixture
def ini(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY)
    return str(p)


def test_train_writes_task_conditional_report(ini, tmp_path):
    out = tmp_path / "a"
    assert cli.run(["train", "--tasks", "2d", "--config", ini, "--out", str(out)]) == 0
    rep = MetricsReport.from_json((out / "2d" / "report.json").read_text())
    assert list(rep.sections) == ["2d"]
    assert cli.run(["train", "--tasks", "2d+seg+depth", "--config", ini, "--out", str(out)]) == 0
    rep = MetricsReport.from_csv((out / "2d+seg+depth" / "report.csv").read_text())
    assert set(rep.sections) == {"2d", "seg", "depth"}
    log = (out / "2d" / "train_log.csv").read_text().splitlines()
    assert log[0] == "step, epoch, stack, task, loss, wallclock_ms" and len(log) == 1 + 3 * 2


def test_rerun_is_byte_identical(ini, tmp_path):
    out = tmp_path / "r"
    files = ("report.csv", "report.json", "frame_errors.csv", "checkpoint.pt", "config.ini", "run.json")
    assert cli.run(["train", "--tasks", "seg+3d", "--config", ini, "--out", str(out), "--seed", "5"]) == 0
    first = {f: (out / "seg+3d" / f).read_bytes() for f in files}
    assert cli.run(["train", "--tasks", "seg+3d", "--config", ini, "--out", str(out), "--seed", "5"]) == 0
    assert all((out / "seg+3d" / f).read_bytes() == first[f] for f in files)


def test_desk_preset_plumbing(tmp_path):
    out = tmp_path / "desk"
    code = cli.run(["train", "--tasks", "2d", "--dataset", "synthetic", "--preset", "desk", "--max-steps", "1", "--out", str(out)])
    assert code == 0
    rep = MetricsReport.from_json((out / "2d" / "report.json").read_text())
    assert list(rep.sections) == ["2d"] and rep.n_samples == 100


def test_sweep_curves_improve_evaluate(ini, tmp_path):
    out = tmp_path / "sw"
    assert cli.run(["sweep", "--tasks", "seg, 2d+seg, 2d+seg+depth", "--config", ini, "--out", str(out)]) == 0
    table = json.loads((out / "table_seg.json").read_text())
    assert table["columns"] == ["seg", "2d+seg", "2d+seg+depth"]
    assert len(table["rows"]) == 16
    assert not (out / "table_2d.json").exists()
    summary = json.loads((out / "sweep.json").read_text())
    assert len(summary["runs"]) == 3 and len({r["config_hash"] for r in summary["runs"]}) == 3

    assert cli.run(["curves", "--baseline", str(out / "seg"), "--candidate", str(out / "2d+seg+depth"),
                    "--part", "Head", "--config", ini, "--out", str(tmp_path / "cv")]) == 0
    stored = np.loadtxt(tmp_path / "cv" / "curve_seg_baseline.csv", delimiter=",", skiprows=1)

    # Recompute the same curve from raw predictions of the stored checkpoint.
    cfg = load_config(ini)
    state = load_checkpoint(out / "seg" / "checkpoint.pt", restore_rng=False)
    rep = evaluate(state.model, load_data(cfg)[1])
    assert np.array_equal(stored[:, 1], success_rate_curve(rep.frame_errors["seg"]["overall"], stored[:, 0]))

    assert cli.run(["improve", "--baseline", str(out / "seg"), "--candidate", str(out / "seg"), "--out", str(tmp_path / "im")]) == 0
    doc = json.loads((tmp_path / "im" / "improvement.json").read_text())
    assert all(v in (0.0, None) for v in doc["tasks"]["seg"].values())

    assert cli.run(["evaluate", "--checkpoint", str(out / "seg" / "checkpoint.pt"), "--config", ini, "--out", str(tmp_path / "ev")]) == 0
    assert (tmp_path / "ev" / "report.json").read_text() == (out / "seg" / "report.json").read_text()


def test_paper_combos_requires_baseline(ini, tmp_path, monkeypatch):
    calls = []
    monkeypatch.setattr(cli.harness, "sweep", lambda cfg, targets: calls.append((cfg.tasks, targets)) or {"tables": {}})
    assert cli.run(["sweep", "--paper-combos", "3d", "--config", ini, "--out", str(tmp_path)]) == 0
    tasks, targets = calls[0]
    assert len(tasks) == 8 and str(tasks[0]) == "3d" and targets == ("3d",)


def test_data_verbs(tmp_path, ini):
    assert cli.run(["validate-data", "-n", "30", "--config", ini]) == 0
    assert cli.run(["gen-synthetic", "--out", str(tmp_path / "ds"), "-n", "6", "--size", "64", "--subjects", "2"]) == 0
    assert cli.run(["validate-data", "--dataset", str(tmp_path / "ds"), "--config", ini]) == 0
    assert cli.run(["train", "--tasks", "depth", "--dataset", str(tmp_path / "ds"), "--config", ini, "--out", str(tmp_path / "o")]) == 0


@pytest.mark.parametrize(
    "argv",
    [
        ["train", "--tasks", "2d+flow"],
        ["train", "--tasks", "2d, seg"],
        ["sweep", "--tasks", "2d, 2d"],
        ["sweep", "--tasks", "2d+seg"],
        ["train", "--preset", "huge"],
        ["frobnicate"],
    ],
)
def test_config_errors_exit_2(argv, ini):
    assert cli.run(argv + ["--config", ini] if argv[0] != "frobnicate" else argv) == 2


def test_unknown_config_key_exit_2(tmp_path):
    p = tmp_path / "bad.ini"
    p.write_text("[train]\nlearning_rat = 0.1\n")
    assert cli.run(["train", "--config", str(p)]) == 2


def test_runtime_errors_exit_3(ini, tmp_path):
    assert cli.run(["evaluate", "--checkpoint", str(tmp_path / "none.pt"), "--config", ini, "--out", str(tmp_path)]) == 3
    bad = tmp_path / "bad.pt"
    bad.write_bytes(b"not a checkpoint")
    assert cli.run(["evaluate", "--checkpoint", str(bad), "--config", ini, "--out", str(tmp_path)]) == 3
    assert cli.run(["train", "--dataset", str(tmp_path / "missing"), "--config", ini, "--out", str(tmp_path)]) == 3
