from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Any

import pytest

import hyperlab.main
from hyperlab.adapters import AdapterKind
from hyperlab.main import FAILED_MARKER, SUMMARY_COLUMNS, cell_dir, cli
from hyperlab.utils import TrainingAborted

SMALL = {
    "name": "small",
    "task": {"kind": "scaled-teacher", "n": 6, "m": 6, "n_train": 32, "n_eval": 16},
    "adapters": ["hyper", "lora:1", "lora:2", "full"],
    "train": {"lr": 0.01, "warmup_steps": 2, "batch_size": 16, "epochs": 5},
    "seeds": [0, 1],
}


def _write_config(tmp_path: Path, **overrides: Any) -> Path:
    data = {**SMALL, **overrides}
    path = tmp_path / "small.json"
    path.write_text(json.dumps(data, indent=2))
    return path


def _summary(path: Path) -> list[dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_list(capsys: pytest.CaptureFixture[str]) -> None:
    assert cli(["list"]) == 0
    out = capsys.readouterr().out
    assert "scaled-teacher" in out and "pretrained on seq-copy" in out


def test_run(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    config = _write_config(tmp_path)
    out = tmp_path / "out"
    assert cli(["run", "--config", str(config), "--output", str(out), "--threads", "2"]) == 0
    printed = capsys.readouterr().out
    assert "[8/8]" in printed

    for name in ("config.json", "inputs.sha256", "summary.csv", "rank.svg"):
        assert (out / name).is_file()
    assert (out / "base" / "seed-1" / "manifest.json").is_file()
    cell = cell_dir(out, AdapterKind.lora(2), 0)
    assert cell == out / "lora-2" / "seed-0"
    for name in ("checkpoint.json", "loss.csv", "rank.json", "rank.csv", "result.json"):
        assert (cell / name).is_file()
    assert not (cell / FAILED_MARKER).exists()

    rows = _summary(out / "summary.csv")
    assert tuple(rows[0]) == SUMMARY_COLUMNS
    assert [r["adapter"] for r in rows] == ["hyper", "lora(1)", "lora(2)", "full"]
    hyper = rows[0]
    assert int(hyper["trainable_params"]) == 12
    assert float(hyper["param_fraction"]) == (6 + 6) / (6 * 6)
    assert float(rows[3]["param_fraction"]) == 1.0

    result = json.loads((cell / "result.json").read_text())
    assert result["steps"] == 10 and result["trainable_params"] == 24
    assert result["threads"] == 2
    assert result["train_config"]["lr"] == 0.01 and result["train_config"]["seed"] == 0
    assert len(result["loss_curve"]) == 10
    loss_lines = (cell / "loss.csv").read_text().splitlines()
    assert loss_lines[0] == "step,lr,loss" and len(loss_lines) == 11

    first = (out / "summary.csv").read_bytes()
    checkpoint = (cell / "checkpoint.json").read_bytes()
    assert cli(["run", "--config", str(config), "--output", str(out), "--threads", "1"]) == 0
    assert (out / "summary.csv").read_bytes() == first
    assert (cell / "checkpoint.json").read_bytes() == checkpoint


def test_run_seed_override(tmp_path: Path) -> None:
    config = _write_config(tmp_path, adapters=["hyper"])
    out = tmp_path / "out"
    assert cli(["run", "--config", str(config), "--output", str(out), "--seeds", "4"]) == 0
    assert (out / "hyper" / "seed-4").is_dir()
    assert not (out / "hyper" / "seed-0").exists()
    assert json.loads((out / "config.json").read_text())["seeds"] == [4]


def test_bad_configs(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    config = _write_config(tmp_path, seeds=[])
    assert cli(["run", "--config", str(config)]) == 2
    assert "seeds must not be empty" in capsys.readouterr().err

    config = _write_config(tmp_path)
    assert cli(["run", "--config", str(config), "--seeds", ""]) == 2

    (tmp_path / "broken.json").write_text('{"task": ')
    assert cli(["run", "--config", str(tmp_path / "broken.json")]) == 2
    assert "broken.json: line 1" in capsys.readouterr().err

    assert cli(["run", "--config", str(tmp_path / "missing.json")]) == 4


def test_training_failure_keeps_partial_results(
    tmp_path: Path, monkeypatch: pytest.MonkeyPatch, capsys: pytest.CaptureFixture[str]
) -> None:
    def diverge(*args: Any, **kwargs: Any) -> Any:
        raise TrainingAborted("loss became nan at step 3", step=3, loss_curve=[1.0, 0.5, 0.25])

    monkeypatch.setattr(hyperlab.main, "train", diverge)
    config = _write_config(tmp_path, adapters=["hyper", "full"], seeds=[0])
    out = tmp_path / "out"
    assert cli(["run", "--config", str(config), "--output", str(out), "--no-svg"]) == 3
    assert "2 of 2 cells failed" in capsys.readouterr().out
    cell = out / "hyper" / "seed-0"
    assert (cell / FAILED_MARKER).read_text().startswith("step 3:")
    assert (cell / "loss.csv").read_text().splitlines() == [
        "step,lr,loss",
        "0,,1",
        "1,,0.5",
        "2,,0.25",
    ]
    assert not (cell / "checkpoint.json").exists()
    assert not (out / "rank.svg").exists()
    rows = _summary(out / "summary.csv")
    assert rows[0]["mean_final_loss_or_acc"] == "nan"


def test_inspect(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    config = _write_config(tmp_path, adapters=["hyper"], seeds=[0])
    out = tmp_path / "out"
    assert cli(["run", "--config", str(config), "--output", str(out), "--no-svg"]) == 0
    capsys.readouterr()
    checkpoint = out / "hyper" / "seed-0" / "checkpoint.json"
    assert cli(["inspect", str(checkpoint)]) == 0
    printed = capsys.readouterr().out
    assert printed.startswith("fc0: hyper 6x6 params=12\n")
    assert "total trainable params: 12" in printed

    checkpoint.write_bytes(checkpoint.read_bytes()[:50])
    assert cli(["inspect", str(checkpoint)]) == 4
    assert "at byte" in capsys.readouterr().err


def test_merge_and_rank(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    config = _write_config(tmp_path, adapters=["hyper", "lora:1"], seeds=[0])
    out = tmp_path / "out"
    assert cli(["run", "--config", str(config), "--output", str(out), "--no-svg"]) == 0
    base = out / "base" / "seed-0"
    for adapter in ("hyper", "lora-1"):
        checkpoint = out / adapter / "seed-0" / "checkpoint.json"
        merged = tmp_path / f"merged-{adapter}"
        assert cli(["merge", str(checkpoint), str(base), str(merged)]) == 0
        assert (merged / "manifest.json").is_file()
        capsys.readouterr()
        assert cli(["rank", str(base), str(merged)]) == 0
        printed = capsys.readouterr().out
        assert printed.startswith("threshold=0.01 rank_w0_rtol=1e-09\n")
        assert "fc0" in printed
        if adapter == "lora-1":
            assert "mean r_hat: 0.1667" in printed

    assert cli(["merge", str(checkpoint), str(tmp_path), str(tmp_path / "x")]) == 4
    with pytest.raises(SystemExit) as info:
        cli(["rank", str(base), str(base), "--threshold", "0"])
    assert info.value.code == 2


@pytest.mark.slow
def test_preset_run(tmp_path: Path) -> None:
    out = tmp_path / "preset"
    assert cli(["run", "--preset", "scaled-teacher", "--output", str(out), "--seeds", "0"]) == 0
    rows = _summary(out / "summary.csv")
    assert len(rows) == 4
    assert float(rows[0]["param_fraction"]) == 32 / 256


def test_invalid_task_is_rejected_before_writing(tmp_path: Path) -> None:
    out = tmp_path / "out"
    task = {"kind": "scaled-teacher", "n": 1, "m": 6}
    config = _write_config(tmp_path, task=task)
    assert cli(["run", "--config", str(config), "--output", str(out)]) == 2
    assert not out.exists()

    train = {"lr": 0.01, "warmup_steps": 1000, "batch_size": 16, "epochs": 2}
    config = _write_config(tmp_path, train=train)
    assert cli(["run", "--config", str(config), "--output", str(out)]) == 2
    assert not out.exists()


def test_malformed_thread_env(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setenv("HYPERLAB_THREADS", "many")
    with pytest.raises(SystemExit) as info:
        cli(["list"])
    assert info.value.code == 2
    monkeypatch.setenv("HYPERLAB_THREADS", "3")
    assert cli(["list"]) == 0
