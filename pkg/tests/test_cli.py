import csv
import io
import json
from pathlib import Path

import pytest

from dgn_lab.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, cmd_gradcheck, main, parse_args
from dgn_lab.config import load_config
from dgn_lab.gradients import GradientSet
from dgn_lab.parallel import THREADS_ENV, resolve_threads

TINY = {
    "model": {"neuron_kind": "dgn", "hidden": [6]},
    "train": {
        "epochs": 2,
        "lr": 0.02,
        "batch_size": 4,
        "init": {"w": {"center": 0.4, "delta": 0.1}, "c": {"center": 0.01, "delta": 0.005}},
    },
    "data": {
        "synthetic": {
            "classes": 2,
            "channels": 10,
            "timesteps": 20,
            "rate": 0.2,
            "jitter": 0,
            "samples_per_class": 4,
            "disjoint_channels": True,
            "test_fraction": 0.25,
        }
    },
    "gradcheck": {"cases": 4, "fd_cases": 1},
}


def _config(tmp_path: Path, **sections) -> Path:
    payload = {**TINY, **sections}
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps(payload), encoding="utf-8")
    return path


def _csv(path: Path) -> list[dict[str, str]]:
    return list(csv.DictReader(io.StringIO(path.read_text(encoding="utf-8"))))


def _train(tmp_path: Path, out: Path, config: Path | None = None) -> int:
    config = config or _config(tmp_path)
    return main(["train", "--config", str(config), "--out", str(out), "--seed", "3"])


def test_parse_args_requires_a_command() -> None:
    with pytest.raises(SystemExit):
        parse_args([])
    args = parse_args(["stability", "--seed", "4", "-vv"])
    assert args.command == "stability"
    assert args.seed == 4
    assert args.verbose == 2


def test_train_writes_checkpoint_history_and_summary(tmp_path: Path) -> None:
    out = tmp_path / "run"
    assert _train(tmp_path, out) == EXIT_OK
    summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
    assert summary["epochs"] == 2
    assert summary["seed"] == 3
    assert summary["train_samples"] == 6 and summary["eval_samples"] == 2
    assert (out / "checkpoint.json").is_file()
    history = _csv(out / "history.csv")
    assert [row["epoch"] for row in history] == ["1", "2"]


def test_rerun_reproduces_summary(tmp_path: Path) -> None:
    out = tmp_path / "run"
    assert _train(tmp_path, out) == EXIT_OK
    first = (out / "summary.json").read_bytes()
    assert _train(tmp_path, out) == EXIT_OK
    assert (out / "summary.json").read_bytes() == first


def test_invalid_config_key_writes_nothing(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    out = tmp_path / "run"
    config = _config(tmp_path, train={"epochs": 2, "warmup": 5})
    assert _train(tmp_path, out, config) == EXIT_USAGE
    assert "unknown key train.warmup" in capsys.readouterr().err
    assert not out.exists()


def test_bad_thread_count_is_a_usage_error(tmp_path: Path) -> None:
    assert main(["synth", "--out", str(tmp_path / "s"), "--threads", "0"]) == EXIT_USAGE


def test_eval_without_checkpoint_is_a_usage_error(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    code = main(["eval", "--config", str(_config(tmp_path)), "--out", str(tmp_path / "empty")])
    assert code == EXIT_USAGE
    assert "Checkpoint not found" in capsys.readouterr().err


def test_eval_and_perturb_after_training(tmp_path: Path) -> None:
    out = tmp_path / "run"
    sweeps = [{"kind": "additive", "strengths": [0.0, 0.05]}, {"kind": "bim", "strengths": [0.01]}]
    config = _config(tmp_path, perturb={"sweeps": sweeps})
    assert _train(tmp_path, out, config) == EXIT_OK

    args = ["--config", str(config), "--out", str(out), "--seed", "3"]
    assert main(["eval", *args]) == EXIT_OK
    evaluation = json.loads((out / "eval.json").read_text(encoding="utf-8"))
    assert evaluation["samples"] == 2

    assert main(["perturb", *args]) == EXIT_OK
    rows = _csv(out / "robustness.csv")
    assert [row["kind"] for row in rows] == ["clean", "additive", "additive", "bim"]
    assert rows[1]["accuracy"] == rows[0]["accuracy"]
    assert float(rows[0]["accuracy"]) == evaluation["accuracy"]
    assert {row["seed"] for row in rows} == {"3"}


def test_reference_points_emit_six_rows_plus_clean(tmp_path: Path) -> None:
    out = tmp_path / "run"
    config = _config(tmp_path, perturb={"reference_points": True})
    assert _train(tmp_path, out, config) == EXIT_OK
    assert main(["perturb", "--config", str(config), "--out", str(out)]) == EXIT_OK
    rows = _csv(out / "robustness.csv")
    assert len(rows) == 7
    assert [row["kind"] for row in rows[1:]] == ["additive", "subtractive", "mixed", "fgsm", "pgd", "bim"]


@pytest.mark.parametrize("preset", ["paper-points", "reference-points"])
def test_paper_points_preset_from_the_command_line(tmp_path: Path, preset: str) -> None:
    out = tmp_path / "run"
    assert _train(tmp_path, out) == EXIT_OK
    config = _config(tmp_path)
    args = ["--preset", preset, "--config", str(config), "--out", str(out), "--seed", "3"]
    assert main(["perturb", *args]) == EXIT_OK
    rows = _csv(out / "robustness.csv")
    assert len(rows) == 7
    assert rows[0]["kind"] == "clean"


def test_perturb_writes_one_table_per_kind(tmp_path: Path) -> None:
    out = tmp_path / "run"
    sweeps = [{"kind": "additive", "strengths": [0.0, 0.05]}, {"kind": "fgsm", "strengths": [0.01]}]
    config = _config(tmp_path, perturb={"sweeps": sweeps})
    assert _train(tmp_path, out, config) == EXIT_OK
    assert main(["perturb", "--config", str(config), "--out", str(out), "--seed", "3"]) == EXIT_OK

    additive = _csv(out / "robustness_additive.csv")
    assert [row["kind"] for row in additive] == ["clean", "additive", "additive"]
    assert [row["p"] for row in additive[1:]] == ["0.0", "0.05"]
    fgsm = _csv(out / "robustness_fgsm.csv")
    assert [row["kind"] for row in fgsm] == ["clean", "fgsm"]
    assert not (out / "robustness_bim.csv").exists()


def test_training_from_synthesised_event_files(tmp_path: Path) -> None:
    synth_out = tmp_path / "synth"
    assert main(["synth", "--config", str(_config(tmp_path)), "--out", str(synth_out)]) == EXIT_OK
    manifest = synth_out / "dataset" / "manifest.json"
    assert manifest.is_file()

    data = {**TINY["data"], "manifest": str(manifest)}
    out = tmp_path / "run"
    assert _train(tmp_path, out, _config(tmp_path, data=data)) == EXIT_OK
    summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
    assert summary["dataset"] == "synthetic"
    assert summary["train_samples"] == 6


def test_missing_manifest_is_a_usage_error(tmp_path: Path) -> None:
    data = {"manifest": str(tmp_path / "nowhere" / "manifest.json")}
    assert _train(tmp_path, tmp_path / "run", _config(tmp_path, data=data)) == EXIT_USAGE


def test_malformed_dataset_is_a_usage_error(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    dataset = tmp_path / "dataset"
    dataset.mkdir()
    (dataset / "a.evt").write_text("3,5.0,0\n0;1.0\n", encoding="utf-8")
    manifest = {"format_version": 1, "name": "bad", "channels": 3, "num_classes": 2,
                "samples": [{"path": "a.evt", "split": "train"}]}
    (dataset / "manifest.json").write_text(json.dumps(manifest), encoding="utf-8")

    data = {"manifest": str(dataset / "manifest.json")}
    out = tmp_path / "run"
    assert _train(tmp_path, out, _config(tmp_path, data=data)) == EXIT_USAGE
    assert "a.evt:2" in capsys.readouterr().err
    assert not (out / "checkpoint.json").exists()


def _stability(tmp_path: Path, seed: int, **section) -> list[dict[str, str]]:
    cases = [
        {"mu": [1.0, 0.5], "sigma": [0.1, 0.2], "W": [0.5, 1.0], "C": [0.0, 0.0], "g_l": 1.0},
        {"mu": [1.0], "sigma": [0.1], "W": [1.0], "C": [0.0], "g_l": 0.5},
    ]
    settings = {"cases": cases, "trials": 200, "tolerance": 1.0, **section}
    config = _config(tmp_path, stability=settings)
    out = tmp_path / f"stability{seed}"
    assert main(["stability", "--config", str(config), "--out", str(out), "--seed", str(seed)]) == EXIT_OK
    return _csv(out / "stability.csv")


def test_stability_without_conductance_has_unit_ratio(tmp_path: Path) -> None:
    rows = _stability(tmp_path, 1)
    assert [float(row["ratio"]) for row in rows] == [1.0, 1.0]
    assert {row["dgn_lower"] for row in rows} == {"false"}


def test_stability_seed_moves_only_monte_carlo_columns(tmp_path: Path) -> None:
    first, second = _stability(tmp_path, 1), _stability(tmp_path, 2)
    for a, b in zip(first, second):
        for column in ("G0", "analytic_mean", "analytic_var_dgn", "analytic_var_lif", "ratio"):
            assert a[column] == b[column]
        assert a["mc_var"] != b["mc_var"]


def test_stability_writes_requested_trajectories(tmp_path: Path) -> None:
    _stability(tmp_path, 5, record_trajectories=2, monte_carlo=True)
    header = (tmp_path / "stability5" / "trajectories_case0.csv").read_text(encoding="utf-8").splitlines()[0]
    assert header == "t,trial_0,trial_1"


def test_unstable_stability_case_fails_cleanly(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    cases = [{"mu": [1.0], "sigma": [0.1], "W": [1.0], "C": [-2.0], "g_l": 1.0}]
    config = _config(tmp_path, stability={"cases": cases, "monte_carlo": False})
    code = main(["stability", "--config", str(config), "--out", str(tmp_path / "out")])
    assert code == EXIT_FAILURE
    assert "G0" in capsys.readouterr().err


def test_gradcheck_passes_and_reports_layers(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    out = tmp_path / "gc"
    assert main(["gradcheck", "--config", str(_config(tmp_path)), "--out", str(out)]) == EXIT_OK
    text = capsys.readouterr().out
    assert "per-layer worst:" in text
    assert text.splitlines()[-1] == "PASS"
    assert json.loads((out / "gradcheck.json").read_text(encoding="utf-8"))["passed"] is True


def test_gradcheck_fails_on_injected_sign_flip(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    def flip(grads: GradientSet) -> GradientSet:
        values = grads.as_dict()
        values["layers.0.W"] = -values["layers.0.W"]
        return GradientSet.from_dict(values)

    config = load_config(_config(tmp_path), overrides={"out": str(tmp_path / "gc")})
    assert cmd_gradcheck(config, 1, mutate=flip) == EXIT_FAILURE
    assert "(dual-path): layers.0.W" in capsys.readouterr().out


def test_thread_resolution(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.delenv(THREADS_ENV, raising=False)
    assert resolve_threads() == 1
    assert resolve_threads(8) == 8
    monkeypatch.setenv(THREADS_ENV, "3")
    assert resolve_threads() == 3
    assert resolve_threads(2) == 2
    assert resolve_threads(8) == 3
    with pytest.raises(ValueError, match="at least 1"):
        resolve_threads(0)
    monkeypatch.setenv(THREADS_ENV, "many")
    with pytest.raises(ValueError, match=THREADS_ENV):
        resolve_threads()
