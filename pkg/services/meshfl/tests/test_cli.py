import pandas as pd
import pytest
import yaml

from meshfl.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main


@pytest.fixture
def scenario_file(tmp_path, tiny_raw):
    def write(name="tiny", **patch):
        raw = {**tiny_raw, **patch, "name": name}
        path = tmp_path / f"{name}.yaml"
        path.write_text(yaml.safe_dump(raw))
        return path

    return write


def test_presets_lists_every_preset(capsys):
    assert main(["presets"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "fig12_distributions" in out and "d252_congested" in out


def test_run_writes_metrics(scenario_file, tmp_path, capsys):
    out_dir = tmp_path / "out"
    assert main(["run", "--config", str(scenario_file()), "--out", str(out_dir)]) == EXIT_OK
    frame = pd.read_csv(out_dir / "tiny_baseline.csv")
    assert len(frame) == 6
    assert (out_dir / "tiny_baseline_flows.csv").is_file()
    assert "6 rounds" in capsys.readouterr().out


def test_run_with_protocol_override_and_trace(scenario_file, tmp_path):
    out_dir = tmp_path / "out"
    args = ["run", "--config", str(scenario_file()), "--protocol", "rl-softmax", "--trace", "--out", str(out_dir)]
    assert main(args) == EXIT_OK
    assert (out_dir / "tiny_rl-softmax_qtables.parquet").is_file()
    assert (out_dir / "tiny_rl-softmax_trace.jsonl").stat().st_size > 0


def test_seed_flag_overrides_the_file(scenario_file, tmp_path):
    path = scenario_file()
    main(["--seed", "1", "run", "--config", str(path), "--out", str(tmp_path / "a")])
    main(["--seed", "2", "run", "--config", str(path), "--out", str(tmp_path / "b")])
    a = pd.read_csv(tmp_path / "a" / "tiny_baseline.csv")
    b = pd.read_csv(tmp_path / "b" / "tiny_baseline.csv")
    assert a["loss"].tolist() != b["loss"].tolist()


def test_compare_prints_and_writes_a_table(scenario_file, tmp_path, capsys):
    base = scenario_file("base")
    rl = scenario_file("rl", routing={"protocol": "rl-greedy", "report_period_ms": 50})
    out_dir = tmp_path / "cmp"
    args = ["compare", "--configs", str(base), str(rl), "--target-loss", "5.0", "--out", str(out_dir)]
    assert main(args) == EXIT_OK
    table = pd.read_csv(out_dir / "comparison.csv")
    assert table["protocol"].tolist() == ["baseline", "rl-greedy"]
    assert "curves equal: True" in capsys.readouterr().out


def test_config_errors_exit_with_one(scenario_file, tmp_path, capsys):
    path = scenario_file(fl={"workers": {"R99": 1}})
    assert main(["run", "--config", str(path), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err
    assert main(["run", "--preset", "fig99", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_runtime_faults_exit_with_two(scenario_file, tmp_path, capsys):
    path = scenario_file(max_sim_time_ms=5.0)
    assert main(["run", "--config", str(path), "--out", str(tmp_path)]) == EXIT_RUNTIME
    assert "runtime error" in capsys.readouterr().err
