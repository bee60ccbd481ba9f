import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

import data_io
from data_io import dumps, export_event_log, load_scenario, read_csv, run_header, write_csv
from diffusion import QueueSpec
from distributions import Exponential
from errors import ConfigError
from simulator import SimConfig, simulate_replication

SCENARIOS = sorted((Path(__file__).resolve().parent.parent / "scenarios").glob("*.json"))


@pytest.mark.parametrize("path", SCENARIOS, ids=lambda p: p.stem)
def test_shipped_scenarios_validate(path):
    scenario = load_scenario(path)
    raw = json.loads(path.read_text(encoding="utf-8"))
    assert scenario.command in raw
    assert scenario.schema_version == 1


SCENARIO_DIR = Path(__file__).resolve().parent.parent / "scenarios"


@pytest.mark.parametrize("name, command, scv, objective", [
    ("fig5a", "compare", 3.0, "service_level"),
    ("fig5b", "compare", 5.0, "service_level"),
    ("fig6a", "compare", 3.0, "effective_abandonment"),
    ("fig6b", "compare", 5.0, "effective_abandonment"),
])
def test_staffing_curve_scenarios(name, command, scv, objective):
    scenario = load_scenario(SCENARIO_DIR / f"{name}.json")
    assert scenario.command == command
    payload = scenario.compare
    assert payload.mode == "staffing_curve"
    assert payload.evaluators == ["diffusion", "zm", "simulation"]
    assert payload.staffing.service["scv"] == scv
    assert [t.objective for t in payload.staffing.targets] == [objective]
    assert payload.simulation is not None


def test_benchmark_scenarios_cover_all_cases():
    expected = {"table1": "approx", "table1-simulation": "simulate", "table2": "compare",
                "fig3": "mam", "fig4": "approx"}
    loaded = {name: load_scenario(SCENARIO_DIR / f"{name}.json") for name in expected}
    assert {name: s.command for name, s in loaded.items()} == expected
    for name in ("table1", "table1-simulation", "table2"):
        payload = getattr(loaded[name], expected[name])
        assert len(payload.cases) == 9
        assert {c.system.service["type"] for c in payload.cases} == {"det", "erlang", "lognormal"}
    assert loaded["table2"].compare.evaluators == ["simulation", "diffusion"]
    assert loaded["table2"].compare.thresholds.system_tail == [0.5, 1.0, 2.0]
    assert loaded["fig3"].mam.patience_means == [1.0, 5.0]
    assert loaded["fig4"].approx.hazard_grid


def test_header_round_trips_config(tmp_path):
    scenario = load_scenario(SCENARIOS[0])
    header = run_header(scenario, 123)
    assert header["seed"] == 123
    assert header["config"]["name"] == scenario.name
    assert "out" not in header["config"]


def test_dumps_replaces_non_finite():
    text = dumps({"a": float("nan"), "b": np.float64(np.inf), "c": np.arange(3), "d": np.bool_(True)})
    assert json.loads(text) == {"a": None, "b": None, "c": [0, 1, 2], "d": True}
    frame = pd.DataFrame({"x": [1.0, np.nan]})
    assert json.loads(dumps({"t": frame})) == {"t": [{"x": 1.0}, {"x": None}]}


def test_csv_header_and_gzip(tmp_path):
    header = {"tool": "edq", "version": "1.0.0", "schema_version": 1, "seed": 7, "config": {"name": "x"}}
    frame = pd.DataFrame({"n": [1, 2], "value": [0.25, 0.5]})
    plain = tmp_path / "t.csv"
    packed = tmp_path / "t.csv.gz"
    write_csv(frame, plain, header)
    write_csv(frame, packed, header)
    assert b"\r\n" in plain.read_bytes()
    assert b"\n\n" not in plain.read_bytes()
    pd.testing.assert_frame_equal(read_csv(plain), frame)
    pd.testing.assert_frame_equal(read_csv(packed), frame)


def test_large_event_log_is_gzipped(tmp_path, monkeypatch):
    monkeypatch.setattr(data_io, "EVENT_LOG_GZIP_ROWS", 5)
    spec = QueueSpec(3.0, 2, Exponential(1.0), Exponential(1.0))
    log = simulate_replication(SimConfig(spec=spec, warmup=1.0, horizon=20.0, batches=10))
    header = {"tool": "edq", "version": "1.0.0", "schema_version": 1, "seed": 0, "config": {}}
    path = export_event_log(log, tmp_path / "events.csv", header)
    assert path.name == "events.csv.gz"
    assert len(read_csv(path)) == log.size


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_scenario(tmp_path / "missing.json")
    path = tmp_path / "two.json"
    path.write_text(json.dumps({"approx": {"cases": []}}), encoding="utf-8")
    with pytest.raises(ConfigError):
        load_scenario(path)
