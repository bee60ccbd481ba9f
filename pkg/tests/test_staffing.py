import math

import pytest

from config import (
    CALL_CENTER_ARRIVAL_RATE,
    CALL_CENTER_PATIENCE,
    CALL_CENTER_SERVICE_MEAN,
    CALL_CENTER_TARGETS,
)
from diffusion import QueueSpec
from distributions import Exponential, LogNormal, distribution_from_config
from errors import ConfigError, InfeasibleWithinEDRegime
from simulator import SimConfig
from staffing import (
    StaffingProblem,
    ed_cap,
    evaluate_at,
    evaluate_curve,
    fluid_start,
    min_servers,
)

SERVICE_LEVEL, ABANDONMENT = CALL_CENTER_TARGETS


def call_center(scv: float, target=SERVICE_LEVEL, evaluator: str = "diffusion", **kwargs) -> StaffingProblem:
    return StaffingProblem(
        arrival_rate=CALL_CENTER_ARRIVAL_RATE,
        service=LogNormal(CALL_CENTER_SERVICE_MEAN, scv),
        patience=distribution_from_config(CALL_CENTER_PATIENCE),
        objective=target.objective,
        target=target.target,
        delay=target.delay,
        evaluator=evaluator,
        **kwargs,
    )


@pytest.mark.parametrize("scv,target,expected", [
    (3.0, SERVICE_LEVEL, 211),
    (5.0, SERVICE_LEVEL, 213),
    (3.0, ABANDONMENT, 205),
    (5.0, ABANDONMENT, 207),
])
def test_diffusion_staffing(scv, target, expected):
    result = min_servers(call_center(scv, target))
    assert result.n_min == expected
    assert result.monotone
    assert result.rho > 1.0
    curve = result.curve.set_index("n")
    assert curve.loc[expected, "meets"]
    assert not curve.loc[expected - 1, "meets"]


@pytest.mark.parametrize("scv", [3.0, 5.0])
@pytest.mark.parametrize("target,expected", [(SERVICE_LEVEL, 208), (ABANDONMENT, 202)])
def test_zm_staffing_ignores_service_variability(scv, target, expected):
    assert min_servers(call_center(scv, target, evaluator="zm")).n_min == expected


def test_fluid_staffing():
    # G(120 s) = 0.1308，α = 1 − n/230 ≤ G(120) 時 w ≤ 120
    result = min_servers(call_center(3.0, evaluator="fluid"))
    assert result.n_min == 200
    values = result.curve.set_index("n")["value"]
    assert values.loc[199] == 0.0
    assert values.loc[200] == pytest.approx(200 / 230)


def test_search_helpers():
    problem = call_center(3.0)
    assert problem.offered_load == pytest.approx(230.0)
    assert ed_cap(problem) == 229
    assert fluid_start(problem) == 184
    assert fluid_start(call_center(3.0, ABANDONMENT)) == 219


def test_linear_scan_finds_smallest_hit_on_non_monotone_curve(monkeypatch):
    import staffing

    # 187 達標、188 掉回去、190 起穩定達標
    values = {187: 0.85}

    def fake(problem, n):
        return staffing.Evaluation(n, values.get(n, 0.9 if n >= 190 else 0.1), rho=problem.spec_for(n).rho)

    monkeypatch.setattr(staffing, "evaluate_at", fake)
    result = min_servers(call_center(3.0))
    assert result.n_min == 187
    assert not result.monotone
    assert result.warnings


def test_curve_range_is_included():
    result = min_servers(call_center(3.0, curve_range=(195, 220)))
    ns = set(result.curve["n"])
    assert set(range(195, 221)) <= ns
    assert {"n", "value", "half_width", "rho", "svpr", "meets", "in_search", "note"} <= set(result.curve.columns)


def test_evaluate_curve():
    frame = evaluate_curve(call_center(3.0), 205, 215)
    assert list(frame["n"]) == list(range(205, 216))
    assert frame["value"].is_monotonic_increasing
    assert frame.loc[frame["meets"], "n"].min() == 211
    assert frame["in_search"].all()
    with pytest.raises(ConfigError):
        evaluate_curve(call_center(3.0), 10, 5)


def test_evaluate_at_beyond_fluid_wait():
    # d ≥ w: 流體模型給 1 − α，擴散仍給介於 0 與 1 的值
    problem = call_center(3.0)
    e = evaluate_at(problem, 215)
    assert 0.0 < e.value < 1.0
    assert e.half_width is None
    assert e.svpr == pytest.approx(math.sqrt(3.0) / (problem.patience.mean / 230.0))
    with pytest.raises(ConfigError):
        evaluate_at(problem, 0)


def test_zm_equals_diffusion_for_markovian_system():
    kwargs = dict(arrival_rate=120.0, service=Exponential(1.0), patience=Exponential(1.0),
                  objective="service_level", target=0.5, delay=0.1)
    diffusion = evaluate_curve(StaffingProblem(evaluator="diffusion", **kwargs), 100, 110)
    zm = evaluate_curve(StaffingProblem(evaluator="zm", **kwargs), 100, 110)
    assert list(diffusion["value"]) == list(zm["value"])


def test_infeasible_within_ed_regime():
    # 服務水準上限約 1/ρ，ρ > 1 時無法達到 99.9%
    strict = StaffingProblem(arrival_rate=120.0, service=Exponential(1.0), patience=Exponential(1.0),
                             objective="service_level", target=0.999, delay=0.0)
    with pytest.raises(InfeasibleWithinEDRegime):
        min_servers(strict)

    tiny = StaffingProblem(arrival_rate=0.001, service=Exponential(1.0 / 230.0), patience=Exponential(1.0),
                           objective="service_level", target=0.8, delay=1.0)
    with pytest.raises(InfeasibleWithinEDRegime):
        min_servers(tiny)


@pytest.mark.parametrize("kwargs", [
    dict(objective="cost"),
    dict(evaluator="erlang"),
    dict(target=1.0),
    dict(target=0.0),
    dict(delay=-1.0),
    dict(evaluator="simulation"),
    dict(curve_range=(10, 5)),
])
def test_problem_validation(kwargs):
    base = dict(arrival_rate=1.0, service=Exponential(1.0 / 230.0), patience=Exponential(0.001),
                objective="service_level", target=0.8, delay=120.0)
    with pytest.raises(ConfigError):
        StaffingProblem(**{**base, **kwargs})


def _simulated(scv: float, target=SERVICE_LEVEL) -> StaffingProblem:
    service = LogNormal(CALL_CENTER_SERVICE_MEAN, scv)
    patience = distribution_from_config(CALL_CENTER_PATIENCE)
    template = SimConfig(spec=QueueSpec(1.0, 229, service, patience), warmup=20000.0, horizon=220000.0,
                         batches=20, seed=11)
    return call_center(scv, target, evaluator="simulation", sim_template=template)


@pytest.mark.slow
def test_zm_staffing_falls_short_in_simulation():
    e = evaluate_at(_simulated(3.0), 208)
    assert e.half_width is not None
    assert e.value == pytest.approx(0.744, abs=0.02)
    assert e.value < SERVICE_LEVEL.target


@pytest.mark.slow
def test_simulated_staffing_close_to_diffusion():
    result = min_servers(_simulated(3.0))
    assert abs(result.n_min - 211) <= 1
