import math

import numpy as np
import pytest

from diffusion import QueueSpec, summarize
from distributions import Deterministic, Exponential
from errors import ConfigError
from mam import erlang_a_measures, erlang_a_pmf
from simulator import (
    SimConfig,
    counterfactual_offered_wait,
    effective_abandonment_key,
    estimate_tails,
    flow_counts,
    resolve_threads,
    run,
    service_level_key,
    simulate_replication,
    system_pmf_key,
    system_tail_key,
    virtual_waits,
    wait_tail_key,
)


def small_config(n=2, horizon=400.0, **kwargs) -> SimConfig:
    spec = QueueSpec(1.5 * n, n, Exponential(1.0), Exponential(1.0))
    return SimConfig(spec=spec, warmup=20.0, horizon=horizon, batches=10, seed=42, **kwargs)


@pytest.fixture
def log():
    return simulate_replication(small_config())


def test_flow_conservation(log):
    assert flow_counts(log).balanced
    for t in (1.0, 50.0, 123.4):
        assert flow_counts(log, t).balanced


def test_fcfs_and_patience(log):
    served = log.served
    starts = log.service_start[served]
    assert np.all(np.diff(starts) >= 0)
    assert np.all(log.service_start[served] - log.arrival[served] <= log.patience[served])
    assert np.all(np.isnan(log.abandon_time[served]))
    np.testing.assert_allclose(log.abandon_time[~served], log.arrival[~served] + log.patience[~served])
    assert np.all(log.server_id[~served] == -1)


def test_servers_never_overlap(log):
    for j in range(log.n):
        mine = np.flatnonzero(log.server_id == j)
        begin, end = log.service_start[mine], log.service_end[mine]
        assert np.all(begin[1:] >= end[:-1])
        # 第一位顧客要等初始顧客離開
        if mine.size:
            assert begin[0] >= log.initial_departures[j]


def test_event_log_frame(log):
    frame = log.to_frame()
    assert list(frame.columns) == [
        "customer_id", "arrival", "patience", "outcome",
        "service_start", "service_end", "abandon_time", "server_id",
    ]
    assert set(frame["outcome"]) <= {"served", "abandoned"}
    assert len(frame) == log.size


def test_virtual_waits_match_counterfactual():
    cfg = small_config(horizon=60.0)
    log = simulate_replication(cfg)
    vw = virtual_waits(log)
    assert vw["exact"].all()
    offered = vw["offered_wait"].to_numpy()

    # served 顧客的 offered wait 即實際等候
    served = log.served
    np.testing.assert_allclose(offered[served], (log.service_start - log.arrival)[served], atol=1e-12)

    abandoned = np.flatnonzero(~served)
    assert abandoned.size > 5
    for k in abandoned[:: max(1, abandoned.size // 8)]:
        assert offered[k] == pytest.approx(counterfactual_offered_wait(cfg, int(k)), abs=1e-12)
        assert offered[k] > log.patience[k]


def test_reproducible_and_thread_independent():
    cfg = small_config(replications=3, tail_thresholds_w=(0.5,), service_level_delays=(0.2,))
    a = run(SimConfig(**{**cfg.__dict__, "threads": 1}))
    b = run(SimConfig(**{**cfg.__dict__, "threads": 3}))
    assert a.estimates.keys() == b.estimates.keys()
    for key in a.estimates:
        assert a[key].mean == b[key].mean or (math.isnan(a[key].mean) and math.isnan(b[key].mean))


def test_server_indexed_service_is_common_across_n():
    def first_service_at_server0(n):
        cfg = small_config(n=n, horizon=50.0)
        log = simulate_replication(cfg)
        k = np.flatnonzero(log.server_id == 0)[0]
        return log.service_end[k] - log.service_start[k]

    assert first_service_at_server0(2) == first_service_at_server0(3)


def test_customer_indexed_assignment_runs():
    cfg = small_config(service_assignment="customer")
    log = simulate_replication(cfg)
    assert flow_counts(log).balanced
    other = simulate_replication(small_config())
    np.testing.assert_array_equal(log.arrival, other.arrival)


def test_result_measures_and_littles_law():
    spec = QueueSpec(6.0, 5, Exponential(1.0), Exponential(1.0 / 2.0))
    cfg = SimConfig(
        spec=spec, warmup=200.0, horizon=8200.0, batches=20, seed=3, replications=2,
        tail_thresholds_w=(0.5, 1.0), tail_thresholds_x=(0.5,),
        service_level_delays=(0.5,), effective_abd_delays=(0.5,), system_pmf_points=(5, 6),
    )
    result = run(cfg)
    for key in ("abandonment_fraction", "wait_mean", "wait_variance", "queue_mean", "queue_variance",
                "system_mean", "system_variance", "mean_sojourn", "arrival_rate",
                wait_tail_key(0.5), system_tail_key(0.5), service_level_key(0.5),
                effective_abandonment_key(0.5), system_pmf_key(5)):
        assert key in result.estimates
        assert result[key].batches == 40

    assert result.flow.balanced
    assert result.inexact_virtual_waits == 0
    assert 0.0 <= result.idle_fraction < 1.0
    assert result["arrival_rate"].mean == pytest.approx(6.0, rel=0.02)
    littles = result["arrival_rate"].mean * result["mean_sojourn"].mean
    assert result["system_mean"].mean == pytest.approx(littles, rel=0.03)
    assert 0.0 < result[service_level_key(0.5)].mean < 1.0
    assert result.to_frame().shape[0] == len(result.estimates)


def test_underloaded_run_warns():
    spec = QueueSpec(3.0, 6, Exponential(1.0), Exponential(1.0))
    result = run(SimConfig(spec=spec, warmup=10.0, horizon=210.0, batches=10))
    assert result.warnings
    assert result.wait_center == 0.0


def test_config_validation():
    spec = QueueSpec(3.0, 2, Exponential(1.0), Exponential(1.0))
    with pytest.raises(ConfigError):
        SimConfig(spec=spec, warmup=10.0, horizon=5.0)
    with pytest.raises(ConfigError):
        SimConfig(spec=spec, warmup=1.0, horizon=5.0, batches=3)
    with pytest.raises(ConfigError):
        SimConfig(spec=spec, warmup=1.0, horizon=5.0, service_assignment="random")
    with pytest.raises(ConfigError):
        SimConfig(spec=spec, warmup=1.0, horizon=5.0, service_level_delays=(-1.0,))


def test_estimate_tails():
    x = np.array([0.0, 1.0, 2.0, 3.0])
    np.testing.assert_allclose(estimate_tails(x, 1, 1.0, 0.0, [0.5, 2.5]), [0.75, 0.25])
    # 時間加權
    np.testing.assert_allclose(
        estimate_tails(x + 1, 1, 1.0, 0.0, [1.5], kind="system", weights=[1, 1, 1, 5]), [6 / 8]
    )
    with pytest.raises(ConfigError):
        estimate_tails(x, 1, 1.0, 0.0, [0.5], kind="other")


def test_resolve_threads(monkeypatch):
    assert resolve_threads(3) == 3
    assert resolve_threads(0) == 1
    monkeypatch.setenv("EDQ_THREADS", "5")
    assert resolve_threads() == 5
    monkeypatch.setenv("EDQ_THREADS", "many")
    with pytest.raises(ConfigError):
        resolve_threads()


def test_deterministic_service_initial_residuals():
    spec = QueueSpec(120.0, 100, Deterministic(1.0), Exponential(1.0))
    log = simulate_replication(SimConfig(spec=spec, warmup=1.0, horizon=5.0, batches=10, seed=9))
    # F_e 為 U(0, 1)
    assert np.all((log.initial_departures > 0) & (log.initial_departures < 1))
    served = log.served
    np.testing.assert_allclose((log.service_end - log.service_start)[served], 1.0)


def test_run_tails_agree_with_time_averages():
    spec = small_config().spec
    q = summarize(spec).q
    # 使門檻落在 X = 4.5
    a = (4.5 - spec.n - q) / math.sqrt(spec.n * spec.gamma)
    cfg = small_config(tail_thresholds_w=(-1e9, 1e9), tail_thresholds_x=(a,), system_pmf_points=tuple(range(5)))
    result = run(cfg)
    assert result[wait_tail_key(-1e9)].mean == 1.0
    assert result[wait_tail_key(1e9)].mean == 0.0
    below = sum(result[system_pmf_key(i)].mean for i in range(5))
    assert result[system_tail_key(a)].mean == pytest.approx(1.0 - below, abs=1e-9)


def test_confidence_level_scales_half_widths():
    base = run(small_config())
    wide = run(small_config(confidence_level=0.999))
    for key in ("abandonment_fraction", "queue_variance"):
        assert wide[key].mean == base[key].mean
        assert wide[key].half_width > base[key].half_width
    with pytest.raises(ConfigError):
        small_config(confidence_level=1.0)


@pytest.mark.slow
def test_erlang_a_agreement_over_seeds():
    lam, n = 120.0, 100
    spec = QueueSpec(lam, n, Exponential(1.0), Exponential(1.0))
    points = (110, 120, 130)
    exact = erlang_a_measures(lam, n, 1.0, 1.0)
    p = erlang_a_pmf(lam, n, 1.0, 1.0)
    targets = {key: exact[key] for key in
               ("abandonment_fraction", "queue_mean", "queue_variance", "system_mean", "system_variance")}
    targets.update({system_pmf_key(i): float(p[i]) for i in points})

    covered = []
    for seed in range(20):
        cfg = SimConfig(spec=spec, warmup=50.0, horizon=1050.0, batches=20, seed=seed,
                        system_pmf_points=points)
        result = run(cfg)
        covered.extend(result[key].covers(value) for key, value in targets.items())
    # 95% 信賴區間在 20 次執行中至少 90% 涵蓋精確值
    assert np.mean(covered) >= 0.9


TAIL_POINTS = (0.5, 1.0, 2.0)


def _reference(table1, wait_tails, system_tails):
    keys = ("abandonment_fraction", "wait_mean", "wait_variance", "queue_mean", "queue_variance")
    ref = dict(zip(keys, table1))
    ref.update({wait_tail_key(a): v for a, v in zip(TAIL_POINTS, wait_tails)})
    ref.update({system_tail_key(a): v for a, v in zip(TAIL_POINTS, system_tails)})
    return ref


# (服務分布, γ) -> 指標 -> (參考模擬值, 參考 95% 半寬)
BENCH_REFERENCE = {
    ("D", 1.0): _reference(
        [(0.1668, 0.000020), (0.1851, 0.000028), (0.005322, 0.0000030), (20.02, 0.0034), (73.11, 0.038)],
        [(0.2584, 0.00014), (0.09269, 0.000078), (0.003869, 0.000018)],
        [(0.2559, 0.00014), (0.1131, 0.000089), (0.01140, 0.000031)],
    ),
    ("D", 5.0): _reference(
        [(0.1667, 0.000021), (0.9142, 0.00014), (0.02639, 0.00042), (99.99, 0.017), (364.1, 4.3)],
        [(0.2505, 0.0019), (0.08689, 0.0016), (0.003138, 0.00017)],
        [(0.2707, 0.0013), (0.1200, 0.0013), (0.01120, 0.00031)],
    ),
    ("D", 10.0): _reference(
        [(0.1667, 0.000021), (1.826, 0.00030), (0.05487, 0.000086), (200.0, 0.035), (749.2, 1.2)],
        [(0.2539, 0.00046), (0.09004, 0.00023), (0.003419, 0.000050)],
        [(0.2840, 0.00049), (0.1252, 0.00029), (0.01089, 0.000093)],
    ),
    ("E2", 1.0): _reference(
        [(0.1672, 0.000040), (0.1869, 0.000055), (0.007799, 0.0000033), (20.07, 0.0062), (97.08, 0.041)],
        [(0.3007, 0.00023), (0.1422, 0.00015), (0.01596, 0.000039)],
        [(0.2865, 0.00023), (0.1472, 0.00015), (0.02314, 0.000044)],
    ),
    ("E2", 5.0): _reference(
        [(0.1666, 0.000043), (0.9152, 0.00031), (0.03812, 0.000049), (99.97, 0.035), (481.0, 0.63)],
        [(0.2884, 0.00055), (0.1302, 0.00039), (0.01215, 0.000098)],
        [(0.2972, 0.00056), (0.1523, 0.00041), (0.02261, 0.00014)],
    ),
    ("E2", 10.0): _reference(
        [(0.1666, 0.000042), (1.827, 0.00058), (0.07567, 0.00015), (199.9, 0.066), (956.4, 2.0)],
        [(0.2859, 0.00073), (0.1279, 0.00054), (0.01151, 0.00014)],
        [(0.3057, 0.00074), (0.1538, 0.00059), (0.02095, 0.00021)],
    ),
    ("LN", 1.0): _reference(
        [(0.1679, 0.000040), (0.1890, 0.000052), (0.01049, 0.0000043), (20.14, 0.0055), (122.2, 0.049)],
        [(0.3288, 0.00019), (0.1826, 0.00014), (0.03577, 0.000048)],
        [(0.3099, 0.00017), (0.1774, 0.00013), (0.03847, 0.000048)],
    ),
    ("LN", 5.0): _reference(
        [(0.1666, 0.000043), (0.9178, 0.00027), (0.06474, 0.000068), (99.97, 0.029), (745.5, 0.73)],
        [(0.3348, 0.00036), (0.1952, 0.00026), (0.04389, 0.00016)],
        [(0.3343, 0.00035), (0.2040, 0.00026), (0.05275, 0.00016)],
    ),
    ("LN", 10.0): _reference(
        [(0.1666, 0.000042), (1.829, 0.00054), (0.1365, 0.00019), (199.9, 0.057), (1563.0, 1.9)],
        [(0.3371, 0.00049), (0.1997, 0.00035), (0.04703, 0.00024)],
        [(0.3452, 0.00049), (0.2118, 0.00040), (0.05492, 0.00024)],
    ),
}

# 所有格子同時成立的 95% 信賴水準 (Bonferroni)
SIMULTANEOUS_LEVEL = 1.0 - 0.05 / sum(len(v) for v in BENCH_REFERENCE.values())


@pytest.mark.slow
@pytest.mark.parametrize("law,gamma", sorted(BENCH_REFERENCE))
def test_benchmark_simulation(bench_spec, law, gamma):
    cfg = SimConfig(spec=bench_spec(law, gamma), warmup=50.0 * gamma, horizon=50.0 * gamma + 4000.0,
                    batches=20, seed=20240601, replications=2,
                    tail_thresholds_w=TAIL_POINTS, tail_thresholds_x=TAIL_POINTS,
                    confidence_level=SIMULTANEOUS_LEVEL)
    result = run(cfg)
    misses = {
        key: (result[key].mean, result[key].half_width, center)
        for key, (center, half) in BENCH_REFERENCE[(law, gamma)].items()
        if not result[key].overlaps(center, 3.0 * half)
    }
    assert not misses
