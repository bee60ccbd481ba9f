import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from diffusion import (
    QueueSpec,
    buffer_variance,
    effective_abandonment,
    fluid_effective_abandonment,
    fluid_service_level,
    hazard_profile,
    normalize_patience,
    queue_pmf,
    queue_tail,
    service_level,
    summarize,
    virtual_wait_cdf,
    virtual_wait_tail,
    zm_summarize,
)
from distributions import Deterministic, Erlang, Exponential, Hyperexponential, LogNormal, random_stream
from errors import DegenerateConditioning, InvalidParameter, NotAbsolutelyContinuous, NotOverloaded

# 4 位有效數字的最大相對捨入誤差
PRINTED = 5.01e-4

# (law, γ) -> (α, w, σ_w², q, σ_x²)
BENCH_MEASURES = {
    ("D", 1.0): (0.1667, 0.1823, 0.005000, 20.00, 70.00),
    ("D", 5.0): (0.1667, 0.9116, 0.02500, 100.0, 350.0),
    ("D", 10.0): (0.1667, 1.823, 0.05000, 200.0, 700.0),
    ("E2", 1.0): (0.1667, 0.1823, 0.007500, 20.00, 95.00),
    ("E2", 5.0): (0.1667, 0.9116, 0.03750, 100.0, 475.0),
    ("E2", 10.0): (0.1667, 1.823, 0.07500, 200.0, 950.0),
    ("LN", 1.0): (0.1667, 0.1823, 0.01500, 20.00, 170.0),
    ("LN", 5.0): (0.1667, 0.9116, 0.07500, 100.0, 850.0),
    ("LN", 10.0): (0.1667, 1.823, 0.1500, 200.0, 1700),
}

# law -> (P[W̃ > a], P[X̃ > a]) for a = 0.5, 1.0, 2.0
BENCH_TAILS = {
    "D": ((0.2398, 0.07865, 0.002339), (0.2750, 0.1160, 0.008414)),
    "E2": ((0.2819, 0.1241, 0.01046), (0.3040, 0.1525, 0.02009)),
    "LN": ((0.3415, 0.2071, 0.05124), (0.3507, 0.2216, 0.06252)),
}

CALL_CENTER_PATIENCE = Hyperexponential.from_means([(0.98, 1000.0), (0.02, 6.0)])


@pytest.mark.parametrize("law,gamma", sorted(BENCH_MEASURES))
def test_benchmark_measures(bench_spec, law, gamma):
    s = summarize(bench_spec(law, gamma))
    actual = (s.alpha, s.w, s.sigma_w_sq, s.q, s.sigma_x_sq)
    assert_allclose(actual, BENCH_MEASURES[(law, gamma)], rtol=PRINTED)


@pytest.mark.parametrize("law", sorted(BENCH_TAILS))
@pytest.mark.parametrize("gamma", [1.0, 5.0, 10.0])
def test_benchmark_tails(bench_spec, law, gamma):
    s = summarize(bench_spec(law, gamma))
    a = np.array([0.5, 1.0, 2.0])
    wait, system = BENCH_TAILS[law]
    assert_allclose(virtual_wait_tail(s, a), wait, rtol=PRINTED)
    assert_allclose(queue_tail(s, a), system, rtol=PRINTED)


def test_deterministic_unit_values(bench_spec):
    s = summarize(bench_spec("D", 1.0))
    assert s.alpha == pytest.approx(1 / 6)
    assert s.w == pytest.approx(math.log(1.2))
    assert s.sigma_hat_w_sq == pytest.approx(0.5)
    assert s.sigma_hat_x_sq == pytest.approx(0.7)
    assert s.q == pytest.approx(20.0)
    assert s.svpr == 0.0


def test_variance_decomposition(bench_spec):
    # σ̂_x² = μ²σ̂_w² + σ̂_g²
    for law in ("D", "E2", "LN"):
        s = summarize(bench_spec(law, 5.0))
        assert s.sigma_hat_x_sq == pytest.approx(s.mu ** 2 * s.sigma_hat_w_sq + s.sigma_hat_g_sq)
        assert s.sigma_x_sq == pytest.approx(s.sigma_hat_x_sq * s.n * s.gamma)
        assert s.sigma_w_sq == pytest.approx(s.sigma_hat_w_sq * s.gamma / s.n)


def test_ou_parameters(bench_spec):
    s = summarize(bench_spec("E2", 1.0))
    assert s.ou_drift_rate == pytest.approx(1.2 * 1.0 * s.density_at_w)
    assert s.ou_m_variance == pytest.approx((1 + 1.2 * 0.5 + 0.2) / 1.2)


@pytest.mark.parametrize("factor", [0.1, 10.0, 60.0])
def test_scale_covariance(factor):
    spec = QueueSpec(120.0, 100, LogNormal(1.0, 2.0), CALL_CENTER_PATIENCE.scaled(0.01))
    base = summarize(spec)
    scaled_spec = spec.time_scaled(factor)
    scaled = summarize(scaled_spec)
    assert scaled.alpha == pytest.approx(base.alpha)
    assert scaled.w == pytest.approx(factor * base.w)
    assert scaled.q == pytest.approx(base.q)
    assert scaled.sigma_x_sq == pytest.approx(base.sigma_x_sq)
    assert scaled.sigma_w_sq == pytest.approx(factor ** 2 * base.sigma_w_sq)
    # 服務水準只看時間比例
    d = 0.7 * base.w
    assert service_level(scaled_spec, factor * d) == pytest.approx(service_level(spec, d), rel=1e-7)


@pytest.mark.parametrize("law", ["D", "E2", "LN"])
def test_tails_are_symmetric(bench_spec, law):
    s = summarize(bench_spec(law, 5.0))
    a = np.array([0.0, 0.3, 1.0, 2.5])
    assert_allclose(virtual_wait_tail(s, a) + virtual_wait_tail(s, -a), 1.0, rtol=1e-14)
    assert_allclose(queue_tail(s, a) + queue_tail(s, -a), 1.0, rtol=1e-14)
    assert virtual_wait_tail(s, 0.0) == pytest.approx(0.5)


def test_fluid_limit_of_service_fraction():
    # n → ∞: 幾乎所有顧客等候 w = ln ρ，接通比例 → 1/ρ
    gaps = []
    for n in (100, 10_000, 1_000_000):
        spec = QueueSpec(1.2 * n, n, Deterministic(1.0), Exponential(1.0))
        s = summarize(spec)
        assert 1.0 - s.alpha == pytest.approx(1 / 1.2)
        gaps.append(abs(service_level(spec, 50.0, s) - 1 / 1.2))
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] < 1e-5

    spec = QueueSpec(1.2e6, 1_000_000, Deterministic(1.0), Exponential(1.0))
    s = summarize(spec)
    assert service_level(spec, 2.0 * s.w, s) == pytest.approx(1 / 1.2, abs=1e-5)
    assert service_level(spec, 0.5 * s.w, s) < 1e-6


def test_service_level_matches_monte_carlo():
    patience = Hyperexponential.from_means([(0.5, 0.5), (0.5, 1.5)])
    spec = QueueSpec(120.0, 100, LogNormal(1.0, 2.0), patience)
    s = summarize(spec)
    rng = random_stream(7)
    size = 200_000
    wait = rng.normal(s.w, s.sigma_w, size)
    theta = patience.sample(rng, size)
    for d in (0.5 * s.w, s.w, 2.0 * s.w):
        # 在 d 內接通: W ≤ Θ 且 W ≤ d
        served = np.mean(wait <= np.minimum(theta, d))
        assert service_level(spec, d, s) == pytest.approx(served, abs=0.006)


def test_not_overloaded(bench_spec):
    with pytest.raises(NotOverloaded):
        summarize(bench_spec("D", 1.0, n=120))
    with pytest.raises(NotOverloaded):
        summarize(bench_spec("D", 1.0, n=130))


def test_deterministic_patience_rejected():
    spec = QueueSpec(120.0, 100, Deterministic(1.0), Deterministic(2.0))
    with pytest.raises(NotAbsolutelyContinuous):
        summarize(spec)


def test_interarrival_must_match_rate():
    with pytest.raises(InvalidParameter):
        QueueSpec(120.0, 100, Deterministic(1.0), Exponential(1.0), interarrival=Exponential(100.0))


def test_renewal_arrivals_change_variance_only():
    poisson = summarize(QueueSpec(120.0, 100, Deterministic(1.0), Exponential(1.0)))
    erlang = summarize(QueueSpec(120.0, 100, Deterministic(1.0), Exponential(1.0), interarrival=Erlang(2, 240.0)))
    assert erlang.alpha == poisson.alpha
    assert erlang.q == pytest.approx(poisson.q)
    assert erlang.sigma_hat_w_sq < poisson.sigma_hat_w_sq


def test_svpr_warning():
    spec = QueueSpec(1.0, 200, LogNormal(230.0, 3.0), CALL_CENTER_PATIENCE)
    s = summarize(spec)
    assert s.svpr == pytest.approx(math.sqrt(3.0) / (CALL_CENTER_PATIENCE.mean / 230.0))
    assert s.svpr < 0.5
    assert s.warnings == ()

    short = QueueSpec(120.0, 100, LogNormal(1.0, 4.0), Exponential(1.0 / 0.5))
    assert summarize(short).svpr == pytest.approx(4.0)
    assert summarize(short).warnings


def test_zm_comparator_keeps_means(bench_spec):
    spec = bench_spec("LN", 5.0)
    zm = zm_summarize(spec)
    full = summarize(spec)
    assert zm.alpha == full.alpha
    assert zm.w == pytest.approx(full.w)
    assert zm.q == pytest.approx(full.q)
    # c_s² = 1 取代 2
    assert zm.sigma_hat_w_sq == pytest.approx(full.sigma_hat_w_sq * (1 + 1.2 + 0.2) / (1 + 2.4 + 0.2))


def test_normalize_patience(bench_spec):
    h, w_bar, f = normalize_patience(bench_spec("D", 10.0))
    assert h.mean == pytest.approx(1.0)
    assert w_bar == pytest.approx(math.log(1.2))
    assert f == pytest.approx(1 / 1.2)
    _, w_bar, _ = normalize_patience(bench_spec("D", 10.0, n=150))
    assert w_bar == 0.0


def test_virtual_wait_cdf_and_pmf(bench_spec):
    spec = bench_spec("E2", 5.0)
    s = summarize(spec)
    assert virtual_wait_cdf(s, s.w) == pytest.approx(0.5)
    i = np.arange(0, 400)
    assert queue_pmf(s, spec, i).sum() == pytest.approx(1.0, abs=1e-6)
    assert np.argmax(queue_pmf(s, spec, i)) == round(spec.n + s.q)


def test_buffer_variance(bench_spec):
    from scipy import integrate, stats

    s = summarize(bench_spec("D", 1.0))
    y = stats.norm(s.q, s.sigma_x)
    first = integrate.quad(lambda u: u * y.pdf(u), 0.0, np.inf)[0]
    second = integrate.quad(lambda u: u * u * y.pdf(u), 0.0, np.inf)[0]
    assert buffer_variance(s) == pytest.approx(second - first ** 2, rel=1e-7)
    assert buffer_variance(s) < s.sigma_x_sq
    # q/σ_x 大時 (X − n)⁺ 幾乎不截斷
    big = summarize(QueueSpec(1.2e4, 10_000, Deterministic(1.0), Exponential(1.0)))
    assert buffer_variance(big) == pytest.approx(big.sigma_x_sq, rel=1e-9)


def test_service_level_bounds_and_monotonicity(bench_spec):
    spec = bench_spec("D", 5.0)
    s = summarize(spec)
    levels = [service_level(spec, d, s) for d in (0.0, 0.5, s.w, 2.0, 5.0, 50.0)]
    assert all(0.0 <= v <= 1.0 for v in levels)
    assert all(b >= a for a, b in zip(levels, levels[1:]))
    # d → ∞: 未放棄比例，與 1 − α 只差二階修正
    assert levels[-1] == pytest.approx(1.0 - s.alpha, abs=1e-3)


def test_service_level_exponential_patience_closed_form(bench_spec):
    # Θ ~ Exp(θ): ∫₀ᵈ Φ_w(u) θe^{−θu} du + Φ_w(d)e^{−θd}
    from scipy import integrate, stats

    spec = bench_spec("LN", 1.0)
    s = summarize(spec)
    d = 0.25
    phi = lambda u: stats.norm.cdf(u, s.w, s.sigma_w)
    body = integrate.quad(lambda u: phi(u) * math.exp(-u), 0.0, d, points=[s.w])[0]
    assert service_level(spec, d, s) == pytest.approx(body + phi(d) * math.exp(-d), rel=1e-8)


def test_effective_abandonment(bench_spec):
    spec = bench_spec("D", 5.0)
    s = summarize(spec)
    value = effective_abandonment(spec, 0.0, s)
    # d = 0: P[Θ < W] / P[W > 0]
    abandon = 1.0 - service_level(spec, 50.0, s)
    assert value == pytest.approx(abandon / (1 - virtual_wait_cdf(s, 0.0)), rel=1e-6)
    assert 0.0 < effective_abandonment(spec, 1.0, s) < 1.0
    with pytest.raises(DegenerateConditioning):
        effective_abandonment(spec, 1e4, s)


def test_fluid_comparators(bench_spec):
    spec = bench_spec("D", 5.0)
    s = summarize(spec)
    assert fluid_service_level(spec, s.w - 0.01) == 0.0
    assert fluid_service_level(spec, s.w + 0.01) == pytest.approx(1 - s.alpha)
    assert fluid_effective_abandonment(spec, 0.0) == pytest.approx(s.alpha)
    with pytest.raises(DegenerateConditioning):
        fluid_effective_abandonment(spec, s.w)


def test_hazard_profile_is_decreasing_for_mixture():
    frame = hazard_profile(CALL_CENTER_PATIENCE, np.linspace(0.0, 300.0, 31))
    assert list(frame.columns) == ["t", "hazard", "pdf", "cdf"]
    assert frame["hazard"].is_monotonic_decreasing
    assert frame["hazard"].iloc[-1] == pytest.approx(1 / 1000, rel=0.05)
