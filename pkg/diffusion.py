"""
擴散近似模組 - ED 區間 GI/GI/n+GI 排隊的公式引擎
- 放棄比例 α、平均等候 w、虛擬等候時間變異數 σ_w²
- 平均排隊長度 q、系統人數變異數 σ_x²
- OU 極限參數、SVPR 指標
- 服務水準、有效放棄比例 (數值積分)
- Zeltyn–Mandelbaum 比較器與流體模型
"""
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from typing import Callable, Dict, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import integrate, special

from config import (
    CONDITIONING_FLOOR,
    QUAD_ABS_TOL,
    QUAD_FAIL_TOL,
    QUAD_LIMIT,
    QUAD_REL_TOL,
    SVPR_WARN_LEVEL,
    TRUNCATION_QUANTILE,
)
from distributions import Distribution, Exponential, Hyperexponential
from errors import (
    DegenerateConditioning,
    InvalidParameter,
    NotAbsolutelyContinuous,
    NotOverloaded,
    PatienceDensityZeroAtW,
    QuadratureFailure,
)

logger = logging.getLogger(__name__)


# =============================================================================
# 資料結構
# =============================================================================

@dataclass(frozen=True)
class QueueSpec:
    """
    GI/GI/n+GI 排隊系統

    interarrival 省略時為 Poisson 到達 (Exponential(λ))。
    """
    arrival_rate: float
    n: int
    service: Distribution
    patience: Distribution
    interarrival: Optional[Distribution] = None

    def __post_init__(self):
        if not (math.isfinite(self.arrival_rate) and self.arrival_rate > 0):
            raise InvalidParameter(f"arrival_rate 必須為正數，收到 {self.arrival_rate!r}")
        if not (isinstance(self.n, (int, np.integer)) and self.n >= 1):
            raise InvalidParameter(f"伺服器數 n 必須為正整數，收到 {self.n!r}")
        if self.interarrival is None:
            object.__setattr__(self, "interarrival", Exponential(self.arrival_rate))
        elif abs(self.interarrival.mean * self.arrival_rate - 1.0) > 1e-9:
            raise InvalidParameter(
                f"到達間隔平均 {self.interarrival.mean:g} 與到達率 {self.arrival_rate:g} 不一致"
            )

    @property
    def mu(self) -> float:
        return 1.0 / self.service.mean

    @property
    def rho(self) -> float:
        return self.arrival_rate / (self.n * self.mu)

    @property
    def gamma(self) -> float:
        return self.patience.mean

    @property
    def service_scv(self) -> float:
        return self.service.moments().scv

    @property
    def interarrival_scv(self) -> float:
        return self.interarrival.moments().scv

    def with_servers(self, n: int) -> "QueueSpec":
        return replace(self, n=n)

    def time_scaled(self, factor: float) -> "QueueSpec":
        """所有時間單位乘上 factor"""
        return QueueSpec(
            arrival_rate=self.arrival_rate / factor,
            n=self.n,
            service=self.service.scaled(factor),
            patience=self.patience.scaled(factor),
            interarrival=self.interarrival.scaled(factor),
        )


@dataclass(frozen=True)
class DiffusionSummary:
    """擴散近似結果"""
    alpha: float                # 放棄比例
    w: float                    # 平均虛擬等候時間
    sigma_w_sq: float           # W(∞) 變異數
    q: float                    # 平均排隊長度
    sigma_x_sq: float           # X(∞) 變異數
    ou_drift_rate: float        # ργf_Θ(w)
    ou_m_variance: float        # σ̂_m²
    sigma_hat_w_sq: float
    sigma_hat_x_sq: float
    sigma_hat_g_sq: float
    svpr: float
    normalized_w: float         # w̄ = w/γ
    rho: float
    n: int
    gamma: float
    mu: float
    density_at_w: float
    warnings: Tuple[str, ...] = field(default_factory=tuple)

    @property
    def sigma_w(self) -> float:
        return math.sqrt(self.sigma_w_sq)

    @property
    def sigma_x(self) -> float:
        return math.sqrt(self.sigma_x_sq)

    def to_dict(self) -> Dict:
        out = asdict(self)
        out["warnings"] = list(self.warnings)
        return out


class NormalizedPatience(NamedTuple):
    H: Distribution
    w_bar: float
    density_at_w_bar: float


# =============================================================================
# 數值積分
# =============================================================================

def _quad(func: Callable[[float], float], a: float, b: float,
          breaks: Sequence[float] = (), what: str = "") -> float:
    """
    scipy.integrate.quad 的包裝，將 breaks 中落在 (a, b) 的點設為分段點

    Raises:
        QuadratureFailure: 誤差估計超過 QUAD_FAIL_TOL
    """
    if b <= a:
        return 0.0

    points = sorted({p for p in breaks if a < p < b})
    result = integrate.quad(
        func, a, b,
        points=points or None,
        epsabs=QUAD_ABS_TOL,
        epsrel=QUAD_REL_TOL,
        limit=QUAD_LIMIT,
        full_output=1,
    )
    value, abserr = result[0], result[1]
    if not math.isfinite(value) or abserr > QUAD_FAIL_TOL:
        raise QuadratureFailure(f"{what} 積分 [{a:g}, {b:g}] 誤差 {abserr:.3g} 超過容許值")
    if len(result) > 3:
        logger.debug(f"[Diffusion] quad {what}: {result[3]}")
    return float(value)


def _squared_tail_integral(patience: Distribution, w: float) -> float:
    """∫₀ʷ (1 − Θ(u))² du"""
    if isinstance(patience, Exponential):
        return -np.expm1(-2.0 * patience.rate * w) / (2.0 * patience.rate)
    if isinstance(patience, Hyperexponential):
        p, r = patience.weights, patience.rates
        pair_rate = r[:, None] + r[None, :]
        return float(np.sum(np.outer(p, p) * -np.expm1(-pair_rate * w) / pair_rate))
    return _quad(lambda u: patience.sf(u) ** 2, 0.0, w, what="(1-Θ)²")


# =============================================================================
# 摘要計算
# =============================================================================

def summarize(spec: QueueSpec) -> DiffusionSummary:
    """
    計算擴散近似的所有輸出

    Args:
        spec: 排隊系統 (ρ > 1)

    Returns:
        DiffusionSummary

    Raises:
        NotOverloaded: ρ ≤ 1
        NotAbsolutelyContinuous: 耐心時間沒有密度
        PatienceDensityZeroAtW: f_Θ(w) = 0
    """
    return _summarize_cached(spec)


@lru_cache(maxsize=512)
def _summarize_cached(spec: QueueSpec) -> DiffusionSummary:
    rho = spec.rho
    if rho <= 1.0:
        raise NotOverloaded(f"ρ = {rho:.6g} ≤ 1，擴散公式只適用於 ED 區間")

    patience = spec.patience
    if not patience.absolutely_continuous:
        raise NotAbsolutelyContinuous(f"耐心時間 {patience.label} 沒有密度函數")

    n = int(spec.n)
    lam = spec.arrival_rate
    mu = spec.mu
    gamma = spec.gamma
    ca2 = spec.interarrival_scv
    cs2 = spec.service_scv

    alpha = (rho - 1.0) / rho
    w = float(patience.quantile(alpha))
    f_w = float(patience.pdf(w))
    if not f_w > 0.0:
        raise PatienceDensityZeroAtW(f"{patience.label} 在 w = {w:g} 的密度為 0")

    c = ca2 + rho * cs2 + rho - 1.0
    ou_m_variance = c / (rho * mu)
    ou_drift_rate = rho * gamma * f_w
    sigma_hat_w_sq = c / (2.0 * rho ** 2 * mu * gamma * f_w)
    sigma_w_sq = sigma_hat_w_sq * gamma / n

    i1 = float(patience.integrated_tail(w))
    i3 = _squared_tail_integral(patience, w)
    i2 = i1 - i3
    q = lam * i1

    sigma_hat_g_sq = (rho * mu / gamma) * (i2 + ca2 * i3)
    sigma_hat_x_sq = mu ** 2 * sigma_hat_w_sq + sigma_hat_g_sq
    sigma_x_sq = sigma_hat_x_sq * n * gamma

    svpr = math.sqrt(cs2) / (gamma * mu)
    warnings = []
    if svpr > SVPR_WARN_LEVEL:
        msg = f"SVPR {svpr:.3g} > {SVPR_WARN_LEVEL}: 服務時間變異相對耐心過大，近似可能不準"
        logger.warning(f"[Diffusion] {msg}")
        warnings.append(msg)

    logger.debug(
        f"[Diffusion] n={n} ρ={rho:.4f} α={alpha:.5f} w={w:.6g} σ_w²={sigma_w_sq:.6g} "
        f"q={q:.6g} σ_x²={sigma_x_sq:.6g}"
    )

    return DiffusionSummary(
        alpha=alpha,
        w=w,
        sigma_w_sq=sigma_w_sq,
        q=q,
        sigma_x_sq=sigma_x_sq,
        ou_drift_rate=ou_drift_rate,
        ou_m_variance=ou_m_variance,
        sigma_hat_w_sq=sigma_hat_w_sq,
        sigma_hat_x_sq=sigma_hat_x_sq,
        sigma_hat_g_sq=sigma_hat_g_sq,
        svpr=svpr,
        normalized_w=w / gamma,
        rho=rho,
        n=n,
        gamma=gamma,
        mu=mu,
        density_at_w=f_w,
        warnings=tuple(warnings),
    )


def zm_summarize(spec: QueueSpec) -> DiffusionSummary:
    """Zeltyn–Mandelbaum 比較器: 視到達與服務為指數分布 (c_a² = c_s² = 1)，平均數不變"""
    service = spec.service if isinstance(spec.service, Exponential) else Exponential(spec.mu)
    interarrival = (
        spec.interarrival if isinstance(spec.interarrival, Exponential)
        else Exponential(spec.arrival_rate)
    )
    return summarize(replace(spec, service=service, interarrival=interarrival))


def normalize_patience(spec: QueueSpec) -> NormalizedPatience:
    """
    單位平均化的耐心分布 H(u) = Θ(γu)

    Returns:
        (H, w̄ = H⁻¹((ρ−1)/ρ), f_H(w̄))；ρ ≤ 1 時 w̄ = 0
    """
    H = spec.patience.scaled(1.0 / spec.gamma)
    alpha = max((spec.rho - 1.0) / spec.rho, 0.0)
    w_bar = float(H.quantile(alpha))
    density = float(H.pdf(w_bar)) if H.absolutely_continuous else float("nan")
    return NormalizedPatience(H, w_bar, density)


# =============================================================================
# 穩態分布
# =============================================================================

def virtual_wait_tail(summary: DiffusionSummary, a):
    """P[W̃(∞) > a] = 1 − Φ(a/σ̂_w)"""
    return special.ndtr(-np.asarray(a, dtype=float) / math.sqrt(summary.sigma_hat_w_sq))


def queue_tail(summary: DiffusionSummary, a):
    """P[X̃(∞) > a] = 1 − Φ(a/σ̂_x)"""
    return special.ndtr(-np.asarray(a, dtype=float) / math.sqrt(summary.sigma_hat_x_sq))


def virtual_wait_cdf(summary: DiffusionSummary, x):
    """Φ_w(x): W(∞) ~ N(w, σ_w²)"""
    return special.ndtr((np.asarray(x, dtype=float) - summary.w) / summary.sigma_w)


def buffer_variance(summary: DiffusionSummary) -> float:
    """
    排隊人數 (X − n)⁺ 的變異數，X − n ~ N(q, σ_x²)

    q/σ_x 大時趨近 σ_x²。
    """
    q, sigma = summary.q, summary.sigma_x
    z = q / sigma
    cdf, pdf = float(special.ndtr(z)), math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    first = q * cdf + sigma * pdf
    second = (q * q + sigma * sigma) * cdf + q * sigma * pdf
    return second - first * first


def queue_pmf(summary: DiffusionSummary, spec: QueueSpec, i):
    """系統人數的高斯近似 (1/σ_x)·φ((i − n − q)/σ_x)，不做連續性修正"""
    sigma = summary.sigma_x
    z = (np.asarray(i, dtype=float) - spec.n - summary.q) / sigma
    return np.exp(-0.5 * z * z) / (sigma * math.sqrt(2.0 * math.pi))


# =============================================================================
# 服務水準與有效放棄比例
# =============================================================================

def _phi_w(summary: DiffusionSummary) -> Callable[[float], float]:
    mean, sd = summary.w, summary.sigma_w
    return lambda u: special.ndtr((u - mean) / sd)


def service_level(spec: QueueSpec, d: float, summary: Optional[DiffusionSummary] = None) -> float:
    """
    d 時間內接通的比例 ∫₀^∞ Φ_w(u∧d) f_Θ(u) du

    拆成 ∫₀ᵈ Φ_w(u) f_Θ(u) du + Φ_w(d)(1 − Θ(d))，右半段為閉式。

    Args:
        spec: 排隊系統
        d: 服務目標時間
        summary: 預先計算的摘要 (例如 zm_summarize 的結果)
    """
    if d < 0:
        raise InvalidParameter(f"d 必須非負，收到 {d!r}")
    summary = summary or summarize(spec)
    patience = spec.patience
    phi = _phi_w(summary)

    body = _quad(lambda u: phi(u) * patience.pdf(u), 0.0, d, breaks=[summary.w], what="service level")
    value = body + phi(d) * patience.sf(d)
    return float(min(max(value, 0.0), 1.0))


def effective_abandonment(spec: QueueSpec, d: float, summary: Optional[DiffusionSummary] = None) -> float:
    """
    等候超過 d 的顧客中放棄的比例
    ∫_d^∞ (1 − Φ_w(u)) f_Θ(u) du / [(1 − Θ(d))(1 − Φ_w(d))]

    Raises:
        DegenerateConditioning: 分母下溢
    """
    if d < 0:
        raise InvalidParameter(f"d 必須非負，收到 {d!r}")
    summary = summary or summarize(spec)
    patience = spec.patience
    phi = _phi_w(summary)

    denominator = float(patience.sf(d)) * (1.0 - phi(d))
    if denominator < CONDITIONING_FLOOR:
        raise DegenerateConditioning(f"P[ζ > {d:g}, W > {d:g}] = {denominator:.3g}，條件事件機率為零")

    upper = max(float(patience.quantile(TRUNCATION_QUANTILE)), d)
    numerator = _quad(
        lambda u: (1.0 - phi(u)) * patience.pdf(u),
        d, upper, breaks=[summary.w], what="effective abandonment",
    )
    truncated = float(patience.sf(upper)) * (1.0 - phi(upper))
    logger.debug(f"[Diffusion] 截斷於 {upper:.6g}，忽略質量 ≤ {truncated:.3g}")

    return float(min(max(numerator / denominator, 0.0), 1.0))


# =============================================================================
# 流體模型比較器
# =============================================================================

def fluid_service_level(spec: QueueSpec, d: float) -> float:
    """流體模型: 所有顧客等候 w，服務水準 (1 − Θ(w))·1{w ≤ d}"""
    summary = summarize(spec)
    return float(spec.patience.sf(summary.w)) if summary.w <= d else 0.0


def fluid_effective_abandonment(spec: QueueSpec, d: float) -> float:
    """流體模型的有效放棄比例 (Θ(w) − Θ(d))/(1 − Θ(d))；d ≥ w 時無法估計"""
    summary = summarize(spec)
    if d >= summary.w:
        raise DegenerateConditioning(f"d = {d:g} ≥ w = {summary.w:g}，流體模型中沒有等候超過 d 的顧客")
    sf_d = float(spec.patience.sf(d))
    if sf_d < CONDITIONING_FLOOR:
        raise DegenerateConditioning(f"1 − Θ({d:g}) 為零")
    return float((spec.patience.cdf(summary.w) - spec.patience.cdf(d)) / sf_d)


def hazard_profile(dist: Distribution, grid: Sequence[float]) -> pd.DataFrame:
    """危險率曲線 (t, hazard, pdf, cdf)"""
    t = np.asarray(grid, dtype=float)
    return pd.DataFrame({
        "t": t,
        "hazard": dist.hazard(t),
        "pdf": dist.pdf(t),
        "cdf": dist.cdf(t),
    })
