"""
更新過程疊加實驗室
- n 個獨立平穩更新過程的疊加 B_n，第一次更新 ~ F_e，之後 ~ F
- 時空縮放 B̃_n(t) = (B_n(γ_n t) − nμγ_n t)/√(nγ_n)
- 變異數剖面、增量獨立性、平穩性、常態性、FSLLN 檢查
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from config import (
    FCLT_MIN_REPLICATIONS_GAUSSIAN,
    FCLT_MIN_REPLICATIONS_VARIANCE,
    FCLT_SIGNIFICANCE,
    FCLT_SLOPE_TOL,
)
from distributions import Distribution, random_stream
from errors import ConfigError, InfiniteThirdMoment
from output_analysis import confidence_interval, variance_interval
from simulator import resolve_threads

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SuperpositionConfig:
    """疊加實驗設定"""
    interrenewal: Distribution
    n: int
    gamma_n: float
    grid: Tuple[float, ...]
    replications: int
    seed: int = 0
    threads: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(float(t) for t in self.grid))
        if not (isinstance(self.n, (int, np.integer)) and self.n >= 1):
            raise ConfigError(f"n 必須為正整數，收到 {self.n!r}")
        if not self.gamma_n > 0:
            raise ConfigError(f"gamma_n 必須為正數，收到 {self.gamma_n!r}")
        if not self.grid or self.grid[0] < 0 or any(b <= a for a, b in zip(self.grid, self.grid[1:])):
            raise ConfigError(f"grid 必須嚴格遞增且 grid[0] ≥ 0: {self.grid}")
        if self.replications < 1:
            raise ConfigError(f"replications 至少 1，收到 {self.replications}")

    @property
    def mu(self) -> float:
        return 1.0 / self.interrenewal.mean

    @property
    def scv(self) -> float:
        return self.interrenewal.moments().scv


@dataclass
class ScaledEnsemble:
    """replications × grid 的 B̃_n(t) 與原始計數 B_n(γ_n t)"""
    config: SuperpositionConfig
    values: np.ndarray
    counts: np.ndarray

    @property
    def grid(self) -> np.ndarray:
        return np.asarray(self.config.grid)

    def to_frame(self) -> pd.DataFrame:
        """長表格式 (replication, t, count, scaled)"""
        reps, points = self.values.shape
        return pd.DataFrame({
            "replication": np.repeat(np.arange(reps), points),
            "t": np.tile(self.grid, reps),
            "count": self.counts.ravel(),
            "scaled": self.values.ravel(),
        })


# =============================================================================
# 產生疊加過程
# =============================================================================

def _superposition_counts(config: SuperpositionConfig, rep: int) -> np.ndarray:
    """單次複製: 每個格點 γ_n t 之前的更新總數"""
    rng = random_stream(config.seed, rep)
    F = config.interrenewal
    scaled_grid = config.gamma_n * np.asarray(config.grid)
    limit = scaled_grid[-1]
    bins = np.zeros(scaled_grid.size + 1, dtype=np.int64)

    epochs = np.asarray(F.equilibrium().sample(rng, config.n), dtype=float).reshape(config.n)
    while epochs.size:
        epochs = epochs[epochs <= limit]
        if not epochs.size:
            break
        # 更新時刻 e 計入所有 γ_n t ≥ e 的格點
        bins += np.bincount(np.searchsorted(scaled_grid, epochs, side="left"), minlength=bins.size)
        epochs = epochs + np.asarray(F.sample(rng, epochs.size), dtype=float)

    return np.cumsum(bins[:-1])


def generate(config: SuperpositionConfig) -> ScaledEnsemble:
    """
    產生 replications 條疊加路徑並做時空縮放

    Raises:
        InfiniteThirdMoment: F 的三階動差不存在
    """
    third = config.interrenewal.moments().third_moment
    if third is None or not math.isfinite(third):
        raise InfiniteThirdMoment(f"{config.interrenewal.label} 三階動差不存在")

    threads = resolve_threads(config.threads)
    rows: Dict[int, np.ndarray] = {}
    with ThreadPoolExecutor(max_workers=threads) as executor:
        futures = {executor.submit(_superposition_counts, config, r): r for r in range(config.replications)}
        for future in as_completed(futures):
            r = futures[future]
            try:
                rows[r] = future.result()
            except Exception as e:
                logger.error(f"[FCLT] replication {r} failed: {e}")
                raise

    counts = np.vstack([rows[r] for r in range(config.replications)])
    t = np.asarray(config.grid)
    n, g, mu = config.n, config.gamma_n, config.mu
    values = (counts - n * mu * g * t[None, :]) / math.sqrt(n * g)

    logger.info(f"[FCLT] n={n} γ_n={g:g} replications={config.replications} grid={len(t)}")
    return ScaledEnsemble(config=config, values=values, counts=counts)


# =============================================================================
# 統計檢定
# =============================================================================

@dataclass
class VarianceProfile:
    frame: pd.DataFrame       # t, statistic, ci_lo, ci_hi
    slope: float
    expected_slope: float     # μ c_s²

    @property
    def relative_error(self) -> float:
        if self.expected_slope == 0:
            return float("inf") if self.slope != 0 else 0.0
        return abs(self.slope - self.expected_slope) / self.expected_slope

    @property
    def within_tolerance(self) -> bool:
        return self.relative_error <= FCLT_SLOPE_TOL


def variance_profile(ens: ScaledEnsemble) -> VarianceProfile:
    """各格點 Var[B̃_n(t)] (卡方信賴區間) 與通過原點的迴歸斜率"""
    if ens.values.shape[0] < FCLT_MIN_REPLICATIONS_VARIANCE:
        logger.warning(f"[FCLT] 變異數剖面建議至少 {FCLT_MIN_REPLICATIONS_VARIANCE} 次複製")

    t = ens.grid
    rows = [variance_interval(ens.values[:, i]) for i in range(t.size)]
    frame = pd.DataFrame({
        "t": t,
        "statistic": [r[0] for r in rows],
        "ci_lo": [r[1] for r in rows],
        "ci_hi": [r[2] for r in rows],
    })
    var = frame["statistic"].to_numpy()
    ok = np.isfinite(var) & (t > 0)
    slope = float(np.dot(t[ok], var[ok]) / np.dot(t[ok], t[ok])) if ok.any() else float("nan")
    return VarianceProfile(frame=frame, slope=slope, expected_slope=ens.config.mu * ens.config.scv)


@dataclass
class IndependenceReport:
    frame: pd.DataFrame       # first, second, correlation, ci_lo, ci_hi, excludes_zero
    flagged: bool
    degenerate: bool = False
    note: str = ""

    @property
    def mean_abs_lag1(self) -> float:
        if self.frame.empty:
            return float("nan")
        lag1 = self.frame[self.frame["second"] == self.frame["first"] + 1]
        return float(lag1["correlation"].abs().mean())


def increment_independence(ens: ScaledEnsemble, significance: float = FCLT_SIGNIFICANCE) -> IndependenceReport:
    """
    不重疊增量 B̃(t_{i+1}) − B̃(t_i) 兩兩之間的樣本相關係數 (Fisher z 信賴區間)

    任一區間不含 0 則 flagged。
    """
    columns = ["first", "second", "t_first", "t_second", "correlation", "ci_lo", "ci_hi", "excludes_zero"]
    reps = ens.values.shape[0]
    if ens.grid.size < 3:
        raise ConfigError("增量獨立性檢定至少需要 3 個格點")
    if reps < 4:
        return IndependenceReport(pd.DataFrame(columns=columns), flagged=False, degenerate=True,
                                  note=f"只有 {reps} 次複製，無法估計相關係數")

    inc = np.diff(ens.values, axis=1)
    t = ens.grid
    zcrit = float(stats.norm.ppf(1.0 - significance / 2.0))
    se = 1.0 / math.sqrt(reps - 3)

    rows = []
    for i in range(inc.shape[1]):
        for j in range(i + 1, inc.shape[1]):
            a, b = inc[:, i], inc[:, j]
            if a.std() == 0 or b.std() == 0:
                r, lo, hi = float("nan"), float("nan"), float("nan")
            else:
                r = float(np.corrcoef(a, b)[0, 1])
                z = math.atanh(min(max(r, -0.999999999999), 0.999999999999))
                lo, hi = math.tanh(z - zcrit * se), math.tanh(z + zcrit * se)
            rows.append((i, j, t[i], t[j], r, lo, hi, bool(lo > 0 or hi < 0)))

    frame = pd.DataFrame(rows, columns=columns)
    return IndependenceReport(frame, flagged=bool(frame["excludes_zero"].any()))


@dataclass
class GaussianityReport:
    t: float
    ks_statistic: float
    ks_pvalue: float
    ad_statistic: float
    ad_critical_1pct: float
    passed: bool
    skipped: bool = False


def gaussianity(ens: ScaledEnsemble, t: float, significance: float = FCLT_SIGNIFICANCE) -> GaussianityReport:
    """B̃_n(t)/√(μc_s²t) 對標準常態的 KS 與 Anderson–Darling 檢定；t = 0 時跳過"""
    idx = np.flatnonzero(np.isclose(ens.grid, t, rtol=1e-12, atol=0.0))
    if not idx.size:
        raise ConfigError(f"t = {t} 不在格點上")
    nan = float("nan")
    if t == 0:
        return GaussianityReport(t, nan, nan, nan, nan, passed=True, skipped=True)

    if ens.values.shape[0] < FCLT_MIN_REPLICATIONS_GAUSSIAN:
        logger.warning(f"[FCLT] 常態性檢定建議至少 {FCLT_MIN_REPLICATIONS_GAUSSIAN} 次複製")

    scale = math.sqrt(ens.config.mu * ens.config.scv * t)
    if scale == 0:
        return GaussianityReport(t, nan, nan, nan, nan, passed=False, skipped=True)

    x = ens.values[:, idx[0]] / scale
    ks = stats.kstest(x, "norm")
    ad = stats.anderson(x, dist="norm")
    crit = float(ad.critical_values[list(ad.significance_level).index(1.0)])
    return GaussianityReport(
        t=float(t),
        ks_statistic=float(ks.statistic),
        ks_pvalue=float(ks.pvalue),
        ad_statistic=float(ad.statistic),
        ad_critical_1pct=crit,
        passed=bool(ks.pvalue >= significance),
    )


@dataclass
class StationarityReport:
    offset_a: float
    offset_b: float
    width: float
    statistic: float
    pvalue: float
    passed: bool


def increment_stationarity(ens: ScaledEnsemble, significance: float = FCLT_SIGNIFICANCE) -> StationarityReport:
    """比較第一段與最後一段等寬增量 B_n(s+h) − B_n(s) 的分布 (雙樣本 KS)"""
    t = ens.grid
    widths = np.diff(t)
    pairs = [(i, j) for i in range(widths.size) for j in range(widths.size - 1, i, -1)
             if math.isclose(widths[i], widths[j], rel_tol=1e-9)]
    if not pairs:
        raise ConfigError("格點中沒有兩段等寬的區間")
    i, j = pairs[0]
    a = ens.counts[:, i + 1] - ens.counts[:, i]
    b = ens.counts[:, j + 1] - ens.counts[:, j]
    res = stats.ks_2samp(a, b)
    return StationarityReport(
        offset_a=float(t[i]),
        offset_b=float(t[j]),
        width=float(widths[i]),
        statistic=float(res.statistic),
        pvalue=float(res.pvalue),
        passed=bool(res.pvalue >= significance),
    )


def fslln_check(config: SuperpositionConfig, n_values: Sequence[int],
                gamma_values: Optional[Sequence[float]] = None) -> pd.DataFrame:
    """
    sup_t |B̄_n(t) − μt| 隨 n 的變化，B̄_n(t) = B_n(γ_n t)/(nγ_n)

    gamma_values 省略時 γ_n = n。

    Returns:
        DataFrame(n, gamma_n, sup_deviation, ci_half_width, reference)，reference = 1/√(nγ_n)
    """
    if gamma_values is None:
        gamma_values = [float(n) for n in n_values]
    if len(gamma_values) != len(n_values):
        raise ConfigError("gamma_values 與 n_values 長度不同")

    rows = []
    for n, g in zip(n_values, gamma_values):
        cfg = replace(config, n=int(n), gamma_n=float(g))
        ens = generate(cfg)
        t = ens.grid
        fluid = ens.counts / (n * g)
        sup = np.max(np.abs(fluid - cfg.mu * t[None, :]), axis=1)
        est = confidence_interval(sup)
        rows.append({
            "n": int(n),
            "gamma_n": float(g),
            "sup_deviation": est.mean,
            "ci_half_width": est.half_width,
            "reference": 1.0 / math.sqrt(n * g),
        })
        logger.info(f"[FCLT] FSLLN n={n} γ_n={g:g} sup|B̄−μt|={est.mean:.4g}")

    frame = pd.DataFrame(rows)
    frame["decreasing"] = frame["sup_deviation"].diff().fillna(-1.0) < 0
    return frame


def ensemble_report_frame(profile: VarianceProfile) -> pd.DataFrame:
    """CSV 輸出用 (t, statistic, ci_lo, ci_hi)"""
    return profile.frame[["t", "statistic", "ci_lo", "ci_hi"]]
