"""
輸出分析模組 - 批次平均、信賴區間、自相關
"""
import math
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np
from scipy import stats

from config import CONFIDENCE_LEVEL


@dataclass(frozen=True)
class Estimate:
    """點估計與信賴區間半寬"""
    mean: float
    half_width: float
    batches: int = 0

    @property
    def lo(self) -> float:
        return self.mean - self.half_width

    @property
    def hi(self) -> float:
        return self.mean + self.half_width

    def covers(self, value: float, widen: float = 1.0) -> bool:
        """value 是否落在 (放寬 widen 倍的) 區間內"""
        return abs(value - self.mean) <= widen * self.half_width

    def overlaps(self, center: float, radius: float) -> bool:
        return abs(center - self.mean) <= self.half_width + radius

    def to_dict(self) -> Dict[str, float]:
        return {"mean": self.mean, "half_width": self.half_width, "batches": self.batches}


def confidence_interval(data, level: float = CONFIDENCE_LEVEL) -> Estimate:
    """
    Student-t 信賴區間，忽略 NaN (例如條件事件未發生的批次)

    Returns:
        Estimate；樣本少於 2 筆時半寬為 NaN
    """
    data = np.asarray(data, dtype=float).ravel()
    data = data[np.isfinite(data)]
    n = data.size
    mean = float(np.mean(data)) if n > 0 else float("nan")
    if n < 2:
        return Estimate(mean, float("nan"), n)
    s = float(np.std(data, ddof=1))
    tcrit = float(stats.t.ppf(0.5 + level / 2.0, df=n - 1))
    return Estimate(mean, tcrit * s / math.sqrt(n), n)


def moment_variance(first, second, level: float = CONFIDENCE_LEVEL) -> Estimate:
    """
    由逐批次一、二階動差估計穩態變異數 E[X²] − E[X]²

    中心化用全體平均 (批次內變異數會少掉批次平均本身的變動)；
    半寬以 delta method 的線性化虛擬值 m2_b − 2·m̄1·m1_b 計算。
    """
    first = np.asarray(first, dtype=float).ravel()
    second = np.asarray(second, dtype=float).ravel()
    ok = np.isfinite(first) & np.isfinite(second)
    first, second = first[ok], second[ok]
    if first.size == 0:
        return Estimate(float("nan"), float("nan"), 0)
    m1 = float(np.mean(first))
    linear = confidence_interval(second - 2.0 * m1 * first, level)
    return Estimate(float(np.mean(second)) - m1 * m1, linear.half_width, linear.batches)


def variance_interval(data, level: float = CONFIDENCE_LEVEL) -> Tuple[float, float, float]:
    """樣本變異數與卡方信賴區間 (var, lo, hi)"""
    data = np.asarray(data, dtype=float).ravel()
    n = data.size
    if n < 2:
        return float("nan"), float("nan"), float("nan")
    var = float(np.var(data, ddof=1))
    df = n - 1
    lo = df * var / float(stats.chi2.ppf(0.5 + level / 2.0, df))
    hi = df * var / float(stats.chi2.ppf(0.5 - level / 2.0, df))
    return var, lo, hi


def lag1_autocorrelation(data) -> float:
    """批次平均的 lag-1 自相關，用來檢查批次是否夠長"""
    x = np.asarray(data, dtype=float).ravel()
    x = x[np.isfinite(x)]
    if x.size < 3:
        return float("nan")
    d = x - x.mean()
    denom = float(np.dot(d, d))
    if denom == 0.0:
        return 0.0
    return float(np.dot(d[:-1], d[1:]) / denom)


def batch_edges(warmup: float, horizon: float, batches: int) -> np.ndarray:
    """[warmup, horizon] 等分為 batches 段的端點"""
    return np.linspace(warmup, horizon, batches + 1)


def batch_ratio(numerator: np.ndarray, denominator: np.ndarray) -> np.ndarray:
    """逐批次比例，分母為 0 的批次為 NaN"""
    numerator = np.asarray(numerator, dtype=float)
    denominator = np.asarray(denominator, dtype=float)
    out = np.full(numerator.shape, np.nan)
    ok = denominator > 0
    out[ok] = numerator[ok] / denominator[ok]
    return out
