"""
分布工具模組
- 指數 / 確定性 / Erlang / 對數常態 / 超指數 / 平衡分布 (equilibrium)
- CDF、密度、危險率、分位數、動差、抽樣
- 可分割的亂數串流與 JSON 設定格式
"""
import math
from dataclasses import dataclass
from typing import Any, Callable, Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import integrate, special, stats

from config import BISECTION_MAX_ITER, HYPEREXP_WEIGHT_TOL, QUANTILE_REL_TOL
from errors import (
    InfiniteMean,
    InvalidParameter,
    InvalidProbability,
    NotAbsolutelyContinuous,
    SupportExceeded,
)

ArrayLike = Union[float, Sequence[float], np.ndarray]


# =============================================================================
# 亂數串流
# =============================================================================

def random_stream(seed: int, *ids: int) -> np.random.Generator:
    """
    依 (seed, stream-id, substream-id, ...) 建立獨立的亂數串流

    使用 counter-based 的 Philox，同一組 key 永遠得到同一條串流，
    與執行緒排程無關。
    """
    if seed < 0 or any(i < 0 for i in ids):
        raise InvalidParameter(f"seed 與串流編號必須為非負整數: {seed}, {ids}")
    seq = np.random.SeedSequence(seed, spawn_key=tuple(int(i) for i in ids))
    return np.random.Generator(np.random.Philox(seq))


def spawn_streams(seed: int, count: int, *ids: int) -> list:
    """一次建立 count 條子串流 (最後一層 id 為 0..count-1)"""
    return [random_stream(seed, *ids, j) for j in range(count)]


# =============================================================================
# 共用工具
# =============================================================================

def _as_array(x: ArrayLike) -> Tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=float)
    return np.atleast_1d(arr).astype(float, copy=True), arr.ndim == 0


def _finish(out: np.ndarray, scalar: bool):
    return float(out[0]) if scalar else out


def _require_positive(name: str, value: float):
    if not (isinstance(value, (int, float, np.floating, np.integer)) and math.isfinite(value) and value > 0):
        raise InvalidParameter(f"{name} 必須為正數，收到 {value!r}")


def _bisect_quantile(cdf: Callable[[np.ndarray], np.ndarray], p: np.ndarray, start: float) -> np.ndarray:
    """
    向量化二分法: inf{x >= 0 : cdf(x) >= p}

    上界由 start 開始倍增直到 cdf(upper) > p，相對誤差 QUANTILE_REL_TOL。
    """
    p = np.asarray(p, dtype=float)
    lo = np.zeros_like(p)
    hi = np.full_like(p, max(start, 1e-300))

    for _ in range(BISECTION_MAX_ITER):
        short = cdf(hi) <= p
        if not short.any():
            break
        hi[short] *= 2.0

    for _ in range(BISECTION_MAX_ITER):
        mid = 0.5 * (lo + hi)
        ge = cdf(mid) >= p
        hi = np.where(ge, mid, hi)
        lo = np.where(ge, lo, mid)
        if np.all(hi - lo <= QUANTILE_REL_TOL * hi):
            break

    return np.where(p <= 0.0, 0.0, hi)


def _polish_upward(cdf: Callable[[np.ndarray], np.ndarray], q: np.ndarray, p: np.ndarray) -> np.ndarray:
    """修正閉式分位數的捨入誤差，保證 cdf(q) >= p"""
    q = q.copy()
    for _ in range(1000):
        low = cdf(q) < p
        if not low.any():
            break
        q[low] = np.nextafter(q[low], np.inf)
    return q


@dataclass(frozen=True)
class MomentSummary:
    """動差摘要"""
    mean: float
    variance: float
    scv: float
    third_moment: Optional[float] = None

    @classmethod
    def from_raw(cls, m1: float, m2: float, m3: Optional[float]) -> "MomentSummary":
        variance = max(m2 - m1 * m1, 0.0)
        third = m3 if (m3 is not None and math.isfinite(m3)) else None
        return cls(mean=m1, variance=variance, scv=variance / (m1 * m1), third_moment=third)


# =============================================================================
# 分布基底類別
# =============================================================================

class Distribution:
    """
    非負隨機變數的參數化分布

    所有求值函數接受純量或 numpy 陣列，純量輸入回傳 float。
    """

    absolutely_continuous = True
    # 危險率有閉式 (尾端 sf 下溢時仍有限)
    closed_form_hazard = False

    # --- 子類別實作 (只會收到 x >= 0) ---
    def _cdf(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _sf(self, x: np.ndarray) -> np.ndarray:
        return 1.0 - self._cdf(x)

    def _pdf(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _hazard(self, x: np.ndarray) -> np.ndarray:
        return self._pdf(x) / self._sf(x)

    def _quantile(self, p: np.ndarray) -> np.ndarray:
        return _bisect_quantile(self._cdf, p, self.mean)

    def _integrated_tail(self, x: np.ndarray) -> np.ndarray:
        return np.array([
            integrate.quad(lambda u: float(self._sf(np.array([u]))[0]), 0.0, xi, limit=200)[0]
            for xi in x
        ])

    def raw_moment(self, k: int) -> float:
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, size: Optional[int] = None):
        raise NotImplementedError

    def scaled(self, factor: float) -> "Distribution":
        raise NotImplementedError

    @property
    def label(self) -> str:
        return type(self).__name__

    # --- 公開介面 ---
    @property
    def mean(self) -> float:
        return self.raw_moment(1)

    def cdf(self, x: ArrayLike):
        arr, scalar = _as_array(x)
        out = np.zeros_like(arr)
        pos = arr >= 0
        out[pos] = self._cdf(arr[pos])
        return _finish(np.clip(out, 0.0, 1.0), scalar)

    def sf(self, x: ArrayLike):
        arr, scalar = _as_array(x)
        out = np.ones_like(arr)
        pos = arr >= 0
        out[pos] = self._sf(arr[pos])
        return _finish(np.clip(out, 0.0, 1.0), scalar)

    def pdf(self, x: ArrayLike):
        if not self.absolutely_continuous:
            raise NotAbsolutelyContinuous(f"{self.label} 沒有密度函數")
        arr, scalar = _as_array(x)
        out = np.zeros_like(arr)
        pos = arr >= 0
        out[pos] = self._pdf(arr[pos])
        return _finish(out, scalar)

    def hazard(self, x: ArrayLike):
        if not self.absolutely_continuous:
            raise NotAbsolutelyContinuous(f"{self.label} 沒有危險率函數")
        arr, scalar = _as_array(x)
        if not self.closed_form_hazard and np.any(self.sf(arr) <= 0.0):
            raise SupportExceeded(f"{self.label} 在 x={arr.max():g} 的 CDF 已為 1")
        out = np.zeros_like(arr)
        pos = arr >= 0
        out[pos] = self._hazard(arr[pos])
        return _finish(out, scalar)

    def quantile(self, p: ArrayLike):
        arr, scalar = _as_array(p)
        if np.any(~np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr >= 1.0):
            raise InvalidProbability(f"分位數機率必須在 [0, 1) 內，收到 {p!r}")
        return _finish(self._quantile(arr), scalar)

    def integrated_tail(self, x: ArrayLike):
        """∫₀ˣ (1 − F(u)) du"""
        arr, scalar = _as_array(x)
        out = np.zeros_like(arr)
        pos = arr > 0
        out[pos] = self._integrated_tail(arr[pos])
        return _finish(out, scalar)

    def moments(self) -> MomentSummary:
        return MomentSummary.from_raw(self.raw_moment(1), self.raw_moment(2), self.raw_moment(3))

    def equilibrium(self) -> "Distribution":
        """平衡 (stationary-excess) 分布 F_e(t) = μ∫₀ᵗ(1−F(u))du"""
        return EquilibriumOf(self)


# =============================================================================
# 各分布族
# =============================================================================

@dataclass(frozen=True)
class Exponential(Distribution):
    rate: float
    closed_form_hazard = True

    def __post_init__(self):
        _require_positive("rate", self.rate)

    @property
    def label(self) -> str:
        return f"Exp(mean={1.0 / self.rate:g})"

    def _cdf(self, x):
        return -np.expm1(-self.rate * x)

    def _sf(self, x):
        return np.exp(-self.rate * x)

    def _pdf(self, x):
        return self.rate * np.exp(-self.rate * x)

    def _hazard(self, x):
        return np.full_like(x, self.rate)

    def _quantile(self, p):
        return -np.log1p(-p) / self.rate

    def _integrated_tail(self, x):
        return -np.expm1(-self.rate * x) / self.rate

    def raw_moment(self, k: int) -> float:
        return math.factorial(k) / self.rate ** k

    def sample(self, rng, size=None):
        return rng.exponential(1.0 / self.rate, size)

    def scaled(self, factor: float) -> "Exponential":
        return Exponential(self.rate / factor)

    def equilibrium(self) -> "Exponential":
        # 無記憶性: 平衡分布即自身
        return self


@dataclass(frozen=True)
class Deterministic(Distribution):
    value: float

    absolutely_continuous = False

    def __post_init__(self):
        _require_positive("value", self.value)

    @property
    def label(self) -> str:
        return f"D({self.value:g})"

    def _cdf(self, x):
        # 右連續: x >= value 時為 1
        return (x >= self.value).astype(float)

    def _sf(self, x):
        return (x < self.value).astype(float)

    def _quantile(self, p):
        return np.full_like(p, self.value)

    def _integrated_tail(self, x):
        return np.minimum(x, self.value)

    def raw_moment(self, k: int) -> float:
        return self.value ** k

    def sample(self, rng, size=None):
        if size is None:
            return float(self.value)
        return np.full(size, float(self.value))

    def scaled(self, factor: float) -> "Deterministic":
        return Deterministic(self.value * factor)


@dataclass(frozen=True)
class Erlang(Distribution):
    shape: int
    rate: float

    def __post_init__(self):
        if not (isinstance(self.shape, (int, np.integer)) and self.shape >= 1):
            raise InvalidParameter(f"Erlang shape 必須為正整數，收到 {self.shape!r}")
        _require_positive("rate", self.rate)

    @property
    def label(self) -> str:
        return f"E{self.shape}(mean={self.shape / self.rate:g})"

    def _cdf(self, x):
        return special.gammainc(self.shape, self.rate * x)

    def _sf(self, x):
        return special.gammaincc(self.shape, self.rate * x)

    def _pdf(self, x):
        return stats.gamma.pdf(x, a=self.shape, scale=1.0 / self.rate)

    def _quantile(self, p):
        q = stats.gamma.ppf(p, a=self.shape, scale=1.0 / self.rate)
        return _polish_upward(self._cdf, q, p)

    def _integrated_tail(self, x):
        rx = self.rate * x
        return sum(special.gammainc(j, rx) for j in range(1, self.shape + 1)) / self.rate

    def raw_moment(self, k: int) -> float:
        return math.prod(self.shape + j for j in range(k)) / self.rate ** k

    def sample(self, rng, size=None):
        return rng.gamma(self.shape, 1.0 / self.rate, size)

    def scaled(self, factor: float) -> "Erlang":
        return Erlang(self.shape, self.rate / factor)


@dataclass(frozen=True)
class LogNormal(Distribution):
    """以 (平均數, SCV) 參數化的對數常態分布"""
    mean_value: float
    scv: float

    def __post_init__(self):
        _require_positive("mean", self.mean_value)
        if not (math.isfinite(self.scv) and self.scv > 0):
            raise InvalidParameter(f"LogNormal scv 必須為正數 (scv=0 請改用 Deterministic)，收到 {self.scv!r}")

    @property
    def label(self) -> str:
        return f"LN(mean={self.mean_value:g}, scv={self.scv:g})"

    @property
    def sigma(self) -> float:
        return math.sqrt(math.log1p(self.scv))

    @property
    def location(self) -> float:
        return math.log(self.mean_value) - 0.5 * math.log1p(self.scv)

    @property
    def _frozen(self):
        return stats.lognorm(s=self.sigma, scale=math.exp(self.location))

    def _cdf(self, x):
        return self._frozen.cdf(x)

    def _sf(self, x):
        return self._frozen.sf(x)

    def _pdf(self, x):
        return self._frozen.pdf(x)

    def _quantile(self, p):
        return _polish_upward(self._cdf, self._frozen.ppf(p), p)

    def _integrated_tail(self, x):
        # ∫₀ˣ sf = x·sf(x) + E[X; X <= x]
        s, m = self.sigma, self.location
        with np.errstate(divide="ignore"):
            z = (np.log(x) - m - s * s) / s
        return x * self._sf(x) + self.mean_value * special.ndtr(z)

    def raw_moment(self, k: int) -> float:
        s2 = math.log1p(self.scv)
        return math.exp(k * self.location + 0.5 * k * k * s2)

    @property
    def mean(self) -> float:
        return self.mean_value

    def sample(self, rng, size=None):
        return rng.lognormal(self.location, self.sigma, size)

    def scaled(self, factor: float) -> "LogNormal":
        return LogNormal(self.mean_value * factor, self.scv)


@dataclass(frozen=True)
class Hyperexponential(Distribution):
    """超指數分布，branches 為 (權重, 速率) 序列"""
    branches: Tuple[Tuple[float, float], ...]
    closed_form_hazard = True

    def __post_init__(self):
        branches = tuple((float(p), float(r)) for p, r in self.branches)
        if not branches:
            raise InvalidParameter("Hyperexponential 至少需要一個分支")
        for p, r in branches:
            _require_positive("branch weight", p)
            _require_positive("branch rate", r)
        total = sum(p for p, _ in branches)
        if abs(total - 1.0) > HYPEREXP_WEIGHT_TOL:
            raise InvalidParameter(f"Hyperexponential 權重總和必須為 1，收到 {total!r}")
        object.__setattr__(self, "branches", branches)

    @classmethod
    def from_means(cls, branches: Sequence[Tuple[float, float]]) -> "Hyperexponential":
        """由 (權重, 平均數) 建立"""
        return cls(tuple((p, 1.0 / m) for p, m in branches))

    @property
    def label(self) -> str:
        parts = ", ".join(f"{p:g}@{1.0 / r:g}" for p, r in self.branches)
        return f"H{len(self.branches)}({parts})"

    @property
    def weights(self) -> np.ndarray:
        return np.array([p for p, _ in self.branches])

    @property
    def rates(self) -> np.ndarray:
        return np.array([r for _, r in self.branches])

    def _sf(self, x):
        return np.exp(-np.outer(x, self.rates)) @ self.weights

    def _cdf(self, x):
        return -np.expm1(-np.outer(x, self.rates)) @ self.weights

    def _pdf(self, x):
        return np.exp(-np.outer(x, self.rates)) @ (self.weights * self.rates)

    def _hazard(self, x):
        # 以 log-sum-exp 計算後驗權重，避免尾端下溢
        log_w = np.log(self.weights)[None, :] - np.outer(x, self.rates)
        log_w -= log_w.max(axis=1, keepdims=True)
        w = np.exp(log_w)
        return (w @ self.rates) / w.sum(axis=1)

    def _integrated_tail(self, x):
        return -np.expm1(-np.outer(x, self.rates)) @ (self.weights / self.rates)

    def raw_moment(self, k: int) -> float:
        return float(np.sum(self.weights * math.factorial(k) / self.rates ** k))

    def sample(self, rng, size=None):
        idx = rng.choice(len(self.branches), size=size, p=self.weights)
        return rng.exponential(1.0 / self.rates[idx])

    def scaled(self, factor: float) -> "Hyperexponential":
        return Hyperexponential(tuple((p, r / factor) for p, r in self.branches))


@dataclass(frozen=True)
class EquilibriumOf(Distribution):
    """平衡分布: cdf(t) = ∫₀ᵗ(1−F(u))du / E[X]"""
    base: Distribution

    def __post_init__(self):
        m = self.base.mean
        if not (math.isfinite(m) and m > 0):
            raise InfiniteMean(f"{self.base.label} 的平均數必須有限且為正")

    @property
    def label(self) -> str:
        return f"Eq[{self.base.label}]"

    def _cdf(self, x):
        return self.base.integrated_tail(x) / self.base.mean

    def _sf(self, x):
        return 1.0 - self._cdf(x)

    def _pdf(self, x):
        return self.base.sf(x) / self.base.mean

    def _quantile(self, p):
        return _bisect_quantile(self._cdf, p, max(self.mean, self.base.mean))

    def raw_moment(self, k: int) -> float:
        return self.base.raw_moment(k + 1) / ((k + 1) * self.base.mean)

    def sample(self, rng, size=None):
        # 反函數法 (二分法)，得到精確的平衡延遲
        u = rng.random(size)
        if size is None:
            return float(self._quantile(np.array([u]))[0])
        return self._quantile(np.asarray(u))

    def scaled(self, factor: float) -> "EquilibriumOf":
        return EquilibriumOf(self.base.scaled(factor))


# =============================================================================
# JSON 設定格式 (設定檔使用平均數，內部轉為速率)
# =============================================================================

_CONFIG_KEYS = {
    "exp": {"type", "mean"},
    "det": {"type", "value"},
    "erlang": {"type", "shape", "mean"},
    "lognormal": {"type", "mean", "scv"},
    "hyperexp": {"type", "branches"},
    "equilibrium": {"type", "base"},
}


def distribution_from_config(cfg: Dict[str, Any]) -> Distribution:
    """
    由 JSON 設定建立分布

    Usage:
        distribution_from_config({"type": "hyperexp",
                                  "branches": [{"p": 0.98, "mean": 1000}, {"p": 0.02, "mean": 6}]})
    """
    if not isinstance(cfg, dict):
        raise InvalidParameter(f"分布設定必須為 JSON 物件，收到 {cfg!r}")

    kind = cfg.get("type")
    if kind not in _CONFIG_KEYS:
        raise InvalidParameter(f"未知的分布類型: {kind!r}")

    expected = _CONFIG_KEYS[kind]
    unknown = set(cfg) - expected
    missing = expected - set(cfg)
    if unknown or missing:
        raise InvalidParameter(f"{kind} 設定欄位錯誤: 多餘 {sorted(unknown)}，缺少 {sorted(missing)}")

    try:
        if kind == "exp":
            return Exponential(1.0 / float(cfg["mean"]))
        if kind == "det":
            return Deterministic(float(cfg["value"]))
        if kind == "erlang":
            shape = int(cfg["shape"])
            return Erlang(shape, shape / float(cfg["mean"]))
        if kind == "lognormal":
            if float(cfg["scv"]) == 0.0:
                # 退化的對數常態
                return Deterministic(float(cfg["mean"]))
            return LogNormal(float(cfg["mean"]), float(cfg["scv"]))
        if kind == "hyperexp":
            branches = []
            for b in cfg["branches"]:
                if set(b) != {"p", "mean"}:
                    raise InvalidParameter(f"hyperexp 分支必須只有 p 與 mean: {b!r}")
                branches.append((float(b["p"]), float(b["mean"])))
            return Hyperexponential.from_means(branches)
        return EquilibriumOf(distribution_from_config(cfg["base"]))
    except (TypeError, ValueError, ZeroDivisionError) as e:
        raise InvalidParameter(f"{kind} 設定數值錯誤: {e}") from e


def distribution_to_config(dist: Distribution) -> Dict[str, Any]:
    """分布轉回 JSON 設定"""
    if isinstance(dist, Exponential):
        return {"type": "exp", "mean": 1.0 / dist.rate}
    if isinstance(dist, Deterministic):
        return {"type": "det", "value": dist.value}
    if isinstance(dist, Erlang):
        return {"type": "erlang", "shape": dist.shape, "mean": dist.shape / dist.rate}
    if isinstance(dist, LogNormal):
        return {"type": "lognormal", "mean": dist.mean_value, "scv": dist.scv}
    if isinstance(dist, Hyperexponential):
        return {"type": "hyperexp",
                "branches": [{"p": p, "mean": 1.0 / r} for p, r in dist.branches]}
    if isinstance(dist, EquilibriumOf):
        return {"type": "equilibrium", "base": distribution_to_config(dist.base)}
    raise InvalidParameter(f"無法序列化的分布: {dist!r}")
