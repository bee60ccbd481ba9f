"""
M/PH/n+M 精確穩態求解
- 狀態: (系統人數 i, 各服務相位的忙碌伺服器數)
- 截斷於層 K，稀疏直接求解 (狀態過多時改用冪次迭代)
- Erlang-A (M/M/n+M) 生死過程閉式解
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.sparse.linalg import spsolve

from config import (
    HYPEREXP_WEIGHT_TOL,
    MAM_DIRECT_MAX_STATES,
    MAM_MAX_DOUBLINGS,
    MAM_POWER_MAX_ITER,
    MAM_POWER_TOL,
    MAM_RESIDUAL_LIMIT,
    MAM_SIGMA_MARGIN,
    MAM_TAIL_MASS_LIMIT,
)
from diffusion import DiffusionSummary, QueueSpec, queue_pmf, summarize
from distributions import Distribution, Erlang, Exponential, Hyperexponential, MomentSummary
from errors import InvalidParameter, SingularSolve, TruncationTooSmall
from simulator import resolve_threads

logger = logging.getLogger(__name__)


# =============================================================================
# Phase-type 服務分布
# =============================================================================

@dataclass(frozen=True)
class PhService:
    """
    非循環 phase-type 分布 (α, S)，S 為上三角子生成矩陣

    提供 mean 與 moments()，可直接當作 QueueSpec 的服務分布計算擴散近似。
    """
    alpha: Tuple[float, ...]
    S: Tuple[Tuple[float, ...], ...]
    label: str = "PH"

    def __post_init__(self):
        alpha = tuple(float(a) for a in self.alpha)
        S = tuple(tuple(float(v) for v in row) for row in self.S)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "S", S)

        m = len(alpha)
        if m == 0 or any(len(row) != m for row in S):
            raise InvalidParameter("PH 的 α 與 S 維度不一致")
        if any(a < 0 for a in alpha) or abs(sum(alpha) - 1.0) > HYPEREXP_WEIGHT_TOL:
            raise InvalidParameter(f"PH 初始機率必須非負且總和為 1: {alpha}")
        mat = self.matrix
        if np.any(np.diag(mat) >= 0) or np.any(mat - np.diag(np.diag(mat)) < 0):
            raise InvalidParameter("S 的對角線必須為負、非對角線非負")
        if np.any(self.exit_rates < -1e-12):
            raise InvalidParameter("S 的列和必須 ≤ 0")
        if np.any(np.tril(mat, -1) != 0):
            raise InvalidParameter("只支援上三角 (非循環) 的 S")

    @property
    def phases(self) -> int:
        return len(self.alpha)

    @property
    def vector(self) -> np.ndarray:
        return np.array(self.alpha)

    @property
    def matrix(self) -> np.ndarray:
        return np.array(self.S)

    @property
    def exit_rates(self) -> np.ndarray:
        return -self.matrix.sum(axis=1)

    def raw_moment(self, k: int) -> float:
        """E[X^k] = k! α (−S)^{-k} 1"""
        inv = np.linalg.inv(-self.matrix)
        return float(math.factorial(k) * self.vector @ np.linalg.matrix_power(inv, k) @ np.ones(self.phases))

    @property
    def mean(self) -> float:
        return self.raw_moment(1)

    def moments(self) -> MomentSummary:
        return MomentSummary.from_raw(self.raw_moment(1), self.raw_moment(2), self.raw_moment(3))

    @classmethod
    def from_distribution(cls, dist: Distribution) -> "PhService":
        """由指數、Erlang 或超指數分布建立"""
        if isinstance(dist, Exponential):
            return cls((1.0,), ((-dist.rate,),), label=dist.label)
        if isinstance(dist, Erlang):
            k, r = dist.shape, dist.rate
            S = [[0.0] * k for _ in range(k)]
            for p in range(k):
                S[p][p] = -r
                if p + 1 < k:
                    S[p][p + 1] = r
            return cls((1.0,) + (0.0,) * (k - 1), tuple(tuple(row) for row in S), label=dist.label)
        if isinstance(dist, Hyperexponential):
            rates = dist.rates
            S = tuple(tuple(-rates[p] if p == q else 0.0 for q in range(rates.size)) for p in range(rates.size))
            return cls(tuple(dist.weights), S, label=dist.label)
        raise InvalidParameter(f"{dist.label} 不是 phase-type 分布")


# =============================================================================
# 狀態空間
# =============================================================================

def _compositions(total: int, parts: int) -> Iterator[Tuple[int, ...]]:
    """total 台伺服器分配到 parts 個相位的所有方式"""
    if parts == 1:
        yield (total,)
        return
    for first in range(total, -1, -1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


@dataclass
class _StateSpace:
    n: int
    K: int
    comps: Dict[int, List[Tuple[int, ...]]]
    index: Dict[int, Dict[Tuple[int, ...], int]]
    offset: np.ndarray

    @classmethod
    def build(cls, n: int, K: int, phases: int) -> "_StateSpace":
        comps, index = {}, {}
        for b in range(n + 1):
            comps[b] = list(_compositions(b, phases))
            index[b] = {c: k for k, c in enumerate(comps[b])}
        sizes = [len(comps[min(i, n)]) for i in range(K + 1)]
        offset = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        return cls(n=n, K=K, comps=comps, index=index, offset=offset)

    @property
    def size(self) -> int:
        return int(self.offset[-1])

    def state(self, level: int, comp: Tuple[int, ...]) -> int:
        return int(self.offset[level] + self.index[min(level, self.n)][comp])


def _generator(lam: float, n: int, ph: PhService, theta: float, space: _StateSpace):
    """組出 Q (COO 三元組) 與每個狀態的向下轉移率"""
    alpha = ph.vector
    S = ph.matrix
    exit_rates = ph.exit_rates
    m = ph.phases
    K = space.K

    rows: List[int] = []
    cols: List[int] = []
    vals: List[float] = []
    down = np.zeros(space.size)
    levels = np.zeros(space.size, dtype=np.int64)
    occupancy = np.zeros((space.size, m))

    def add(src: int, dst: int, rate: float):
        if rate > 0:
            rows.append(src)
            cols.append(dst)
            vals.append(rate)

    for i in range(K + 1):
        b = min(i, n)
        for c in space.comps[b]:
            s = space.state(i, c)
            levels[s] = i
            occupancy[s] = c

            # 到達 (層 K 阻擋)
            if i < K:
                if i < n:
                    for p in range(m):
                        if alpha[p] > 0:
                            nxt = list(c)
                            nxt[p] += 1
                            add(s, space.state(i + 1, tuple(nxt)), lam * alpha[p])
                else:
                    add(s, space.state(i + 1, c), lam)

            for p in range(m):
                if c[p] == 0:
                    continue
                # 相位轉移
                for q in range(m):
                    if q != p and S[p, q] > 0:
                        nxt = list(c)
                        nxt[p] -= 1
                        nxt[q] += 1
                        add(s, space.state(i, tuple(nxt)), c[p] * S[p, q])
                # 服務完成
                rate = c[p] * exit_rates[p]
                if rate <= 0:
                    continue
                down[s] += rate
                if i > n:
                    for q in range(m):
                        if alpha[q] > 0:
                            nxt = list(c)
                            nxt[p] -= 1
                            nxt[q] += 1
                            add(s, space.state(i - 1, tuple(nxt)), rate * alpha[q])
                else:
                    nxt = list(c)
                    nxt[p] -= 1
                    add(s, space.state(i - 1, tuple(nxt)), rate)

            # 放棄
            if i > n:
                add(s, space.state(i - 1, c), (i - n) * theta)
                down[s] += (i - n) * theta

    rows_a = np.asarray(rows, dtype=np.int64)
    cols_a = np.asarray(cols, dtype=np.int64)
    vals_a = np.asarray(vals, dtype=float)
    outflow = np.bincount(rows_a, weights=vals_a, minlength=space.size)
    diag = np.arange(space.size)
    rows_a = np.concatenate([rows_a, diag])
    cols_a = np.concatenate([cols_a, diag])
    vals_a = np.concatenate([vals_a, -outflow])
    return rows_a, cols_a, vals_a, down, levels, occupancy


# =============================================================================
# 求解
# =============================================================================

def _direct_solve(rows, cols, vals, size: int) -> np.ndarray:
    """πQ = 0, Σπ = 1: 解 Qᵀπ = 0 並以正規化方程取代最後一列"""
    keep = cols != size - 1
    t_rows = np.concatenate([cols[keep], np.full(size, size - 1)])
    t_cols = np.concatenate([rows[keep], np.arange(size)])
    t_vals = np.concatenate([vals[keep], np.ones(size)])
    A = sparse.csc_matrix((t_vals, (t_rows, t_cols)), shape=(size, size))
    rhs = np.zeros(size)
    rhs[-1] = 1.0
    pi = spsolve(A, rhs)
    if not np.all(np.isfinite(pi)):
        raise SingularSolve("平衡方程的稀疏直接求解失敗")
    return pi


def _power_solve(Qt: sparse.csr_matrix, size: int) -> np.ndarray:
    """均勻化冪次迭代，每 50 步嘗試一次 Aitken 外插"""
    uniform = float(np.max(-Qt.diagonal())) * 1.0001
    pi = np.full(size, 1.0 / size)
    history: List[np.ndarray] = []

    def residual(x):
        return float(np.max(np.abs(Qt @ x)))

    for it in range(MAM_POWER_MAX_ITER):
        nxt = pi + (Qt @ pi) / uniform
        nxt = np.maximum(nxt, 0.0)
        nxt /= nxt.sum()
        if np.max(np.abs(nxt - pi)) < MAM_POWER_TOL:
            return nxt
        history = (history + [nxt])[-3:]
        pi = nxt
        if it % 50 == 49 and len(history) == 3:
            x0, x1, x2 = history
            d1, d2 = x2 - x1, x1 - x0
            denom = d1 - d2
            safe = np.abs(denom) > 1e-300
            acc = x2.copy()
            acc[safe] = x2[safe] - d1[safe] ** 2 / denom[safe]
            acc = np.maximum(acc, 0.0)
            if acc.sum() > 0:
                acc /= acc.sum()
                if residual(acc) < residual(pi):
                    pi = acc
    raise SingularSolve(f"冪次迭代 {MAM_POWER_MAX_ITER} 步未收斂")


@dataclass
class CtmcSolution:
    """截斷 CTMC 的穩態解"""
    K: int
    n: int
    pi: np.ndarray
    levels: np.ndarray
    occupancy: np.ndarray
    residual: float
    tail_mass: float
    marginal: np.ndarray        # P[X = i], i = 0..K
    departure_flow: np.ndarray  # 層 i 的向下機率流

    @property
    def states(self) -> int:
        return int(self.pi.size)

    def cut_balance_error(self, lam: float) -> float:
        """max_i |λπ(i) − 向下流(i+1)|"""
        return float(np.max(np.abs(lam * self.marginal[:-1] - self.departure_flow[1:])))

    def phase_occupancy(self, level: int) -> np.ndarray:
        """層 level 上各相位的條件期望忙碌數"""
        at = self.levels == level
        mass = self.pi[at].sum()
        if mass <= 0:
            return np.full(self.occupancy.shape[1], np.nan)
        return (self.pi[at] @ self.occupancy[at]) / mass

    def mean_system(self) -> float:
        return float(np.arange(self.K + 1) @ self.marginal)

    def abandonment_fraction(self, lam: float, theta: float) -> float:
        queue = np.maximum(np.arange(self.K + 1) - self.n, 0)
        return float(theta * (queue @ self.marginal) / lam)


def _tail_mass(marginal: np.ndarray) -> float:
    """以最後兩層的比值做幾何外插"""
    if marginal.size < 2 or marginal[-2] <= 0:
        return float(marginal[-1])
    r = marginal[-1] / marginal[-2]
    if r >= 1.0:
        return math.inf
    return float(marginal[-1] * r / (1.0 - r))


def default_truncation(lam: float, n: int, service: PhService, theta: float) -> int:
    """K = n + ⌈q + 12σ_x⌉ (擴散估計)；ρ ≤ 1 時為 n + 50"""
    spec = QueueSpec(lam, n, service, Exponential(theta))
    if spec.rho <= 1.0:
        return n + 50
    s = summarize(spec)
    return n + int(math.ceil(s.q + MAM_SIGMA_MARGIN * s.sigma_x))


def _solve_fixed(lam: float, n: int, service: PhService, theta: float, K: int) -> CtmcSolution:
    space = _StateSpace.build(n, K, service.phases)
    rows, cols, vals, down, levels, occupancy = _generator(lam, n, service, theta, space)
    size = space.size
    Qt = sparse.csr_matrix((vals, (cols, rows)), shape=(size, size))

    if size <= MAM_DIRECT_MAX_STATES:
        pi = _direct_solve(rows, cols, vals, size)
    else:
        logger.info(f"[MAM] {size} 個狀態，改用冪次迭代")
        pi = _power_solve(Qt, size)

    if np.min(pi) < -1e-10:
        raise SingularSolve(f"穩態向量出現負值 {np.min(pi):.3g}")
    pi = np.maximum(pi, 0.0)
    pi /= pi.sum()

    residual = float(np.max(np.abs(Qt @ pi)))
    marginal = np.bincount(levels, weights=pi, minlength=K + 1)
    flow = np.bincount(levels, weights=pi * down, minlength=K + 1)
    tail = _tail_mass(marginal)
    logger.debug(f"[MAM] K={K} states={size} residual={residual:.3g} tail mass={tail:.3g}")

    return CtmcSolution(
        K=K, n=n, pi=pi, levels=levels, occupancy=occupancy,
        residual=residual, tail_mass=tail, marginal=marginal, departure_flow=flow,
    )


def solve(lam: float, n: int, service: PhService, theta: float, K: Optional[int] = None) -> CtmcSolution:
    """
    M/PH/n+M 的截斷穩態分布

    Args:
        lam: 到達率
        n: 伺服器數
        service: phase-type 服務分布
        theta: 放棄率 (耐心 ~ Exponential(theta))
        K: 截斷層數；省略時使用擴散估計並在尾端質量過大時加倍

    Raises:
        TruncationTooSmall: 指定的 K 尾端質量超過 1e-8
        SingularSolve: 求解失敗或殘差過大
    """
    if not (lam > 0 and theta > 0 and n >= 1):
        raise InvalidParameter("λ、θ 必須為正且 n ≥ 1")

    explicit = K is not None
    K = int(K) if explicit else default_truncation(lam, n, service, theta)
    if K <= n:
        raise InvalidParameter(f"截斷層數 K={K} 必須大於 n={n}")

    for _ in range(MAM_MAX_DOUBLINGS + 1):
        sol = _solve_fixed(lam, n, service, theta, K)
        if sol.residual >= MAM_RESIDUAL_LIMIT:
            raise SingularSolve(f"平衡方程殘差 {sol.residual:.3g} ≥ {MAM_RESIDUAL_LIMIT}")
        if sol.tail_mass <= MAM_TAIL_MASS_LIMIT:
            logger.info(f"[MAM] K={K} states={sol.states} tail mass {sol.tail_mass:.3g}")
            return sol
        if explicit:
            raise TruncationTooSmall(f"K={K} 的尾端質量估計 {sol.tail_mass:.3g} > {MAM_TAIL_MASS_LIMIT}")
        K = n + 2 * (K - n)
        logger.info(f"[MAM] 尾端質量 {sol.tail_mass:.3g}，K 加倍為 {K}")

    raise TruncationTooSmall(f"加倍 {MAM_MAX_DOUBLINGS} 次後尾端質量仍過大")


def solve_sweep(lam: float, n: int, service: PhService, thetas: Sequence[float],
                threads: Optional[int] = None, K: Optional[int] = None) -> List[CtmcSolution]:
    """多個放棄率平行求解，結果依輸入順序排列"""
    results: Dict[int, CtmcSolution] = {}
    with ThreadPoolExecutor(max_workers=resolve_threads(threads)) as executor:
        futures = {executor.submit(solve, lam, n, service, th, K): k for k, th in enumerate(thetas)}
        for future in as_completed(futures):
            k = futures[future]
            try:
                results[k] = future.result()
            except Exception as e:
                logger.error(f"[MAM] θ={thetas[k]:g} failed: {e}")
                raise
    return [results[k] for k in range(len(thetas))]


# =============================================================================
# 比較工具
# =============================================================================

def tv_distance(sol: CtmcSolution, summary: DiffusionSummary, spec: QueueSpec) -> float:
    """½ Σ_i |π(i) − 高斯近似 pmf(i)|，i = 0..K"""
    i = np.arange(sol.K + 1)
    return float(0.5 * np.sum(np.abs(sol.marginal - queue_pmf(summary, spec, i))))


def pmf_frame(sol: CtmcSolution, summary: Optional[DiffusionSummary], spec: QueueSpec) -> pd.DataFrame:
    """(i, probability, gaussian_probability)"""
    i = np.arange(sol.K + 1)
    gauss = queue_pmf(summary, spec, i) if summary is not None else np.full(i.size, np.nan)
    return pd.DataFrame({"i": i, "probability": sol.marginal, "gaussian_probability": gauss})


# =============================================================================
# Erlang-A (M/M/n+M) 生死過程
# =============================================================================

def erlang_a_pmf(lam: float, n: int, mu: float, theta: float, K: Optional[int] = None) -> np.ndarray:
    """
    M/M/n+M 穩態分布 (截斷於 K)

    p(i+1)/p(i) = λ / (min(i+1, n)μ + max(i+1−n, 0)θ)
    """
    if K is None:
        K = n + int(math.ceil(lam / theta + 20.0 * math.sqrt(lam / theta) + 50))
    i = np.arange(1, K + 1)
    death = np.minimum(i, n) * mu + np.maximum(i - n, 0) * theta
    log_p = np.concatenate([[0.0], np.cumsum(np.log(lam) - np.log(death))])
    log_p -= log_p.max()
    p = np.exp(log_p)
    return p / p.sum()


def erlang_a_measures(lam: float, n: int, mu: float, theta: float, K: Optional[int] = None) -> Dict[str, float]:
    """M/M/n+M 的放棄比例、排隊長度與系統人數的平均及變異數、等候機率"""
    p = erlang_a_pmf(lam, n, mu, theta, K)
    i = np.arange(p.size)
    queue = np.maximum(i - n, 0)
    mean_system = float(i @ p)
    mean_queue = float(queue @ p)
    return {
        "abandonment_fraction": float(theta * mean_queue / lam),
        "queue_mean": mean_queue,
        "queue_variance": float((queue - mean_queue) ** 2 @ p),
        "system_mean": mean_system,
        "system_variance": float((i - mean_system) ** 2 @ p),
        "prob_wait": float(p[n:].sum()),
    }
