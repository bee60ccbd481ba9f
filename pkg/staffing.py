"""
人力配置模組 - 在 ED 區間內找出達成服務目標的最少伺服器數
- 目標: 服務水準 (d 時間內接通比例 ≥ p*) 或有效放棄比例 (< f*)
- 評估器: diffusion / zm / fluid / simulation
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
import pandas as pd

from config import STAFFING_MAX_EXPANSIONS, SVPR_WARN_LEVEL
from diffusion import (
    QueueSpec,
    effective_abandonment,
    fluid_effective_abandonment,
    fluid_service_level,
    service_level,
    summarize,
    zm_summarize,
)
from distributions import Distribution
from errors import (
    ConfigError,
    DegenerateConditioning,
    EDQError,
    EvaluatorError,
    InfeasibleWithinEDRegime,
    NotOverloaded,
)
from simulator import SimConfig, effective_abandonment_key, resolve_threads, run, service_level_key

logger = logging.getLogger(__name__)

OBJECTIVES = ("service_level", "effective_abandonment")
EVALUATORS = ("diffusion", "zm", "fluid", "simulation")


@dataclass(frozen=True)
class StaffingProblem:
    """人力配置問題"""
    arrival_rate: float
    service: Distribution
    patience: Distribution
    objective: str
    target: float
    delay: float
    evaluator: str = "diffusion"
    interarrival: Optional[Distribution] = None
    sim_template: Optional[SimConfig] = None
    curve_range: Optional[Tuple[int, int]] = None
    threads: Optional[int] = None

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective 必須為 {OBJECTIVES} 之一，收到 {self.objective!r}")
        if self.evaluator not in EVALUATORS:
            raise ConfigError(f"evaluator 必須為 {EVALUATORS} 之一，收到 {self.evaluator!r}")
        if not 0.0 < self.target < 1.0:
            raise ConfigError(f"target 必須在 (0, 1) 內，收到 {self.target!r}")
        if self.delay < 0:
            raise ConfigError(f"delay 必須非負，收到 {self.delay!r}")
        if self.evaluator == "simulation" and self.sim_template is None:
            raise ConfigError("simulation 評估器需要 sim_template")
        if self.curve_range is not None:
            lo, hi = self.curve_range
            if not 1 <= lo <= hi:
                raise ConfigError(f"curve_range 不合法: {self.curve_range}")

    @property
    def offered_load(self) -> float:
        """λ/μ"""
        return self.arrival_rate * self.service.mean

    def spec_for(self, n: int) -> QueueSpec:
        return QueueSpec(self.arrival_rate, int(n), self.service, self.patience, self.interarrival)

    def meets(self, value: float) -> bool:
        if not math.isfinite(value):
            return False
        if self.objective == "service_level":
            return value >= self.target
        return value < self.target


@dataclass(frozen=True)
class Evaluation:
    """單一 n 的評估結果"""
    n: int
    value: float
    half_width: Optional[float] = None
    rho: float = float("nan")
    svpr: float = float("nan")
    note: str = ""

    @property
    def lo(self) -> float:
        return self.value - (self.half_width or 0.0)

    @property
    def hi(self) -> float:
        return self.value + (self.half_width or 0.0)


@dataclass
class StaffingResult:
    """人力配置結果"""
    problem: StaffingProblem
    n_min: int
    curve: pd.DataFrame
    rho: float
    svpr: float
    monotone: bool
    ambiguous_band: Optional[Tuple[int, int]] = None
    warnings: Tuple[str, ...] = field(default_factory=tuple)


# =============================================================================
# 單點評估
# =============================================================================

def evaluate_at(problem: StaffingProblem, n: int) -> Evaluation:
    """
    以指定評估器計算 n 台伺服器時的目標值

    Returns:
        Evaluation (simulation 評估器附信賴區間半寬)
    """
    if n < 1:
        raise ConfigError(f"n 必須 ≥ 1，收到 {n}")
    spec = problem.spec_for(n)
    d = problem.delay

    if problem.evaluator in ("diffusion", "zm"):
        summary = summarize(spec) if problem.evaluator == "diffusion" else zm_summarize(spec)
        if problem.objective == "service_level":
            value = service_level(spec, d, summary)
        else:
            value = effective_abandonment(spec, d, summary)
        return Evaluation(n, value, rho=spec.rho, svpr=summary.svpr)

    if problem.evaluator == "fluid":
        if problem.objective == "service_level":
            value = fluid_service_level(spec, d)
        else:
            value = fluid_effective_abandonment(spec, d)
        return Evaluation(n, value, rho=spec.rho)

    # simulation: 各 n 使用同一 seed (共同亂數)
    template = problem.sim_template
    if problem.objective == "service_level":
        cfg = replace(template, spec=spec, service_level_delays=(d,))
        key = service_level_key(d)
    else:
        cfg = replace(template, spec=spec, effective_abd_delays=(d,))
        key = effective_abandonment_key(d)
    est = run(cfg)[key]
    return Evaluation(n, est.mean, half_width=est.half_width, rho=spec.rho)


def _evaluate_many(problem: StaffingProblem, ns: Iterable[int], out: Dict[int, Evaluation],
                   threads: int):
    todo = [n for n in ns if n not in out]
    if not todo:
        return
    if problem.evaluator == "simulation":
        # 外層平行時，內層模擬單執行緒
        problem = replace(problem, sim_template=replace(problem.sim_template, threads=1))

    with ThreadPoolExecutor(max_workers=threads) as executor:
        futures = {executor.submit(evaluate_at, problem, n): n for n in todo}
        for future in as_completed(futures):
            n = futures[future]
            try:
                out[n] = future.result()
            except (DegenerateConditioning, NotOverloaded) as e:
                logger.debug(f"[Staffing] n={n} 超出評估器範圍: {e}")
                out[n] = Evaluation(n, float("nan"), rho=problem.spec_for(n).rho, note=str(e))
            except Exception as e:
                logger.error(f"[Staffing] n={n} 評估失敗: {e}")
                raise EvaluatorError(f"{problem.evaluator} 評估器在 n={n} 失敗: {e}") from e


# =============================================================================
# 最少伺服器搜尋
# =============================================================================

def ed_cap(problem: StaffingProblem) -> int:
    """ρ > 1 的最大 n (n < λ/μ)"""
    return int(math.ceil(problem.offered_load)) - 1


def fluid_start(problem: StaffingProblem) -> int:
    """流體模型的起始點"""
    load = problem.offered_load
    if problem.objective == "service_level":
        return int(math.ceil(problem.target * load))
    return int(math.ceil(load * (1.0 - problem.target)))


def _is_monotone(problem: StaffingProblem, evals: List[Evaluation]) -> bool:
    values = np.array([e.value for e in evals if math.isfinite(e.value)])
    if values.size < 2:
        return True
    step = np.diff(values)
    if problem.objective == "service_level":
        return bool(np.all(step >= -1e-12))
    return bool(np.all(step <= 1e-12))


def _conservative_meets(problem: StaffingProblem, e: Evaluation) -> bool:
    if e.half_width is None or not math.isfinite(e.half_width):
        return problem.meets(e.value)
    edge = e.lo if problem.objective == "service_level" else e.hi
    return problem.meets(edge)


def _curve_frame(problem: StaffingProblem, evaluated: Dict[int, Evaluation], window: Tuple[int, int]) -> pd.DataFrame:
    rows = []
    for n in sorted(evaluated):
        e = evaluated[n]
        rows.append({
            "n": n,
            "value": e.value,
            "half_width": e.half_width if e.half_width is not None else float("nan"),
            "rho": e.rho,
            "svpr": e.svpr,
            "meets": problem.meets(e.value),
            "in_search": window[0] <= n <= window[1],
            "note": e.note,
        })
    return pd.DataFrame(rows)


def evaluate_curve(problem: StaffingProblem, n_lo: int, n_hi: int) -> pd.DataFrame:
    """固定區間 [n_lo, n_hi] 的目標值曲線 (不做搜尋)"""
    if not 1 <= n_lo <= n_hi:
        raise ConfigError(f"n 區間不合法: [{n_lo}, {n_hi}]")
    evaluated: Dict[int, Evaluation] = {}
    _evaluate_many(problem, range(n_lo, n_hi + 1), evaluated, resolve_threads(problem.threads))
    return _curve_frame(problem, evaluated, (n_lo, n_hi))


def min_servers(problem: StaffingProblem) -> StaffingResult:
    """
    最少伺服器數

    從流體估計出發，幾何擴張區間直到下界不達標、上界達標 (上限為 ρ > 1 的邊界)，
    整個區間平行評估後驗證單調性，再線性掃描取最小的達標 n。
    區間內每個 n 都已評估過，二分搜尋省不了計算；線性掃描在曲線不單調時仍回傳
    真正最小的達標 n。

    Raises:
        InfeasibleWithinEDRegime: ρ > 1 範圍內無法達標
        EvaluatorError: 評估器失敗
    """
    threads = resolve_threads(problem.threads)
    cap = ed_cap(problem)
    if cap < 1:
        raise InfeasibleWithinEDRegime(f"λ/μ = {problem.offered_load:g}，沒有 ρ > 1 的伺服器數")

    n0 = min(max(fluid_start(problem), 1), cap)
    width = 2
    lo, hi = max(1, n0 - width), min(cap, n0 + width)
    evaluated: Dict[int, Evaluation] = {}

    for _ in range(STAFFING_MAX_EXPANSIONS):
        _evaluate_many(problem, range(lo, hi + 1), evaluated, threads)
        grow = False
        if problem.meets(evaluated[lo].value) and lo > 1:
            lo = max(1, lo - width)
            grow = True
        if not problem.meets(evaluated[hi].value) and hi < cap:
            hi = min(cap, hi + width)
            grow = True
        if not grow:
            break
        width *= 2
    else:
        raise EvaluatorError(f"搜尋區間擴張 {STAFFING_MAX_EXPANSIONS} 次仍未包住目標")

    if problem.curve_range is not None:
        a, b = problem.curve_range
        _evaluate_many(problem, range(a, b + 1), evaluated, threads)

    window = [evaluated[n] for n in range(lo, hi + 1)]
    warnings: List[str] = []
    monotone = _is_monotone(problem, window)
    if not monotone:
        msg = f"評估曲線在 [{lo}, {hi}] 不單調，使用線性掃描結果"
        logger.warning(f"[Staffing] {msg}")
        warnings.append(msg)

    ambiguous = None
    if problem.evaluator == "simulation":
        hits = [e.n for e in window if _conservative_meets(problem, e)]
        unsure = [e.n for e in window if _conservative_meets(problem, e) != problem.meets(e.value)
                  or (e.half_width is not None and abs(e.value - problem.target) <= e.half_width)]
        if unsure:
            ambiguous = (min(unsure), max(unsure))
            msg = f"目標落在信賴區間內的 n: {ambiguous[0]}..{ambiguous[1]}，取保守值"
            logger.warning(f"[Staffing] {msg}")
            warnings.append(msg)
    else:
        hits = [e.n for e in window if problem.meets(e.value)]

    if not hits:
        raise InfeasibleWithinEDRegime(
            f"n ≤ {cap} (ρ > 1) 內無法達成 {problem.objective} 目標 {problem.target}"
        )
    n_min = min(hits)
    best = evaluated[n_min]

    svpr = best.svpr
    if not math.isfinite(svpr):
        try:
            svpr = summarize(problem.spec_for(n_min)).svpr
        except EDQError:
            svpr = float("nan")
    if math.isfinite(svpr) and svpr > SVPR_WARN_LEVEL:
        warnings.append(f"SVPR {svpr:.3g} > {SVPR_WARN_LEVEL}")

    logger.info(
        f"[Staffing] {problem.evaluator} {problem.objective} target={problem.target} d={problem.delay:g} "
        f"→ n_min={n_min} (ρ={best.rho:.4f})"
    )
    return StaffingResult(
        problem=problem,
        n_min=n_min,
        curve=_curve_frame(problem, evaluated, (lo, hi)),
        rho=best.rho,
        svpr=svpr,
        monotone=monotone,
        ambiguous_band=ambiguous,
        warnings=tuple(warnings),
    )
