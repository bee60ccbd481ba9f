"""
離散事件模擬模組 - G/GI/n+GI 排隊 (含放棄)
- FCFS 顧客順序遞迴 (依伺服器釋放時間的 heap)
- 伺服器索引的服務時間指派，初始顧客的剩餘服務時間取自平衡分布
- 虛擬等候時間重建、批次平均信賴區間
"""
import heapq
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import (
    ARRIVAL_CHUNK,
    CONFIDENCE_LEVEL,
    DEFAULT_BATCHES,
    DEFAULT_THREADS,
    MIN_BATCHES,
    SERVICE_CHUNK,
    THREADS_ENV_VAR,
)
from diffusion import QueueSpec, summarize
from distributions import random_stream
from errors import ConfigError, EDQError
from output_analysis import (
    Estimate,
    batch_edges,
    batch_ratio,
    confidence_interval,
    lag1_autocorrelation,
    moment_variance,
)

logger = logging.getLogger(__name__)

# 亂數串流編號
STREAM_ARRIVAL = 0
STREAM_PATIENCE = 1
STREAM_INITIAL = 2
STREAM_SERVER = 3
STREAM_CUSTOMER_SERVICE = 4

SERVICE_ASSIGNMENTS = ("server", "customer")


def resolve_threads(threads: Optional[int] = None) -> int:
    """--threads 參數 > 環境變數 EDQ_THREADS > DEFAULT_THREADS"""
    if threads is not None:
        return max(int(threads), 1)
    env = os.environ.get(THREADS_ENV_VAR)
    if env:
        try:
            return max(int(env), 1)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV_VAR}={env!r} 不是整數")
    return DEFAULT_THREADS


# =============================================================================
# 設定與結果
# =============================================================================

@dataclass(frozen=True)
class SimConfig:
    """模擬設定"""
    spec: QueueSpec
    warmup: float
    horizon: float
    batches: int = DEFAULT_BATCHES
    seed: int = 0
    replications: int = 1
    tail_thresholds_w: Tuple[float, ...] = ()
    tail_thresholds_x: Tuple[float, ...] = ()
    service_level_delays: Tuple[float, ...] = ()
    effective_abd_delays: Tuple[float, ...] = ()
    system_pmf_points: Tuple[int, ...] = ()
    service_assignment: str = "server"
    confidence_level: float = CONFIDENCE_LEVEL
    threads: Optional[int] = None

    def __post_init__(self):
        for name in ("tail_thresholds_w", "tail_thresholds_x", "service_level_delays",
                     "effective_abd_delays", "system_pmf_points"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

        if not (self.horizon > self.warmup > 0):
            raise ConfigError(f"需要 horizon > warmup > 0，收到 warmup={self.warmup}, horizon={self.horizon}")
        if self.batches < MIN_BATCHES:
            raise ConfigError(f"batches 至少 {MIN_BATCHES}，收到 {self.batches}")
        if self.replications < 1:
            raise ConfigError(f"replications 至少 1，收到 {self.replications}")
        if self.seed < 0:
            raise ConfigError(f"seed 必須非負，收到 {self.seed}")
        if self.service_assignment not in SERVICE_ASSIGNMENTS:
            raise ConfigError(f"service_assignment 必須為 {SERVICE_ASSIGNMENTS} 之一")
        if any(d < 0 for d in self.service_level_delays + self.effective_abd_delays):
            raise ConfigError("服務目標時間 d 必須非負")
        if not 0.0 < self.confidence_level < 1.0:
            raise ConfigError(f"confidence_level 必須在 (0, 1)，收到 {self.confidence_level}")

    def with_spec(self, spec: QueueSpec) -> "SimConfig":
        return replace(self, spec=spec)


@dataclass
class EventLog:
    """
    單次模擬的完整紀錄 (依到達順序)

    abandoned 顧客的 service_start/service_end 為 NaN、server_id 為 -1；
    served 顧客的 abandon_time 為 NaN。
    """
    n: int
    horizon: float
    arrival: np.ndarray
    patience: np.ndarray
    served: np.ndarray
    service_start: np.ndarray
    service_end: np.ndarray
    abandon_time: np.ndarray
    server_id: np.ndarray
    initial_departures: np.ndarray      # 初始 n 位顧客的離開時間 (依伺服器)
    idle_start: np.ndarray
    idle_end: np.ndarray
    idle_server: np.ndarray

    @property
    def size(self) -> int:
        return int(self.arrival.size)

    @property
    def wait(self) -> np.ndarray:
        """實際等候時間 min(offered, patience)"""
        return np.where(self.served, self.service_start - self.arrival, self.patience)

    def departure_epochs(self) -> np.ndarray:
        """所有服務完成時刻 (含初始顧客)，遞增排序"""
        return np.sort(np.concatenate([self.initial_departures, self.service_end[self.served]]))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "customer_id": np.arange(self.size),
            "arrival": self.arrival,
            "patience": self.patience,
            "outcome": np.where(self.served, "served", "abandoned"),
            "service_start": self.service_start,
            "service_end": self.service_end,
            "abandon_time": self.abandon_time,
            "server_id": self.server_id,
        })


@dataclass(frozen=True)
class FlowCounts:
    """horizon 時的流量守恆"""
    arrivals: int
    completions: int
    abandonments: int
    initial_in_system: int
    final_in_system: int

    def __add__(self, other: "FlowCounts") -> "FlowCounts":
        return FlowCounts(*(a + b for a, b in zip(
            (self.arrivals, self.completions, self.abandonments, self.initial_in_system, self.final_in_system),
            (other.arrivals, other.completions, other.abandonments, other.initial_in_system, other.final_in_system),
        )))

    @property
    def balanced(self) -> bool:
        return (self.arrivals + self.initial_in_system
                == self.completions + self.abandonments + self.final_in_system)


@dataclass
class SimResult:
    """模擬結果: 每個指標的點估計與信賴區間半寬 (預設 95%，見 SimConfig.confidence_level)"""
    config: SimConfig
    estimates: Dict[str, Estimate]
    idle_fraction: float
    inexact_virtual_waits: int
    virtual_wait_samples: int
    lag1_autocorrelation: float
    flow: FlowCounts
    wait_center: float
    queue_center: float
    warnings: Tuple[str, ...] = field(default_factory=tuple)

    def __getitem__(self, name: str) -> Estimate:
        return self.estimates[name]

    @property
    def abandonment_fraction(self) -> Estimate:
        return self.estimates["abandonment_fraction"]

    def to_frame(self) -> pd.DataFrame:
        rows = [{"measure": k, "mean": v.mean, "half_width": v.half_width, "batches": v.batches}
                for k, v in self.estimates.items()]
        return pd.DataFrame(rows, columns=["measure", "mean", "half_width", "batches"])

    def diagnostics(self) -> Dict:
        return {
            "idle_fraction": self.idle_fraction,
            "inexact_virtual_waits": self.inexact_virtual_waits,
            "virtual_wait_samples": self.virtual_wait_samples,
            "lag1_autocorrelation": self.lag1_autocorrelation,
            "flow": self.flow.__dict__,
            "wait_center": self.wait_center,
            "queue_center": self.queue_center,
            "warnings": list(self.warnings),
        }


def wait_tail_key(a: float) -> str:
    return f"wait_tail[{a:g}]"


def system_tail_key(a: float) -> str:
    return f"system_tail[{a:g}]"


def service_level_key(d: float) -> str:
    return f"service_level[{d:g}]"


def effective_abandonment_key(d: float) -> str:
    return f"effective_abandonment[{d:g}]"


def system_pmf_key(i: int) -> str:
    return f"system_pmf[{i}]"


# =============================================================================
# 單次模擬
# =============================================================================

def _arrival_times(spec: QueueSpec, rng: np.random.Generator, horizon: float) -> np.ndarray:
    chunks = []
    last = 0.0
    while last <= horizon:
        gaps = np.asarray(spec.interarrival.sample(rng, ARRIVAL_CHUNK), dtype=float)
        times = last + np.cumsum(gaps)
        chunks.append(times)
        last = float(times[-1])
    times = np.concatenate(chunks)
    return times[times <= horizon]


class _ServerStreams:
    """每台伺服器一條服務時間串流，第 j 台的第 k 個服務時間與 n 無關"""

    def __init__(self, spec: QueueSpec, seed: int, rep: int):
        self._service = spec.service
        self._rngs = [random_stream(seed, rep, STREAM_SERVER, j) for j in range(spec.n)]
        self._buffers = [np.empty(0) for _ in range(spec.n)]
        self._pos = [0] * spec.n

    def next(self, j: int) -> float:
        if self._pos[j] >= self._buffers[j].size:
            self._buffers[j] = np.asarray(self._service.sample(self._rngs[j], SERVICE_CHUNK), dtype=float)
            self._pos[j] = 0
        value = self._buffers[j][self._pos[j]]
        self._pos[j] += 1
        return float(value)


def simulate_replication(config: SimConfig, rep: int = 0,
                         patience_override: Optional[Dict[int, float]] = None) -> EventLog:
    """
    執行一次模擬並回傳完整事件紀錄

    時間 0 時 n 台伺服器皆忙碌 (剩餘服務時間 ~ F_e)，佇列為空。
    顧客依到達順序處理: 等候 ≤ 耐心時間者進入服務 (同時刻時服務完成優先於放棄)。

    Args:
        config: 模擬設定
        rep: 複製編號 (決定亂數子串流)
        patience_override: {顧客編號: 耐心時間}，供反事實重模擬使用
    """
    spec = config.spec
    n = int(spec.n)
    seed = int(config.seed)

    arrival = _arrival_times(spec, random_stream(seed, rep, STREAM_ARRIVAL), config.horizon)
    count = arrival.size
    patience = np.asarray(spec.patience.sample(random_stream(seed, rep, STREAM_PATIENCE), count), dtype=float)
    if patience_override:
        patience = patience.copy()
        for k, z in patience_override.items():
            patience[k] = z

    residual = np.asarray(
        spec.service.equilibrium().sample(random_stream(seed, rep, STREAM_INITIAL), n), dtype=float
    ).reshape(n)

    if config.service_assignment == "server":
        streams = _ServerStreams(spec, seed, rep)
        draw = lambda j, k: streams.next(j)
    else:
        per_customer = np.asarray(
            spec.service.sample(random_stream(seed, rep, STREAM_CUSTOMER_SERVICE), count), dtype=float
        ).reshape(count)
        draw = lambda j, k: float(per_customer[k])

    served = np.zeros(count, dtype=bool)
    start = np.full(count, np.nan)
    end = np.full(count, np.nan)
    abandon = np.full(count, np.nan)
    server = np.full(count, -1, dtype=np.int64)
    idle: List[Tuple[float, float, int]] = []

    heap = [(float(residual[j]), j) for j in range(n)]
    heapq.heapify(heap)
    arrivals = arrival.tolist()
    patiences = patience.tolist()

    for k in range(count):
        a = arrivals[k]
        free_at, j = heap[0]
        begin = a if free_at < a else free_at
        if begin - a <= patiences[k]:
            heapq.heappop(heap)
            if free_at < a:
                idle.append((free_at, a, j))
            finish = begin + draw(j, k)
            heapq.heappush(heap, (finish, j))
            served[k] = True
            start[k] = begin
            end[k] = finish
            server[k] = j
        else:
            abandon[k] = a + patiences[k]

    # horizon 前閒置的伺服器
    for free_at, j in heap:
        if free_at < config.horizon:
            idle.append((free_at, config.horizon, j))

    idle.sort()
    idle_arr = np.array(idle, dtype=float).reshape(-1, 3)

    return EventLog(
        n=n,
        horizon=float(config.horizon),
        arrival=arrival,
        patience=patience,
        served=served,
        service_start=start,
        service_end=end,
        abandon_time=abandon,
        server_id=server,
        initial_departures=residual,
        idle_start=idle_arr[:, 0],
        idle_end=idle_arr[:, 1],
        idle_server=idle_arr[:, 2].astype(np.int64),
    )


def flow_counts(log: EventLog, at: Optional[float] = None) -> FlowCounts:
    """時刻 at (預設 horizon) 的流量計數"""
    t = log.horizon if at is None else at
    arrived = log.arrival <= t
    leave = np.where(log.served, log.service_end, log.abandon_time)
    completions = int(np.sum(log.initial_departures <= t) + np.sum(log.served & arrived & (log.service_end <= t)))
    abandonments = int(np.sum(~log.served & arrived & (log.abandon_time <= t)))
    final = int(np.sum(log.initial_departures > t) + np.sum(arrived & (leave > t)))
    return FlowCounts(
        arrivals=int(arrived.sum()),
        completions=completions,
        abandonments=abandonments,
        initial_in_system=log.n,
        final_in_system=final,
    )


# =============================================================================
# 虛擬等候時間
# =============================================================================

def _merge_intervals(starts: np.ndarray, ends: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """合併重疊的閒置區間 (任一伺服器閒置即算)"""
    if starts.size == 0:
        return starts, ends
    order = np.argsort(starts, kind="stable")
    s, e = starts[order], ends[order]
    merged_s, merged_e = [s[0]], [e[0]]
    for lo, hi in zip(s[1:], e[1:]):
        if lo <= merged_e[-1]:
            merged_e[-1] = max(merged_e[-1], hi)
        else:
            merged_s.append(lo)
            merged_e.append(hi)
    return np.array(merged_s), np.array(merged_e)


def virtual_waits(log: EventLog, n: Optional[int] = None) -> pd.DataFrame:
    """
    每個到達時刻 t 的虛擬 (offered) 等候時間 W(t−)

    第 k 位顧客 (無限耐心時) 需等到第 m = X(0) + k − L_k − n + 1 次服務完成，
    L_k 為排在前面且最終放棄的人數。D(t) ≥ m 時 W = 0。
    (t, t+W] 與閒置區間相交時標記為 inexact，改用 slot inheritance:
    served 顧客取實際等候，放棄者取其後第一位 served 顧客的開始服務時刻。

    Returns:
        DataFrame(epoch, offered_wait, exact)
    """
    n = log.n if n is None else int(n)
    t = log.arrival
    departures = log.departure_epochs()

    served_ahead = np.concatenate([[0], np.cumsum(log.served)[:-1]]).astype(np.int64)
    m = log.n + served_ahead - n + 1
    exact = m <= departures.size
    t_m = departures[np.clip(m, 1, departures.size) - 1]
    waiting = (m >= 1) & exact & (t_m > t)
    offered = np.where(waiting, t_m - t, 0.0)
    reach = np.where(waiting, t_m, t)

    idle_s, idle_e = _merge_intervals(log.idle_start, log.idle_end)
    if idle_s.size:
        # 第一個結束於 t 之後的閒置區間是否在 t + W 之前開始
        idx = np.searchsorted(idle_e, t, side="right")
        has_next = idx < idle_s.size
        starts_before = np.zeros(t.size, dtype=bool)
        starts_before[has_next] = idle_s[idx[has_next]] < reach[has_next]
        exact &= ~(starts_before & waiting)

    if not exact.all():
        # slot inheritance
        next_served_start = np.full(t.size, np.nan)
        last = np.nan
        for k in range(t.size - 1, -1, -1):
            if log.served[k]:
                last = log.service_start[k]
            next_served_start[k] = last
        fallback = np.where(log.served, log.service_start - t, np.maximum(next_served_start - t, 0.0))
        fix = ~exact & np.isfinite(fallback)
        offered[fix] = fallback[fix]

    return pd.DataFrame({"epoch": t, "offered_wait": offered, "exact": exact})


def counterfactual_offered_wait(config: SimConfig, index: int, rep: int = 0) -> float:
    """給第 index 位顧客無限耐心後重新模擬，回傳其等候時間"""
    log = simulate_replication(config, rep, patience_override={index: math.inf})
    return float(log.service_start[index] - log.arrival[index])


# =============================================================================
# 尾端機率與時間平均
# =============================================================================

def estimate_tails(samples, n: int, gamma: float, center: float, thresholds: Sequence[float],
                   kind: str = "wait", weights=None) -> np.ndarray:
    """
    擴散尺度下的經驗尾端機率

    kind="wait":   P[√(n/γ)(W − w) > a]
    kind="system": P[(X − n − q)/√(nγ) > a]，weights 為各值持續的時間

    Args:
        center: w (wait) 或 q (system)
    """
    x = np.asarray(samples, dtype=float)
    if kind == "wait":
        scaled = math.sqrt(n / gamma) * (x - center)
    elif kind == "system":
        scaled = (x - n - center) / math.sqrt(n * gamma)
    else:
        raise ConfigError(f"未知的 kind: {kind!r}")

    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=float)
    total = w.sum()
    if total <= 0:
        return np.full(len(thresholds), np.nan)
    return np.array([float(np.sum(w[scaled > a]) / total) for a in thresholds])


def _system_path(log: EventLog) -> Tuple[np.ndarray, np.ndarray]:
    """X(t) 的跳躍時刻與跳躍後的值；同時刻依 服務完成 < 放棄 < 到達 排序"""
    dep = log.departure_epochs()
    ab = log.abandon_time[~log.served]
    times = np.concatenate([dep, ab, log.arrival])
    delta = np.concatenate([-np.ones(dep.size), -np.ones(ab.size), np.ones(log.arrival.size)])
    priority = np.concatenate([np.zeros(dep.size), np.ones(ab.size), np.full(log.arrival.size, 2)])
    order = np.lexsort((priority, times))
    return times[order], log.n + np.cumsum(delta[order])


def _path_integrals(times: np.ndarray, levels: np.ndarray, x0: float,
                    edges: np.ndarray, values_fn) -> np.ndarray:
    """∫ f(X(t)) dt 於每個批次 [edges[b], edges[b+1]]"""
    pts = np.concatenate([[0.0], times])
    vals = values_fn(np.concatenate([[x0], levels]))
    cum = np.concatenate([[0.0], np.cumsum(vals[:-1] * np.diff(pts))])
    idx = np.searchsorted(pts, edges, side="right") - 1
    at_edges = cum[idx] + vals[idx] * (edges - pts[idx])
    return np.diff(at_edges)


def _batch_pieces(times: np.ndarray, levels: np.ndarray, x0: float,
                  lo: float, hi: float) -> Tuple[np.ndarray, np.ndarray]:
    """X(t) 在 [lo, hi] 內的各常數段: (值, 持續時間)"""
    pts = np.concatenate([[0.0], times])
    vals = np.concatenate([[x0], levels])
    i0 = int(np.searchsorted(pts, lo, side="right")) - 1
    i1 = int(np.searchsorted(pts, hi, side="right"))
    start = np.maximum(pts[i0:i1], lo)
    end = np.minimum(np.append(pts[i0 + 1:i1], hi), hi)
    return vals[i0:i1], np.maximum(end - start, 0.0)


@dataclass
class _BatchStats:
    """
    單次複製的逐批次統計量 (key -> 長度為 batches 的陣列)

    變異數類指標存一、二階動差，合併複製後才中心化。
    """
    values: Dict[str, np.ndarray]
    moments: Dict[str, Tuple[np.ndarray, np.ndarray]]
    order: Tuple[str, ...]
    inexact: int
    samples: int
    idle_time: float
    observed_time: float
    flow: FlowCounts


def _batch_statistics(config: SimConfig, log: EventLog, wait_center: float,
                      queue_center: float) -> _BatchStats:
    spec = config.spec
    n = log.n
    gamma = spec.gamma
    edges = batch_edges(config.warmup, config.horizon, config.batches)
    lengths = np.diff(edges)
    values: Dict[str, np.ndarray] = {}
    moments: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
    order: List[str] = []

    def put(key: str, per_batch_values: np.ndarray):
        values[key] = per_batch_values
        order.append(key)

    def put_moments(key: str, first: np.ndarray, second: np.ndarray):
        moments[key] = (first, second)
        order.append(key)

    # --- 以到達時刻分批的顧客指標 ---
    vw = virtual_waits(log, n)
    offered = vw["offered_wait"].to_numpy()
    batch = np.searchsorted(edges, log.arrival, side="right") - 1
    inside = (batch >= 0) & (batch < config.batches) & (log.arrival >= config.warmup)
    b = batch[inside]
    count = np.bincount(b, minlength=config.batches).astype(float)

    def per_batch(weights) -> np.ndarray:
        return np.bincount(b, weights=np.asarray(weights, dtype=float)[inside], minlength=config.batches)

    abandoned = (~log.served).astype(float)
    put("abandonment_fraction", batch_ratio(per_batch(abandoned), count))

    wait_mean = batch_ratio(per_batch(offered), count)
    put("wait_mean", wait_mean)
    put_moments("wait_variance", wait_mean, batch_ratio(per_batch(offered ** 2), count))

    if config.tail_thresholds_w:
        offered_in = offered[inside]
        wait_tails = np.vstack([
            estimate_tails(offered_in[b == k], n, gamma, wait_center, config.tail_thresholds_w)
            for k in range(config.batches)
        ])
        for i, a in enumerate(config.tail_thresholds_w):
            put(wait_tail_key(a), wait_tails[:, i])

    actual_wait = log.wait
    for d in config.service_level_delays:
        hit = log.served & (actual_wait <= d)
        put(service_level_key(d), batch_ratio(per_batch(hit), count))

    for d in config.effective_abd_delays:
        num = ~log.served & (log.patience > d)
        den = actual_wait > d
        put(effective_abandonment_key(d), batch_ratio(per_batch(num), per_batch(den)))

    sojourn = np.where(log.served, log.service_end - log.arrival, log.patience)
    put("mean_sojourn", batch_ratio(per_batch(sojourn), count))
    put("arrival_rate", count / lengths)

    # --- 時間平均 ---
    times, levels = _system_path(log)
    x0 = float(n)

    def time_average(fn) -> np.ndarray:
        return _path_integrals(times, levels, x0, edges, fn) / lengths

    sys_mean = time_average(lambda x: x)
    put("system_mean", sys_mean)
    put_moments("system_variance", sys_mean, time_average(lambda x: x * x))
    buf_mean = time_average(lambda x: np.maximum(x - n, 0.0))
    put("queue_mean", buf_mean)
    put_moments("queue_variance", buf_mean, time_average(lambda x: np.maximum(x - n, 0.0) ** 2))

    if config.tail_thresholds_x:
        system_tails = []
        for lo, hi in zip(edges[:-1], edges[1:]):
            pieces, durations = _batch_pieces(times, levels, x0, lo, hi)
            system_tails.append(estimate_tails(pieces, n, gamma, queue_center, config.tail_thresholds_x,
                                               kind="system", weights=durations))
        system_tails = np.vstack(system_tails)
        for i, a in enumerate(config.tail_thresholds_x):
            put(system_tail_key(a), system_tails[:, i])

    for i in config.system_pmf_points:
        put(system_pmf_key(i), time_average(lambda x, i=i: (x == i).astype(float)))

    idle_time = float(np.sum(_path_integrals(times, levels, x0, edges, lambda x: (x < n).astype(float))))

    return _BatchStats(
        values=values,
        moments=moments,
        order=tuple(order),
        inexact=int((~vw["exact"].to_numpy())[inside].sum()),
        samples=int(inside.sum()),
        idle_time=idle_time,
        observed_time=float(config.horizon - config.warmup),
        flow=flow_counts(log),
    )


def _replicate(config: SimConfig, rep: int, wait_center: float, queue_center: float) -> _BatchStats:
    log = simulate_replication(config, rep)
    stats = _batch_statistics(config, log, wait_center, queue_center)
    logger.debug(f"[Simulator] replication {rep} done: {log.size} arrivals")
    return stats


# =============================================================================
# 主程式
# =============================================================================

def _tail_centers(spec: QueueSpec, warnings: List[str]) -> Tuple[float, float]:
    try:
        summary = summarize(spec)
        return summary.w, summary.q
    except EDQError as e:
        msg = f"無法計算擴散中心 ({e})，尾端機率以 0 為中心"
        logger.warning(f"[Simulator] {msg}")
        warnings.append(msg)
        return 0.0, 0.0


def run(config: SimConfig) -> SimResult:
    """
    執行所有複製並以批次平均估計每個指標

    同一組 (config, seed) 的結果逐位元相同，與執行緒數無關。
    """
    spec = config.spec
    warnings: List[str] = []
    if spec.rho <= 1.0:
        msg = f"ρ = {spec.rho:.4g} ≤ 1，不在 ED 區間"
        logger.warning(f"[Simulator] {msg}")
        warnings.append(msg)

    wait_center, queue_center = _tail_centers(spec, warnings)
    threads = resolve_threads(config.threads)

    logger.info(
        f"[Simulator] n={spec.n} ρ={spec.rho:.4f} horizon={config.horizon:g} "
        f"replications={config.replications} threads={threads}"
    )

    outcomes: Dict[int, _BatchStats] = {}
    with ThreadPoolExecutor(max_workers=threads) as executor:
        futures = {
            executor.submit(_replicate, config, rep, wait_center, queue_center): rep
            for rep in range(config.replications)
        }
        for future in as_completed(futures):
            rep = futures[future]
            try:
                outcomes[rep] = future.result()
            except Exception as e:
                logger.error(f"[Simulator] replication {rep} failed: {e}")
                raise

    ordered = [outcomes[r] for r in range(config.replications)]
    level = config.confidence_level
    estimates: Dict[str, Estimate] = {}
    for key in ordered[0].order:
        if key in ordered[0].moments:
            first = np.concatenate([o.moments[key][0] for o in ordered])
            second = np.concatenate([o.moments[key][1] for o in ordered])
            estimates[key] = moment_variance(first, second, level)
        else:
            estimates[key] = confidence_interval(np.concatenate([o.values[key] for o in ordered]), level)

    lag1 = [lag1_autocorrelation(o.values["abandonment_fraction"]) for o in ordered]
    lag1 = [v for v in lag1 if math.isfinite(v)]
    flow = ordered[0].flow
    for o in ordered[1:]:
        flow = flow + o.flow

    inexact = sum(o.inexact for o in ordered)
    if inexact:
        logger.info(f"[Simulator] {inexact} 個虛擬等候樣本使用 slot inheritance")

    return SimResult(
        config=config,
        estimates=estimates,
        idle_fraction=sum(o.idle_time for o in ordered) / sum(o.observed_time for o in ordered),
        inexact_virtual_waits=inexact,
        virtual_wait_samples=sum(o.samples for o in ordered),
        lag1_autocorrelation=float(np.mean(lag1)) if lag1 else float("nan"),
        flow=flow,
        wait_center=wait_center,
        queue_center=queue_center,
        warnings=tuple(warnings),
    )
