"""
應用程式配置常數
"""
from dataclasses import dataclass
from typing import Dict, List

TOOL_NAME = "edq"
TOOL_VERSION = "1.0.0"
SCHEMA_VERSION = 1

# 平行運算設定
THREADS_ENV_VAR = "EDQ_THREADS"
DEFAULT_THREADS = 4

# =============================================================================
# 分布計算
# =============================================================================

HYPEREXP_WEIGHT_TOL = 1e-12     # 超指數分支權重總和容許誤差
QUANTILE_REL_TOL = 1e-12        # 二分法分位數相對誤差
BISECTION_MAX_ITER = 200

# =============================================================================
# 擴散公式
# =============================================================================

QUAD_ABS_TOL = 1e-8
QUAD_REL_TOL = 1e-10
QUAD_LIMIT = 500                # 積分子區間上限
QUAD_FAIL_TOL = 1e-6            # 誤差估計超過此值視為積分失敗
TRUNCATION_QUANTILE = 1.0 - 1e-9
SVPR_WARN_LEVEL = 0.5           # SVPR 超過此值時發出精度警告
CONDITIONING_FLOOR = 1e-300     # 有效放棄比例的條件機率下限

# =============================================================================
# 模擬
# =============================================================================

DEFAULT_BATCHES = 30
MIN_BATCHES = 10
CONFIDENCE_LEVEL = 0.95
ARRIVAL_CHUNK = 65536           # 到達時間一次抽樣的筆數
SERVICE_CHUNK = 512             # 每台伺服器一次抽樣的服務時間筆數
EVENT_LOG_GZIP_ROWS = 100_000   # 事件紀錄超過此列數時以 gzip 壓縮

# =============================================================================
# FCLT 實驗室
# =============================================================================

FCLT_SIGNIFICANCE = 0.01
FCLT_SLOPE_TOL = 0.10
FCLT_MIN_REPLICATIONS_VARIANCE = 100
FCLT_MIN_REPLICATIONS_GAUSSIAN = 500

# =============================================================================
# 矩陣解析 (CTMC) 求解
# =============================================================================

MAM_TAIL_MASS_LIMIT = 1e-8
MAM_RESIDUAL_LIMIT = 1e-10
MAM_DIRECT_MAX_STATES = 100_000   # 超過此狀態數改用冪次迭代
MAM_POWER_TOL = 1e-12
MAM_POWER_MAX_ITER = 500_000
MAM_SIGMA_MARGIN = 12             # 預設截斷: n + q + 12 σ_x
MAM_MAX_DOUBLINGS = 6

# =============================================================================
# 人力配置
# =============================================================================

STAFFING_MAX_EXPANSIONS = 40

# =============================================================================
# 基準情境參數 (設定檔格式: 平均數而非速率)
# =============================================================================

# M/GI/100+M 基準: μ = 1, ρ = 1.2
BENCH_ARRIVAL_RATE = 120.0
BENCH_SERVERS = 100
BENCH_PATIENCE_MEANS = [1.0, 5.0, 10.0]
BENCH_TAIL_THRESHOLDS = [0.5, 1.0, 2.0]
BENCH_SERVICE_LAWS: Dict[str, dict] = {
    "D": {"type": "det", "value": 1.0},
    "E2": {"type": "erlang", "shape": 2, "mean": 1.0},
    "LN": {"type": "lognormal", "mean": 1.0, "scv": 2.0},
}

# M/H2/100+M: μ = 1, c_s² = 3
H2_SERVICE = {
    "type": "hyperexp",
    "branches": [{"p": 0.5916, "mean": 0.1691}, {"p": 0.4084, "mean": 2.203}],
}
H2_PATIENCE_MEANS = [1.0, 5.0]

# 客服中心耐心時間 (98% 平均 1000 秒, 2% 平均 6 秒)
CALL_CENTER_PATIENCE = {
    "type": "hyperexp",
    "branches": [{"p": 0.98, "mean": 1000.0}, {"p": 0.02, "mean": 6.0}],
}

# 客服中心人力配置: M/LN/n+H2, λ = 1/秒, 平均服務 230 秒
CALL_CENTER_ARRIVAL_RATE = 1.0
CALL_CENTER_SERVICE_MEAN = 230.0
CALL_CENTER_SERVICE_SCVS = [3.0, 5.0]


@dataclass(frozen=True)
class StaffingTarget:
    name: str
    objective: str      # "service_level" or "effective_abandonment"
    target: float
    delay: float        # 秒


CALL_CENTER_TARGETS: List[StaffingTarget] = [
    StaffingTarget("80% 於 120 秒內接通", "service_level", 0.80, 120.0),
    StaffingTarget("等候逾 60 秒者放棄比例 < 5%", "effective_abandonment", 0.05, 60.0),
]
