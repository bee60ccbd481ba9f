"""
例外類別 - 所有模組共用
"""


class EDQError(Exception):
    """edq 所有錯誤的基底類別"""
    pass


# =============================================================================
# 設定 / 參數錯誤 (CLI exit code 2)
# =============================================================================

class ConfigError(EDQError):
    """情境設定或模擬設定不合法"""
    pass


class InvalidParameter(EDQError, ValueError):
    """分布或模型參數不合法"""
    pass


class InvalidProbability(EDQError, ValueError):
    """機率值超出 [0, 1) 範圍"""
    pass


# =============================================================================
# 計算錯誤 (CLI exit code 3)
# =============================================================================

class NotAbsolutelyContinuous(EDQError):
    """分布沒有密度函數 (例如確定性分布)"""
    pass


class SupportExceeded(EDQError):
    """求值點超出分布支撐 (CDF = 1)"""
    pass


class InfiniteMean(EDQError):
    """平均數不存在或非正"""
    pass


class InfiniteThirdMoment(EDQError):
    """三階動差不存在"""
    pass


class NotOverloaded(EDQError):
    """流量強度 ρ ≤ 1，不在 ED 區間"""
    pass


class PatienceDensityZeroAtW(EDQError):
    """耐心時間密度在 w 處為零"""
    pass


class QuadratureFailure(EDQError):
    """數值積分無法達到容許誤差"""
    pass


class DegenerateConditioning(EDQError):
    """條件事件機率為零"""
    pass


class TruncationTooSmall(EDQError):
    """CTMC 截斷層數不足"""
    pass


class SingularSolve(EDQError):
    """平衡方程求解失敗"""
    pass


class InfeasibleWithinEDRegime(EDQError):
    """在 ρ > 1 範圍內無法達成服務目標"""
    pass


class EvaluatorError(EDQError):
    """人力配置評估器執行失敗"""
    pass


EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_COMPUTATION = 3

VALIDATION_ERRORS = (ConfigError, InvalidParameter, InvalidProbability)
