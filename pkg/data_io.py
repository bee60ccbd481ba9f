"""
資料輸入輸出模組 - 情境檔驗證與結果輸出
- 情境 JSON 以 pydantic 驗證 (未知欄位一律拒絕)
- JSON / CSV 輸出皆附上版本、解析後設定與 seed
- 事件紀錄匯出 (大檔自動 gzip)
"""
import gzip
import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from config import CONFIDENCE_LEVEL, EVENT_LOG_GZIP_ROWS, SCHEMA_VERSION, TOOL_NAME, TOOL_VERSION
from diffusion import QueueSpec
from distributions import distribution_from_config
from errors import ConfigError
from simulator import EventLog, SimConfig

logger = logging.getLogger(__name__)

COMMANDS = ("approx", "simulate", "staff", "fclt", "mam", "compare")


# =============================================================================
# 情境檔結構
# =============================================================================

class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


def _check_distribution(value: Dict[str, Any]) -> Dict[str, Any]:
    # InvalidParameter 也是 ValueError，pydantic 會轉成 ValidationError
    distribution_from_config(value)
    return value


class SystemConfig(_Model):
    """GI/GI/n+GI 系統 (分布以平均數設定)"""
    arrival_rate: float = Field(gt=0)
    servers: int = Field(ge=1)
    service: Dict[str, Any]
    patience: Dict[str, Any]
    interarrival: Optional[Dict[str, Any]] = None

    @field_validator("service", "patience", "interarrival")
    @classmethod
    def _distributions(cls, v):
        return v if v is None else _check_distribution(v)

    def to_spec(self) -> QueueSpec:
        return QueueSpec(
            arrival_rate=self.arrival_rate,
            n=self.servers,
            service=distribution_from_config(self.service),
            patience=distribution_from_config(self.patience),
            interarrival=distribution_from_config(self.interarrival) if self.interarrival else None,
        )


class Case(_Model):
    label: str
    system: SystemConfig


class Thresholds(_Model):
    wait_tail: List[float] = []
    system_tail: List[float] = []
    service_level_delays: List[float] = []
    effective_abd_delays: List[float] = []


class ApproxPayload(_Model):
    cases: List[Case] = Field(min_length=1)
    thresholds: Thresholds = Thresholds()
    pmf: bool = False
    hazard_grid: Optional[List[float]] = None


class SimSettings(_Model):
    warmup: float = Field(gt=0)
    horizon: float = Field(gt=0)
    batches: int = 30
    replications: int = Field(default=1, ge=1)
    service_assignment: Literal["server", "customer"] = "server"
    system_pmf_points: List[int] = []
    confidence_level: float = Field(default=CONFIDENCE_LEVEL, gt=0, lt=1)

    def to_config(self, spec: QueueSpec, thresholds: Thresholds, seed: int,
                  threads: Optional[int], horizon_scale: float = 1.0) -> SimConfig:
        return SimConfig(
            spec=spec,
            warmup=self.warmup * horizon_scale,
            horizon=self.horizon * horizon_scale,
            batches=self.batches,
            seed=seed,
            replications=self.replications,
            tail_thresholds_w=tuple(thresholds.wait_tail),
            tail_thresholds_x=tuple(thresholds.system_tail),
            service_level_delays=tuple(thresholds.service_level_delays),
            effective_abd_delays=tuple(thresholds.effective_abd_delays),
            system_pmf_points=tuple(self.system_pmf_points),
            service_assignment=self.service_assignment,
            confidence_level=self.confidence_level,
            threads=threads,
        )


class SimulatePayload(_Model):
    cases: List[Case] = Field(min_length=1)
    settings: SimSettings
    thresholds: Thresholds = Thresholds()
    horizon_scale: float = Field(default=1.0, gt=0)
    event_log: bool = False


class TargetConfig(_Model):
    name: str
    objective: Literal["service_level", "effective_abandonment"]
    target: float = Field(gt=0, lt=1)
    delay: float = Field(ge=0)


class StaffPayload(_Model):
    label: str = ""
    arrival_rate: float = Field(gt=0)
    service: Dict[str, Any]
    patience: Dict[str, Any]
    interarrival: Optional[Dict[str, Any]] = None
    targets: List[TargetConfig] = Field(min_length=1)
    evaluators: List[Literal["diffusion", "zm", "fluid", "simulation"]] = ["diffusion"]
    simulation: Optional[SimSettings] = None
    curve_range: Optional[Tuple[int, int]] = None

    @field_validator("service", "patience", "interarrival")
    @classmethod
    def _distributions(cls, v):
        return v if v is None else _check_distribution(v)

    @model_validator(mode="after")
    def _needs_simulation(self):
        if "simulation" in self.evaluators and self.simulation is None:
            raise ValueError("simulation 評估器需要 simulation 設定")
        return self


class FcltPayload(_Model):
    interrenewal: Dict[str, Any]
    n: int = Field(ge=1)
    gamma_n: float = Field(gt=0)
    grid: List[float] = Field(min_length=1)
    replications: int = Field(ge=1)
    gaussian_t: List[float] = []
    fslln_n_values: List[int] = []
    fslln_gamma_values: Optional[List[float]] = None

    @field_validator("interrenewal")
    @classmethod
    def _distribution(cls, v):
        return _check_distribution(v)


class MamPayload(_Model):
    label: str = ""
    arrival_rate: float = Field(gt=0)
    servers: int = Field(ge=1)
    service: Dict[str, Any]
    patience_means: List[float] = Field(min_length=1)
    truncation: Optional[int] = None

    @field_validator("service")
    @classmethod
    def _distribution(cls, v):
        return _check_distribution(v)


class ComparePayload(_Model):
    mode: Literal["measures", "staffing_curve"] = "measures"
    evaluators: List[Literal["diffusion", "zm", "fluid", "simulation", "mam", "erlang_a"]] = Field(min_length=2)
    cases: List[Case] = []
    thresholds: Thresholds = Thresholds()
    simulation: Optional[SimSettings] = None
    staffing: Optional[StaffPayload] = None
    n_range: Optional[Tuple[int, int]] = None

    @model_validator(mode="after")
    def _check_mode(self):
        if self.mode == "measures" and not self.cases:
            raise ValueError("measures 模式需要 cases")
        if self.mode == "staffing_curve":
            if self.staffing is None or self.n_range is None:
                raise ValueError("staffing_curve 模式需要 staffing 與 n_range")
            if any(e in ("mam", "erlang_a") for e in self.evaluators):
                raise ValueError("staffing_curve 模式只支援 diffusion / zm / fluid / simulation")
        if "simulation" in self.evaluators and self.simulation is None:
            raise ValueError("simulation 評估器需要 simulation 設定")
        return self


class Scenario(_Model):
    """情境檔: 恰好一個指令 payload"""
    schema_version: Literal[1] = SCHEMA_VERSION
    name: str = "scenario"
    seed: int = Field(default=0, ge=0)
    out: Optional[str] = None
    approx: Optional[ApproxPayload] = None
    simulate: Optional[SimulatePayload] = None
    staff: Optional[StaffPayload] = None
    fclt: Optional[FcltPayload] = None
    mam: Optional[MamPayload] = None
    compare: Optional[ComparePayload] = None

    @model_validator(mode="after")
    def _one_payload(self):
        present = [c for c in COMMANDS if getattr(self, c) is not None]
        if len(present) != 1:
            raise ValueError(f"情境檔必須恰好包含一個指令區塊，收到 {present}")
        return self

    @property
    def command(self) -> str:
        return next(c for c in COMMANDS if getattr(self, c) is not None)


def load_scenario(path: Union[str, Path]) -> Scenario:
    """
    讀取並驗證情境檔

    Raises:
        ConfigError: 檔案不存在、JSON 格式錯誤或結構不合法
    """
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"找不到情境檔: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"情境檔 JSON 格式錯誤 ({path}): {e}") from e

    try:
        return Scenario.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"情境檔驗證失敗 ({path}):\n{e}") from e


# =============================================================================
# 輸出
# =============================================================================

def run_header(scenario: Scenario, seed: int) -> Dict[str, Any]:
    """每份輸出都附上的重現資訊"""
    return {
        "tool": TOOL_NAME,
        "version": TOOL_VERSION,
        "schema_version": SCHEMA_VERSION,
        "seed": seed,
        "config": scenario.model_dump(mode="json", exclude_none=True),
    }


def _to_jsonable(value: Any) -> Any:
    """numpy / pandas 物件轉成 JSON；NaN 與 ±inf 轉為 null"""
    if isinstance(value, dict):
        return {str(k): _to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_jsonable(v) for v in value]
    if isinstance(value, pd.DataFrame):
        return [_to_jsonable(r) for r in value.to_dict(orient="records")]
    if isinstance(value, np.ndarray):
        return [_to_jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer, int)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        v = float(value)
        return v if math.isfinite(v) else None
    return value


def dumps(payload: Dict[str, Any]) -> str:
    """完整精度 (最短可還原表示) 的 JSON"""
    return json.dumps(_to_jsonable(payload), ensure_ascii=False, indent=2, allow_nan=False)


def write_json(payload: Dict[str, Any], path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(dumps(payload))
        f.write("\n")
    logger.info(f"[IO] wrote {path}")


def write_csv(frame: pd.DataFrame, path: Path, header: Dict[str, Any]):
    """
    CSV 輸出，開頭以 '#' 註解行記錄 tool/version/seed/config

    讀回: pd.read_csv(path, comment="#")
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = (
        f"# {header['tool']} {header['version']} schema={header['schema_version']} seed={header['seed']}\r\n"
        f"# config={json.dumps(_to_jsonable(header['config']), ensure_ascii=False, separators=(',', ':'))}\r\n"
    )
    body = frame.to_csv(index=False, lineterminator="\r\n")
    if path.suffix == ".gz":
        with gzip.open(path, "wt", encoding="utf-8", newline="") as f:
            f.write(meta + body)
    else:
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(meta + body)
    logger.info(f"[IO] wrote {path} ({len(frame)} rows)")


def export_event_log(log: EventLog, path: Path, header: Dict[str, Any]) -> Path:
    """事件紀錄匯出；列數超過 EVENT_LOG_GZIP_ROWS 時改寫成 .csv.gz"""
    if log.size > EVENT_LOG_GZIP_ROWS and path.suffix != ".gz":
        path = path.with_name(path.name + ".gz")
    write_csv(log.to_frame(), path, header)
    return path


def read_csv(path: Union[str, Path]) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")
