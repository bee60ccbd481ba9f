"""
pytest 共用設定: 平面模組放在根目錄，共用的排隊系統 fixture
"""
import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from config import BENCH_ARRIVAL_RATE, BENCH_SERVERS  # noqa: E402
from diffusion import QueueSpec  # noqa: E402
from distributions import Deterministic, Erlang, Exponential, LogNormal  # noqa: E402

SERVICE_LAWS = {
    "D": Deterministic(1.0),
    "E2": Erlang(2, 2.0),
    "LN": LogNormal(1.0, 2.0),
}


@pytest.fixture
def bench_spec():
    """M/GI/100+M 基準系統: bench_spec("D", 1.0)"""
    def make(law: str, patience_mean: float, n: int = BENCH_SERVERS) -> QueueSpec:
        return QueueSpec(BENCH_ARRIVAL_RATE, n, SERVICE_LAWS[law], Exponential(1.0 / patience_mean))
    return make


@pytest.fixture(autouse=True)
def _single_thread_env(monkeypatch):
    monkeypatch.setenv("EDQ_THREADS", "2")
