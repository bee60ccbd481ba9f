"""
edq - 超載多伺服器排隊系統工具 (命令列主程式)

用法:
    python edq.py approx|simulate|staff|fclt|mam|compare <scenario.json>
                  [--out DIR] [--seed N] [--threads N] [--dry-run] [--verbose | --quiet]
"""
import argparse
import logging
import math
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from config import TOOL_NAME, TOOL_VERSION
from data_io import (
    Scenario,
    SimSettings,
    StaffPayload,
    TargetConfig,
    Thresholds,
    dumps,
    export_event_log,
    load_scenario,
    run_header,
    write_csv,
    write_json,
)
from diffusion import (
    QueueSpec,
    buffer_variance,
    effective_abandonment,
    fluid_effective_abandonment,
    fluid_service_level,
    hazard_profile,
    queue_pmf,
    queue_tail,
    service_level,
    summarize,
    virtual_wait_tail,
    zm_summarize,
)
from distributions import Exponential, distribution_from_config
from errors import (
    EXIT_COMPUTATION,
    EXIT_OK,
    EXIT_VALIDATION,
    VALIDATION_ERRORS,
    ConfigError,
    DegenerateConditioning,
    EDQError,
)
from fclt import (
    SuperpositionConfig,
    ensemble_report_frame,
    fslln_check,
    gaussianity,
    generate,
    increment_independence,
    increment_stationarity,
    variance_profile,
)
from mam import PhService, erlang_a_pmf, pmf_frame, solve, solve_sweep, tv_distance
from simulator import (
    EventLog,
    effective_abandonment_key,
    resolve_threads,
    run,
    service_level_key,
    simulate_replication,
    system_pmf_key,
    system_tail_key,
    wait_tail_key,
)
from staffing import StaffingProblem, evaluate_curve, min_servers

logger = logging.getLogger("edq")


@dataclass
class Report:
    """指令輸出: results 進 JSON，tables 另存 CSV (stdout 模式內嵌於 JSON)"""
    results: Dict[str, Any] = field(default_factory=dict)
    tables: Dict[str, pd.DataFrame] = field(default_factory=dict)
    file_tables: Dict[str, pd.DataFrame] = field(default_factory=dict)
    event_logs: Dict[str, EventLog] = field(default_factory=dict)


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "-", text).strip("-") or "case"


def _frame(rows: List[Dict[str, Any]]) -> pd.DataFrame:
    return pd.DataFrame(rows)


# =============================================================================
# 共用: 各評估器的指標 (key 與模擬器相同)
# =============================================================================

def _diffusion_measures(spec: QueueSpec, summary, th: Thresholds) -> Dict[str, float]:
    out = {
        "abandonment_fraction": summary.alpha,
        "wait_mean": summary.w,
        "wait_variance": summary.sigma_w_sq,
        "queue_mean": summary.q,
        "queue_variance": buffer_variance(summary),
        "system_mean": spec.n + summary.q,
        "system_variance": summary.sigma_x_sq,
    }
    for a in th.wait_tail:
        out[wait_tail_key(a)] = float(virtual_wait_tail(summary, a))
    for a in th.system_tail:
        out[system_tail_key(a)] = float(queue_tail(summary, a))
    for d in th.service_level_delays:
        out[service_level_key(d)] = service_level(spec, d, summary)
    for d in th.effective_abd_delays:
        try:
            out[effective_abandonment_key(d)] = effective_abandonment(spec, d, summary)
        except DegenerateConditioning:
            out[effective_abandonment_key(d)] = float("nan")
    return out


def _fluid_measures(spec: QueueSpec, th: Thresholds) -> Dict[str, float]:
    summary = summarize(spec)
    out = {
        "abandonment_fraction": summary.alpha,
        "wait_mean": summary.w,
        "queue_mean": summary.q,
        "system_mean": spec.n + summary.q,
    }
    for d in th.service_level_delays:
        out[service_level_key(d)] = fluid_service_level(spec, d)
    for d in th.effective_abd_delays:
        try:
            out[effective_abandonment_key(d)] = fluid_effective_abandonment(spec, d)
        except DegenerateConditioning:
            out[effective_abandonment_key(d)] = float("nan")
    return out


def _pmf_measures(p: np.ndarray, spec: QueueSpec, theta: float, th: Thresholds,
                  pmf_points: List[int]) -> Dict[str, float]:
    """截斷穩態分布 p(i), i = 0..K 的系統指標"""
    n = spec.n
    i = np.arange(p.size)
    queue = np.maximum(i - n, 0)
    mean = float(i @ p)
    q_mean = float(queue @ p)
    out = {
        "abandonment_fraction": theta * q_mean / spec.arrival_rate,
        "queue_mean": q_mean,
        "queue_variance": float((queue - q_mean) ** 2 @ p),
        "system_mean": mean,
        "system_variance": float((i - mean) ** 2 @ p),
    }
    if th.system_tail:
        try:
            center = summarize(spec).q
        except EDQError:
            center = 0.0
        for a in th.system_tail:
            level = n + center + a * math.sqrt(n * spec.gamma)
            out[system_tail_key(a)] = float(p[i > level].sum())
    for k in pmf_points:
        out[system_pmf_key(k)] = float(p[k]) if 0 <= k < p.size else 0.0
    return out


def _require_markovian(spec: QueueSpec, evaluator: str, service_too: bool):
    if not isinstance(spec.patience, Exponential):
        raise ConfigError(f"{evaluator} 評估器需要指數耐心時間")
    if not isinstance(spec.interarrival, Exponential):
        raise ConfigError(f"{evaluator} 評估器需要 Poisson 到達")
    if service_too and not isinstance(spec.service, Exponential):
        raise ConfigError(f"{evaluator} 評估器需要指數服務時間")


def _evaluate_measures(evaluator: str, spec: QueueSpec, th: Thresholds,
                       settings: Optional[SimSettings], seed: int,
                       threads: int) -> Tuple[Dict[str, float], Dict[str, float], List[str]]:
    """Returns: (指標值, 信賴區間半寬, 警告)"""
    pmf_points = list(settings.system_pmf_points) if settings is not None else []

    if evaluator in ("diffusion", "zm"):
        summary = summarize(spec) if evaluator == "diffusion" else zm_summarize(spec)
        return _diffusion_measures(spec, summary, th), {}, list(summary.warnings)

    if evaluator == "fluid":
        return _fluid_measures(spec, th), {}, []

    if evaluator == "simulation":
        result = run(settings.to_config(spec, th, seed, threads))
        values = {k: e.mean for k, e in result.estimates.items()}
        half = {k: e.half_width for k, e in result.estimates.items()}
        return values, half, list(result.warnings)

    theta = spec.patience.rate if isinstance(spec.patience, Exponential) else float("nan")
    if evaluator == "mam":
        _require_markovian(spec, evaluator, service_too=False)
        sol = solve(spec.arrival_rate, spec.n, PhService.from_distribution(spec.service), theta)
        return _pmf_measures(sol.marginal, spec, theta, th, pmf_points), {}, []

    if evaluator == "erlang_a":
        _require_markovian(spec, evaluator, service_too=True)
        p = erlang_a_pmf(spec.arrival_rate, spec.n, spec.mu, theta)
        return _pmf_measures(p, spec, theta, th, pmf_points), {}, []

    raise ConfigError(f"未知的評估器: {evaluator!r}")


def _column_names(evaluators: List[str]) -> List[str]:
    """重複的評估器加上序號，例如 diffusion, diffusion_2"""
    seen: Dict[str, int] = {}
    names = []
    for ev in evaluators:
        seen[ev] = seen.get(ev, 0) + 1
        names.append(ev if seen[ev] == 1 else f"{ev}_{seen[ev]}")
    return names


def _add_gaps(row: Dict[str, Any], names: List[str]):
    """相對第一個評估器的絕對與相對差距"""
    ref = row.get(names[0], float("nan"))
    for name in names[1:]:
        value = row.get(name, float("nan"))
        gap = value - ref
        row[f"{name}_abs_gap"] = gap
        row[f"{name}_rel_gap"] = gap / abs(ref) if math.isfinite(ref) and ref != 0 else float("nan")


def _svpr_of(spec: QueueSpec) -> float:
    try:
        return summarize(spec).svpr
    except EDQError:
        return float("nan")


# =============================================================================
# 人力配置問題
# =============================================================================

def _staffing_problem(p: StaffPayload, target: TargetConfig, evaluator: str,
                      seed: int, threads: int, curve_range=None) -> StaffingProblem:
    service = distribution_from_config(p.service)
    patience = distribution_from_config(p.patience)
    interarrival = distribution_from_config(p.interarrival) if p.interarrival else None
    template = None
    if evaluator == "simulation":
        n_ref = max(1, int(math.ceil(p.arrival_rate * service.mean)) - 1)
        spec = QueueSpec(p.arrival_rate, n_ref, service, patience, interarrival)
        template = p.simulation.to_config(spec, Thresholds(), seed, threads)
    return StaffingProblem(
        arrival_rate=p.arrival_rate,
        service=service,
        patience=patience,
        objective=target.objective,
        target=target.target,
        delay=target.delay,
        evaluator=evaluator,
        interarrival=interarrival,
        sim_template=template,
        curve_range=curve_range,
        threads=threads,
    )


# =============================================================================
# 指令
# =============================================================================

def cmd_approx(scenario: Scenario, seed: int, threads: int) -> Report:
    """擴散近似: 摘要、尾端機率、服務水準、系統人數 pmf、危險率曲線"""
    p = scenario.approx
    report = Report()
    summaries, tails, levels, pmfs, hazards = [], [], [], [], []

    for case in p.cases:
        spec = case.system.to_spec()
        summary = summarize(spec)
        row = {"label": case.label, **summary.to_dict()}
        row["warnings"] = "; ".join(summary.warnings)
        summaries.append(row)

        for a in p.thresholds.wait_tail:
            tails.append({"label": case.label, "kind": "wait", "a": a,
                          "probability": float(virtual_wait_tail(summary, a))})
        for a in p.thresholds.system_tail:
            tails.append({"label": case.label, "kind": "system", "a": a,
                          "probability": float(queue_tail(summary, a))})
        for d in p.thresholds.service_level_delays:
            levels.append({"label": case.label, "objective": "service_level", "delay": d,
                           "value": service_level(spec, d, summary)})
        for d in p.thresholds.effective_abd_delays:
            levels.append({"label": case.label, "objective": "effective_abandonment", "delay": d,
                           "value": effective_abandonment(spec, d, summary)})

        if p.pmf:
            center, spread = spec.n + summary.q, 6.0 * summary.sigma_x
            i = np.arange(max(0, int(math.floor(center - spread))), int(math.ceil(center + spread)) + 1)
            pmfs.append(pd.DataFrame({"label": case.label, "i": i,
                                      "gaussian_probability": queue_pmf(summary, spec, i)}))
        if p.hazard_grid:
            frame = hazard_profile(spec.patience, p.hazard_grid)
            frame.insert(0, "label", case.label)
            hazards.append(frame)

        logger.info(f"[CLI] approx {case.label}: α={summary.alpha:.4g} w={summary.w:.4g} q={summary.q:.4g}")

    report.results["summaries"] = summaries
    report.tables["summary"] = _frame(summaries)
    if tails:
        report.tables["tails"] = _frame(tails)
    if levels:
        report.tables["levels"] = _frame(levels)
    if pmfs:
        report.tables["pmf"] = pd.concat(pmfs, ignore_index=True)
    if hazards:
        report.tables["hazard"] = pd.concat(hazards, ignore_index=True)
    return report


def cmd_simulate(scenario: Scenario, seed: int, threads: int) -> Report:
    """模擬並附上擴散近似對照欄"""
    p = scenario.simulate
    report = Report()
    rows, diagnostics = [], []

    for case in p.cases:
        spec = case.system.to_spec()
        cfg = p.settings.to_config(spec, p.thresholds, seed, threads, p.horizon_scale)
        result = run(cfg)

        try:
            approx = _diffusion_measures(spec, summarize(spec), p.thresholds)
        except EDQError as e:
            logger.info(f"[CLI] {case.label}: 無擴散近似 ({e})")
            approx = {}

        for key, est in result.estimates.items():
            rows.append({
                "label": case.label,
                "measure": key,
                "mean": est.mean,
                "half_width": est.half_width,
                "batches": est.batches,
                "approximation": approx.get(key, float("nan")),
            })
        diag = result.diagnostics()
        flow = diag.pop("flow")
        diag["warnings"] = "; ".join(diag["warnings"])
        diagnostics.append({"label": case.label, **diag, **{f"flow_{k}": v for k, v in flow.items()}})

        if p.event_log:
            report.event_logs[case.label] = simulate_replication(cfg, 0)

    report.results["diagnostics"] = diagnostics
    report.tables["estimates"] = _frame(rows)
    report.tables["diagnostics"] = _frame(diagnostics)
    return report


def cmd_staff(scenario: Scenario, seed: int, threads: int) -> Report:
    """各目標 × 評估器的最少伺服器數"""
    p = scenario.staff
    report = Report()
    rows, curves = [], []

    for target in p.targets:
        for evaluator in p.evaluators:
            problem = _staffing_problem(p, target, evaluator, seed, threads, p.curve_range)
            result = min_servers(problem)
            rows.append({
                "label": p.label,
                "target_name": target.name,
                "objective": target.objective,
                "target": target.target,
                "delay": target.delay,
                "evaluator": evaluator,
                "n_min": result.n_min,
                "rho": result.rho,
                "svpr": result.svpr,
                "monotone": result.monotone,
                "ambiguous_band": list(result.ambiguous_band) if result.ambiguous_band else None,
                "warnings": "; ".join(result.warnings),
            })
            curve = result.curve.copy()
            curve.insert(0, "evaluator", evaluator)
            curve.insert(0, "target_name", target.name)
            curves.append(curve)

    report.results["staffing"] = rows
    report.tables["staffing"] = _frame(rows)
    report.tables["curves"] = pd.concat(curves, ignore_index=True)
    return report


def cmd_fclt(scenario: Scenario, seed: int, threads: int) -> Report:
    """疊加更新過程的 FCLT 統計檢定"""
    p = scenario.fclt
    report = Report()
    cfg = SuperpositionConfig(
        interrenewal=distribution_from_config(p.interrenewal),
        n=p.n,
        gamma_n=p.gamma_n,
        grid=tuple(p.grid),
        replications=p.replications,
        seed=seed,
        threads=threads,
    )
    ens = generate(cfg)
    profile = variance_profile(ens)
    indep = increment_independence(ens) if len(p.grid) >= 3 else None

    results: Dict[str, Any] = {
        "mu": cfg.mu,
        "scv": cfg.scv,
        "variance_slope": profile.slope,
        "expected_slope": profile.expected_slope,
        "slope_relative_error": profile.relative_error,
        "slope_within_tolerance": profile.within_tolerance,
    }
    if indep is not None:
        results["independence"] = {
            "flagged": indep.flagged,
            "degenerate": indep.degenerate,
            "note": indep.note,
            "mean_abs_lag1": indep.mean_abs_lag1,
        }
        report.tables["independence"] = indep.frame

    try:
        st = increment_stationarity(ens)
        results["stationarity"] = st.__dict__
    except ConfigError as e:
        results["stationarity"] = {"skipped": True, "note": str(e)}

    if p.gaussian_t:
        gauss = [gaussianity(ens, t).__dict__ for t in p.gaussian_t]
        results["gaussianity"] = gauss
        report.tables["gaussianity"] = _frame(gauss)

    if p.fslln_n_values:
        frame = fslln_check(cfg, p.fslln_n_values, p.fslln_gamma_values)
        results["fslln"] = frame
        report.tables["fslln"] = frame

    report.results["fclt"] = results
    report.tables["variance"] = ensemble_report_frame(profile)
    report.file_tables["paths"] = ens.to_frame()
    return report


def cmd_mam(scenario: Scenario, seed: int, threads: int) -> Report:
    """M/PH/n+M 精確 pmf 與高斯近似的比較"""
    p = scenario.mam
    report = Report()
    service = PhService.from_distribution(distribution_from_config(p.service))
    rows, pmfs = [], []
    thetas = [1.0 / mean for mean in p.patience_means]
    solutions = solve_sweep(p.arrival_rate, p.servers, service, thetas, threads, p.truncation)

    for mean, theta, sol in zip(p.patience_means, thetas, solutions):
        spec = QueueSpec(p.arrival_rate, p.servers, service, Exponential(theta))
        try:
            summary = summarize(spec)
        except EDQError as e:
            logger.info(f"[CLI] patience mean {mean:g}: 無高斯近似 ({e})")
            summary = None

        frame = pmf_frame(sol, summary, spec)
        frame.insert(0, "patience_mean", mean)
        pmfs.append(frame)
        gap = (frame["probability"] - frame["gaussian_probability"]).abs()
        rows.append({
            "label": p.label,
            "patience_mean": mean,
            "gamma": spec.gamma,
            "K": sol.K,
            "states": sol.states,
            "residual": sol.residual,
            "tail_mass": sol.tail_mass,
            "cut_balance_error": sol.cut_balance_error(p.arrival_rate),
            "abandonment_fraction": sol.abandonment_fraction(p.arrival_rate, theta),
            "mean_system": sol.mean_system(),
            "tv_distance": tv_distance(sol, summary, spec) if summary is not None else float("nan"),
            "max_abs_gap": float(gap.max()) if summary is not None else float("nan"),
        })

    report.results["mam"] = rows
    report.tables["mam"] = _frame(rows)
    report.tables["pmf"] = pd.concat(pmfs, ignore_index=True)
    return report


def _compare_measures(scenario: Scenario, seed: int, threads: int) -> Report:
    p = scenario.compare
    names = _column_names(list(p.evaluators))
    rows = []

    for case in p.cases:
        spec = case.system.to_spec()
        per_eval = []
        for ev in p.evaluators:
            per_eval.append(_evaluate_measures(ev, spec, p.thresholds, p.simulation, seed, threads))

        keys: List[str] = []
        for values, _, _ in per_eval:
            keys.extend(k for k in values if k not in keys)
        warnings = sorted({w for _, _, ws in per_eval for w in ws})
        svpr = _svpr_of(spec)

        for key in keys:
            row: Dict[str, Any] = {"label": case.label, "measure": key}
            for name, (values, half, _) in zip(names, per_eval):
                row[name] = values.get(key, float("nan"))
                if half:
                    row[f"{name}_half_width"] = half.get(key, float("nan"))
            _add_gaps(row, names)
            row["svpr"] = svpr
            row["warning"] = "; ".join(warnings)
            rows.append(row)

    report = Report()
    report.tables["compare"] = _frame(rows)
    report.results["evaluators"] = names
    return report


def _compare_staffing_curve(scenario: Scenario, seed: int, threads: int) -> Report:
    p = scenario.compare
    staff = p.staffing
    if "simulation" in p.evaluators and staff.simulation is None:
        staff = staff.model_copy(update={"simulation": p.simulation})
    names = _column_names(list(p.evaluators))
    lo, hi = p.n_range
    rows = []

    for target in staff.targets:
        reference = _staffing_problem(staff, target, "diffusion", seed, threads)
        curves = []
        for ev in p.evaluators:
            problem = _staffing_problem(staff, target, ev, seed, threads)
            curves.append(evaluate_curve(problem, lo, hi).set_index("n"))
        for n in range(lo, hi + 1):
            row: Dict[str, Any] = {"target_name": target.name, "n": n}
            notes = []
            for name, curve in zip(names, curves):
                row[name] = float(curve.at[n, "value"])
                hw = curve.at[n, "half_width"]
                if math.isfinite(hw):
                    row[f"{name}_half_width"] = float(hw)
                if curve.at[n, "note"]:
                    notes.append(f"{name}: {curve.at[n, 'note']}")
            _add_gaps(row, names)
            spec = reference.spec_for(n)
            row["rho"] = spec.rho
            row["svpr"] = _svpr_of(spec)
            row["warning"] = "; ".join(notes)
            rows.append(row)

    report = Report()
    report.tables["compare"] = _frame(rows)
    report.results["evaluators"] = names
    return report


def cmd_compare(scenario: Scenario, seed: int, threads: int) -> Report:
    """多個評估器並列比較，附絕對與相對差距"""
    if scenario.compare.mode == "measures":
        return _compare_measures(scenario, seed, threads)
    return _compare_staffing_curve(scenario, seed, threads)


HANDLERS: Dict[str, Callable[[Scenario, int, int], Report]] = {
    "approx": cmd_approx,
    "simulate": cmd_simulate,
    "staff": cmd_staff,
    "fclt": cmd_fclt,
    "mam": cmd_mam,
    "compare": cmd_compare,
}


# =============================================================================
# 輸出
# =============================================================================

def emit(report: Report, header: Dict[str, Any], name: str, out: Optional[str]):
    """有 --out 時寫入目錄 (JSON + CSV)；否則整份 JSON 寫到 stdout"""
    if out is None:
        if report.file_tables or report.event_logs:
            logger.info(f"[CLI] {sorted(report.file_tables) + sorted(report.event_logs)} 只在指定 --out 時輸出")
        doc = {"header": header, "results": report.results, "tables": report.tables}
        sys.stdout.write(dumps(doc) + "\n")
        return

    base = Path(out)
    files = []
    for table, frame in {**report.tables, **report.file_tables}.items():
        path = base / f"{name}-{table}.csv"
        write_csv(frame, path, header)
        files.append(path.name)
    for label, log in report.event_logs.items():
        path = export_event_log(log, base / f"{name}-events-{_slug(label)}.csv", header)
        files.append(path.name)
    write_json({"header": header, "results": report.results, "files": files}, base / f"{name}.json")


# =============================================================================
# 主程式
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("scenario", type=Path, help="情境 JSON 檔")
    common.add_argument("--out", help="輸出目錄 (省略時寫到 stdout)")
    common.add_argument("--seed", type=int, help="覆寫情境檔的 seed")
    common.add_argument("--threads", type=int, help="執行緒數 (預設讀取 EDQ_THREADS)")
    common.add_argument("--dry-run", action="store_true", help="只驗證並輸出解析後的設定")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", "-v", action="store_true")
    verbosity.add_argument("--quiet", "-q", action="store_true")

    parser = argparse.ArgumentParser(prog=TOOL_NAME, description="超載 (ED) 多伺服器排隊系統的擴散近似、模擬與人力配置")
    parser.add_argument("--version", action="version", version=f"{TOOL_NAME} {TOOL_VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)
    for command, handler in HANDLERS.items():
        sub.add_parser(command, parents=[common], help=handler.__doc__)
    return parser


def _configure_logging(verbose: bool, quiet: bool):
    level = logging.DEBUG if verbose else logging.ERROR if quiet else logging.INFO
    logging.basicConfig(
        stream=sys.stderr,
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(args.verbose, args.quiet)

    try:
        scenario = load_scenario(args.scenario)
        if scenario.command != args.command:
            raise ConfigError(f"情境檔是 {scenario.command} 設定，不能用於 {args.command}")
        seed = scenario.seed if args.seed is None else args.seed
        if seed < 0:
            raise ConfigError(f"seed 必須非負，收到 {seed}")
        scenario = scenario.model_copy(update={"seed": seed})
        header = run_header(scenario, seed)

        if args.dry_run:
            sys.stdout.write(dumps({"header": header, "dry_run": True}) + "\n")
            return EXIT_OK

        threads = resolve_threads(args.threads)
        report = HANDLERS[args.command](scenario, seed, threads)
        emit(report, header, _slug(scenario.name), args.out or scenario.out)
    except VALIDATION_ERRORS as e:
        logger.error(f"[CLI] 設定錯誤: {e}")
        return EXIT_VALIDATION
    except EDQError as e:
        logger.error(f"[CLI] 計算失敗 ({type(e).__name__}): {e}")
        return EXIT_COMPUTATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
