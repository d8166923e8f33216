"""Experimental protocol: 70-30 cell splits, per-cell errors, sweeps, timing."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Sequence

import numpy as np

from .ensemble import (
    EnsembleConfig,
    aggregate_arrays,
    frd,
    model_outputs,
    train_ensemble,
)
from .errors import ConfigError, DivisionDomainError, InsufficientDataError, SohError
from .features import FeatureTable, WindowSpec, build_feature_table, quantile, select_features
from .gpr import GPOptions, fit, predict
from .ingestion import CellAgingHistory


def _derive(seed: int, *path: int) -> int:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *map(int, path)])
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class SplitPlan:
    train_cells: tuple[str, ...]
    test_cells: tuple[str, ...]
    seed: int
    fraction: float = 0.7


def train_count(total: int, fraction: float) -> int:
    """round(fraction * total), halves rounded down, kept within [1, total-1]."""
    exact = Fraction(str(fraction)) * total
    k = int(-((-exact + Fraction(1, 2)) // 1))  # ceil(x - 1/2)
    return min(max(k, 1), total - 1)


def split_by_cell(cell_ids: Sequence[str], fraction: float = 0.7, seed: int = 0) -> SplitPlan:
    """Seeded shuffle of cells; the first share trains, the rest tests."""
    if not 0 < fraction < 1:
        raise ConfigError(f"split fraction must lie in (0, 1), got {fraction}")
    cells = list(dict.fromkeys(cell_ids))
    if len(cells) < 2:
        raise InsufficientDataError("need at least 2 cells to split")
    order = np.random.default_rng(np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF)).permutation(len(cells))
    k = train_count(len(cells), fraction)
    shuffled = [cells[i] for i in order]
    return SplitPlan(tuple(shuffled[:k]), tuple(shuffled[k:]), int(seed), float(fraction))


def compute_metrics(y_pred, y_exp) -> tuple[float, float]:
    """(RMSPE, MPE) in percent for one cell's cycles."""
    y_pred = np.asarray(y_pred, dtype=np.float64)
    y_exp = np.asarray(y_exp, dtype=np.float64)
    if y_pred.shape != y_exp.shape or y_pred.size == 0:
        raise ValueError("need equally long, non-empty prediction and expectation arrays")
    if np.any(y_exp == 0):
        raise DivisionDomainError("expected SOH of zero")
    rel = y_pred / y_exp - 1.0
    return float(np.sqrt(np.mean(rel * rel)) * 100.0), float(np.mean(np.abs(rel)) * 100.0)


@dataclass(frozen=True)
class CellErrorReport:
    cell_id: str
    rmspe: float
    mpe: float
    per_cycle: tuple[tuple[int, float, float, float], ...]
    iteration: int = 0

    def to_dict(self, per_cycle=True) -> dict:
        d = {"cell_id": self.cell_id, "iteration": self.iteration, "rmspe": self.rmspe, "mpe": self.mpe}
        if per_cycle:
            d["per_cycle"] = [list(p) for p in self.per_cycle]
        return d


def boxplot_stats(values) -> dict:
    """Median, quartiles, whiskers at 1.5 IQR, and outliers."""
    x = np.sort(np.asarray(values, dtype=np.float64))
    if x.size == 0:
        raise InsufficientDataError("no values")
    q1, med, q3 = (float(v) for v in quantile(x, [0.25, 0.5, 0.75]))
    iqr = q3 - q1
    lo, hi = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = x[(x >= lo) & (x <= hi)]
    return {
        "median": med,
        "q1": q1,
        "q3": q3,
        "whisker_low": float(inside.min()),
        "whisker_high": float(inside.max()),
        "outliers": [float(v) for v in x[(x < lo) | (x > hi)]],
        "count": int(x.size),
    }


def _summary(reports: Sequence[CellErrorReport]) -> dict:
    if not reports:
        return {}
    rm = np.array([r.rmspe for r in reports])
    mp = np.array([r.mpe for r in reports])
    return {
        "rmspe_median": float(np.median(rm)),
        "rmspe_mean": float(np.mean(rm)),
        "mpe_median": float(np.median(mp)),
        "mpe_mean": float(np.mean(mp)),
        "rmspe_box": boxplot_stats(rm),
        "mpe_box": boxplot_stats(mp),
        "assessments": len(reports),
    }


@dataclass
class ExperimentReport:
    cell_reports: list[CellErrorReport]
    baseline_reports: list[CellErrorReport]
    selections: list[list[int]]
    splits: list[SplitPlan]
    failures: list[tuple[int, str]]
    fit_times: list[float] = field(default_factory=list)
    predict_times: list[float] = field(default_factory=list)
    baseline_fit_times: list[float] = field(default_factory=list)
    baseline_predict_times: list[float] = field(default_factory=list)

    @property
    def summary(self) -> dict:
        return _summary(self.cell_reports)

    @property
    def baseline_summary(self) -> dict:
        return _summary(self.baseline_reports)

    def timings(self) -> dict:
        def avg(v):
            return float(np.mean(v)) if v else None

        return {
            "fit_time_mean_s": avg(self.fit_times),
            "predict_time_mean_s": avg(self.predict_times),
            "baseline_fit_time_mean_s": avg(self.baseline_fit_times),
            "baseline_predict_time_mean_s": avg(self.baseline_predict_times),
            "fit_times_s": list(self.fit_times),
            "predict_times_s": list(self.predict_times),
        }

    def to_dict(self) -> dict:
        """Deterministic content only; wall times live in :meth:`timings`."""
        return {
            "summary": self.summary,
            "baseline_summary": self.baseline_summary,
            "iterations": [
                {"iteration": i, "train_cells": list(s.train_cells), "test_cells": list(s.test_cells),
                 "selected": sel}
                for i, (s, sel) in enumerate(zip(self.splits, self.selections))
            ],
            "failures": [{"iteration": i, "error": e} for i, e in self.failures],
            "cells": [r.to_dict() for r in self.cell_reports],
            "baseline_cells": [r.to_dict() for r in self.baseline_reports],
        }


def _cell_reports(table: FeatureTable, rows: np.ndarray, y_pred, sigma, iteration: int):
    reports = []
    cells = table.cell_ids[rows]
    for cell in dict.fromkeys(cells.tolist()):
        m = cells == cell
        y_exp = table.soh[rows][m]
        rm, mp = compute_metrics(y_pred[m], y_exp)
        per = tuple(
            (int(c), float(e), float(p), float(s))
            for c, e, p, s in zip(table.cycle_index[rows][m], y_exp, y_pred[m], sigma[m])
        )
        reports.append(CellErrorReport(cell, rm, mp, per, iteration))
    return reports


@dataclass(frozen=True)
class ProtocolSettings:
    k: int = 10
    redundancy: float = 0.8
    fraction: float = 0.7
    baseline_cap: int | None = None
    workers: int = 1


def _prepare_iteration(table: FeatureTable, seed: int, it: int, settings: ProtocolSettings):
    split = split_by_cell(table.cells, settings.fraction, _derive(seed, it, 0))
    train = table.mask(split.train_cells)
    test = table.mask(split.test_cells)
    sel = select_features(table.X[train], table.soh[train], settings.k, settings.redundancy, table.names)
    cols = list(sel.selected_indices)
    return split, train, test, cols


def run_experiment_on_table(table: FeatureTable, config: EnsembleConfig, iterations: int, seed: int = 0,
                            gp_options: GPOptions | None = None,
                            settings: ProtocolSettings | None = None) -> ExperimentReport:
    """Repeat split -> select (train cells only) -> bag -> assess test cells.

    Iteration ``i`` draws its split and bag seeds from ``(seed, i)``, so adding
    iterations never reshuffles earlier ones. Failed iterations are recorded
    and skipped.
    """
    settings = settings or ProtocolSettings()
    gp_options = gp_options or GPOptions()
    report = ExperimentReport([], [], [], [], [])
    for it in range(iterations):
        try:
            split, train, test, cols = _prepare_iteration(table, seed, it, settings)
            Xtr, ytr = table.X[train][:, cols], table.soh[train]
            Xte = table.X[test][:, cols]
            cfg = replace(config, master_seed=_derive(seed, it, 1))
            groups = table.cell_ids[train] if cfg.bag_unit == "cell" else None
            t0 = time.perf_counter()
            ens = train_ensemble(Xtr, ytr, cfg, gp_options, workers=settings.workers, groups=groups)
            t1 = time.perf_counter()
            Y, S = model_outputs(ens, Xte)
            y_pred, sigma, _ = aggregate_arrays(Y, S, cfg.weight_epsilon)
            t2 = time.perf_counter()
            cell_reps = _cell_reports(table, test, y_pred, sigma, it)
            base_reps = []
            if settings.baseline_cap is not None:
                base_reps = _baseline(table, train, test, cols, settings.baseline_cap, seed, it, gp_options,
                                      report)
        except SohError as exc:
            report.failures.append((it, f"{type(exc).__name__}: {exc}"))
            continue
        report.splits.append(split)
        report.selections.append(cols)
        report.cell_reports.extend(cell_reps)
        report.baseline_reports.extend(base_reps)
        report.fit_times.append(t1 - t0)
        report.predict_times.append(t2 - t1)
    return report


def _baseline(table, train, test, cols, cap, seed, it, gp_options, report):
    rows = np.flatnonzero(train)
    if len(rows) > cap:
        rng = np.random.default_rng(_derive(seed, it, 2))
        rows = np.sort(rng.choice(rows, size=cap, replace=False))
    t0 = time.perf_counter()
    model = fit(table.X[rows][:, cols], table.soh[rows], replace(gp_options, seed=_derive(seed, it, 3)))
    t1 = time.perf_counter()
    mean, std = predict(model, table.X[test][:, cols])
    report.baseline_fit_times.append(t1 - t0)
    report.baseline_predict_times.append(time.perf_counter() - t1)
    return _cell_reports(table, test, mean, std, it)


def run_experiment(histories: Sequence[CellAgingHistory], window: WindowSpec, config: EnsembleConfig,
                   iterations: int, seed: int = 0, gp_options: GPOptions | None = None,
                   settings: ProtocolSettings | None = None) -> ExperimentReport:
    table = build_feature_table(histories, window)
    return run_experiment_on_table(table, config, iterations, seed, gp_options, settings)


@dataclass
class SweepGrid:
    m_values: list[int]
    n_values: list[int]
    cells: dict[tuple[int, int], dict]
    iterations: int

    def rows(self) -> list[dict]:
        return [{"m": m, "n": n, **self.cells[(m, n)]} for n in self.n_values for m in self.m_values
                if (m, n) in self.cells]

    def to_dict(self, include_times=False) -> dict:
        rows = self.rows()
        if not include_times:
            rows = [{k: v for k, v in r.items() if k != "fit_time_mean_s"} for r in rows]
        return {"m_values": self.m_values, "n_values": self.n_values, "iterations": self.iterations,
                "grid": rows}


def sweep_mn_on_table(table: FeatureTable, m_values: Sequence[int], n_values: Sequence[int], iterations: int = 10,
                      seed: int = 0, base_config: EnsembleConfig | None = None,
                      gp_options: GPOptions | None = None, settings: ProtocolSettings | None = None) -> SweepGrid:
    """Grid of mean MPE/RMSPE over (m, n).

    For every n the largest m is trained once; each m is then scored with the
    first m models, so columns of the grid share their bags. Split and bag
    seeds match :func:`run_experiment_on_table` for the same ``seed``.
    """
    m_values, n_values = sorted(set(m_values)), sorted(set(n_values))
    base = base_config or EnsembleConfig()
    if not m_values or not n_values:
        raise ConfigError("m and n ranges must be non-empty")
    if max(m_values) > base.max_m or max(n_values) > base.max_n or min(m_values) < 1 or min(n_values) < 2:
        raise ConfigError(f"sweep ranges exceed resource bounds (m <= {base.max_m}, n <= {base.max_n})")
    settings = settings or ProtocolSettings()
    gp_options = gp_options or GPOptions()
    big_m = max(m_values)
    acc: dict[tuple[int, int], list] = {(m, n): [] for m in m_values for n in n_values}
    for it in range(iterations):
        try:
            split, train, test, cols = _prepare_iteration(table, seed, it, settings)
        except SohError:
            continue
        Xtr, ytr, Xte = table.X[train][:, cols], table.soh[train], table.X[test][:, cols]
        groups = table.cell_ids[train] if base.bag_unit == "cell" else None
        for n in n_values:
            cfg = replace(base, m=big_m, n=n, master_seed=_derive(seed, it, 1))
            try:
                ens = train_ensemble(Xtr, ytr, cfg, gp_options, workers=settings.workers, groups=groups)
            except SohError:
                continue
            Y, S = model_outputs(ens, Xte)
            for m in m_values:
                keep = [k for k, o in enumerate(ens.ordinals) if o < m]
                if not keep:
                    continue
                y_pred, sigma, _ = aggregate_arrays(Y[keep], S[keep], cfg.weight_epsilon)
                reps = _cell_reports(table, test, y_pred, sigma, it)
                acc[(m, n)].append((
                    float(np.mean([r.mpe for r in reps])),
                    float(np.mean([r.rmspe for r in reps])),
                    float(sum(ens.fit_times[k] for k in keep)),
                ))
    cells = {}
    for key, vals in acc.items():
        if vals:
            a = np.array(vals)
            cells[key] = {"mpe_mean": float(a[:, 0].mean()), "rmspe_mean": float(a[:, 1].mean()),
                          "fit_time_mean_s": float(a[:, 2].mean()), "iterations": len(vals)}
    return SweepGrid(m_values, n_values, cells, iterations)


def sweep_mn(histories, window: WindowSpec, m_values, n_values, iterations=10, seed=0, **kw) -> SweepGrid:
    return sweep_mn_on_table(build_feature_table(histories, window), m_values, n_values, iterations, seed, **kw)


@dataclass(frozen=True)
class TimingReport:
    total_rows: int
    baseline_rows: int
    baseline_fit_s: float
    baseline_predict_s: float
    bagged_fit_s: float
    bagged_predict_s: float
    aggregate_s: float
    fit_ratio: float
    frd: float
    m: int
    n: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def benchmark_timing(X, y, config: EnsembleConfig, baseline_cap: int = 2000, seed: int = 0,
                     gp_options: GPOptions | None = None, n_predict: int = 500) -> TimingReport:
    """Sequential wall-clock comparison of a capped single GP against the bagged ensemble."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    gp_options = gp_options or GPOptions()
    rng = np.random.default_rng(_derive(seed, 0))
    n_rows = len(X)
    base_rows = rng.choice(n_rows, size=min(n_rows, baseline_cap), replace=False)
    query = X[rng.choice(n_rows, size=min(n_rows, n_predict), replace=False)]

    t0 = time.perf_counter()
    base = fit(X[base_rows], y[base_rows], replace(gp_options, seed=_derive(seed, 1)))
    t1 = time.perf_counter()
    predict(base, query)
    t2 = time.perf_counter()
    ens = train_ensemble(X, y, replace(config, master_seed=_derive(seed, 2)), gp_options, workers=1)
    t3 = time.perf_counter()
    Y, S = model_outputs(ens, query)
    t4 = time.perf_counter()
    aggregate_arrays(Y, S, config.weight_epsilon)
    t5 = time.perf_counter()
    return TimingReport(
        total_rows=n_rows, baseline_rows=len(base_rows),
        baseline_fit_s=t1 - t0, baseline_predict_s=t2 - t1,
        bagged_fit_s=t3 - t2, bagged_predict_s=t4 - t3, aggregate_s=t5 - t4,
        fit_ratio=(t1 - t0) / (t3 - t2), frd=frd(n_rows, config), m=config.m, n=config.n,
    )
