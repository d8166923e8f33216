"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``PASS``/``FAIL``/``SKIP`` line with its measured
numbers, visible even without ``-s``. Criterion 10 needs an external dataset:
set ``SOHBAG_DATASET`` to a cycling table and ``SOHBAG_SCHEMA`` to a YAML
config whose ``data`` section maps its columns and whose ``window.chemistry``
names the chemistry.
"""

import os
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

from oracles import central_difference, naive_posterior, spearman_oracle, statistics_oracle, weighted_fusion
from sohbag.cli import main
from sohbag.config import load_config
from sohbag.ensemble import EnsembleConfig, aggregate, frd
from sohbag.evaluation import benchmark_timing, run_experiment, sweep_mn_on_table
from sohbag.features import build_feature_table, select_features, spearman, summarize, window_for
from sohbag.gpr import GPOptions, GPRHyperparams, GPRModel, log_marginal_likelihood, predict
from sohbag.ingestion import parse_cycling_table
from sohbag.synthetic import SyntheticFleetSpec, generate_synthetic_fleet, iter_synthetic_fleet


@pytest.fixture
def criterion(capsys):
    @contextmanager
    def run(number, title):
        info = {}
        t0 = time.perf_counter()
        try:
            yield info
        except pytest.skip.Exception as exc:
            with capsys.disabled():
                print(f"\nSKIP criterion {number}: {title} ({exc})")
            raise
        except BaseException as exc:
            with capsys.disabled():
                print(f"\nFAIL criterion {number}: {title} {_fmt(info, t0)} :: {type(exc).__name__}: {exc}"[:400])
            raise
        with capsys.disabled():
            print(f"\nPASS criterion {number}: {title} {_fmt(info, t0)}")

    return run


def _fmt(info, t0):
    parts = [f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in info.items()]
    return "[" + ", ".join(parts + [f"elapsed={time.perf_counter() - t0:.2f}s"]) + "]"


def _random_gp_problem(rng):
    n = int(rng.integers(2, 51))
    d = int(rng.integers(1, 6))
    X = rng.uniform(-2, 2, (n, d))
    y = np.sin(X).sum(axis=1) + 0.1 * rng.normal(size=n)
    ard = bool(rng.integers(2))
    hp = GPRHyperparams(tuple(rng.uniform(0.3, 3.0, d if ard else 1)), float(rng.uniform(0.5, 2)),
                        float(rng.uniform(0.01, 0.5)))
    return X, y, hp


def test_criterion_01_gp_oracle_equivalence(criterion):
    with criterion(1, "GP posterior vs dense-inverse oracle") as info:
        t0 = time.perf_counter()
        worst = 0.0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            X, y, hp = _random_gp_problem(rng)
            Xs = rng.uniform(-2.5, 2.5, (10, X.shape[1]))
            mean, std = predict(GPRModel.build(hp, X, y), Xs)
            m0, v0, _ = naive_posterior(X, y, Xs, hp.length_scales, hp.signal_variance, hp.noise_variance)
            worst = max(worst, float(np.max(np.abs(mean - m0) / np.abs(m0))),
                        float(np.max(np.abs(std**2 - v0) / np.abs(v0))))
        elapsed = time.perf_counter() - t0
        info.update(max_rel_err=worst, runtime_s=elapsed)
        assert worst <= 1e-8
        assert elapsed < 10


def test_criterion_02_likelihood_gradient(criterion):
    with criterion(2, "likelihood gradient vs central differences") as info:
        t0 = time.perf_counter()
        worst = 0.0
        for seed in range(100):
            rng = np.random.default_rng(1000 + seed)
            X, y, hp = _random_gp_problem(rng)

            def f(theta):
                return log_marginal_likelihood(GPRHyperparams.from_log(theta), X, y)[0]

            _, grad = log_marginal_likelihood(hp, X, y)
            fd = central_difference(f, hp.log_params())
            worst = max(worst, float(np.max(np.abs(grad - fd) / np.abs(fd))))
        elapsed = time.perf_counter() - t0
        info.update(max_rel_err=worst, runtime_s=elapsed)
        assert worst <= 1e-4
        assert elapsed < 30


def test_criterion_03_rank_and_statistics_oracles(criterion):
    with criterion(3, "Spearman and window statistics vs oracles") as info:
        rng = np.random.default_rng(3)
        worst_rho = 0.0
        for i in range(1000):
            n = int(rng.integers(3, 60))
            # small integer alphabets force ties in most vectors
            x = rng.integers(0, max(2, n // 3), n).astype(float)
            y = rng.integers(0, 5, n).astype(float) if i % 2 else rng.normal(size=n)
            if np.ptp(x) == 0 or np.ptp(y) == 0:
                continue
            worst_rho = max(worst_rho, abs(spearman(x, y) - spearman_oracle(x, y)))
        worst_stat = 0.0
        for _ in range(1000):
            x = rng.normal(rng.uniform(-5, 5), rng.uniform(0.1, 3), rng.integers(4, 200))
            got = summarize(x)
            for name, want in statistics_oracle(x).items():
                worst_stat = max(worst_stat, abs(getattr(got, name) - want) / max(1.0, abs(want)))
        s = summarize([1, 2, 3, 4, 5])
        info.update(max_rho_err=worst_rho, max_stat_err=worst_stat, kurtosis=s.kurtosis, iqr=s.iqr)
        assert worst_rho <= 1e-12
        assert worst_stat <= 1e-10
        assert abs(s.kurtosis - 1.7) <= 1e-12 and abs(s.iqr - 2.5) <= 1e-12
        assert abs(spearman([1, 2, 3], [3, 1, 2]) + 0.5) <= 1e-12


def test_criterion_04_aggregation(criterion):
    with criterion(4, "aggregation hand case and invariants") as info:
        p = aggregate([(1.0, 1.0), (2.0, 2.0)])
        assert abs(p.y_pred - 4 / 3) <= 1e-12 and abs(p.sigma_pred - 2 / 3) <= 1e-12
        rng = np.random.default_rng(4)
        violations = 0
        worst_oracle = 0.0
        for _ in range(10_000):
            z = int(rng.integers(1, 13))
            ys = rng.uniform(50, 110, z)
            sig = rng.uniform(1e-3, 10, z)
            a = aggregate(list(zip(ys, sig)))
            perm = rng.permutation(z)
            b = aggregate(list(zip(ys[perm], sig[perm])))
            yo, so = weighted_fusion(list(ys), list(sig))
            worst_oracle = max(worst_oracle, abs(a.y_pred - yo) / abs(yo))
            ok = ys.min() - 1e-9 <= a.y_pred <= ys.max() + 1e-9 and a.sigma_pred >= 0
            ok &= abs(a.y_pred - b.y_pred) <= 1e-12 and abs(a.sigma_pred - b.sigma_pred) <= 1e-12
            violations += not ok
        info.update(y_pred=p.y_pred, sigma_pred=p.sigma_pred, violations=violations, max_oracle_err=worst_oracle)
        assert violations == 0
        assert worst_oracle <= 1e-12


def test_criterion_05_frd(criterion):
    with criterion(5, "factor reduction of data") as info:
        small = frd(480, EnsembleConfig(m=3, n=20))
        large = frd(90_000, EnsembleConfig(m=20, n=200))
        info.update(frd_small=small, frd_large=large)
        assert small == 8.0
        assert large == 22.5
        assert round(frd(92_000, EnsembleConfig(m=20, n=200))) == 23


def test_criterion_06_synthetic_end_to_end(criterion):
    with criterion(6, "synthetic fleet, 20 iterations, m=7 n=30") as info:
        t0 = time.perf_counter()
        fleet = generate_synthetic_fleet(SyntheticFleetSpec(cell_count=30, soh_start=100, soh_end=60, seed=1))
        r = run_experiment(fleet, window_for("LFP"), EnsembleConfig(m=7, n=30), 20, seed=1)
        elapsed = time.perf_counter() - t0
        s = r.summary
        info.update(mpe_median=s["mpe_median"], rmspe_median=s["rmspe_median"], assessments=s["assessments"],
                    runtime_s=elapsed)
        assert s["assessments"] == 20 * 9
        assert s["mpe_median"] <= 2.0
        assert s["rmspe_median"] <= 3.0
        assert elapsed < 60


def test_criterion_07_scalability(criterion):
    with criterion(7, "bagged fit vs 2000-row baseline on 20000 rows") as info:
        spec = SyntheticFleetSpec(cell_count=200, cycles_per_cell=100, seed=7)
        table = build_feature_table(iter_synthetic_fleet(spec), window_for("LFP"))
        assert len(table) == 20_000
        sel = select_features(table.X, table.soh)
        X = table.X[:, list(sel.selected_indices)]
        # one optimizer start on both arms so the comparison is like for like
        rep = benchmark_timing(X, table.soh, EnsembleConfig(m=20, n=200), baseline_cap=2000, seed=0,
                               gp_options=GPOptions(n_starts=1), n_predict=500)
        info.update(ratio=rep.fit_ratio, baseline_fit_s=rep.baseline_fit_s, bagged_fit_s=rep.bagged_fit_s,
                    frd=rep.frd)
        assert rep.baseline_rows == 2000
        assert rep.fit_ratio >= 5.0


def test_criterion_08_sweep_trend(criterion):
    with criterion(8, "sweep corner (max m, n) vs (min m, n)") as info:
        fleet = generate_synthetic_fleet(SyntheticFleetSpec(cell_count=30, cycles_per_cell=40, seed=8))
        table = build_feature_table(fleet, window_for("LFP"))
        grid = sweep_mn_on_table(table, [2, 10], [10, 80], iterations=10, seed=8)
        small, large = grid.cells[(2, 10)]["mpe_mean"], grid.cells[(10, 80)]["mpe_mean"]
        info.update(mpe_small_corner=small, mpe_large_corner=large)
        assert large <= small


def test_criterion_09_determinism(criterion, tmp_path):
    with criterion(9, "byte-identical reports across runs and worker counts") as info:
        cfg = tmp_path / "cfg.yaml"
        cfg.write_text("window: {chemistry: LFP}\nsynth: {cell_count: 12, cycles_per_cell: 20}\n"
                       "protocol: {iterations: 3}\nensemble: {m: 5, n: 25}\nseed: 9\n")
        outs = []
        for label, workers in (("run1", "1"), ("run2", "1"), ("run4", "4")):
            out = tmp_path / label
            assert main(["synth", "--config", str(cfg), "--out", str(out)]) == 0
            assert main(["evaluate", "--config", str(cfg), "--out", str(out), "--workers", workers]) == 0
            outs.append(out)
        names = ("history.jsonl", "report.json", "cells.csv", "boxplot.csv")
        same = all((outs[0] / n).read_bytes() == (o / n).read_bytes() for o in outs[1:] for n in names)
        info.update(files_compared=len(names) * 2, identical=same)
        assert same


PUBLISHED_BAGGED_MPE = {"NMC": 0.286, "LCO": 0.839, "LFP": 0.907}


def test_criterion_10_dataset_integration(criterion):
    with criterion(10, "public dataset integration") as info:
        data, schema = os.environ.get("SOHBAG_DATASET"), os.environ.get("SOHBAG_SCHEMA")
        if not (data and schema):
            pytest.skip("set SOHBAG_DATASET and SOHBAG_SCHEMA to run")
        cfg = load_config(schema)
        chem = (cfg.window.chemistry or "").upper()
        if chem not in PUBLISHED_BAGGED_MPE:
            pytest.fail(f"window.chemistry must be one of {sorted(PUBLISHED_BAGGED_MPE)}")
        with open(Path(data), "rb") as fp:
            parsed = parse_cycling_table(fp, cfg.table_schema())
        r = run_experiment(parsed.histories, cfg.window_spec(), cfg.ensemble_config(), cfg.protocol.iterations,
                           cfg.seed, cfg.gp_options())
        bound = 1.5 * PUBLISHED_BAGGED_MPE[chem]
        info.update(chemistry=chem, cells=len(parsed.histories), mpe_median=r.summary["mpe_median"], bound=bound)
        assert r.summary["mpe_median"] <= bound
