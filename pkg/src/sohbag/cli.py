"""Stage-wise command line front end.

Each command reads the artifact of the stage before it and writes its own:
history.jsonl -> features.csv -> selection.json -> ensemble.json -> predictions.csv,
plus report, sweep and bench outputs. Every artifact carries a provenance block
with the format version, config hash and seed.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from dataclasses import replace
from pathlib import Path


from . import __version__
from .config import PRESETS, PipelineConfig, describe_keys, load_config
from .ensemble import BaggedEnsemble, ensemble_predict_batch, train_ensemble
from .errors import ArtifactError, ConfigError, SohError
from .evaluation import ProtocolSettings, benchmark_timing, run_experiment_on_table, sweep_mn_on_table
from .features import FeatureSelection, FeatureTable, build_feature_table, select_features
from .ingestion import dump_histories, load_histories, parse_cycling_table
from .synthetic import SyntheticFleetSpec, iter_synthetic_fleet

log = logging.getLogger("sohbag")

ARTIFACT_VERSION = 1
COMMANDS = ("ingest", "featurize", "select", "train", "predict", "evaluate", "sweep", "bench", "synth")

# artifact file name -> command that writes it
PRODUCERS = {
    "history.jsonl": "ingest (or synth)",
    "features.csv": "featurize",
    "selection.json": "select",
    "ensemble.json": "train",
}


class StageInputMissing(SohError):
    pass


def provenance(cfg: PipelineConfig, command: str) -> dict:
    return {"format_version": ARTIFACT_VERSION, "config_hash": cfg.config_hash(), "seed": cfg.seed,
            "command": command, "tool_version": __version__}


def write_atomic(path: Path, text: str) -> None:
    """Write via a temp file in the same directory, then rename over the target."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fp:
            fp.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _require(path: Path, name: str) -> Path:
    if not path.exists():
        raise StageInputMissing(f"missing input {path}; run `sohbag {PRODUCERS[name]}` first to produce it")
    return path


def _check_hash(prov: dict, cfg: PipelineConfig, path: Path, strict: bool, allow: bool) -> None:
    got = prov.get("config_hash")
    if got is None or got == cfg.config_hash():
        return
    msg = f"{path} was produced with config hash {got}, current config is {cfg.config_hash()}"
    if strict and not allow:
        raise ArtifactError(msg + " (pass --allow-config-mismatch to proceed anyway)")
    log.warning(msg)


class Stage:
    """Resolves artifact paths and provenance checks for one invocation."""

    def __init__(self, cfg: PipelineConfig, out: Path, args):
        self.cfg = cfg
        self.out = out
        self.args = args

    def path(self, name: str) -> Path:
        return self.out / name

    def input(self, name: str) -> Path:
        if self.args.input:
            return _require(Path(self.args.input), name)
        return _require(self.path(name), name)

    def load_history(self, strict=False):
        p = self.input("history.jsonl")
        with open(p, encoding="utf-8") as fp:
            histories, header = load_histories(fp)
        _check_hash(header.get("provenance", {}), self.cfg, p, strict, self.args.allow_config_mismatch)
        return histories

    def load_features(self, strict=False, path: Path | None = None):
        p = path or self.input("features.csv")
        with open(p, encoding="utf-8") as fp:
            table, header = FeatureTable.from_csv(fp)
        _check_hash(header.get("provenance", {}), self.cfg, p, strict, self.args.allow_config_mismatch)
        return table

    def load_json(self, name: str) -> dict:
        p = _require(self.path(name), name)
        data = json.loads(p.read_text(encoding="utf-8"))
        _check_hash(data.get("provenance", {}), self.cfg, p, False, self.args.allow_config_mismatch)
        return data

    def features_for_evaluation(self, strict: bool) -> FeatureTable:
        """evaluate/sweep/bench accept a feature table or a history file."""
        if self.args.input:
            p = Path(self.args.input)
            if not p.exists():
                raise StageInputMissing(f"missing input {p}")
            if p.suffix == ".csv":
                return self.load_features(strict, p)
            with open(p, encoding="utf-8") as fp:
                histories, header = load_histories(fp)
            _check_hash(header.get("provenance", {}), self.cfg, p, strict, self.args.allow_config_mismatch)
            return self.featurize(histories)
        if self.path("features.csv").exists():
            return self.load_features(strict, self.path("features.csv"))
        if self.path("history.jsonl").exists():
            return self.featurize(self.load_history(strict))
        raise StageInputMissing(f"no features.csv or history.jsonl in {self.out}; run `sohbag synth` or "
                                "`sohbag ingest`, optionally followed by `sohbag featurize`")

    def featurize(self, histories) -> FeatureTable:
        table = build_feature_table(histories, self.cfg.window_spec(), skip_errors=self.cfg.data.skip_bad_cycles)
        for cell, cyc, why in table.skipped:
            log.warning("skipped cell %s cycle %s: %s", cell, cyc, why)
        return table

    def settings(self, baseline: bool | None = None) -> ProtocolSettings:
        p = self.cfg.protocol
        use = p.baseline if baseline is None else baseline
        return ProtocolSettings(k=self.cfg.selection.k, redundancy=self.cfg.selection.redundancy,
                                fraction=p.fraction, baseline_cap=self.cfg.limits.max_baseline_rows if use else None,
                                workers=self.cfg.workers)


# ---- commands


def cmd_ingest(st: Stage) -> None:
    src = st.args.input or st.cfg.data.path
    if not src:
        raise StageInputMissing("ingest needs a cycling table: set data.path in the config or pass --input")
    p = Path(src)
    if not p.exists():
        raise StageInputMissing(f"cycling table {p} not found")
    with open(p, "rb") as fp:
        result = parse_cycling_table(fp, st.cfg.table_schema())
    for r in result.rejected:
        log.warning("line %d rejected: %s", r.line, r.reason)
    if result.rejected:
        log.warning(result.report)
    buf = io.StringIO()
    dump_histories(result.histories, buf, {"provenance": provenance(st.cfg, "ingest")})
    write_atomic(st.path("history.jsonl"), buf.getvalue())
    print(f"{len(result.histories)} cells -> {st.path('history.jsonl')}")


def cmd_synth(st: Stage) -> None:
    spec = st.cfg.synth_spec()
    buf = io.StringIO()
    meta = {"provenance": provenance(st.cfg, "synth"), "synth": {**st.cfg.to_dict()["synth"], "seed": spec.seed}}
    dump_histories(list(iter_synthetic_fleet(spec)), buf, meta)
    write_atomic(st.path("history.jsonl"), buf.getvalue())
    print(f"{spec.cell_count} synthetic cells -> {st.path('history.jsonl')}")


def cmd_featurize(st: Stage) -> None:
    table = st.featurize(st.load_history())
    buf = io.StringIO()
    meta = {"provenance": provenance(st.cfg, "featurize"), "window": st.cfg.window_spec().to_dict(),
            "skipped": [list(s) for s in table.skipped]}
    table.to_csv(buf, meta)
    write_atomic(st.path("features.csv"), buf.getvalue())
    print(f"{len(table)} rows x {len(table.names)} features -> {st.path('features.csv')}")


def cmd_select(st: Stage) -> None:
    table = st.load_features()
    sel = select_features(table.X, table.soh, st.cfg.selection.k, st.cfg.selection.redundancy, table.names)
    data = {"provenance": provenance(st.cfg, "select"), "selection": sel.to_dict()}
    write_atomic(st.path("selection.json"), dump_json(data))
    print("selected: " + ", ".join(table.names[i] for i in sel.selected_indices))


def cmd_train(st: Stage) -> None:
    config = st.cfg.ensemble_config()
    table = st.load_features()
    sel = FeatureSelection.from_dict(st.load_json("selection.json")["selection"])
    cols = list(sel.selected_indices)
    groups = table.cell_ids if config.bag_unit == "cell" else None
    ens = train_ensemble(table.X[:, cols], table.soh, config, st.cfg.gp_options(), workers=st.cfg.workers,
                         groups=groups)
    data = {"provenance": provenance(st.cfg, "train"), "features": [table.names[i] for i in cols],
            "columns": cols, "ensemble": ens.to_dict()}
    write_atomic(st.path("ensemble.json"), json.dumps(data, sort_keys=True) + "\n")
    print(f"{len(ens)} of {config.m} models trained -> {st.path('ensemble.json')}")


def cmd_predict(st: Stage) -> None:
    data = st.load_json("ensemble.json")
    ens = BaggedEnsemble.from_dict(data["ensemble"])
    table = st.load_features()
    missing = [f for f in data["features"] if f not in table.names]
    if missing:
        raise ArtifactError(f"feature table lacks columns the ensemble needs: {', '.join(missing)}")
    cols = [table.names.index(f) for f in data["features"]]
    y_pred, sigma = ensemble_predict_batch(ens, table.X[:, cols])
    buf = io.StringIO()
    buf.write("# " + json.dumps({"provenance": provenance(st.cfg, "predict")}, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["cell_id", "cycle_index", "soh", "y_pred", "sigma_pred"])
    for row in zip(table.cell_ids, table.cycle_index, table.soh, y_pred, sigma):
        w.writerow([row[0], int(row[1]), *(repr(float(v)) for v in row[2:])])
    write_atomic(st.path("predictions.csv"), buf.getvalue())
    print(f"{len(y_pred)} predictions -> {st.path('predictions.csv')}")


def _cells_csv(report) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["arm", "iteration", "cell_id", "rmspe", "mpe"])
    for arm, reps in (("bagged", report.cell_reports), ("baseline", report.baseline_reports)):
        for r in reps:
            w.writerow([arm, r.iteration, r.cell_id, repr(r.rmspe), repr(r.mpe)])
    return buf.getvalue()


def _boxplot_csv(report) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    keys = ["whisker_low", "q1", "median", "q3", "whisker_high"]
    w.writerow(["arm", "metric", *keys, "outliers"])
    for arm, summ in (("bagged", report.summary), ("baseline", report.baseline_summary)):
        for metric in ("rmspe", "mpe"):
            box = summ.get(f"{metric}_box")
            if box:
                w.writerow([arm, metric, *(repr(float(box[k])) for k in keys),
                            " ".join(repr(float(v)) for v in box["outliers"])])
    return buf.getvalue()


def cmd_evaluate(st: Stage) -> None:
    table = st.features_for_evaluation(strict=True)
    cfg = st.cfg
    report = run_experiment_on_table(table, cfg.ensemble_config(), cfg.protocol.iterations, cfg.seed,
                                     cfg.gp_options(), st.settings())
    prov = provenance(cfg, "evaluate")
    write_atomic(st.path("report.json"), dump_json({"provenance": prov, **report.to_dict()}))
    write_atomic(st.path("cells.csv"), _cells_csv(report))
    write_atomic(st.path("boxplot.csv"), _boxplot_csv(report))
    write_atomic(st.path("timings.json"), dump_json({"provenance": prov, **report.timings()}))
    s = report.summary
    print(f"median MPE {s['mpe_median']:.4g}%  median RMSPE {s['rmspe_median']:.4g}%  "
          f"({s['assessments']} cell assessments, {len(report.failures)} failed iterations)")


def cmd_sweep(st: Stage) -> None:
    table = st.features_for_evaluation(strict=True)
    cfg = st.cfg
    grid = sweep_mn_on_table(table, cfg.protocol.m_values, cfg.protocol.n_values, cfg.protocol.sweep_iterations,
                             cfg.seed, cfg.ensemble_config(), cfg.gp_options(), st.settings(baseline=False))
    prov = provenance(cfg, "sweep")
    write_atomic(st.path("sweep.json"), dump_json({"provenance": prov, **grid.to_dict()}))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["m", "n", "mpe_mean", "rmspe_mean", "iterations"])
    times = io.StringIO()
    wt = csv.writer(times, lineterminator="\n")
    wt.writerow(["m", "n", "fit_time_mean_s"])
    for r in grid.rows():
        w.writerow([r["m"], r["n"], repr(r["mpe_mean"]), repr(r["rmspe_mean"]), r["iterations"]])
        wt.writerow([r["m"], r["n"], repr(r["fit_time_mean_s"])])
    write_atomic(st.path("sweep.csv"), buf.getvalue())
    write_atomic(st.path("sweep_timings.csv"), times.getvalue())
    print(f"{len(grid.rows())} grid points -> {st.path('sweep.csv')}")


def cmd_bench(st: Stage) -> None:
    cfg = st.cfg
    b = cfg.bench
    if st.args.input or st.path("features.csv").exists():
        table = st.features_for_evaluation(strict=False)
    else:
        spec = SyntheticFleetSpec(cell_count=b.cell_count, cycles_per_cell=b.cycles_per_cell, seed=cfg.seed)
        table = st.featurize(iter_synthetic_fleet(spec))
    sel = select_features(table.X, table.soh, cfg.selection.k, cfg.selection.redundancy, table.names)
    X = table.X[:, list(sel.selected_indices)]
    rep = benchmark_timing(X, table.soh, cfg.ensemble_config(b.m, b.n), cfg.limits.max_baseline_rows, cfg.seed,
                           cfg.gp_options(), b.n_predict)
    write_atomic(st.path("bench.json"), dump_json({"provenance": provenance(cfg, "bench"), **rep.to_dict()}))
    print(f"baseline fit {rep.baseline_fit_s:.3g} s on {rep.baseline_rows} rows; bagged fit "
          f"{rep.bagged_fit_s:.3g} s (m={rep.m}, n={rep.n}); ratio {rep.fit_ratio:.3g}x, FRD {rep.frd:.4g}")


HANDLERS = {
    "ingest": cmd_ingest, "featurize": cmd_featurize, "select": cmd_select, "train": cmd_train,
    "predict": cmd_predict, "evaluate": cmd_evaluate, "sweep": cmd_sweep, "bench": cmd_bench, "synth": cmd_synth,
}

HELP = {
    "ingest": "parse a cycling table (data.path or --input) into history.jsonl",
    "synth": "generate a seeded synthetic fleet into history.jsonl",
    "featurize": "history.jsonl -> features.csv (window statistics, BOL-shifted)",
    "select": "features.csv -> selection.json (Spearman filter)",
    "train": "features.csv + selection.json -> ensemble.json",
    "predict": "ensemble.json + features.csv -> predictions.csv",
    "evaluate": "repeated cell-level split protocol -> report.json, cells.csv, boxplot.csv, timings.json",
    "sweep": "(m, n) grid -> sweep.json, sweep.csv, sweep_timings.csv",
    "bench": "single GP vs bagged ensemble fit times -> bench.json",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--preset", choices=sorted(PRESETS), help="chemistry preset applied under the config")
    common.add_argument("--seed", type=int, help="master seed (overrides config)")
    common.add_argument("--out", help="artifact directory (overrides output_dir)")
    common.add_argument("--workers", type=int, help="parallel fits (overrides workers)")
    common.add_argument("--input", help="explicit input file instead of the default artifact in --out")
    common.add_argument("--allow-config-mismatch", action="store_true",
                        help="accept inputs produced under a different config hash")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(
        prog="sohbag", description="SOH estimation with bagged Gaussian process regression.",
        epilog="config keys (defaults):\n" + describe_keys(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"sohbag {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name in COMMANDS:
        sub.add_parser(name, help=HELP[name], description=HELP[name], parents=[common],
                       epilog="config keys (defaults):\n" + describe_keys(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    return parser


def resolve_config(args) -> PipelineConfig:
    cfg = load_config(args.config, preset=args.preset)
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1", ["workers: must be >= 1"])
        over["workers"] = args.workers
    if args.out is not None:
        over["output_dir"] = args.out
    return replace(cfg, **over)


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        cfg = resolve_config(ns)
        st = Stage(cfg, Path(cfg.output_dir), ns)
        HANDLERS[ns.command](st)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (SohError, OSError, ValueError, KeyError) as exc:
        print(f"error ({ns.command}): {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
