import json

import pytest

from sohbag.cli import main

SMALL = """
window: {chemistry: LFP}
synth: {cell_count: 30, cycles_per_cell: 15}
protocol: {iterations: 2, m_values: [2, 4], n_values: [10, 20], sweep_iterations: 1}
ensemble: {m: 3, n: 20}
gp: {n_starts: 1}
bench: {m: 2, n: 20, cell_count: 4, cycles_per_cell: 10, n_predict: 20}
limits: {max_baseline_rows: 50}
"""


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "cfg.yaml"
    p.write_text(SMALL)
    return p


def run(cfg, out, *args):
    return main([args[0], "--config", str(cfg), "--out", str(out), *args[1:]])


def test_full_stage_chain(cfg, tmp_path, capsys):
    out = tmp_path / "out"
    for command in ("synth", "featurize", "select", "train", "predict", "evaluate", "sweep", "bench"):
        assert run(cfg, out, command) == 0, command
    for name in ("history.jsonl", "features.csv", "selection.json", "ensemble.json", "predictions.csv",
                 "report.json", "cells.csv", "boxplot.csv", "timings.json", "sweep.json", "sweep.csv", "bench.json"):
        assert (out / name).exists(), name
    report = json.loads((out / "report.json").read_text())
    assert report["provenance"]["config_hash"] and report["provenance"]["seed"] == 0
    assert report["summary"]["assessments"] == 2 * 9
    assert "fit_time_mean_s" not in json.dumps(report)
    sel = json.loads((out / "selection.json").read_text())
    assert sel["provenance"]["command"] == "select"
    lines = (out / "predictions.csv").read_text().splitlines()
    assert lines[0].startswith("# ") and lines[1] == "cell_id,cycle_index,soh,y_pred,sigma_pred"


def test_evaluate_twice_is_byte_identical(cfg, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out, workers in ((a, "1"), (b, "4")):
        assert run(cfg, out, "synth") == 0
        assert run(cfg, out, "evaluate", "--workers", workers) == 0
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
    before = (a / "history.jsonl").read_bytes()
    assert run(cfg, a, "evaluate") == 0
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
    assert (a / "history.jsonl").read_bytes() == before


def test_seed_flag_changes_report(cfg, tmp_path):
    assert run(cfg, tmp_path, "synth") == 0
    assert run(cfg, tmp_path, "evaluate") == 0
    first = (tmp_path / "report.json").read_bytes()
    assert run(cfg, tmp_path, "evaluate", "--seed", "3", "--allow-config-mismatch") == 0
    assert (tmp_path / "report.json").read_bytes() != first


def test_bag_size_over_bound_fails_without_artifact(cfg, tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(SMALL + "limits: {max_bag_size: 100}\nensemble: {m: 3, n: 99999}\n")
    out = tmp_path / "out"
    assert run(bad, out, "train") == 2
    err = capsys.readouterr().err
    assert "ensemble.n" in err
    assert not (out / "ensemble.json").exists()


def test_missing_input_names_producer(cfg, tmp_path, capsys):
    assert run(cfg, tmp_path, "train") == 1
    assert "sohbag featurize" in capsys.readouterr().err
    assert run(cfg, tmp_path, "featurize") == 1
    assert "sohbag ingest" in capsys.readouterr().err


def test_hash_mismatch_refused_by_evaluate(cfg, tmp_path, capsys):
    assert run(cfg, tmp_path, "synth") == 0
    other = tmp_path / "other.yaml"
    other.write_text(SMALL.replace("m: 3, n: 20", "m: 4, n: 20"))
    assert run(other, tmp_path, "evaluate") == 1
    assert "--allow-config-mismatch" in capsys.readouterr().err
    assert run(other, tmp_path, "evaluate", "--allow-config-mismatch") == 0


def test_ingest_from_table(tmp_path):
    rows = ["cell_id,cycle,time,voltage,current,phase,capacity"]
    for cyc in (1, 2, 3):
        cap = 1.0 - 0.01 * cyc
        for t in range(0, 100, 10):
            rows.append(f"a,{cyc},{t},{3.0 + 0.005 * t},0.5,charge,")
        rows.append(f"a,{cyc},100,3.5,-0.5,discharge,{cap}")
    table = tmp_path / "cycles.csv"
    table.write_text("\n".join(rows) + "\n")
    assert main(["ingest", "--input", str(table), "--out", str(tmp_path / "o")]) == 0
    header = json.loads((tmp_path / "o" / "history.jsonl").read_text().splitlines()[0])
    assert header["provenance"]["command"] == "ingest"


def test_help_lists_keys_and_presets(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    text = capsys.readouterr().out
    assert "ensemble.n = 30" in text and "lfp-paper" in text and "synth.voltage_noise" in text
    with pytest.raises(SystemExit):
        main(["train", "--help"])
    assert "gp.n_starts = 4" in capsys.readouterr().out


def test_bad_workers_flag(cfg, tmp_path):
    assert run(cfg, tmp_path, "synth", "--workers", "0") == 2
