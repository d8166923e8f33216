"""Run the repeated 70/30 cell-split protocol on a synthetic fleet and print the summary."""

import argparse
import json

from sohbag.ensemble import EnsembleConfig
from sohbag.evaluation import ProtocolSettings, run_experiment
from sohbag.features import window_for
from sohbag.gpr import GPOptions
from sohbag.synthetic import SyntheticFleetSpec, generate_synthetic_fleet


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--cells", type=int, default=30)
    ap.add_argument("--cycles", type=int, default=40)
    ap.add_argument("--iterations", type=int, default=20)
    ap.add_argument("-m", type=int, default=7)
    ap.add_argument("-n", type=int, default=30)
    ap.add_argument("--window", default="LFP", choices=["LFP", "LCO", "NMC"])
    ap.add_argument("--fade", default="LINEAR", choices=["LINEAR", "POWER_LAW", "KNEE"])
    ap.add_argument("--baseline", action="store_true", help="also fit a capped single GP per iteration")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()

    extra = {"v_max": 4.2, "v_start": 3.4, "cc_duration": 4000.0} if args.window in ("LCO", "NMC") else {}
    spec = SyntheticFleetSpec(cell_count=args.cells, cycles_per_cell=args.cycles, fade_shape=args.fade,
                              seed=args.seed, **extra)
    settings = ProtocolSettings(baseline_cap=2000 if args.baseline else None, workers=args.workers)
    report = run_experiment(generate_synthetic_fleet(spec), window_for(args.window),
                            EnsembleConfig(m=args.m, n=args.n), args.iterations, args.seed, GPOptions(), settings)
    out = {"bagged": {k: v for k, v in report.summary.items() if not k.endswith("_box")}}
    if args.baseline:
        out["baseline"] = {k: v for k, v in report.baseline_summary.items() if not k.endswith("_box")}
    out["timings"] = report.timings()
    print(json.dumps(out, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
