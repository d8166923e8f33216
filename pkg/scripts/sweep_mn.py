"""Mean MPE/RMSPE over an (m, n) grid on a synthetic fleet, printed as a table."""

import argparse

from sohbag.evaluation import sweep_mn_on_table
from sohbag.features import build_feature_table, window_for
from sohbag.synthetic import SyntheticFleetSpec, iter_synthetic_fleet


def ints(text):
    return [int(v) for v in text.split(",")]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--cells", type=int, default=30)
    ap.add_argument("--cycles", type=int, default=40)
    ap.add_argument("--m-values", type=ints, default=[2, 5, 10])
    ap.add_argument("--n-values", type=ints, default=[10, 30, 80])
    ap.add_argument("--iterations", type=int, default=10)
    ap.add_argument("--seed", type=int, default=8)
    args = ap.parse_args()

    table = build_feature_table(iter_synthetic_fleet(SyntheticFleetSpec(cell_count=args.cells,
                                                                        cycles_per_cell=args.cycles, seed=args.seed)),
                                window_for("LFP"))
    grid = sweep_mn_on_table(table, args.m_values, args.n_values, args.iterations, args.seed)
    print(f"{'m':>5} {'n':>6} {'mean MPE %':>12} {'mean RMSPE %':>13} {'fit s':>8}")
    for r in grid.rows():
        print(f"{r['m']:>5} {r['n']:>6} {r['mpe_mean']:>12.4f} {r['rmspe_mean']:>13.4f} {r['fit_time_mean_s']:>8.3f}")


if __name__ == "__main__":
    main()
