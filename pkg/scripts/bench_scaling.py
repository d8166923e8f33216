"""Fit-time comparison: one capped GP against a bagged ensemble, over growing fleets."""

import argparse

from sohbag.ensemble import EnsembleConfig
from sohbag.evaluation import benchmark_timing
from sohbag.features import build_feature_table, select_features, window_for
from sohbag.gpr import GPOptions
from sohbag.synthetic import SyntheticFleetSpec, iter_synthetic_fleet


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--cells", type=lambda s: [int(v) for v in s.split(",")], default=[50, 100, 200])
    ap.add_argument("--cycles", type=int, default=100)
    ap.add_argument("-m", type=int, default=20)
    ap.add_argument("-n", type=int, default=200)
    ap.add_argument("--cap", type=int, default=2000, help="row cap for the single GP")
    ap.add_argument("--starts", type=int, default=1, help="optimizer starts on both arms")
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    print(f"{'rows':>7} {'FRD':>7} {'baseline s':>11} {'bagged s':>9} {'ratio':>7}")
    for cells in args.cells:
        spec = SyntheticFleetSpec(cell_count=cells, cycles_per_cell=args.cycles, seed=args.seed)
        table = build_feature_table(iter_synthetic_fleet(spec), window_for("LFP"))
        X = table.X[:, list(select_features(table.X, table.soh).selected_indices)]
        rep = benchmark_timing(X, table.soh, EnsembleConfig(m=args.m, n=args.n), args.cap, args.seed,
                               GPOptions(n_starts=args.starts))
        print(f"{rep.total_rows:>7} {rep.frd:>7.2f} {rep.baseline_fit_s:>11.3f} {rep.bagged_fit_s:>9.3f} "
              f"{rep.fit_ratio:>7.2f}")


if __name__ == "__main__":
    main()
