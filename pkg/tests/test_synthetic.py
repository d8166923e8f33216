import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sohbag.ensemble import EnsembleConfig
from sohbag.errors import ConfigError
from sohbag.evaluation import run_experiment
from sohbag.features import build_feature_table, spearman, window_for
from sohbag.gpr import GPOptions
from sohbag.synthetic import FadeShape, SyntheticFleetSpec, fade_trajectory, generate_synthetic_fleet, iter_synthetic_fleet


@given(st.sampled_from(list(FadeShape)), st.floats(0.3, 3.0), st.integers(1, 60), st.floats(50, 99))
def test_fade_monotone_and_spans(shape, p, cycles, end):
    spec = SyntheticFleetSpec(cycles_per_cell=cycles, soh_end=end, fade_shape=shape)
    soh = fade_trajectory(spec, p)
    assert np.all(np.diff(soh) <= 0)
    assert soh[0] == 100.0
    if cycles > 1:
        assert soh[-1] == pytest.approx(end)


def test_knee_is_slow_then_steep():
    soh = fade_trajectory(SyntheticFleetSpec(cycles_per_cell=50, fade_shape="KNEE"))
    drops = -np.diff(soh)
    assert drops[:25].mean() < drops[-5:].mean() / 5


@pytest.mark.parametrize("kw", [dict(soh_end=100.0), dict(soh_start=130.0), dict(cell_count=0),
                                dict(voltage_noise=-1.0), dict(v_start=3.6)])
def test_fleet_parameters_validated(kw):
    with pytest.raises(ConfigError):
        SyntheticFleetSpec(**kw)


def test_fleet_is_bit_identical_for_same_seed():
    spec = SyntheticFleetSpec(cell_count=3, cycles_per_cell=5, seed=8)
    assert generate_synthetic_fleet(spec) == generate_synthetic_fleet(spec)
    other = generate_synthetic_fleet(SyntheticFleetSpec(cell_count=3, cycles_per_cell=5, seed=9))
    assert other != generate_synthetic_fleet(spec)


def test_capacity_recovers_trajectory():
    spec = SyntheticFleetSpec(cell_count=2, cycles_per_cell=8, cell_variation=0.0)
    for h in iter_synthetic_fleet(spec):
        np.testing.assert_allclose(h.soh, fade_trajectory(spec), rtol=1e-12)
        assert all(c.soh_e < c.soh_c + 1e-12 for c in h.cycles)


def test_features_track_soh(small_table):
    rho = [abs(spearman(small_table.X[:, j], small_table.soh)) for j in range(small_table.X.shape[1])]
    assert max(rho) > 0.95


def test_all_three_windows_featurize():
    fleet = generate_synthetic_fleet(SyntheticFleetSpec(cell_count=2, cycles_per_cell=4, v_max=4.2, v_start=3.4,
                                                        cc_duration=4000))
    for chem in ("LFP", "NMC"):
        spec = window_for(chem)
        if chem == "LFP":
            spec = type(spec)(**{**spec.to_dict(), "voltage_limits": (2.0, 4.3)})
        assert len(build_feature_table(fleet, spec)) == 8
    assert len(build_feature_table(fleet, window_for("LCO")).names) == 14


def test_noiseless_fleet_is_recovered():
    spec = SyntheticFleetSpec(cell_count=10, cycles_per_cell=20, voltage_noise=0.0, current_noise=0.0,
                              cell_variation=0.0, seed=4)
    r = run_experiment(generate_synthetic_fleet(spec), window_for("LFP"), EnsembleConfig(m=7, n=30), 3, 0,
                       GPOptions(n_starts=1))
    assert r.summary["mpe_mean"] < 0.1
