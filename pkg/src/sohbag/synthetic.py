"""Seeded synthetic aging fleets for dataset-free testing.

Each characterization cycle gets a CC-CV charge curve whose shape is tied to
the fade ``100 - SOH``:

* the CC starting voltage rises by ``offset_gain`` volts per percent of fade
  (growing polarization),
* the CC phase shortens in proportion to SOH (less charge to store), so the
  voltage climbs faster through any fixed window,
* the CV current decay constant grows by ``cv_tau_gain`` (relative) per
  percent of fade.

Capacity is set to ``q_nom * SOH / 100`` so the SOH trajectory is recovered
exactly from capacity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterator

import numpy as np

from .errors import ConfigError
from .ingestion import CellAgingHistory, ChargeCurve, Chemistry, Phase, make_cycle


class FadeShape(str, Enum):
    LINEAR = "LINEAR"
    POWER_LAW = "POWER_LAW"
    KNEE = "KNEE"


@dataclass(frozen=True)
class SyntheticFleetSpec:
    cell_count: int = 30
    cycles_per_cell: int = 40
    soh_start: float = 100.0
    soh_end: float = 60.0
    fade_shape: FadeShape = FadeShape.LINEAR
    seed: int = 0
    cycle_step: int = 100
    q_nom: float = 1.1
    v_start: float = 3.0
    v_max: float = 3.55
    cc_duration: float = 900.0
    cv_tau: float = 120.0
    cv_cutoff: float = 0.05
    raw_interval: float = 1.0
    offset_gain: float = 0.002
    cv_tau_gain: float = 0.01
    voltage_noise: float = 0.001
    current_noise: float = 0.002
    cell_variation: float = 0.02
    chemistry: str = "LFP"

    def __post_init__(self):
        object.__setattr__(self, "fade_shape", FadeShape(self.fade_shape))
        problems = []
        if not self.soh_end < self.soh_start:
            problems.append(f"soh span must decrease ({self.soh_start} -> {self.soh_end})")
        if not (0 < self.soh_end and self.soh_start <= 120):
            problems.append("soh span must lie within (0, 120]")
        if self.cell_count < 1 or self.cycles_per_cell < 1:
            problems.append("cell_count and cycles_per_cell must be >= 1")
        if not self.v_start < self.v_max:
            problems.append("v_start must be below v_max")
        if min(self.voltage_noise, self.current_noise, self.cell_variation) < 0:
            problems.append("noise levels must be non-negative")
        if not (self.raw_interval > 0 and self.cc_duration > 0 and self.cv_tau > 0 and 0 < self.cv_cutoff < 1):
            problems.append("durations must be positive and 0 < cv_cutoff < 1")
        if problems:
            raise ConfigError("; ".join(problems), problems)


def fade_trajectory(spec: SyntheticFleetSpec, shape_param: float = 1.0) -> np.ndarray:
    """SOH per characterization cycle; monotone non-increasing by construction."""
    c = spec.cycles_per_cell
    u = np.linspace(0.0, 1.0, c) if c > 1 else np.zeros(1)
    span = spec.soh_start - spec.soh_end
    if spec.fade_shape is FadeShape.LINEAR:
        g = u
    elif spec.fade_shape is FadeShape.POWER_LAW:
        g = u ** (0.5 * shape_param)
    else:
        # slow, near-linear fade, then an accelerating late-life drop
        p = 8.0 * shape_param
        g = 0.3 * u + 0.7 * u**p
    return spec.soh_start - span * g


def _cc_shape(s: np.ndarray) -> np.ndarray:
    # fast initial rise, plateau, late rise to the cutoff; h(0)=0, h(1)=1
    return 0.7 * (1.0 - np.exp(-6.0 * s)) / (1.0 - math.exp(-6.0)) + 0.3 * s**4


def synthetic_curve(spec: SyntheticFleetSpec, cell_id: str, cycle_index: int, soh: float,
                    rng: np.random.Generator, cell_params: dict) -> ChargeCurve:
    fade = spec.soh_start - soh
    i_cc = spec.q_nom * 3600.0 / spec.cc_duration
    t_cc = spec.cc_duration * cell_params["duration"] * soh / 100.0
    v0 = spec.v_start + cell_params["v_offset"] + spec.offset_gain * cell_params["gain"] * fade
    tau = spec.cv_tau * cell_params["tau"] * (1.0 + spec.cv_tau_gain * cell_params["gain"] * fade)
    t_cv = tau * math.log(1.0 / spec.cv_cutoff)

    dt = spec.raw_interval
    t1 = np.arange(0.0, t_cc, dt)
    v1 = v0 + (spec.v_max - v0) * _cc_shape(t1 / t_cc)
    i1 = np.full_like(t1, i_cc)
    t2 = np.arange(t1[-1] + dt, t1[-1] + dt + t_cv, dt)
    v2 = np.full_like(t2, spec.v_max)
    i2 = i_cc * np.exp(-(t2 - t2[0]) / tau)
    t = np.concatenate([t1, t2])
    v = np.concatenate([v1, v2])
    i = np.concatenate([i1, i2])
    if spec.voltage_noise:
        v = v + rng.normal(0.0, spec.voltage_noise, len(v))
    if spec.current_noise:
        i = i + rng.normal(0.0, spec.current_noise, len(i))
    # discharge-positive convention: charge current is negative
    return ChargeCurve(cell_id, cycle_index, Phase.FULL, t, v, -i, cv_start=float(t2[0]))


def iter_synthetic_fleet(spec: SyntheticFleetSpec) -> Iterator[CellAgingHistory]:
    """Yield cells one at a time (keeps memory flat for large fleets)."""
    root = np.random.SeedSequence(spec.seed)
    width = len(str(spec.cell_count - 1))
    for k, child in enumerate(root.spawn(spec.cell_count)):
        rng = np.random.default_rng(child)
        cv = spec.cell_variation
        params = {
            "v_offset": rng.normal(0.0, cv) if cv else 0.0,
            "duration": math.exp(rng.normal(0.0, cv)) if cv else 1.0,
            "tau": math.exp(rng.normal(0.0, cv)) if cv else 1.0,
            "gain": math.exp(rng.normal(0.0, cv)) if cv else 1.0,
            "shape": math.exp(rng.normal(0.0, 5 * cv)) if cv else 1.0,
        }
        soh = fade_trajectory(spec, params["shape"])
        cell_id = f"syn{k:0{width}d}"
        e_nom = spec.q_nom * 3.2
        cycles = []
        for j, s in enumerate(soh):
            idx = j * spec.cycle_step
            curve = synthetic_curve(spec, cell_id, idx, float(s), rng, params)
            capacity = spec.q_nom * float(s) / 100.0
            # mean discharge voltage sags with fade, so SOH_E falls a little faster
            energy = capacity * (3.2 - 0.002 * (spec.soh_start - float(s)))
            cycles.append(make_cycle(curve, capacity, spec.q_nom, energy=energy, e_nom=e_nom))
        yield CellAgingHistory(cell_id, Chemistry(spec.chemistry), spec.q_nom, tuple(cycles), e_nom)


def generate_synthetic_fleet(spec: SyntheticFleetSpec) -> list[CellAgingHistory]:
    return list(iter_synthetic_fleet(spec))
