"""Cycling-log ingestion: parsing, cleaning, resampling and health indicators.

Currents follow a discharge-positive convention internally, so charge
currents are negative. Files written with the opposite convention are
flipped on read (``TableSchema.discharge_positive=False``).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import IO, Iterable, Sequence

import numpy as np

from .errors import (
    AnchorNotReachedError,
    EmptyInputError,
    InsufficientDataError,
    InvalidNominalError,
    MalformedCurveError,
    SchemaError,
)

HISTORY_FORMAT = "sohbag.history"
HISTORY_FORMAT_VERSION = 1

# max-min voltage allowed inside a CV segment
CV_VOLTAGE_BAND = 0.05
# FULL curves without labels: CV starts where V first comes within this of max(V)
CV_DETECT_BAND = 0.01
SOH_GUARD = 120.0


class Phase(str, Enum):
    CC = "CC"
    CV = "CV"
    DISCHARGE = "DISCHARGE"
    FULL = "FULL"


class Chemistry(str, Enum):
    NMC = "NMC"
    LCO = "LCO"
    LFP = "LFP"
    OTHER = "OTHER"


def _frozen_array(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ChargeCurve:
    """Time-ordered voltage/current samples for one phase of one cycle.

    ``cv_start`` is the time at which the constant-voltage hold begins; it is
    only meaningful for ``Phase.FULL`` curves. When missing it is detected
    from the voltage plateau.
    """

    cell_id: str
    cycle_index: int
    phase: Phase
    time: np.ndarray
    voltage: np.ndarray
    current: np.ndarray
    cv_start: float | None = None

    def __post_init__(self):
        t = _frozen_array(self.time)
        v = _frozen_array(self.voltage)
        i = _frozen_array(self.current)
        if t.ndim != 1 or not (len(t) == len(v) == len(i)):
            raise MalformedCurveError("time, voltage and current must be 1-D and equally long")
        if len(t) == 0:
            raise MalformedCurveError(f"curve {self.cell_id}/{self.cycle_index} has no samples")
        if np.any(np.diff(t) <= 0):
            raise MalformedCurveError(
                f"curve {self.cell_id}/{self.cycle_index}: time must be strictly increasing"
            )
        if self.cycle_index < 0:
            raise MalformedCurveError("cycle_index must be non-negative")
        phase = Phase(self.phase)
        if phase is Phase.CV and np.ptp(v) > CV_VOLTAGE_BAND:
            raise MalformedCurveError(
                f"CV curve voltage spans {np.ptp(v):.4g} V (band {CV_VOLTAGE_BAND} V)"
            )
        object.__setattr__(self, "phase", phase)
        object.__setattr__(self, "time", t)
        object.__setattr__(self, "voltage", v)
        object.__setattr__(self, "current", i)
        if self.cv_start is not None:
            object.__setattr__(self, "cv_start", float(self.cv_start))

    def __len__(self):
        return len(self.time)

    def __eq__(self, other):
        if not isinstance(other, ChargeCurve):
            return NotImplemented
        return (
            self.cell_id == other.cell_id
            and self.cycle_index == other.cycle_index
            and self.phase == other.phase
            and self.cv_start == other.cv_start
            and np.array_equal(self.time, other.time)
            and np.array_equal(self.voltage, other.voltage)
            and np.array_equal(self.current, other.current)
        )

    def _with(self, mask=None, *, phase=None, time=None, voltage=None, current=None, cv_start="keep"):
        if mask is not None:
            time, voltage, current = self.time[mask], self.voltage[mask], self.current[mask]
        return ChargeCurve(
            self.cell_id,
            self.cycle_index,
            phase or self.phase,
            self.time if time is None else time,
            self.voltage if voltage is None else voltage,
            self.current if current is None else current,
            self.cv_start if cv_start == "keep" else cv_start,
        )

    def cv_start_time(self) -> float | None:
        """Start of the CV hold, or None if the curve has no CV part."""
        if self.phase is Phase.CV:
            return float(self.time[0])
        if self.phase is Phase.CC or self.phase is Phase.DISCHARGE:
            return None
        if self.cv_start is not None:
            return self.cv_start
        idx = int(np.argmax(self.voltage >= self.voltage.max() - CV_DETECT_BAND))
        # a plateau reached at the final sample is not a CV hold
        if idx >= len(self) - 1:
            return None
        return float(self.time[idx])

    def segment(self, phase: Phase) -> ChargeCurve | None:
        """Return the CC or CV part of this curve, or None if absent."""
        phase = Phase(phase)
        if phase not in (Phase.CC, Phase.CV):
            raise ValueError("segment() takes CC or CV")
        if self.phase is phase:
            return self
        if self.phase is not Phase.FULL:
            return None
        t_cv = self.cv_start_time()
        if phase is Phase.CC:
            mask = self.time < t_cv if t_cv is not None else np.ones(len(self), bool)
        else:
            if t_cv is None:
                return None
            mask = self.time >= t_cv
        if not mask.any():
            return None
        return self._with(mask, phase=phase, cv_start=None)


@dataclass(frozen=True)
class CharacterizationCycle:
    cycle_index: int
    charge_curve: ChargeCurve
    capacity: float
    soh_c: float
    discharge_curve: ChargeCurve | None = None
    energy: float | None = None
    soh_e: float | None = None

    def __post_init__(self):
        if not self.capacity > 0:
            raise InvalidNominalError(f"cycle {self.cycle_index}: capacity must be positive")
        if not 0 < self.soh_c <= SOH_GUARD:
            raise InvalidNominalError(
                f"cycle {self.cycle_index}: SOH_C {self.soh_c:.4g}% outside (0, {SOH_GUARD}]; check units"
            )


@dataclass(frozen=True)
class CellAgingHistory:
    cell_id: str
    chemistry: Chemistry
    q_nom: float
    cycles: tuple[CharacterizationCycle, ...]
    e_nom: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "chemistry", Chemistry(self.chemistry))
        object.__setattr__(self, "cycles", tuple(self.cycles))
        if not self.q_nom > 0:
            raise InvalidNominalError("q_nom must be positive")
        if self.e_nom is not None and not self.e_nom > 0:
            raise InvalidNominalError("e_nom must be positive")
        idx = [c.cycle_index for c in self.cycles]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise MalformedCurveError(f"cell {self.cell_id}: cycle indices must be strictly increasing")

    @property
    def soh(self) -> np.ndarray:
        return np.array([c.soh_c for c in self.cycles])


def compute_soh(capacity, q_nom, energy=None, e_nom=None):
    """Capacity- and energy-based state of health in percent.

    Returns ``(soh_c, soh_e)``; ``soh_e`` is None when no energy is given.
    """
    if not q_nom > 0:
        raise InvalidNominalError(f"q_nom must be positive, got {q_nom}")
    soh_c = 100.0 * capacity / q_nom
    soh_e = None
    if energy is not None:
        if e_nom is None or not e_nom > 0:
            raise InvalidNominalError(f"e_nom must be positive, got {e_nom}")
        soh_e = 100.0 * energy / e_nom
    return soh_c, soh_e


def make_cycle(charge_curve, capacity, q_nom, *, energy=None, e_nom=None, discharge_curve=None):
    soh_c, soh_e = compute_soh(capacity, q_nom, energy if e_nom is not None else None, e_nom)
    return CharacterizationCycle(
        cycle_index=charge_curve.cycle_index,
        charge_curve=charge_curve,
        capacity=float(capacity),
        soh_c=float(soh_c),
        discharge_curve=discharge_curve,
        energy=None if energy is None else float(energy),
        soh_e=None if soh_e is None else float(soh_e),
    )


def _first_crossing(t: np.ndarray, s: np.ndarray, level: float) -> float:
    d = s - level
    hits = np.flatnonzero(d == 0)
    sign_change = np.flatnonzero(d[:-1] * d[1:] < 0)
    first_hit = hits[0] if len(hits) else len(t)
    first_change = sign_change[0] if len(sign_change) else len(t)
    if first_hit == len(t) and first_change == len(t):
        raise AnchorNotReachedError(f"signal never crosses {level}")
    if first_hit <= first_change:
        return float(t[first_hit])
    k = first_change
    return float(t[k] + (t[k + 1] - t[k]) * (-d[k]) / (d[k + 1] - d[k]))


def uniform_grid(t_start: float, t_stop: float, interval: float) -> np.ndarray:
    """Inclusive grid ``t_start + k*interval`` not exceeding ``t_stop``."""
    count = int(math.floor((t_stop - t_start) / interval + 1e-9)) + 1
    return t_start + interval * np.arange(max(count, 0))


def clean_and_resample(
    curve: ChargeCurve,
    limits: tuple[float, float],
    interval: float,
    anchor: float | None = None,
    *,
    anchor_signal: str = "voltage",
    current_limits: tuple[float, float] | None = None,
) -> ChargeCurve:
    """Drop out-of-limit samples, then interpolate onto a uniform grid.

    The grid starts at the first time the anchor signal crosses ``anchor``
    (linear interpolation between bracketing samples), or at the first valid
    sample when no anchor is given.
    """
    if not interval > 0:
        raise ValueError("interval must be positive")
    lo, hi = limits
    keep = (curve.voltage >= lo) & (curve.voltage <= hi)
    if current_limits is not None:
        keep &= (curve.current >= current_limits[0]) & (curve.current <= current_limits[1])
    if keep.sum() < 2:
        raise InsufficientDataError(
            f"curve {curve.cell_id}/{curve.cycle_index}: {int(keep.sum())} valid samples, need 2"
        )
    t, v, i = curve.time[keep], curve.voltage[keep], curve.current[keep]
    if anchor is None:
        t0 = float(t[0])
    else:
        signal = {"voltage": v, "current": i}[anchor_signal]
        t0 = _first_crossing(t, signal, anchor)
    grid = uniform_grid(t0, float(t[-1]), interval)
    return curve._with(time=grid, voltage=np.interp(grid, t, v), current=np.interp(grid, t, i))


def integrate_discharge(curve: ChargeCurve) -> tuple[float, float]:
    """Trapezoidal capacity [Ah] and energy [Wh] of a discharge curve."""
    if curve.phase is not Phase.DISCHARGE:
        raise MalformedCurveError(f"expected a DISCHARGE curve, got {curve.phase.value}")
    if np.any(np.diff(curve.time) <= 0):
        raise MalformedCurveError("time must be strictly increasing")
    amps = np.abs(curve.current)
    capacity = np.trapezoid(amps, curve.time) / 3600.0
    energy = np.trapezoid(curve.voltage * amps, curve.time) / 3600.0
    return float(capacity), float(energy)


@dataclass(frozen=True)
class SohCorrelation:
    r: float
    slope: float
    intercept: float
    n_pairs: int


def soh_correlation(histories: Iterable[CellAgingHistory]) -> SohCorrelation:
    """Pearson r and least-squares line of SOH_E against SOH_C, pooled over cells."""
    pairs = [
        (c.soh_c, c.soh_e) for h in histories for c in h.cycles if c.soh_e is not None
    ]
    if len(pairs) < 3:
        raise InsufficientDataError(f"need at least 3 (SOH_C, SOH_E) pairs, got {len(pairs)}")
    x, y = np.array(pairs).T
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy, sxy = dx @ dx, dy @ dy, dx @ dy
    if sxx == 0 or syy == 0:
        raise InsufficientDataError("SOH values are constant; correlation undefined")
    slope = sxy / sxx
    return SohCorrelation(
        r=float(sxy / math.sqrt(sxx * syy)),
        slope=float(slope),
        intercept=float(y.mean() - slope * x.mean()),
        n_pairs=len(pairs),
    )


# ---------------------------------------------------------------- table I/O


@dataclass
class TableSchema:
    """Column mapping for delimiter-separated cycling logs.

    ``phase``, ``capacity`` and ``energy`` are optional; set to None (or name a
    column the file lacks) to go without. Without a capacity column each cycle
    needs DISCHARGE rows, whose integral gives the capacity.
    """

    cell_id: str = "cell_id"
    cycle: str = "cycle"
    time: str = "time"
    voltage: str = "voltage"
    current: str = "current"
    phase: str | None = "phase"
    capacity: str | None = "capacity"
    energy: str | None = "energy"
    delimiter: str = ","
    chemistry: str = "OTHER"
    q_nom: float | None = None
    e_nom: float | None = None
    discharge_positive: bool = True

    MANDATORY = ("cell_id", "cycle", "time", "voltage", "current")
    OPTIONAL = ("phase", "capacity", "energy")


@dataclass(frozen=True)
class RejectedRow:
    line: int
    reason: str


@dataclass
class ParseResult:
    histories: list[CellAgingHistory]
    rejected: list[RejectedRow] = field(default_factory=list)

    @property
    def report(self) -> str:
        n = len(self.rejected)
        return f"{n} row{'' if n == 1 else 's'} rejected"


_PHASE_ALIASES = {
    "CC": Phase.CC,
    "CV": Phase.CV,
    "DISCHARGE": Phase.DISCHARGE,
    "D": Phase.DISCHARGE,
    "FULL": Phase.FULL,
    "CHARGE": Phase.FULL,
    "C": Phase.FULL,
}


def _read_text(source) -> str:
    if isinstance(source, (bytes, bytearray)):
        return bytes(source).decode("utf-8-sig")
    if isinstance(source, str):
        return source
    data = source.read()
    return data.decode("utf-8-sig") if isinstance(data, (bytes, bytearray)) else data


def _finite(text: str) -> float:
    val = float(text)
    if not math.isfinite(val):
        raise ValueError(f"non-finite value {text!r}")
    return val


def parse_cycling_table(source: bytes | str | IO, schema: TableSchema | None = None) -> ParseResult:
    """Group sample rows into per-cell aging histories.

    Rows whose numeric fields fail to parse are recorded in
    ``ParseResult.rejected`` rather than dropped silently.
    """
    schema = schema or TableSchema()
    reader = csv.reader(io.StringIO(_read_text(source)), delimiter=schema.delimiter)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise EmptyInputError("table is empty") from None
    col = {}
    missing = []
    for key in TableSchema.MANDATORY:
        name = getattr(schema, key)
        if name not in header:
            missing.append(f"{key} -> {name!r}")
        else:
            col[key] = header.index(name)
    if missing:
        raise SchemaError("missing mandatory column(s): " + ", ".join(missing))
    for key in TableSchema.OPTIONAL:
        name = getattr(schema, key)
        if name is not None and name in header:
            col[key] = header.index(name)

    sign = 1.0 if schema.discharge_positive else -1.0
    rejected: list[RejectedRow] = []
    groups: dict[str, dict[int, list]] = {}
    for line, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        try:
            if len(row) < len(header):
                raise ValueError(f"expected {len(header)} fields, got {len(row)}")
            cell = row[col["cell_id"]].strip()
            cyc_f = _finite(row[col["cycle"]])
            if cyc_f != int(cyc_f) or cyc_f < 0:
                raise ValueError(f"cycle {row[col['cycle']]!r} is not a non-negative integer")
            t = _finite(row[col["time"]])
            v = _finite(row[col["voltage"]])
            i = sign * _finite(row[col["current"]])
            phase = None
            if "phase" in col:
                label = row[col["phase"]].strip().upper()
                if label:
                    if label not in _PHASE_ALIASES:
                        raise ValueError(f"unknown phase {label!r}")
                    phase = _PHASE_ALIASES[label]
            extras = []
            for key in ("capacity", "energy"):
                text = row[col[key]].strip() if key in col else ""
                extras.append(_finite(text) if text else None)
        except ValueError as exc:
            rejected.append(RejectedRow(line, str(exc)))
            continue
        groups.setdefault(cell, {}).setdefault(int(cyc_f), []).append((t, v, i, phase, *extras, line))

    if not groups:
        raise EmptyInputError("no parseable rows")

    histories = []
    for cell, cycles in groups.items():
        built = []
        for cyc in sorted(cycles):
            rows = sorted(cycles[cyc], key=lambda r: (r[3] is Phase.DISCHARGE, r[0]))
            charge, discharge = [], []
            for r in rows:
                target = discharge if r[3] is Phase.DISCHARGE else charge
                if target and target[-1][0] == r[0]:
                    rejected.append(RejectedRow(r[6], f"duplicate time {r[0]!r}"))
                    continue
                target.append(r)
            if not charge:
                rejected.extend(RejectedRow(r[6], f"cycle {cyc} of cell {cell} has no charge rows") for r in discharge)
                continue
            built.append((cyc, charge, discharge))
        if not built:
            continue
        histories.append(_assemble_history(cell, built, schema))
    if not histories:
        raise EmptyInputError("no cycle with charge samples")
    return ParseResult(histories, rejected)


def _curve_from_rows(cell, cyc, rows, phase, cv_start=None):
    arr = np.array([r[:3] for r in rows], dtype=np.float64)
    return ChargeCurve(cell, cyc, phase, arr[:, 0], arr[:, 1], arr[:, 2], cv_start)


def _assemble_history(cell, built, schema: TableSchema) -> CellAgingHistory:
    raw = []
    for cyc, charge, discharge in built:
        phases = {r[3] for r in charge}
        cv_start = None
        if phases == {Phase.CC}:
            phase = Phase.CC
        elif phases == {Phase.CV}:
            phase = Phase.CV
        else:
            phase = Phase.FULL
            cv_times = [r[0] for r in charge if r[3] is Phase.CV]
            cv_start = min(cv_times) if cv_times else None
        charge_curve = _curve_from_rows(cell, cyc, charge, phase, cv_start)
        discharge_curve = _curve_from_rows(cell, cyc, discharge, Phase.DISCHARGE) if discharge else None
        caps = [r[4] for r in charge + discharge if r[4] is not None]
        ens = [r[5] for r in charge + discharge if r[5] is not None]
        if caps:
            capacity = max(caps)
            energy = max(ens) if ens else None
        elif discharge_curve is not None:
            capacity, energy = integrate_discharge(discharge_curve)
            if ens:
                energy = max(ens)
        else:
            raise SchemaError(
                f"cell {cell} cycle {cyc}: no capacity column value and no DISCHARGE rows to integrate"
            )
        raw.append((charge_curve, capacity, energy, discharge_curve))

    q_nom = schema.q_nom if schema.q_nom is not None else raw[0][1]
    e_nom = schema.e_nom
    if e_nom is None and all(r[2] is not None for r in raw):
        e_nom = raw[0][2]
    cycles = [
        make_cycle(cc, cap, q_nom, energy=en, e_nom=e_nom, discharge_curve=dc) for cc, cap, en, dc in raw
    ]
    return CellAgingHistory(cell, Chemistry(schema.chemistry.upper()), float(q_nom), tuple(cycles),
                            None if e_nom is None else float(e_nom))


def write_cycling_table(histories: Sequence[CellAgingHistory], schema: TableSchema | None = None) -> str:
    """Serialize histories in the table layout ``parse_cycling_table`` reads."""
    schema = schema or TableSchema()
    keys = [*TableSchema.MANDATORY, "phase", "capacity", "energy"]
    names = [getattr(schema, k) if getattr(schema, k) is not None else k for k in keys]
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter=schema.delimiter, lineterminator="\n")
    writer.writerow(names)
    sign = 1.0 if schema.discharge_positive else -1.0
    for h in histories:
        for c in h.cycles:
            cap = repr(c.capacity)
            en = "" if c.energy is None else repr(c.energy)
            curves = [c.charge_curve] + ([c.discharge_curve] if c.discharge_curve is not None else [])
            for curve in curves:
                labels = _phase_labels(curve)
                for t, v, i, lab in zip(curve.time, curve.voltage, curve.current, labels):
                    writer.writerow([h.cell_id, c.cycle_index, repr(float(t)), repr(float(v)),
                                     repr(float(sign * i)), lab, cap, en])
    return buf.getvalue()


def _phase_labels(curve: ChargeCurve) -> list[str]:
    if curve.phase is not Phase.FULL or curve.cv_start is None:
        return [curve.phase.value] * len(curve)
    return ["CV" if t >= curve.cv_start else "CC" for t in curve.time]


# ------------------------------------------------------- history serialization


def _curve_to_dict(curve: ChargeCurve | None):
    if curve is None:
        return None
    return {
        "phase": curve.phase.value,
        "cv_start": curve.cv_start,
        "time": curve.time.tolist(),
        "voltage": curve.voltage.tolist(),
        "current": curve.current.tolist(),
    }


def _curve_from_dict(cell, cyc, d):
    if d is None:
        return None
    return ChargeCurve(cell, cyc, Phase(d["phase"]), d["time"], d["voltage"], d["current"], d["cv_start"])


def dump_histories(histories: Sequence[CellAgingHistory], fp: IO[str], meta: dict | None = None) -> None:
    """Write JSON lines: a header, then one record per characterization cycle."""
    header = {"format": HISTORY_FORMAT, "format_version": HISTORY_FORMAT_VERSION, **(meta or {})}
    fp.write(json.dumps(header, sort_keys=True) + "\n")
    for h in histories:
        for c in h.cycles:
            rec = {
                "cell_id": h.cell_id,
                "chemistry": h.chemistry.value,
                "q_nom": h.q_nom,
                "e_nom": h.e_nom,
                "cycle_index": c.cycle_index,
                "capacity": c.capacity,
                "energy": c.energy,
                "soh_c": c.soh_c,
                "soh_e": c.soh_e,
                "charge": _curve_to_dict(c.charge_curve),
                "discharge": _curve_to_dict(c.discharge_curve),
            }
            fp.write(json.dumps(rec, sort_keys=True) + "\n")


def load_histories(fp: IO[str]) -> tuple[list[CellAgingHistory], dict]:
    """Inverse of :func:`dump_histories`; returns ``(histories, header)``."""
    lines = [ln for ln in fp.read().splitlines() if ln.strip()]
    if not lines:
        raise EmptyInputError("history file is empty")
    header = json.loads(lines[0])
    if header.get("format") != HISTORY_FORMAT:
        raise SchemaError(f"not a history file (format={header.get('format')!r})")
    if header.get("format_version") != HISTORY_FORMAT_VERSION:
        raise SchemaError(f"unsupported history format version {header.get('format_version')}")
    cells: dict[str, dict] = {}
    for ln in lines[1:]:
        rec = json.loads(ln)
        cell = cells.setdefault(rec["cell_id"], {"meta": rec, "cycles": []})
        cyc = rec["cycle_index"]
        cell["cycles"].append(
            CharacterizationCycle(
                cycle_index=cyc,
                charge_curve=_curve_from_dict(rec["cell_id"], cyc, rec["charge"]),
                capacity=rec["capacity"],
                soh_c=rec["soh_c"],
                discharge_curve=_curve_from_dict(rec["cell_id"], cyc, rec["discharge"]),
                energy=rec["energy"],
                soh_e=rec["soh_e"],
            )
        )
    histories = [
        CellAgingHistory(cid, Chemistry(c["meta"]["chemistry"]), c["meta"]["q_nom"], tuple(c["cycles"]),
                         c["meta"]["e_nom"])
        for cid, c in cells.items()
    ]
    return histories, header
