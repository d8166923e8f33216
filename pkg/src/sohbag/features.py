"""Window extraction, summary statistics, BOL shifting and Spearman selection."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import IO, Iterable, Sequence

import numpy as np

from .errors import (
    AnchorNotReachedError,
    DegenerateDistributionError,
    EmptyWindowError,
    InsufficientDataError,
    MissingPhaseError,
    NoInformativeFeaturesError,
    SchemaError,
    UndefinedCorrelationError,
)
from .ingestion import CellAgingHistory, ChargeCurve, Phase, clean_and_resample

STAT_NAMES = ("mean", "median", "sum", "std", "variance", "kurtosis", "iqr")
FEATURE_TABLE_FORMAT = "sohbag.features"
FEATURE_TABLE_VERSION = 1


class CCRule(str, Enum):
    DURATION_FROM_START = "DURATION_FROM_START"
    VOLTAGE_RANGE = "VOLTAGE_RANGE"
    LOWER_PORTION = "LOWER_PORTION"


class CVRule(str, Enum):
    NONE = "NONE"
    UPPER_PORTION = "UPPER_PORTION"
    FULL_CURVE = "FULL_CURVE"


@dataclass(frozen=True)
class WindowSpec:
    """Where on the charge curve the statistics are taken.

    ``cc_seconds`` parametrises LOWER_PORTION and DURATION_FROM_START,
    ``v_low``/``v_high`` parametrise VOLTAGE_RANGE and ``cv_seconds``
    UPPER_PORTION. ``cc_anchor`` optionally starts LOWER_PORTION at a voltage
    crossing instead of the first CC sample. ``voltage_limits`` are the cutoff
    values used to discard erroneous samples before resampling.
    """

    cc_rule: CCRule
    cv_rule: CVRule
    sample_interval: float
    cc_seconds: float | None = None
    v_low: float | None = None
    v_high: float | None = None
    cv_seconds: float | None = None
    cc_anchor: float | None = None
    voltage_limits: tuple[float, float] = (0.0, 5.0)

    def __post_init__(self):
        object.__setattr__(self, "cc_rule", CCRule(self.cc_rule))
        object.__setattr__(self, "cv_rule", CVRule(self.cv_rule))
        object.__setattr__(self, "voltage_limits", tuple(float(v) for v in self.voltage_limits))
        if not self.sample_interval > 0:
            raise ValueError("sample_interval must be positive")
        if self.cc_rule is CCRule.VOLTAGE_RANGE:
            if self.v_low is None or self.v_high is None or not self.v_low < self.v_high:
                raise ValueError("VOLTAGE_RANGE needs v_low < v_high")
        elif self.cc_seconds is None or not self.cc_seconds > 0:
            raise ValueError(f"{self.cc_rule.value} needs cc_seconds > 0")
        if self.cv_rule is CVRule.UPPER_PORTION and (self.cv_seconds is None or not self.cv_seconds > 0):
            raise ValueError("UPPER_PORTION needs cv_seconds > 0")

    @property
    def feature_names(self) -> list[str]:
        names = [f"cc_{s}" for s in STAT_NAMES]
        if self.cv_rule is not CVRule.NONE:
            names += [f"cv_{s}" for s in STAT_NAMES]
        return names

    def to_dict(self) -> dict:
        return {
            "cc_rule": self.cc_rule.value,
            "cv_rule": self.cv_rule.value,
            "sample_interval": self.sample_interval,
            "cc_seconds": self.cc_seconds,
            "v_low": self.v_low,
            "v_high": self.v_high,
            "cv_seconds": self.cv_seconds,
            "cc_anchor": self.cc_anchor,
            "voltage_limits": list(self.voltage_limits),
        }


# each chemistry's rated voltage range doubles as the cutoff limits
WINDOW_PRESETS = {
    "LFP": WindowSpec(CCRule.LOWER_PORTION, CVRule.UPPER_PORTION, 2.0, cc_seconds=30.0,
                      cv_seconds=60.0, voltage_limits=(2.0, 3.6)),
    "LCO": WindowSpec(CCRule.VOLTAGE_RANGE, CVRule.FULL_CURVE, 10.0, v_low=3.65, v_high=4.2,
                      voltage_limits=(3.2, 4.2)),
    "NMC": WindowSpec(CCRule.DURATION_FROM_START, CVRule.NONE, 10.0, cc_seconds=3600.0,
                      voltage_limits=(2.7, 4.2)),
}


def window_for(chemistry: str) -> WindowSpec:
    try:
        return WINDOW_PRESETS[chemistry.upper()]
    except KeyError:
        raise ValueError(f"no window preset for chemistry {chemistry!r}") from None


_TOL = 1e-9


def extract_window(curve: ChargeCurve, spec: WindowSpec, phase: str = "CC") -> np.ndarray:
    """Signal values inside the window: CC voltage or CV current magnitude.

    The relevant phase segment is resampled at ``spec.sample_interval`` on an
    inclusive grid, so a 30 s window at 2 s yields 16 samples.
    """
    phase = Phase(phase)
    dt = spec.sample_interval
    seg = curve.segment(phase)
    if seg is None or len(seg) < 2:
        raise MissingPhaseError(f"curve {curve.cell_id}/{curve.cycle_index} has no usable {phase.value} phase")

    if phase is Phase.CC:
        rule = spec.cc_rule
        anchor = None
        if rule is CCRule.VOLTAGE_RANGE:
            anchor = spec.v_low if seg.voltage[0] < spec.v_low else None
        elif rule is CCRule.LOWER_PORTION:
            anchor = spec.cc_anchor
        try:
            res = clean_and_resample(seg, spec.voltage_limits, dt, anchor)
        except AnchorNotReachedError as exc:
            raise EmptyWindowError(f"curve {curve.cell_id}/{curve.cycle_index}: {exc}") from exc
        t, v = res.time, res.voltage
        if rule is CCRule.VOLTAGE_RANGE:
            values = v[(v >= spec.v_low) & (v <= spec.v_high)]
        else:
            values = v[t - t[0] <= spec.cc_seconds + _TOL * dt]
    else:
        rule = spec.cv_rule
        if rule is CVRule.NONE:
            raise ValueError("window has no CV rule")
        res = clean_and_resample(seg, spec.voltage_limits, dt)
        t, i = res.time, np.abs(res.current)
        if rule is CVRule.UPPER_PORTION:
            values = i[t - t[0] <= spec.cv_seconds + _TOL * dt]
        else:
            values = i
    if len(values) == 0:
        raise EmptyWindowError(f"curve {curve.cell_id}/{curve.cycle_index}: empty {rule.value} window")
    return np.asarray(values, dtype=np.float64)


@dataclass(frozen=True)
class StatVector:
    mean: float
    median: float
    sum: float
    std: float
    variance: float
    kurtosis: float
    iqr: float
    degenerate: bool = False

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, s) for s in STAT_NAMES])


def quantile(values, q):
    """Linear interpolation on plotting positions (i - 0.5)/L, clamped at the ends."""
    xs = np.sort(np.asarray(values, dtype=np.float64))
    pos = (np.arange(1, len(xs) + 1) - 0.5) / len(xs)
    return np.interp(q, pos, xs)


def summarize(values, *, raise_on_degenerate: bool = True) -> StatVector:
    """The seven window statistics.

    std and variance use the L-1 divisor; kurtosis is the biased m4/m2**2
    (3 for a normal distribution). For constant input kurtosis is undefined:
    either raise (the partial result rides on the exception) or return NaN
    with ``degenerate=True``.
    """
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 1 or len(x) < 4:
        raise InsufficientDataError(f"need at least 4 values, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise ValueError("values must be finite")
    mean = x.mean()
    dev = x - mean
    ss = dev @ dev
    variance = ss / (len(x) - 1)
    m2 = ss / len(x)
    q25, q75 = quantile(x, [0.25, 0.75])
    stats = dict(
        mean=float(mean),
        median=float(np.median(x)),
        sum=float(x.sum()),
        std=float(np.sqrt(variance)),
        variance=float(variance),
        iqr=float(q75 - q25),
    )
    if m2 == 0:
        partial = StatVector(kurtosis=float("nan"), degenerate=True, **stats)
        if raise_on_degenerate:
            raise DegenerateDistributionError("all values identical; kurtosis undefined", partial)
        return partial
    m4 = np.mean(dev**4)
    return StatVector(kurtosis=float(m4 / m2**2), **stats)


def cycle_statistics(curve: ChargeCurve, spec: WindowSpec) -> np.ndarray:
    """Raw (unshifted) feature vector: CC stats, then CV stats if configured."""
    parts = [summarize(extract_window(curve, spec, "CC")).as_array()]
    if spec.cv_rule is not CVRule.NONE:
        parts.append(summarize(extract_window(curve, spec, "CV")).as_array())
    return np.concatenate(parts)


@dataclass(frozen=True)
class FeatureRecord:
    cell_id: str
    cycle_index: int
    features: tuple[float, ...]
    soh: float


def shift_by_bol(records: Sequence[FeatureRecord]) -> list[FeatureRecord]:
    """Subtract each cell's earliest-cycle features from all of its records.

    Output keeps the input order; every cell's first record becomes exactly zero.
    """
    bol: dict[str, FeatureRecord] = {}
    counts: dict[str, int] = {}
    for r in records:
        counts[r.cell_id] = counts.get(r.cell_id, 0) + 1
        if r.cell_id not in bol or r.cycle_index < bol[r.cell_id].cycle_index:
            bol[r.cell_id] = r
    for cell, n in counts.items():
        if n == 1:
            warnings.warn(f"cell {cell} has a single cycle; its features are all zero", stacklevel=2)
    out = []
    for r in records:
        ref = np.asarray(bol[r.cell_id].features)
        out.append(FeatureRecord(r.cell_id, r.cycle_index, tuple((np.asarray(r.features) - ref).tolist()), r.soh))
    return out


@dataclass
class FeatureTable:
    """Shifted features for every characterization cycle, one row each."""

    names: list[str]
    cell_ids: np.ndarray
    cycle_index: np.ndarray
    X: np.ndarray
    soh: np.ndarray
    skipped: list[tuple[str, int, str]] = field(default_factory=list)

    def __len__(self):
        return len(self.soh)

    @property
    def cells(self) -> list[str]:
        return list(dict.fromkeys(self.cell_ids.tolist()))

    def mask(self, cells: Iterable[str]) -> np.ndarray:
        return np.isin(self.cell_ids, list(cells))

    def subset(self, rows) -> FeatureTable:
        return FeatureTable(self.names, self.cell_ids[rows], self.cycle_index[rows], self.X[rows],
                            self.soh[rows])

    def records(self) -> list[FeatureRecord]:
        return [
            FeatureRecord(c, int(k), tuple(x.tolist()), float(s))
            for c, k, x, s in zip(self.cell_ids, self.cycle_index, self.X, self.soh)
        ]

    @classmethod
    def from_records(cls, names, records: Sequence[FeatureRecord], skipped=None) -> FeatureTable:
        return cls(
            list(names),
            np.array([r.cell_id for r in records], dtype=object),
            np.array([r.cycle_index for r in records], dtype=np.int64),
            np.array([r.features for r in records], dtype=np.float64).reshape(len(records), len(names)),
            np.array([r.soh for r in records], dtype=np.float64),
            list(skipped or []),
        )

    def to_csv(self, fp: IO[str], meta: dict | None = None) -> None:
        header = {"format": FEATURE_TABLE_FORMAT, "format_version": FEATURE_TABLE_VERSION, **(meta or {})}
        fp.write("# " + json.dumps(header, sort_keys=True) + "\n")
        w = csv.writer(fp, lineterminator="\n")
        w.writerow(["cell_id", "cycle_index", "soh", *self.names])
        for c, k, s, x in zip(self.cell_ids, self.cycle_index, self.soh, self.X):
            w.writerow([c, int(k), repr(float(s)), *(repr(float(v)) for v in x)])

    @classmethod
    def from_csv(cls, fp: IO[str]) -> tuple[FeatureTable, dict]:
        text = fp.read()
        lines = text.splitlines()
        if not lines or not lines[0].startswith("# "):
            raise SchemaError("feature table lacks its provenance header line")
        header = json.loads(lines[0][2:])
        if header.get("format") != FEATURE_TABLE_FORMAT:
            raise SchemaError(f"not a feature table (format={header.get('format')!r})")
        rows = list(csv.reader(lines[1:]))
        names = rows[0][3:]
        recs = [FeatureRecord(r[0], int(r[1]), tuple(float(v) for v in r[3:]), float(r[2])) for r in rows[1:]]
        return cls.from_records(names, recs), header


def build_feature_table(histories: Sequence[CellAgingHistory], spec: WindowSpec, *, skip_errors=False) -> FeatureTable:
    """Featurize every characterization cycle and shift by beginning of life.

    With ``skip_errors`` a cycle whose window cannot be summarized is left out
    and listed in ``FeatureTable.skipped``; otherwise the error propagates.
    """
    from .errors import SohError

    raw, skipped = [], []
    for h in histories:
        for c in h.cycles:
            try:
                vec = cycle_statistics(c.charge_curve, spec)
            except SohError as exc:
                if not skip_errors:
                    raise type(exc)(f"cell {h.cell_id} cycle {c.cycle_index}: {exc}") from exc
                skipped.append((h.cell_id, c.cycle_index, str(exc)))
                continue
            raw.append(FeatureRecord(h.cell_id, c.cycle_index, tuple(vec.tolist()), c.soh_c))
    if not raw:
        raise InsufficientDataError("no cycle could be featurized")
    return FeatureTable.from_records(spec.feature_names, shift_by_bol(raw), skipped)


# ------------------------------------------------------------------ spearman


def average_ranks(x) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    x = np.asarray(x, dtype=np.float64)
    uniq, inverse, counts = np.unique(x, return_inverse=True, return_counts=True)
    start = np.cumsum(counts) - counts
    return (start + (counts + 1) / 2.0)[inverse]


def spearman(x, y) -> float:
    """Spearman's rank correlation with average ranks for ties.

    Without ties this is ``1 - 6*sum(d**2)/(N*(N**2-1))``; with ties it is the
    Pearson correlation of the rank vectors.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D and equally long")
    n = len(x)
    if n < 3:
        raise InsufficientDataError(f"need at least 3 points, got {n}")
    rx, ry = average_ranks(x), average_ranks(y)
    tied_x = len(np.unique(x)) < n
    tied_y = len(np.unique(y)) < n
    if np.ptp(rx) == 0 or np.ptp(ry) == 0:
        raise UndefinedCorrelationError("constant input has no rank variance")
    if not (tied_x or tied_y):
        d = rx - ry
        return float(1.0 - 6.0 * (d @ d) / (n * (n * n - 1.0)))
    dx, dy = rx - rx.mean(), ry - ry.mean()
    return float(np.clip((dx @ dy) / np.sqrt((dx @ dx) * (dy @ dy)), -1.0, 1.0))


class RejectReason(str, Enum):
    LOW_RANK = "LOW_RANK"
    REDUNDANT = "REDUNDANT"
    DEGENERATE = "DEGENERATE"


@dataclass(frozen=True)
class Rejection:
    index: int
    reason: RejectReason
    redundant_with: int | None = None


@dataclass(frozen=True)
class FeatureSelection:
    selected_indices: tuple[int, ...]
    rho_with_response: tuple[float, ...]
    rejected: tuple[Rejection, ...]
    names: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "selected_indices": list(self.selected_indices),
            "selected_names": [self.names[i] for i in self.selected_indices] if self.names else [],
            "rho_with_response": [None if np.isnan(r) else r for r in self.rho_with_response],
            "rejected": [
                {"index": r.index, "reason": r.reason.value, "redundant_with": r.redundant_with}
                for r in self.rejected
            ],
            "names": list(self.names),
        }

    @classmethod
    def from_dict(cls, d: dict) -> FeatureSelection:
        return cls(
            tuple(d["selected_indices"]),
            tuple(float("nan") if r is None else r for r in d["rho_with_response"]),
            tuple(Rejection(r["index"], RejectReason(r["reason"]), r["redundant_with"]) for r in d["rejected"]),
            tuple(d.get("names", ())),
        )


def select_features(X, y, k: int = 10, redundancy: float = 0.8, names: Sequence[str] = ()) -> FeatureSelection:
    """Greedy filter: strongest |rho| with the response first, skipping near-duplicates.

    A candidate is dropped if its |rho| with any accepted feature is at least
    ``redundancy``. Ties in |rho| go to the lower column index.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != len(y):
        raise ValueError("X must be (records, features) matching len(y)")
    if X.shape[0] < 3:
        raise InsufficientDataError("need at least 3 records")
    if k < 1 or not 0 < redundancy <= 1:
        raise ValueError("need k >= 1 and 0 < redundancy <= 1")
    n_feat = X.shape[1]
    rho = np.full(n_feat, np.nan)
    rejected = []
    for j in range(n_feat):
        try:
            rho[j] = spearman(X[:, j], y)
        except UndefinedCorrelationError:
            rejected.append(Rejection(j, RejectReason.DEGENERATE))
    informative = [j for j in range(n_feat) if not np.isnan(rho[j])]
    if not informative:
        raise NoInformativeFeaturesError("every feature (or the response) is constant")
    order = sorted(informative, key=lambda j: (-abs(rho[j]), j))
    accepted: list[int] = []
    for j in order:
        if len(accepted) >= k:
            rejected.append(Rejection(j, RejectReason.LOW_RANK))
            continue
        clash = None
        for a in accepted:
            try:
                r = spearman(X[:, j], X[:, a])
            except UndefinedCorrelationError:
                continue
            if abs(r) >= redundancy:
                clash = a
                break
        if clash is None:
            accepted.append(j)
        else:
            rejected.append(Rejection(j, RejectReason.REDUNDANT, clash))
    rejected.sort(key=lambda r: r.index)
    return FeatureSelection(tuple(accepted), tuple(rho.tolist()), tuple(rejected), tuple(names))
