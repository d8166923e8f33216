"""Pipeline configuration: YAML sections, chemistry presets, validation."""

from __future__ import annotations

import hashlib
import json
import typing
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .ensemble import EnsembleConfig
from .errors import ConfigError
from .features import CCRule, CVRule, WindowSpec, window_for
from .gpr import GPOptions
from .ingestion import TableSchema
from .synthetic import SyntheticFleetSpec


@dataclass
class DataSection:
    path: str | None = None
    delimiter: str = ","
    cell_id_column: str = "cell_id"
    cycle_column: str = "cycle"
    time_column: str = "time"
    voltage_column: str = "voltage"
    current_column: str = "current"
    phase_column: str | None = "phase"
    capacity_column: str | None = "capacity"
    energy_column: str | None = "energy"
    chemistry: str = "OTHER"
    q_nom: float | None = None
    e_nom: float | None = None
    discharge_positive: bool = True
    skip_bad_cycles: bool = False


@dataclass
class WindowSection:
    chemistry: str | None = None
    cc_rule: str | None = None
    cv_rule: str | None = None
    sample_interval: float | None = None
    cc_seconds: float | None = None
    v_low: float | None = None
    v_high: float | None = None
    cv_seconds: float | None = None
    cc_anchor: float | None = None
    voltage_limits: list[float] | None = None


@dataclass
class SelectionSection:
    k: int = 10
    redundancy: float = 0.8


@dataclass
class EnsembleSection:
    m: int = 7
    n: int = 30
    weight_epsilon: float = 1e-8
    bag_unit: str = "row"


@dataclass
class GPSection:
    n_starts: int = 4
    ard: bool = True
    standardize: bool = True
    predictive_noise: bool = False
    bounds: list[float] = field(default_factory=lambda: [1e-6, 1e6])
    max_iter: int = 1000


@dataclass
class ProtocolSection:
    fraction: float = 0.7
    iterations: int = 10
    baseline: bool = False
    m_values: list[int] = field(default_factory=lambda: [2, 5, 10])
    n_values: list[int] = field(default_factory=lambda: [10, 30, 80])
    sweep_iterations: int = 10


@dataclass
class BenchSection:
    m: int = 20
    n: int = 200
    cell_count: int = 200
    cycles_per_cell: int = 100
    n_predict: int = 500


@dataclass
class SynthSection:
    cell_count: int = 30
    cycles_per_cell: int = 40
    soh_start: float = 100.0
    soh_end: float = 60.0
    fade_shape: str = "LINEAR"
    voltage_noise: float = 0.001
    current_noise: float = 0.002
    cell_variation: float = 0.02


@dataclass
class LimitsSection:
    max_bag_size: int = 5000
    max_models: int = 1000
    max_baseline_rows: int = 2000


@dataclass
class PipelineConfig:
    preset: str | None = None
    seed: int = 0
    workers: int = 1
    output_dir: str = "out"
    data: DataSection = field(default_factory=DataSection)
    window: WindowSection = field(default_factory=WindowSection)
    selection: SelectionSection = field(default_factory=SelectionSection)
    ensemble: EnsembleSection = field(default_factory=EnsembleSection)
    gp: GPSection = field(default_factory=GPSection)
    protocol: ProtocolSection = field(default_factory=ProtocolSection)
    bench: BenchSection = field(default_factory=BenchSection)
    synth: SynthSection = field(default_factory=SynthSection)
    limits: LimitsSection = field(default_factory=LimitsSection)

    # ---- derived objects

    def window_spec(self) -> WindowSpec:
        w = self.window
        explicit = {k: v for k, v in asdict(w).items() if k != "chemistry" and v is not None}
        if w.chemistry is None and not explicit:
            raise ConfigError("no window configured: set window.chemistry (LFP/LCO/NMC) or explicit window rules",
                              ["window: unset"])
        base = window_for(w.chemistry).to_dict() if w.chemistry else {}
        merged = {**base, **explicit}
        try:
            return WindowSpec(**{**merged, "voltage_limits": tuple(merged.get("voltage_limits", (0.0, 5.0)))})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"window: {exc}", [f"window: {exc}"]) from exc

    def table_schema(self) -> TableSchema:
        d = self.data
        return TableSchema(
            cell_id=d.cell_id_column, cycle=d.cycle_column, time=d.time_column, voltage=d.voltage_column,
            current=d.current_column, phase=d.phase_column, capacity=d.capacity_column,
            energy=d.energy_column, delimiter=d.delimiter, chemistry=d.chemistry, q_nom=d.q_nom,
            e_nom=d.e_nom, discharge_positive=d.discharge_positive,
        )

    def ensemble_config(self, m=None, n=None) -> EnsembleConfig:
        e = self.ensemble
        return EnsembleConfig(m=m or e.m, n=n or e.n, master_seed=self.seed, weight_epsilon=e.weight_epsilon,
                              bag_unit=e.bag_unit, max_m=self.limits.max_models, max_n=self.limits.max_bag_size)

    def gp_options(self) -> GPOptions:
        g = self.gp
        return GPOptions(n_starts=g.n_starts, ard=g.ard, standardize=g.standardize,
                         predictive_noise=g.predictive_noise, bounds=tuple(g.bounds), max_iter=g.max_iter)

    def synth_spec(self) -> SyntheticFleetSpec:
        return SyntheticFleetSpec(seed=self.seed, **asdict(self.synth))

    # ---- serialization

    def to_dict(self) -> dict:
        return asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def config_hash(self) -> str:
        """Digest of everything that shapes results; seed, workers and output dir excluded."""
        d = self.to_dict()
        for k in ("seed", "workers", "output_dir"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


PRESETS: dict[str, dict] = {
    "nmc-paper": {
        "window": {"chemistry": "NMC"},
        "ensemble": {"m": 3, "n": 20},
        "protocol": {"iterations": 150, "m_values": [2, 10, 50, 100], "n_values": [10, 40, 80, 150]},
    },
    "lco-paper": {
        "window": {"chemistry": "LCO"},
        "ensemble": {"m": 7, "n": 30},
        "protocol": {"iterations": 50, "m_values": [2, 10, 25, 50], "n_values": [10, 40, 80, 150]},
    },
    "lfp-paper": {
        "window": {"chemistry": "LFP"},
        "ensemble": {"m": 20, "n": 200},
        "protocol": {"iterations": 6, "m_values": [2, 20, 50, 80], "n_values": [50, 200, 500, 1000]},
    },
}

_SECTIONS = {f.name: f.type for f in fields(PipelineConfig)}


def _hints(cls):
    return typing.get_type_hints(cls)


def _check_type(value, hint, path, problems):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or str(origin) == "types.UnionType":
        if value is None and type(None) in args:
            return value
        inner = [a for a in args if a is not type(None)][0]
        return _check_type(value, inner, path, problems)
    if origin is list:
        if not isinstance(value, list):
            problems.append(f"{path}: expected a list, got {type(value).__name__}")
            return value
        return [_check_type(v, args[0], f"{path}[{i}]", problems) for i, v in enumerate(value)]
    if hint is bool:
        if not isinstance(value, bool):
            problems.append(f"{path}: expected bool, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            problems.append(f"{path}: expected int, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            problems.append(f"{path}: expected number, got {value!r}")
            return value
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            problems.append(f"{path}: expected string, got {value!r}")
        return value
    return value


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def config_from_dict(raw: dict | None, *, preset: str | None = None) -> PipelineConfig:
    """Build and validate a config, reporting every problem at once."""
    raw = dict(raw or {})
    problems: list[str] = []
    name = preset or raw.get("preset")
    if name is not None:
        if name not in PRESETS:
            problems.append(f"preset: unknown preset {name!r} (known: {', '.join(PRESETS)})")
        else:
            raw = _merge(PRESETS[name], raw)
            raw["preset"] = name

    top_hints = _hints(PipelineConfig)
    kwargs = {}
    for key, value in raw.items():
        if key not in top_hints:
            problems.append(f"{key}: unknown key")
            continue
        section_cls = top_hints[key]
        if isinstance(section_cls, type) and hasattr(section_cls, "__dataclass_fields__"):
            if value is None:
                value = {}
            if not isinstance(value, dict):
                problems.append(f"{key}: expected a mapping")
                continue
            hints = _hints(section_cls)
            sub = {}
            for k2, v2 in value.items():
                if k2 not in hints:
                    problems.append(f"{key}.{k2}: unknown key")
                    continue
                before = len(problems)
                checked = _check_type(v2, hints[k2], f"{key}.{k2}", problems)
                if len(problems) == before:
                    sub[k2] = checked
            kwargs[key] = section_cls(**sub)
        else:
            before = len(problems)
            checked = _check_type(value, section_cls, key, problems)
            if len(problems) == before:
                kwargs[key] = checked
    # type-valid keys still get their invariants checked so one pass lists everything
    cfg = PipelineConfig(**kwargs)
    problems.extend(_invariants(cfg))
    if problems:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems), problems)
    return cfg


def _invariants(cfg: PipelineConfig) -> list[str]:
    p = []
    lim = cfg.limits
    e = cfg.ensemble
    if e.m < 1:
        p.append("ensemble.m: must be >= 1")
    if e.m > lim.max_models:
        p.append(f"ensemble.m: {e.m} exceeds limits.max_models={lim.max_models}")
    if e.n < 2:
        p.append("ensemble.n: must be >= 2")
    if e.n > lim.max_bag_size:
        p.append(f"ensemble.n: {e.n} exceeds limits.max_bag_size={lim.max_bag_size}")
    if not e.weight_epsilon > 0:
        p.append("ensemble.weight_epsilon: must be positive")
    if e.bag_unit not in ("row", "cell"):
        p.append("ensemble.bag_unit: must be 'row' or 'cell'")
    if cfg.selection.k < 1:
        p.append("selection.k: must be >= 1")
    if not 0 < cfg.selection.redundancy <= 1:
        p.append("selection.redundancy: must lie in (0, 1]")
    if not 0 < cfg.protocol.fraction < 1:
        p.append("protocol.fraction: must lie in (0, 1)")
    if cfg.protocol.iterations < 1 or cfg.protocol.sweep_iterations < 1:
        p.append("protocol.iterations/sweep_iterations: must be >= 1")
    if cfg.protocol.m_values and max(cfg.protocol.m_values) > lim.max_models:
        p.append(f"protocol.m_values: exceed limits.max_models={lim.max_models}")
    if cfg.protocol.n_values and max(cfg.protocol.n_values) > lim.max_bag_size:
        p.append(f"protocol.n_values: exceed limits.max_bag_size={lim.max_bag_size}")
    if cfg.bench.n > lim.max_bag_size or cfg.bench.m > lim.max_models:
        p.append("bench.m/bench.n: exceed limits")
    if len(cfg.gp.bounds) != 2 or not 0 < cfg.gp.bounds[0] < cfg.gp.bounds[1]:
        p.append("gp.bounds: need [low, high] with 0 < low < high")
    if cfg.gp.n_starts < 1:
        p.append("gp.n_starts: must be >= 1")
    if cfg.workers < 1:
        p.append("workers: must be >= 1")
    w = cfg.window
    if w.chemistry is not None and w.chemistry.upper() not in ("LFP", "LCO", "NMC"):
        p.append(f"window.chemistry: unknown chemistry {w.chemistry!r}")
    if w.cc_rule is not None and w.cc_rule not in CCRule.__members__:
        p.append(f"window.cc_rule: must be one of {', '.join(CCRule.__members__)}")
    if w.cv_rule is not None and w.cv_rule not in CVRule.__members__:
        p.append(f"window.cv_rule: must be one of {', '.join(CVRule.__members__)}")
    if w.voltage_limits is not None and len(w.voltage_limits) != 2:
        p.append("window.voltage_limits: need [low, high]")
    if cfg.synth.fade_shape not in ("LINEAR", "POWER_LAW", "KNEE"):
        p.append("synth.fade_shape: must be LINEAR, POWER_LAW or KNEE")
    if not cfg.synth.soh_end < cfg.synth.soh_start:
        p.append("synth.soh_end: must be below synth.soh_start")
    return p


def load_config(path: str | Path | None, *, preset: str | None = None) -> PipelineConfig:
    """Read a YAML config; absent keys take their defaults."""
    raw = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML: {exc}", [str(exc)]) from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping", ["<root>: not a mapping"])
    return config_from_dict(raw, preset=preset)


def describe_keys() -> str:
    """Every config key with its default, for --help."""
    lines = []
    defaults = PipelineConfig().to_dict()
    for key, value in defaults.items():
        if isinstance(value, dict):
            for k2, v2 in value.items():
                lines.append(f"  {key}.{k2} = {json.dumps(v2)}")
        else:
            lines.append(f"  {key} = {json.dumps(value)}")
    lines.append("presets: " + ", ".join(f"{n} ({_preset_summary(PRESETS[n])})" for n in PRESETS))
    return "\n".join(lines)


def _preset_summary(p: dict) -> str:
    return f"window {p['window']['chemistry']}, m={p['ensemble']['m']}, n={p['ensemble']['n']}"
