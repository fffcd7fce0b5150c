"""
Scenario configuration: YAML ingestion, validation and model construction.

Validation errors carry the line of the offending entry, e.g.::

    case.yaml:14: protocol.loss_rate must lie in [0, 1), got 1.2
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .grid import (
    CONVENTIONAL,
    INVERTER,
    GeneratorSpec,
    GridModelError,
    GridTopology,
    LoadBank,
    PrioritySchema,
)

PROTOCOLS = ("mmst", "round_robin", "deterministic", "lossless")
FAULTS = ("none", "islanding", "generator_disconnect")
COMP_START = ("dlss", "trigger", "fault")
GID_MONITOR = ("all", "load")
U_MODES = ("nominal", "measured")


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = errors
        super().__init__("\n".join(errors))


@dataclass
class GeneratorCfg:
    bus: int
    kind: str
    capacity: float
    inertia: float | None = None
    droop: float | None = None
    output: float | None = None
    p_min: float = 0.0
    p_max: float | None = None
    ramp_up: float = 0.0
    ramp_down: float = 0.0
    compensating: bool = False
    name: str = ""


@dataclass
class LoadCfg:
    bus: int
    total: float
    unit_power: float
    ratios: list
    kappa_f: float = 1.0
    kappa_v: float = 1.0


@dataclass
class FaultCfg:
    kind: str = "none"
    time: float = 2.0
    deficit: float = 0.0
    bus: int | None = None


@dataclass
class ProtocolCfg:
    name: str = "mmst"
    loss_rate: float = 0.0
    slot_duration: float = 0.005
    slots: int | None = None
    history_depth: int = 4


@dataclass
class GidCfg:
    tol: float = 1e-3
    max_iters: int = 1000
    monitor: str = "all"


@dataclass
class DlssCfg:
    tau_rule: int = 4
    tau_c: float | None = None
    C_lambda: float = 10.0
    eps: float | None = None
    period: float = 0.08
    t_ad: float = 0.0
    rounds_per_iteration: int | None = None
    f_tol: float = 1e-4
    max_iters: int = 500
    u_mode: str = "nominal"
    fresh_target: bool = True


@dataclass
class CompensationCfg:
    start: str = "dlss"
    restore_time: float = 2.0


@dataclass
class VoltageCfg:
    kind: str = "none"
    depth: float = 0.0
    time_constant: float = 0.5


@dataclass
class OutputCfg:
    trace: str | None = None
    summary: str | None = None
    events: str | None = None


@dataclass
class ScenarioConfig:
    name: str
    buses: list
    power_edges: list
    generators: list
    loads: list
    comm_edges: list | None = None
    weights: list = field(default_factory=lambda: [1.0, 2.0, 5.0])
    f_no: float = 50.0
    f_tr: float = 49.5
    f_th: float = 48.0
    f_fa: float = 47.5
    dt: float = 0.001
    horizon: float = 8.0
    seed: int = 0
    p_loss: float = 0.0
    inertia_scale: float = 1.0
    rocof_window: int = 5
    noise_sigma: float = 0.0
    fault: FaultCfg = field(default_factory=FaultCfg)
    protocol: ProtocolCfg = field(default_factory=ProtocolCfg)
    gid: GidCfg = field(default_factory=GidCfg)
    dlss: DlssCfg = field(default_factory=DlssCfg)
    compensation: CompensationCfg = field(default_factory=CompensationCfg)
    voltage: VoltageCfg = field(default_factory=VoltageCfg)
    output: OutputCfg = field(default_factory=OutputCfg)

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "ScenarioConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"dlss.t_ad": 0.1})``."""
        data = self.to_dict()
        for key, value in changes.items():
            node = data
            *head, last = key.split(".")
            for part in head:
                node = node[part]
            if last not in node:
                raise KeyError(key)
            node[last] = value
        return from_dict(data)

    def build_topology(self) -> GridTopology:
        gens = []
        for g in self.generators:
            inertia = g.inertia * self.inertia_scale if g.kind == CONVENTIONAL else None
            output = g.capacity if g.output is None else g.output
            gens.append(GeneratorSpec(
                bus=g.bus, kind=g.kind, capacity=g.capacity, p_min=g.p_min,
                p_max=g.p_max, ramp_up=g.ramp_up, ramp_down=g.ramp_down,
                inertia=inertia, droop=g.droop if g.kind == INVERTER else None,
                output=output, compensating=g.compensating, name=g.name,
            ))
        banks = [
            LoadBank.from_ratios(l.bus, l.total, l.unit_power, l.ratios, l.kappa_f, l.kappa_v)
            for l in self.loads
        ]
        return GridTopology(
            buses=tuple(self.buses),
            power_edges=tuple(tuple(e) for e in self.power_edges),
            generators=tuple(gens),
            banks=tuple(sorted(banks, key=lambda b: b.bus)),
            comm_edges=None if self.comm_edges is None else tuple(tuple(e) for e in self.comm_edges),
            p_loss=self.p_loss,
            schema=PrioritySchema(tuple(self.weights)),
        )


_SECTIONS = {
    "fault": FaultCfg, "protocol": ProtocolCfg, "gid": GidCfg, "dlss": DlssCfg,
    "compensation": CompensationCfg, "voltage": VoltageCfg, "output": OutputCfg,
}


class _Lines:
    """Maps dotted key paths to source lines of a composed YAML document."""

    def __init__(self, text: str | None):
        self.root = yaml.compose(text) if text else None

    def line(self, path: tuple) -> int | None:
        node = self.root
        best = None
        for part in path:
            if node is None:
                break
            best = node.start_mark.line + 1
            if isinstance(node, yaml.MappingNode):
                nxt = None
                for k, v in node.value:
                    if k.value == str(part):
                        best = k.start_mark.line + 1
                        nxt = v
                        break
                node = nxt
            elif isinstance(node, yaml.SequenceNode) and isinstance(part, int) and part < len(node.value):
                node = node.value[part]
                best = node.start_mark.line + 1
            else:
                node = None
        return best


def _known(cls) -> set:
    return {f.name for f in fields(cls)}


def from_dict(data: dict, text: str | None = None, source: str = "<config>") -> ScenarioConfig:
    """Validate a plain mapping and build a :class:`ScenarioConfig`."""
    lines = _Lines(text)
    errors: list[str] = []

    def err(path, msg):
        ln = lines.line(tuple(path))
        where = f"{source}:{ln}" if ln else source
        errors.append(f"{where}: {msg}")

    if not isinstance(data, dict) or not data:
        raise ConfigError([f"{source}: no topology"])
    data = copy.deepcopy(data)
    for key in data:
        if key not in _known(ScenarioConfig):
            err([key], f"unknown key {key!r}")
    if "buses" not in data or not data.get("buses"):
        err([], "no topology")
    for req in ("name", "power_edges", "generators", "loads"):
        if req not in data:
            err([], f"missing {req}")
    if errors:
        raise ConfigError(errors)

    buses = list(data["buses"])
    bus_set = set(buses)

    def check_edges(key):
        for n, e in enumerate(data.get(key) or []):
            if len(e) != 2 or e[0] not in bus_set or e[1] not in bus_set:
                err([key, n], f"{key}[{n}] references an unknown bus: {e}")

    check_edges("power_edges")
    check_edges("comm_edges")

    gens = []
    if not data["generators"]:
        err(["generators"], "missing generator")
    for n, g in enumerate(data["generators"] or []):
        path = ["generators", n]
        unknown = set(g) - _known(GeneratorCfg)
        if unknown:
            err(path, f"generators[{n}]: unknown keys {sorted(unknown)}")
            continue
        try:
            gc = GeneratorCfg(**g)
        except TypeError as exc:
            err(path, f"generators[{n}]: {exc}")
            continue
        if gc.bus not in bus_set:
            err(path + ["bus"], f"generators[{n}] references unknown bus {gc.bus}")
        if gc.kind not in (CONVENTIONAL, INVERTER):
            err(path + ["kind"], f"generators[{n}].kind must be conventional or inverter")
        gens.append(gc)
    if gens and not any(g.compensating for g in gens):
        err(["generators"], "no compensating generator")

    loads = []
    for n, l in enumerate(data["loads"] or []):
        path = ["loads", n]
        unknown = set(l) - _known(LoadCfg)
        if unknown:
            err(path, f"loads[{n}]: unknown keys {sorted(unknown)}")
            continue
        try:
            lc = LoadCfg(**l)
        except TypeError as exc:
            err(path, f"loads[{n}]: {exc}")
            continue
        if lc.bus not in bus_set:
            err(path + ["bus"], f"loads[{n}] references unknown bus {lc.bus}")
        loads.append(lc)

    sections = {}
    for name, cls in _SECTIONS.items():
        raw = data.get(name) or {}
        unknown = set(raw) - _known(cls)
        for key in sorted(unknown):
            err([name, key], f"unknown key {name}.{key}")
        sections[name] = cls(**{k: v for k, v in raw.items() if k not in unknown})

    p = sections["protocol"]
    if p.name not in PROTOCOLS:
        err(["protocol", "name"], f"protocol.name must be one of {PROTOCOLS}")
    if not (isinstance(p.loss_rate, (int, float)) and 0 <= p.loss_rate < 1):
        err(["protocol", "loss_rate"], f"protocol.loss_rate must lie in [0, 1), got {p.loss_rate}")
    if p.slot_duration <= 0:
        err(["protocol", "slot_duration"], "protocol.slot_duration must be positive")
    f = sections["fault"]
    if f.kind not in FAULTS:
        err(["fault", "kind"], f"fault.kind must be one of {FAULTS}")
    if f.kind == "generator_disconnect" and f.bus not in bus_set:
        err(["fault", "bus"], f"fault.bus references unknown bus {f.bus}")
    if f.deficit < 0:
        err(["fault", "deficit"], "fault.deficit must be >= 0")
    if sections["gid"].monitor not in GID_MONITOR:
        err(["gid", "monitor"], f"gid.monitor must be one of {GID_MONITOR}")
    c = sections["compensation"]
    if c.start not in COMP_START:
        err(["compensation", "start"], f"compensation.start must be one of {COMP_START}")
    d = sections["dlss"]
    if d.tau_c is None and d.tau_rule not in (1, 2, 3, 4, 5):
        err(["dlss", "tau_rule"], "dlss.tau_rule must be 1..5")
    if d.u_mode not in U_MODES:
        err(["dlss", "u_mode"], f"dlss.u_mode must be one of {U_MODES}")
    if d.t_ad < 0 or d.period <= 0:
        err(["dlss"], "dlss.t_ad must be >= 0 and dlss.period > 0")

    scalars = {k: v for k, v in data.items() if k not in _SECTIONS and k not in ("generators", "loads")}
    cfg = None
    if not errors:
        cfg = ScenarioConfig(generators=gens, loads=loads, **scalars, **sections)
        if not (cfg.f_fa < cfg.f_th < cfg.f_tr < cfg.f_no):
            err(["f_th"], "need f_fa < f_th < f_tr < f_no")
        if cfg.dt <= 0 or cfg.horizon <= 0:
            err(["dt"], "dt and horizon must be positive")
        try:
            cfg.build_topology()
        except GridModelError as exc:
            err([], str(exc))
    if errors:
        raise ConfigError(errors)
    return cfg


def parse_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError([f"{path}: {exc.strerror or exc}"]) from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"{path}: {exc}"]) from exc
    return from_dict(data, text, str(path))


def dump_config(cfg: ScenarioConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def bundled_scenario(name: str) -> ScenarioConfig:
    """Load one of the shipped scenarios (``case1`` or ``case2``)."""
    ref = resources.files("microshed") / "scenarios" / f"{name}.yaml"
    text = ref.read_text()
    return from_dict(yaml.safe_load(text), text, f"{name}.yaml")
