"""
Microgrid description and weighted-priority power accounting.

Loads are grouped per bus into banks of discrete units, each unit carrying a
priority grade (1 is the most vital) and an on/off flag.  Grade weights grow
as priority drops, so shedding a kW of grade-3 load "costs" more weight than
a kW of grade-1 load; the optimiser in :mod:`microshed.dlss` uses these
weights as a yardstick that forces low-priority loads out first.

Frequency and voltage deviations passed to the functions of this module are
per-unit (``df = (f - f_no) / f_no``).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
import networkx as nx


class GridModelError(ValueError):
    """Invalid grid data or an infeasible accounting request."""


class BoundsViolation(GridModelError):
    pass


class DegenerateLoadError(GridModelError):
    pass


class EmptyBankError(GridModelError):
    pass


class InfeasibleShedError(GridModelError):
    pass


CONVENTIONAL = "conventional"
INVERTER = "inverter"


@dataclass(frozen=True)
class GeneratorSpec:
    """One distributed generator.

    ``inertia`` (H, seconds) applies to conventional machines and ``droop``
    (xi, rad/(s*W)) to inverter-based ones.  ``output`` is the pre-fault
    set point in kW; ``compensating`` marks a unit (SG or storage) that is
    dispatched to cover the deficit after a fault.
    """

    bus: int
    kind: str
    capacity: float
    p_min: float = 0.0
    p_max: float | None = None
    ramp_up: float = 0.0
    ramp_down: float = 0.0
    inertia: float | None = None
    droop: float | None = None
    output: float = 0.0
    compensating: bool = False
    name: str = ""

    def __post_init__(self):
        if self.p_max is None:
            object.__setattr__(self, "p_max", float(self.capacity))
        if self.capacity <= 0:
            raise GridModelError(f"generator at bus {self.bus}: capacity must be > 0")
        if not (self.p_min <= self.p_max <= self.capacity):
            raise GridModelError(
                f"generator at bus {self.bus}: need p_min <= p_max <= capacity"
            )
        if self.kind == CONVENTIONAL:
            if self.inertia is None or self.inertia <= 0:
                raise GridModelError(f"generator at bus {self.bus}: inertia H must be > 0")
        elif self.kind == INVERTER:
            if self.droop is None or self.droop <= 0:
                raise GridModelError(f"generator at bus {self.bus}: droop xi must be > 0")
        else:
            raise GridModelError(f"generator at bus {self.bus}: unknown kind {self.kind!r}")
        if not (self.p_min <= self.output <= self.p_max):
            raise BoundsViolation(
                f"generator at bus {self.bus}: output {self.output} outside "
                f"[{self.p_min}, {self.p_max}]"
            )
        if self.ramp_up < 0 or self.ramp_down < 0:
            raise GridModelError(f"generator at bus {self.bus}: ramp rates must be >= 0")

    @property
    def headroom(self) -> float:
        return self.p_max - self.output


@dataclass(frozen=True)
class LoadUnit:
    base_power: float
    grade: int
    active: bool = True


@dataclass(frozen=True)
class PrioritySchema:
    """Grade weights ``w_g``; index 0 holds grade 1."""

    weights: tuple[float, ...] = (1.0, 2.0, 5.0)

    def __post_init__(self):
        w = tuple(float(x) for x in self.weights)
        object.__setattr__(self, "weights", w)
        if len(w) < 1:
            raise GridModelError("priority schema needs at least one grade")
        if any(b <= a for a, b in zip(w, w[1:])):
            raise GridModelError("grade weights must be strictly increasing")
        if w[0] <= 0:
            raise GridModelError("grade weights must be positive")

    @property
    def n_grades(self) -> int:
        return len(self.weights)

    @property
    def w(self) -> np.ndarray:
        return np.asarray(self.weights)

    def weight(self, grade: int) -> float:
        return self.weights[grade - 1]


@dataclass(frozen=True)
class LoadBank:
    """The load units attached to one bus.

    Unit data live in parallel numpy arrays so that the shedding kernels stay
    vectorised; :attr:`units` gives the record view.
    """

    bus: int
    base: np.ndarray
    grade: np.ndarray
    active: np.ndarray
    kappa_f: float = 1.0
    kappa_v: float = 1.0

    def __post_init__(self):
        base = np.asarray(self.base, dtype=float)
        grade = np.asarray(self.grade, dtype=int)
        active = np.asarray(self.active, dtype=bool)
        if not (base.shape == grade.shape == active.shape) or base.ndim != 1:
            raise GridModelError(f"bank at bus {self.bus}: unit arrays must align")
        if np.any(base <= 0):
            raise GridModelError(f"bank at bus {self.bus}: unit powers must be > 0")
        if np.any(grade < 1):
            raise GridModelError(f"bank at bus {self.bus}: grades start at 1")
        for name, arr in (("base", base), ("grade", grade), ("active", active)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_units(cls, bus: int, units: Iterable[LoadUnit], kappa_f=1.0, kappa_v=1.0):
        units = list(units)
        return cls(
            bus,
            np.array([u.base_power for u in units], dtype=float),
            np.array([u.grade for u in units], dtype=int),
            np.array([u.active for u in units], dtype=bool),
            kappa_f,
            kappa_v,
        )

    @classmethod
    def from_ratios(
        cls,
        bus: int,
        total: float,
        unit_power: float,
        ratios: Sequence[float],
        kappa_f: float = 1.0,
        kappa_v: float = 1.0,
    ) -> "LoadBank":
        """Units of ``unit_power`` split into grades by ``ratios`` (grade 1 first).

        Each grade keeps exactly ``ratio * total`` kW.  When that is not a
        whole number of units the grade gets one smaller unit for the rest.
        """
        if abs(sum(ratios) - 1.0) > 1e-9:
            raise GridModelError(f"bank at bus {bus}: ratios must sum to 1")
        if total <= 0 or unit_power <= 0:
            raise GridModelError(f"bank at bus {bus}: total and unit power must be > 0")
        base, grade = [], []
        for g, r in enumerate(ratios, start=1):
            pool = r * total
            n = int(np.floor(pool / unit_power + 1e-9))
            rest = pool - n * unit_power
            base += [float(unit_power)] * n
            if rest > 1e-9 * total:
                base.append(rest)
            grade += [g] * (len(base) - len(grade))
        n = len(base)
        return cls(bus, np.array(base), np.array(grade), np.ones(n, bool), kappa_f, kappa_v)

    @property
    def units(self) -> list[LoadUnit]:
        return [
            LoadUnit(float(p), int(g), bool(a))
            for p, g, a in zip(self.base, self.grade, self.active)
        ]

    @property
    def n_units(self) -> int:
        return self.base.size

    @property
    def p_max(self) -> float:
        return float(self.base.sum())

    @property
    def active_power(self) -> float:
        return float(self.base[self.active].sum())

    @property
    def active_fraction(self) -> float:
        return self.active_power / self.p_max

    def with_active(self, active) -> "LoadBank":
        return replace(self, active=np.asarray(active, dtype=bool).copy())


@dataclass(frozen=True)
class BankStats:
    p_max: float
    rho: np.ndarray


@dataclass
class GridTopology:
    buses: tuple[int, ...]
    power_edges: tuple[tuple[int, int], ...]
    generators: tuple[GeneratorSpec, ...]
    banks: tuple[LoadBank, ...]
    comm_edges: tuple[tuple[int, int], ...] | None = None
    p_loss: float = 0.0
    schema: PrioritySchema = field(default_factory=PrioritySchema)

    def __post_init__(self):
        self.buses = tuple(self.buses)
        bus_set = set(self.buses)
        if len(bus_set) != len(self.buses):
            raise GridModelError("duplicate bus ids")
        self.power_edges = tuple(tuple(e) for e in self.power_edges)
        if self.comm_edges is None:
            self.comm_edges = self.power_edges
        self.comm_edges = tuple(tuple(e) for e in self.comm_edges)
        for a, b in self.power_edges + self.comm_edges:
            if a not in bus_set or b not in bus_set:
                raise GridModelError(f"edge ({a}, {b}) references an unknown bus")
        for g in self.generators:
            if g.bus not in bus_set:
                raise GridModelError(f"generator references unknown bus {g.bus}")
        for bank in self.banks:
            if bank.bus not in bus_set:
                raise GridModelError(f"load bank references unknown bus {bank.bus}")
            if bank.grade.max() > self.schema.n_grades:
                raise GridModelError(f"bank at bus {bank.bus} uses a grade beyond G")
        if len({b.bus for b in self.banks}) != len(self.banks):
            raise GridModelError("at most one load bank per bus")
        if not any(g.compensating for g in self.generators):
            raise GridModelError("need at least one compensation-capable generator")
        if not nx.is_connected(self.comm_graph()):
            raise GridModelError("communication graph is not connected")

    def comm_graph(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(self.buses)
        g.add_edges_from(self.comm_edges)
        return g

    def power_graph(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(self.buses)
        g.add_edges_from(self.power_edges)
        return g

    def bank_at(self, bus: int) -> LoadBank | None:
        for bank in self.banks:
            if bank.bus == bus:
                return bank
        return None

    def generators_at(self, bus: int) -> list[GeneratorSpec]:
        return [g for g in self.generators if g.bus == bus]

    @property
    def n_buses(self) -> int:
        return len(self.buses)


def total_generation(outputs, generators: Sequence[GeneratorSpec] | None = None) -> float:
    """Sum of generator outputs, optionally checked against their bounds."""
    outputs = np.asarray(list(outputs.values()) if isinstance(outputs, dict) else outputs, float)
    if generators is not None:
        if len(generators) != outputs.size:
            raise GridModelError("one output per generator is required")
        for g, p in zip(generators, outputs):
            if p < g.p_min - 1e-9 or p > g.p_max + 1e-9:
                raise BoundsViolation(
                    f"generator at bus {g.bus}: output {p} outside [{g.p_min}, {g.p_max}]"
                )
    return float(outputs.sum())


def load_factor(df: float, dv: float, kappa_f: float, kappa_v: float) -> float:
    factor = 1.0 + kappa_f * df + kappa_v * dv
    if factor <= 0:
        raise DegenerateLoadError(f"load factor {factor} <= 0 (df={df}, dv={dv})")
    return factor


def load_power(unit: LoadUnit, df: float = 0.0, dv: float = 0.0, kappa_f=1.0, kappa_v=1.0) -> float:
    """Power drawn by one unit at per-unit deviations ``df``, ``dv``."""
    factor = load_factor(df, dv, kappa_f, kappa_v)
    if not unit.active:
        return 0.0
    return unit.base_power * factor


def bank_power(bank: LoadBank, df: float = 0.0, dv: float = 0.0) -> float:
    return bank.active_power * load_factor(df, dv, bank.kappa_f, bank.kappa_v)


def bank_stats(bank: LoadBank, n_grades: int | None = None) -> BankStats:
    if bank.n_units == 0:
        raise EmptyBankError(f"bank at bus {bank.bus} has no units")
    G = n_grades or int(bank.grade.max())
    per_grade = np.bincount(bank.grade - 1, weights=bank.base, minlength=G)[:G]
    p_max = bank.p_max
    return BankStats(p_max, per_grade / p_max)


def system_stats(banks: Sequence[LoadBank], n_grades: int) -> BankStats:
    per_grade = np.zeros(n_grades)
    for bank in banks:
        st = bank_stats(bank, n_grades)
        per_grade += st.rho * st.p_max
    p_max = per_grade.sum()
    if p_max <= 0:
        raise EmptyBankError("system has no load")
    return BankStats(float(p_max), per_grade / p_max)


def weighted_total(rho, p_max: float, schema) -> float:
    """``sum_g w_g rho_g P_max``; ``schema`` may also be a plain weight vector."""
    rho = np.asarray(rho, float)
    w = schema.w if isinstance(schema, PrioritySchema) else np.asarray(schema, float)
    return float(np.dot(w[: rho.size], rho) * p_max)


def utilization_level(bank: LoadBank, df: float = 0.0, dv: float = 0.0) -> float:
    """Served fraction of the bank's maximum load, frequency/voltage terms included."""
    if bank.n_units == 0:
        raise EmptyBankError(f"bank at bus {bank.bus} has no units")
    return bank.active_fraction * (1.0 + bank.kappa_f * df + bank.kappa_v * dv)


def weighted_delta(shed: float, rho, p_max: float, schema: PrioritySchema, tol: float = 1e-9) -> float:
    """Weighted value of shedding ``shed`` kW system-wide, lowest priority first."""
    if shed < -tol:
        raise InfeasibleShedError(f"negative shedding amount {shed}")
    if shed > p_max * (1 + tol) + tol:
        raise InfeasibleShedError(f"cannot shed {shed} kW out of {p_max} kW")
    pools = np.asarray(rho, float) * p_max
    remaining = min(max(shed, 0.0), p_max)
    acc = 0.0
    for g in range(pools.size - 1, -1, -1):
        take = min(remaining, pools[g])
        acc += schema.weights[g] * take
        remaining -= take
        if remaining <= 0:
            break
    return acc


def grade_band(u: float, rho) -> int:
    """Grade whose weight applies at utilisation ``u``.

    Bands are ``(sum_{g<k} rho_g, sum_{g<=k} rho_g]``; a value sitting on a
    boundary belongs to the band on its left.  Empty grades are skipped.
    """
    rho = np.asarray(rho, float)
    cum = np.cumsum(rho)
    for k in range(rho.size):
        if rho[k] > 0 and u <= cum[k] + 1e-12:
            return k + 1
    nonzero = np.flatnonzero(rho > 0)
    return int(nonzero[-1]) + 1 if nonzero.size else rho.size


def weighted_remaining(u: float, rho, p_max: float, schema: PrioritySchema) -> float:
    """Weighted value of the load kept at utilisation ``u`` (highest priority kept first)."""
    rho = np.asarray(rho, float)
    kept = min(max(u, 0.0), 1.0)
    acc = 0.0
    for g in range(rho.size):
        take = min(kept, rho[g])
        acc += schema.weights[g] * take
        kept -= take
        if kept <= 0:
            break
    return acc * p_max


def shed_order(bank: LoadBank, schema: PrioritySchema) -> np.ndarray:
    """Unit indices in the order they are shed.

    Largest weighted power first (lowest priority, then larger units);
    ties go to the highest unit index.
    """
    wp = schema.w[bank.grade - 1] * bank.base
    idx = np.arange(bank.n_units)
    return np.lexsort((-idx, -wp))


def select_shedding_set(
    bank: LoadBank, u_target: float, schema: PrioritySchema, tol: float = 1e-9
) -> np.ndarray:
    """Active flags after shedding down to at most ``u_target`` of base power.

    Only currently active units are candidates; nothing is re-energised.
    """
    active = bank.active.copy()
    cap = u_target * bank.p_max + tol * bank.p_max
    kept = bank.base[active].sum()
    if kept <= cap:
        return active
    for k in shed_order(bank, schema):
        if not active[k]:
            continue
        active[k] = False
        kept -= bank.base[k]
        if kept <= cap:
            break
    return active
