"""
Power-deficit estimation from frequency measurements and timing prediction.

Conventional machines infer their share of the imbalance from the rate of
change of frequency through the swing relation; inverter-based units infer it
from their droop characteristic.  Both estimators return a signed value in
kW: positive for a deficit (falling frequency), negative for a surplus.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .grid import CONVENTIONAL, GeneratorSpec


@dataclass(frozen=True)
class FrequencyMeasurement:
    bus: int
    f: float
    rocof: float
    timestamp: float

    def __post_init__(self):
        if self.f <= 0:
            raise ValueError("frequency must be positive")


@dataclass(frozen=True)
class TimingPrediction:
    t_tr: float
    t_fa: float
    H_sys: float


def deficit_conventional(H: float, f_no: float, rocof: float, rating: float) -> float:
    """Deficit seen by a synchronous machine, in kW.

    ``rating`` is the per-unit base (machine rating by default).  A positive
    ``rocof`` gives a negative result, which callers treat as a surplus.
    """
    if H <= 0 or f_no <= 0:
        raise ValueError("H and f_no must be positive")
    return -2.0 * H / f_no * rocof * rating


def deficit_inverter(df: float, xi: float) -> float:
    """Deficit picked up by a droop-controlled inverter, in kW.

    ``df`` is the frequency deviation in Hz and ``xi`` the droop in rad/(s*W).
    """
    if xi <= 0:
        raise ValueError("droop coefficient must be positive")
    return 2.0 * math.pi * (-df) / xi / 1000.0


def system_inertia(generators: Sequence[GeneratorSpec], s_base: float | None = None) -> float:
    """Aggregate inertia constant on ``s_base`` (total capacity if omitted).

    Inverter-based units add no inertia.
    """
    if s_base is None:
        s_base = sum(g.capacity for g in generators)
    hs = sum(g.inertia * g.capacity for g in generators if g.kind == CONVENTIONAL)
    return hs / s_base


def inertia_energy(generators: Sequence[GeneratorSpec]) -> float:
    """Sum of H_i * S_i over conventional machines, in kW*s."""
    return sum(g.inertia * g.capacity for g in generators if g.kind == CONVENTIONAL)


def _time_to(H_sys: float, dp: float, f_no: float, f_target: float) -> float:
    if dp <= 0:
        return math.inf
    return 2.0 * H_sys * (f_no - f_target) / (f_no * dp)


def predict_timing(H_sys: float, dp: float, f_no: float, f_tr: float, f_fa: float) -> TimingPrediction:
    """Times for a constant per-unit deficit ``dp`` to pull frequency to ``f_tr`` and ``f_fa``."""
    if not (f_fa <= f_tr <= f_no):
        raise ValueError("need f_fa <= f_tr <= f_no")
    return TimingPrediction(
        _time_to(H_sys, dp, f_no, f_tr), _time_to(H_sys, dp, f_no, f_fa), H_sys
    )


def shedding_window(t_rp: float, t_gi: float, t_ad: float) -> float:
    """Time left for gradual shedding once discovery and the added delay are spent."""
    return t_rp - t_gi - t_ad


class RocofMeter:
    """Backward-difference ROCOF with a moving-average filter."""

    def __init__(self, window: int = 5):
        if window < 1:
            raise ValueError("window must be >= 1")
        self._buf: deque[float] = deque(maxlen=window)
        self._last: tuple[float, float] | None = None

    def update(self, t: float, f: float) -> float:
        if self._last is not None:
            t0, f0 = self._last
            if t <= t0:
                raise ValueError("timestamps must increase")
            self._buf.append((f - f0) / (t - t0))
        self._last = (t, f)
        return self.value

    @property
    def value(self) -> float:
        return float(np.mean(self._buf)) if self._buf else 0.0
