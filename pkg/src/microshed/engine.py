"""
Fixed-step co-simulation of frequency dynamics, networking and shedding.

The grid is a single lumped machine: the pre-fault operating point is balanced
and every quantity below is an increment from it.  A fault injects a step
deficit (loss of the main-grid import or of one generator).  Each step of
``dt`` the engine

* integrates the swing relation with the net deficit left after load
  frequency relief, inverter droop support, SG compensation and shedding,
* fires global information discovery when frequency first falls to
  ``f_tr``; its result becomes usable ``T_gi`` later,
* runs a DLSS iteration every ``period`` once the discovery result and the
  additional delay ``t_ad`` have elapsed,
* sheds the outstanding deficit at once in the step frequency reaches
  ``f_th``,
* moves the compensating generator toward the current need, ramp limited.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import ScenarioConfig
from .consensus import (
    LosslessTransport,
    coordination_error,
    metropolis_matrix,
    run_gid,
)
from .deficit import RocofMeter, deficit_conventional, deficit_inverter, inertia_energy
from .dlss import (
    TAU_RULES,
    DLSSController,
    GlobalView,
    StepSchedule,
    bank_weighted_power,
    bus_deficit,
    safety_shed,
)
from .grid import (
    CONVENTIONAL,
    INVERTER,
    GeneratorSpec,
    bank_stats,
    select_shedding_set,
    utilization_level,
)
from .mmst import Channel, MMSTNetwork, StaleNetwork, allocate_slots, baseline_schedule


class FrequencyCollapse(RuntimeError):
    pass


def step_frequency(f: float, dp_pu: float, H_sys: float, f_no: float, dt: float) -> float:
    """Explicit Euler step of ``df/dt = -f_no * dp / (2 H_sys)``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    f_next = f - f_no * dp_pu / (2.0 * H_sys) * dt
    if f_next <= 0:
        raise FrequencyCollapse(f"frequency collapsed to {f_next:.4g} Hz")
    return f_next


def compensate(sg: GeneratorSpec, P_now: float, dt: float, deficit: float) -> float:
    """Ramp-limited move of ``P_now`` toward ``P_now + deficit`` within the bounds."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if deficit >= 0:
        return min(P_now + sg.ramp_up * dt, sg.p_max, P_now + deficit)
    return max(P_now - sg.ramp_down * dt, sg.p_min, P_now + deficit)


@dataclass
class ShedEvent:
    t: float
    bus: int
    unit: int
    grade: int
    power: float
    cause: str
    iteration: int


@dataclass
class SimTrace:
    columns: list
    rows: list = field(default_factory=list)
    events: list = field(default_factory=list)


@dataclass
class RunResult:
    trace: SimTrace
    summary: dict
    audit: list
    iterations: list
    gid: object = None


def make_network(protocol: str, graph, A, channel: Channel, slots=None, history_depth=4):
    if protocol == "mmst":
        return MMSTNetwork(graph, A, channel, history_depth=history_depth)
    if protocol in ("round_robin", "deterministic"):
        return StaleNetwork(graph, A, channel, baseline_schedule(graph, protocol, slots), protocol)
    if protocol == "lossless":
        sched = allocate_slots(graph)
        return LosslessTransport(A, sched.t_one(channel.slot_duration))
    raise ValueError(f"unknown protocol {protocol!r}")


class Simulation:
    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.topo = cfg.build_topology()
        self.buses = sorted(self.topo.buses)
        self.banks = [self.topo.bank_at(b) for b in self.buses]
        if any(b is None for b in self.banks):
            raise ValueError("every bus needs a load bank")
        self.schema = self.topo.schema
        self.N = len(self.buses)
        self.P = np.array([b.p_max for b in self.banks])
        self.P_L = float(self.P.sum())
        self.graph = self.topo.comm_graph()
        self.A = metropolis_matrix(self.graph)
        seeds = np.random.SeedSequence(cfg.seed).spawn(3)
        self._gid_seed = int(seeds[0].generate_state(1)[0])
        self._dlss_seed = int(seeds[1].generate_state(1)[0])
        self.noise = np.random.default_rng(seeds[2])
        p = cfg.protocol
        self.gid_net = make_network(p.name, self.graph, self.A,
                                    Channel(p.loss_rate, self._gid_seed, p.slot_duration),
                                    p.slots, p.history_depth)
        self.dlss_net = make_network(p.name, self.graph, self.A,
                                     Channel(p.loss_rate, self._dlss_seed, p.slot_duration),
                                     p.slots, p.history_depth)
        self.t_one = self.gid_net.t_one
        self.sg = [g for g in self.topo.generators if g.compensating]
        self.inverters = [g for g in self.topo.generators if g.kind == INVERTER]
        self.s_base = sum(g.capacity for g in self.topo.generators)

    # ---- helpers -------------------------------------------------------
    def _voltage(self, t: float) -> float:
        v = self.cfg.voltage
        if v.kind == "none" or t < self.cfg.fault.time or self.cfg.fault.kind == "none":
            return 0.0
        return -v.depth * math.exp(-(t - self.cfg.fault.time) / v.time_constant)

    def _load_delta(self, df_pu: float, dv: float) -> float:
        tot = 0.0
        for b in self.banks:
            tot += b.active_power * (1.0 + b.kappa_f * df_pu + b.kappa_v * dv) - b.p_max
        return tot

    def _inverter_support(self, f: float) -> np.ndarray:
        out = np.zeros(self.N)
        for g in self.inverters:
            p = deficit_inverter(f - self.cfg.f_no, g.droop)
            p = min(max(p, g.p_min - g.output), g.p_max - g.output)
            out[self.buses.index(g.bus)] += p
        return out

    def _gid_locals(self, f: float, rocof: float, dv: float, gens) -> np.ndarray:
        G = self.schema.n_grades
        X = np.zeros((self.N, 3 + G + 2))
        df_pu = (f - self.cfg.f_no) / self.cfg.f_no
        for i, b in enumerate(self.banks):
            st = bank_stats(b, G)
            X[i, 0] = st.p_max
            X[i, 1 : 1 + G] = st.rho * st.p_max
            u = b.active_fraction if self.cfg.dlss.u_mode == "nominal" else utilization_level(b, df_pu, dv)
            X[i, 4 + G] = u * b.p_max
        for g in gens:
            i = self.buses.index(g.bus)
            if g.kind == CONVENTIONAL:
                X[i, 1 + G] += deficit_conventional(g.inertia, self.cfg.f_no, rocof, g.capacity)
            else:
                # an inverter only contributes what its headroom allows
                p = deficit_inverter(f - self.cfg.f_no, g.droop)
                X[i, 1 + G] += min(max(p, g.p_min - g.output), g.p_max - g.output)
        X[:, 2 + G] = f
        X[:, 3 + G] = 1.0 + dv
        return X

    # ---- main loop -----------------------------------------------------
    def run(self) -> RunResult:
        cfg = self.cfg
        dt = cfg.dt
        f_no = cfg.f_no
        n_steps = int(round(cfg.horizon / dt))
        to_step = lambda x: int(round(x / dt))
        fault = cfg.fault
        fault_step = to_step(fault.time) if fault.kind != "none" else None
        gens_after = list(self.topo.generators)
        if fault.kind == "generator_disconnect":
            gens_after = [g for g in gens_after if g.bus != fault.bus or g.compensating]
        hs_before = inertia_energy(self.topo.generators)
        hs_after = inertia_energy(gens_after)
        hs = hs_before
        meter = RocofMeter(cfg.rocof_window)
        initial_active = [b.active.copy() for b in self.banks]

        cols = ["t", "f", "rocof", "dp_net", "p_comp", "p_inv", "shed", "F", "lam_min"]
        cols += [f"u_{b}" for b in self.buses]
        cols += ["phase"]
        trace = SimTrace(cols)

        f = f_no
        comp = 0.0
        K = 2.0 * hs_after / (f_no * cfg.compensation.restore_time)
        comp_on = cfg.compensation.start == "fault"
        sg = self.sg[0]
        sg_i = self.buses.index(sg.bus)
        comp_lo, comp_hi = sg.p_min - sg.output, sg.p_max - sg.output

        trigger_step = gid_done_step = dlss_start_step = None
        gid_result = None
        gid_truth = None
        reference = None
        ctrl: DLSSController | None = None
        next_iter = None
        dlss_done = False
        dlss_done_t = None
        safety_t = None
        collapse = False
        f_min, t_min = f, 0.0
        phase = 0
        last_F = math.nan
        last_lam = math.nan
        period_steps = max(1, to_step(cfg.dlss.period))
        p_inv = np.zeros(self.N)
        dp_net = 0.0

        def log_drops(i, before, cause, k, t):
            bank = self.banks[i]
            for u in np.flatnonzero(before & ~bank.active):
                trace.events.append(ShedEvent(t, bank.bus, int(u), int(bank.grade[u]),
                                              float(bank.base[u]), cause, k))

        def shed_units(i, new_active, cause, k, t):
            before = self.banks[i].active
            self.banks[i] = self.banks[i].with_active(new_active)
            log_drops(i, before, cause, k, t)

        def record(t, rocof):
            df_pu = (f - f_no) / f_no
            dv = self._voltage(t)
            shed_total = sum(b.base[a0 & ~b.active].sum() for b, a0 in zip(self.banks, initial_active))
            us = [utilization_level(b, df_pu, dv) for b in self.banks]
            trace.rows.append([t, f, rocof, dp_net, comp, float(p_inv.sum()), float(shed_total),
                               last_F, last_lam, *us, phase])

        record(0.0, 0.0)
        for n in range(1, n_steps + 1):
            t = n * dt
            try:
                f = step_frequency(f, dp_net / self.s_base, hs / self.s_base, f_no, dt)
            except FrequencyCollapse:
                collapse = True
                f = 0.0
            if fault_step is not None and n >= fault_step:
                hs = hs_after
            f_meas = f + (self.noise.normal(0.0, cfg.noise_sigma) if cfg.noise_sigma > 0 else 0.0)
            rocof = meter.update(t, f_meas)
            if f < f_min:
                f_min, t_min = f, t
            if collapse:
                record(t, rocof)
                break
            df_pu = (f_meas - f_no) / f_no
            dv = self._voltage(t)

            p_gen = p_inv.copy()
            p_gen[sg_i] += comp

            # discovery
            if trigger_step is None and fault_step is not None and n > fault_step and f_meas <= cfg.f_tr:
                trigger_step = n
                phase = 1
                x0 = self._gid_locals(f_meas, rocof, dv, gens_after)
                gid_truth = x0.sum(axis=0)
                reference = [
                    (bank_weighted_power(b, self.schema),
                     bus_deficit(b, df_pu, dv, p_gen[i], cfg.p_loss, self.N),
                     utilization_level(b, df_pu, dv), b.active_fraction)
                    for i, b in enumerate(self.banks)
                ]
                monitor = [0] if cfg.gid.monitor == "load" else None
                gid_result = run_gid(x0, self.gid_net, cfg.gid.tol, cfg.gid.max_iters, monitor=monitor)
                gid_done_step = n + max(1, to_step(gid_result.T_gi))
                dlss_start_step = gid_done_step + to_step(cfg.dlss.t_ad)
                if cfg.compensation.start == "trigger":
                    comp_on = True

            # gradual shedding
            if dlss_start_step is not None and n >= dlss_start_step and not dlss_done:
                if ctrl is None:
                    phase = 2
                    comp_on = True
                    ctrl = self._make_controller(gid_result)
                    ctrl.start(df_pu, dv, p_gen, reference)
                    # the relay already covered the deficit
                    ctrl.hold = safety_t is not None
                    next_iter = n
                if n == next_iter and ctrl.k < cfg.dlss.max_iters:
                    before = [b.active.copy() for b in self.banks]
                    rep = ctrl.iterate(df_pu, dv, p_gen)
                    for i in range(self.N):
                        log_drops(i, before[i], "dlss", rep.k, t)
                    last_F = rep.F_max
                    last_lam = rep.lam_min
                    next_iter = n + period_steps
                    if rep.done:
                        dlss_done = True
                        dlss_done_t = t
                        phase = 3

            # safety threshold
            if safety_t is None and fault_step is not None and f_meas <= cfg.f_th:
                safety_t = t
                comp_on = True
                self._safety(ctrl, df_pu, dv, rocof, hs, shed_units, t, p_gen)

            # compensation
            load_delta = self._load_delta(df_pu, dv)
            fault_dp = fault.deficit if (fault_step is not None and n >= fault_step) else 0.0
            p_inv = self._inverter_support(f_meas)
            if comp_on:
                need = fault_dp + load_delta - comp - float(p_inv.sum())
                request = comp + need + K * (f_no - f_meas)
                step = min(max(request - comp, -sg.ramp_down * dt), sg.ramp_up * dt)
                comp = min(max(comp + step, comp_lo), comp_hi)
            dp_net = fault_dp + load_delta - comp - float(p_inv.sum())
            record(t, rocof)

        shed_by_grade = np.zeros(self.schema.n_grades)
        shed_by_bus = {}
        for ev in trace.events:
            shed_by_grade[ev.grade - 1] += ev.power
            shed_by_bus[ev.bus] = shed_by_bus.get(ev.bus, 0.0) + ev.power
        summary = {
            "scenario": cfg.name,
            "protocol": cfg.protocol.name,
            "loss_rate": cfg.protocol.loss_rate,
            "seed": cfg.seed,
            "deficit": fault.deficit,
            "slots": getattr(self.gid_net, "n_slots", None) or allocate_slots(self.graph).n_slots,
            "t_one": self.t_one,
            "t_trigger": None if trigger_step is None else trigger_step * dt,
            "T_gi": None if gid_result is None else gid_result.T_gi,
            "gid_iterations": None if gid_result is None else gid_result.iters,
            "gid_converged": None if gid_result is None else bool(gid_result.converged),
            "t_dlss_start": None if ctrl is None else dlss_start_step * dt,
            "dlss_iterations": 0 if ctrl is None else ctrl.k,
            "dlss_terminated": dlss_done,
            "t_dlss_done": dlss_done_t,
            "safety_fired": safety_t is not None,
            "t_safety": safety_t,
            "shed_total": float(shed_by_grade.sum()),
            "shed_by_grade": [float(x) for x in shed_by_grade],
            "shed_by_bus": {str(k): float(v) for k, v in sorted(shed_by_bus.items())},
            "compensation": comp,
            "f_min": f_min,
            "t_f_min": t_min,
            "f_final": f,
            "collapsed": collapse,
        }
        if gid_result is not None:
            col = 1 + self.schema.n_grades
            summary["gid_error"] = coordination_error(
                gid_result.estimates[:, col], gid_truth[col]) / abs(gid_truth[col])
        audit = [] if ctrl is None else ctrl.audit_log
        iters = [] if ctrl is None else ctrl.reports
        summary["audit_violations"] = int(sum(len(r.violations()) > 0 for r in audit))
        if isinstance(self.dlss_net, (MMSTNetwork, StaleNetwork)):
            summary["network"] = {"gid": self.gid_net.stats(), "dlss": self.dlss_net.stats()}
        return RunResult(trace, summary, audit, iters, gid_result)

    def _make_controller(self, gid_result) -> DLSSController:
        cfg = self.cfg
        G = self.schema.n_grades
        est = gid_result.estimates
        views = []
        for i in range(self.N):
            P_L = float(est[i, 0])
            rho = np.clip(est[i, 1 : 1 + G] / P_L, 0.0, None)
            rho = rho / rho.sum()
            views.append(GlobalView(P_L, rho, float(est[i, 1 + G]), float(est[i, 4 + G]) / P_L))
        c = cfg.dlss.tau_c if cfg.dlss.tau_c is not None else TAU_RULES[cfg.dlss.tau_rule]
        sched = StepSchedule.from_rule(c, float(self.P.max()), self.schema.weights[-1], cfg.dlss.C_lambda)
        eps = cfg.dlss.eps if cfg.dlss.eps is not None else (0.02 * self.P_L) ** 2
        rounds = cfg.dlss.rounds_per_iteration
        if rounds is None:
            rounds = max(1, int(math.floor(cfg.dlss.period / self.t_one + 1e-9))) if self.t_one > 0 else 1
        return DLSSController(
            self.banks, self.schema, views, self.dlss_net, sched, eps,
            C_lam=cfg.dlss.C_lambda, p_loss=cfg.p_loss, f_no=cfg.f_no,
            rounds_per_iteration=rounds, f_tol=cfg.dlss.f_tol,
            nominal_share=cfg.dlss.u_mode == "nominal",
            fresh_target=cfg.dlss.fresh_target,
            structure=est[:, : 1 + G] / self.N,
        )

    def _safety(self, ctrl, df_pu, dv, rocof, hs, shed_units, t, p_gen):
        """Shed the outstanding deficit at once.

        The relay reads the net deficit from the ROCOF at the threshold
        instant; the load relief that disappears as frequency recovers is
        added back.  The amount is split by served load.
        """
        cfg = self.cfg
        relief = sum(-(b.kappa_f * df_pu + b.kappa_v * dv) * b.active_power for b in self.banks)
        outstanding = max(2.0 * hs / cfg.f_no * (-rocof) + relief, 0.0)
        served = np.array([utilization_level(b, df_pu, dv) * b.p_max for b in self.banks])
        P_L = float(self.P.sum())
        u_t = float(served.sum()) / P_L
        for i, bank in enumerate(self.banks):
            u_i = served[i] / bank.p_max
            if ctrl is not None and ctrl.states:
                u_t = ctrl.states[i].u_tilde
                P_L = ctrl.views[i].P_L
            amount = safety_shed(u_i, bank.p_max, u_t, P_L, outstanding)
            target = bank.active_fraction - amount / bank.p_max
            new_active = select_shedding_set(bank, max(target, 0.0), self.schema)
            shed_units(i, new_active, "safety", -1 if ctrl is None else ctrl.k, t)
        if ctrl is not None and ctrl.states:
            ctrl.absorb(df_pu, dv, p_gen)
            ctrl.hold = True


def run_scenario(cfg: ScenarioConfig) -> RunResult:
    return Simulation(cfg).run()
