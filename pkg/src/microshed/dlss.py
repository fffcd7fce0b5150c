"""
Distributed load shedding by a primal-dual subgradient method.

Every bus agent holds a utilisation level ``u_i`` (its primal variable), a
copy of the dual variable ``lambda_i`` and three tracking variables: ``W_i``
follows the network average of the weighted load ``P_Wi``, ``D_i`` the
average bus deficit ``Delta P_i`` and ``U_i`` the system utilisation
``sum_j u_j P_j / P_L``.  One iteration consists of

1. mixing ``(W, D, lambda, U)`` with the neighbours,
2. a projected subgradient step on ``u_i`` and a dual ascent step on
   ``lambda_i``,
3. switching off load units until the bank matches the new ``u_i``,
4. adding the local change of ``P_Wi`` and ``Delta P_i`` to the trackers,
5. re-estimating the amount still to be shed.

If frequency reaches the safety threshold the outstanding deficit is shed at
once, split across buses in proportion to their served load.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import (
    LoadBank,
    PrioritySchema,
    bank_stats,
    grade_band,
    select_shedding_set,
    utilization_level,
    weighted_delta,
    weighted_total,
)

TAU_RULES = {1: 20.0, 2: 15.0, 3: 12.0, 4: 10.0, 5: 4.0}


@dataclass
class AgentState:
    bus: int
    u: float
    lam: float
    W: float
    D: float
    P_W_prev: float
    dP_prev: float
    u_tilde: float = 1.0
    U: float = 1.0
    q_prev: float = 1.0
    k: int = 0
    # cached estimates from the last mixing step
    W_tilde: float = 0.0
    D_tilde: float = 0.0
    lam_tilde: float = 0.0
    done: bool = False


@dataclass
class ShedTargets:
    P_Wt: float
    P_WD: float
    dP_tilde: float
    eps: float

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("balance tolerance must be positive")


@dataclass(frozen=True)
class StepSchedule:
    """Step size ``tau_k``; a constant rule unless ``table`` is given."""

    tau: float
    table: tuple = ()

    def __post_init__(self):
        vals = (self.tau,) + tuple(self.table)
        if any(v <= 0 for v in vals):
            raise ValueError("step sizes must be positive")
        if any(b > a for a, b in zip(self.table, self.table[1:])):
            raise ValueError("step sizes must be nonincreasing")

    def __call__(self, k: int) -> float:
        if self.table:
            return self.table[min(k - 1, len(self.table) - 1)]
        return self.tau

    @classmethod
    def from_rule(cls, c: float, P_check: float, w_G: float, C_lam: float) -> "StepSchedule":
        """``tau = 1 / [c * P_check^2 * (w_G^2 + C_lam)]``."""
        return cls(1.0 / (c * P_check**2 * (w_G**2 + C_lam)))


def estimate_globals(own: np.ndarray, neighbor_msgs: dict, A_row: dict) -> np.ndarray:
    """A-row combination of own and neighbour messages ``(W, D, lambda, u)``.

    ``A_row`` maps ``"self"`` and each neighbour id to its weight.  A
    neighbour with positive weight but no message stalls the estimate.
    """
    acc = A_row["self"] * np.asarray(own, float)
    for j, a in A_row.items():
        if j == "self" or a == 0:
            continue
        if j not in neighbor_msgs or neighbor_msgs[j] is None:
            raise LookupError(f"no message from neighbour {j}")
        acc = acc + a * np.asarray(neighbor_msgs[j], float)
    return acc


def grad_F(residual: float, w_next: float, P_i: float) -> float:
    """``-2 P_i w_{m+1} (P_Wt - P_WD - N W~_i)``; ``residual`` is the bracket."""
    return -2.0 * P_i * w_next * residual


def grad_J(ND: float, P_i: float) -> float:
    """``2 P_i (N D~_i)``."""
    return 2.0 * P_i * ND


def freq_corrected_u(u: float, df: float, bank: LoadBank) -> float:
    """Remove the frequency share of the load from ``u``."""
    return u - bank.active_fraction * bank.kappa_f * df


def update_primal(u_prev: float, tau: float, P_i: float, lam_ND: float, w_residual: float,
                  u_max: float = 1.0) -> float:
    """Projected step ``u - 2 tau P_i (lam N D~ - w (residual))`` onto ``[0, u_max]``."""
    u = u_prev - 2.0 * tau * P_i * (lam_ND - w_residual)
    return min(max(u, 0.0), u_max)


def update_dual(lam_tilde: float, tau: float, ND: float, eps: float, C_lam: float = np.inf) -> float:
    lam = lam_tilde + tau * (ND**2 - eps)
    return min(max(lam, 0.0), C_lam)


def update_locals(state: AgentState, P_W_new: float, dP_new: float, q_new: float | None = None) -> AgentState:
    """Add the local changes to the trackers.  ``q_new`` is ``N u_i P_i / P_L``."""
    state.W = state.W_tilde + P_W_new - state.P_W_prev
    state.D = state.D_tilde + dP_new - state.dP_prev
    state.P_W_prev = P_W_new
    state.dP_prev = dP_new
    if q_new is not None:
        state.U = state.u_tilde + q_new - state.q_prev
        state.q_prev = q_new
    return state


def correct_deficit(dP_now: float, u_tilde: float, P_L: float) -> float:
    """Deficit still to cover plus what has been shed already."""
    return dP_now + (1.0 - u_tilde) * P_L


def safety_shed(u_i: float, P_i: float, u_tilde: float, P_L: float, dP: float) -> float:
    """Share of ``dP`` assigned to bus ``i`` by served load."""
    if dP == 0:
        return 0.0
    if u_tilde <= 0:
        return P_i / P_L * dP
    return u_i * P_i / (u_tilde * P_L) * dP


def bus_deficit(bank: LoadBank, df: float, dv: float, p_gen: float, p_loss: float, N: int) -> float:
    """Local contribution ``u_i P_i + P_loss/N - P_G,i`` to the system deficit."""
    return utilization_level(bank, df, dv) * bank.p_max + p_loss / N - p_gen


def bank_weighted_power(bank: LoadBank, schema: PrioritySchema, active=None) -> float:
    active = bank.active if active is None else active
    return float(np.sum(schema.w[bank.grade - 1] * bank.base * active))


@dataclass
class GlobalView:
    """What an agent learned from global information discovery."""

    P_L: float
    rho: np.ndarray
    dP: float
    u: float | None = None


@dataclass
class AuditRecord:
    k: int
    norm_gJ: float
    bound_gJ: float
    norm_gF: float
    bound_gF: float
    lip_J: float = np.nan
    lip_J_bound: float = np.nan
    lip_F: float = np.nan
    lip_F_bound: float = np.nan
    lip_J_exact_bound: float = np.nan
    lip_F_exact_bound: float = np.nan

    def violations(self, tol: float = 1e-9) -> list[str]:
        out = []
        if self.norm_gJ > self.bound_gJ * (1 + tol) + tol:
            out.append("gradJ-norm")
        if self.norm_gF > self.bound_gF * (1 + tol) + tol:
            out.append("gradF-norm")
        if np.isfinite(self.lip_J) and self.lip_J > self.lip_J_bound * (1 + tol) + tol:
            out.append("gradJ-lipschitz")
        if np.isfinite(self.lip_F) and self.lip_F > self.lip_F_bound * (1 + tol) + tol:
            out.append("gradF-lipschitz")
        return out


@dataclass
class IterationReport:
    k: int
    shed: dict
    F_max: float
    ND_max: float
    lam_min: float
    u_min: float
    u_max: float
    done: bool


class DLSSController:
    """Runs the agents of one shedding event in lock step.

    ``network`` mixes message matrices; it must expose
    ``consensus_round(x, k)``.  ``banks`` is shared with the caller: entries
    are replaced as units get disconnected.
    """

    def __init__(
        self,
        banks: list[LoadBank],
        schema: PrioritySchema,
        views: list[GlobalView],
        network,
        schedule: StepSchedule,
        eps: float,
        C_lam: float = 10.0,
        p_loss: float = 0.0,
        f_no: float = 50.0,
        rounds_per_iteration: int = 1,
        f_tol: float = 1e-4,
        audit: bool = True,
        nominal_share: bool = True,
        fresh_target: bool = True,
        structure: np.ndarray | None = None,
    ):
        self.fresh_target = fresh_target
        # set once safety shedding has fired: iterate, but switch nothing off
        self.hold = False
        self.nominal_share = nominal_share
        self.banks = banks
        self.schema = schema
        self.views = views
        self.network = network
        self.schedule = schedule
        self.eps = eps
        self.C_lam = C_lam
        self.p_loss = p_loss
        self.f_no = f_no
        self.rounds = max(1, int(rounds_per_iteration))
        self.f_tol = f_tol
        self.N = len(banks)
        self.P = np.array([b.p_max for b in banks])
        self.P_check = float(self.P.max())
        self.rho_i = [bank_stats(b, schema.n_grades).rho for b in banks]
        self.P_Wt = np.array([weighted_total(v.rho, v.P_L, schema) for v in views])
        self.dP_tilde = np.array([v.dP for v in views], float)
        self.P_WD = np.array(
            [self._weighted_delta(d, v) for d, v in zip(self.dP_tilde, views)]
        )
        self.states: list[AgentState] = []
        self.audit_log: list[AuditRecord] = []
        self.reports: list[IterationReport] = []
        self.audit = audit
        self.k = 0
        self.done = False
        self._prev_u = None
        self._round = 0
        # consensus state of the load structure (P_L, rho_g P_L per agent);
        # riding along with the messages keeps refining the discovered globals
        self.structure = None if structure is None else np.array(structure, float)

    def _weighted_delta(self, dP, view: GlobalView) -> float:
        return weighted_delta(min(max(dP, 0.0), view.P_L), view.rho, view.P_L, self.schema)

    def start(self, df: float, dv: float, p_gen: np.ndarray, reference=None):
        """Initialise agents from the discovered globals and current measurements.

        ``reference`` holds per-bus ``(P_W, dP, u, u_nominal)`` at the
        instant the globals were sampled.  Local changes since then (safety
        shedding, generation moves) are added to the trackers right away.
        """
        self.states = []
        self._frame = (df, dv)
        for i, (bank, view) in enumerate(zip(self.banks, self.views)):
            u0 = utilization_level(bank, df, dv)
            P_W = bank_weighted_power(bank, self.schema)
            dP = self._bus_deficit(i, df, dv, p_gen)
            q = self._share(i, bank.active_fraction if self.nominal_share else u0)
            if reference is None:
                P_W0, dP0, q0 = P_W, dP, q
            else:
                P_W0, dP0, u_raw, u_nom = reference[i]
                q0 = self._share(i, u_nom if self.nominal_share else u_raw)
            U0 = q0 if view.u is None else view.u
            self.states.append(
                AgentState(
                    bus=bank.bus, u=u0, lam=0.0,
                    W=self.P_Wt[i] / self.N + P_W - P_W0,
                    D=view.dP / self.N + dP - dP0,
                    P_W_prev=P_W, dP_prev=dP, u_tilde=U0 + q - q0, U=U0 + q - q0, q_prev=q,
                )
            )

    def _bus_deficit(self, i, df, dv, p_gen) -> float:
        return bus_deficit(self.banks[i], df, dv, p_gen[i], self.p_loss, self.N)

    def absorb(self, df: float, dv: float, p_gen: np.ndarray):
        """Book bank changes made outside an iteration (safety shedding) into the trackers."""
        self._rebase(df, dv)
        for i, (st, bank) in enumerate(zip(self.states, self.banks)):
            P_W = bank_weighted_power(bank, self.schema)
            dP = self._bus_deficit(i, df, dv, p_gen)
            u_now = utilization_level(bank, df, dv)
            st.u = min(st.u, u_now)
            q = self._share(i, bank.active_fraction if self.nominal_share else u_now)
            st.W += P_W - st.P_W_prev
            st.D += dP - st.dP_prev
            st.U += q - st.q_prev
            st.P_W_prev, st.dP_prev, st.q_prev = P_W, dP, q

    def _rebase(self, df: float, dv: float):
        # carry each u into the current measurement frame so recovery alone
        # does not read as a lower decision
        df0, dv0 = self._frame
        for st, bank in zip(self.states, self.banks):
            shift = bank.active_fraction * (bank.kappa_f * (df - df0) + bank.kappa_v * (dv - dv0))
            st.u = min(max(st.u + shift, 0.0), utilization_level(bank, df, dv))
        self._frame = (df, dv)

    def _share(self, i: int, u: float) -> float:
        return self.N * u * self.P[i] / self.views[i].P_L

    def _refine_views(self, X: np.ndarray):
        G = self.schema.n_grades
        self.structure = X
        for i, v in enumerate(self.views):
            P_L = self.N * X[i, 0]
            if P_L <= 0:
                continue
            rho = np.clip(X[i, 1 : 1 + G], 0.0, None)
            if rho.sum() <= 0:
                continue
            v.P_L = float(P_L)
            v.rho = rho / rho.sum()
            self.P_Wt[i] = weighted_total(v.rho, v.P_L, self.schema)

    def messages(self) -> np.ndarray:
        return np.array([[s.W, s.D, s.lam, s.U] for s in self.states])

    def u_vector(self) -> np.ndarray:
        return np.array([s.u for s in self.states])

    def iterate(self, df: float, dv: float, p_gen: np.ndarray) -> IterationReport:
        """One synchronous iteration; returns the units switched off per bus."""
        self.k += 1
        k = self.k
        tau = self.schedule(k)
        M = self.messages()
        if self.structure is not None:
            M = np.hstack([M, self.structure])
        for _ in range(self.rounds):
            M = self.network.consensus_round(M, self._round)
            self._round += 1
        if self.structure is not None:
            self._refine_views(M[:, 4:])
            M = M[:, :4]
        N = self.N
        shed = {}
        grads_F = np.zeros(N)
        grads_J = np.zeros(N)
        F_loc = np.zeros(N)
        bands = np.zeros(N, int)
        self._rebase(df, dv)
        u_before = self.u_vector()
        self._pwd_used = self.P_WD.copy()
        for i, (st, bank) in enumerate(zip(self.states, self.banks)):
            st.W_tilde, st.D_tilde, st.lam_tilde, st.u_tilde = M[i]
            st.k = k
            if self.fresh_target:
                self.dP_tilde[i] = correct_deficit(N * st.D_tilde, st.u_tilde, self.views[i].P_L)
                self.P_WD[i] = self._weighted_delta(self.dP_tilde[i], self.views[i])
            ND = N * st.D_tilde
            self._pwd_used[i] = self.P_WD[i]
            residual = self.P_Wt[i] - self.P_WD[i] - N * st.W_tilde
            u_f = freq_corrected_u(st.u, df, bank)
            m = grade_band(u_f, self.rho_i[i])
            bands[i] = m
            w_next = self.schema.weight(m)
            grads_F[i] = grad_F(residual, w_next, bank.p_max)
            grads_J[i] = grad_J(ND, bank.p_max)
            F_loc[i] = residual**2
            u_cap = utilization_level(bank, df, dv)
            st.u = update_primal(st.u, tau, bank.p_max, st.lam_tilde * ND, w_next * residual, u_cap)
            st.lam = update_dual(st.lam_tilde, tau, ND, self.eps, self.C_lam)
            target = freq_corrected_u(st.u, df, bank)
            new_active = bank.active if self.hold else select_shedding_set(bank, target, self.schema)
            dropped = np.flatnonzero(bank.active & ~new_active)
            if dropped.size:
                bank = bank.with_active(new_active)
                self.banks[i] = bank
                shed[bank.bus] = dropped
            st.u = min(st.u, utilization_level(bank, df, dv))
        for i, (st, bank) in enumerate(zip(self.states, self.banks)):
            update_locals(st, bank_weighted_power(bank, self.schema), self._bus_deficit(i, df, dv, p_gen),
                          self._share(i, freq_corrected_u(st.u, df, bank) if self.nominal_share else st.u))
            self.dP_tilde[i] = correct_deficit(N * st.D_tilde, st.u_tilde, self.views[i].P_L)
            self.P_WD[i] = self._weighted_delta(self.dP_tilde[i], self.views[i])
        pwd_used = self._pwd_used
        ND_all = np.array([N * s.D_tilde for s in self.states])
        balanced = bool(np.all(ND_all**2 <= self.eps))
        objective = bool(np.all(F_loc <= self.f_tol * self.P_Wt**2))
        self.done = balanced and objective
        if self.audit:
            self._audit(k, grads_F, grads_J, bands, u_before, pwd_used)
        rep = IterationReport(
            k, shed, float(F_loc.max()), float(np.abs(ND_all).max()),
            float(min(s.lam for s in self.states)),
            float(self.u_vector().min()), float(self.u_vector().max()), self.done,
        )
        self.reports.append(rep)
        return rep

    def _audit(self, k, gF, gJ, bands, u_before, pwd_used):
        w = self.schema.w
        N, P, Pc = self.N, self.P, self.P_check
        dP0 = float(max(v.dP for v in self.views))
        rec = AuditRecord(
            k,
            float(np.linalg.norm(gJ)), 2 * np.sqrt(N) * Pc * dP0,
            float(np.linalg.norm(gF)), 2 * np.sqrt(N) * Pc * w[-1] * float(pwd_used.max()),
        )
        u_after = self.u_vector()
        if self._prev_bands is not None and np.array_equal(bands, self._prev_bands):
            du = u_after - u_before
            nd = float(np.linalg.norm(du))
            if nd > 0:
                wm = w[bands - 1]
                # gradient differences of the smooth pieces between two iterates
                dJ = 2 * P * float(P @ du)
                dF = 2 * P * wm * float((wm * P) @ du)
                rec.lip_J = float(np.linalg.norm(dJ))
                rec.lip_J_bound = 2 * Pc**2 * nd
                rec.lip_F = float(np.linalg.norm(dF))
                rec.lip_F_bound = 2 * Pc**2 * w[-1] ** 2 * nd
                rec.lip_J_exact_bound = 2 * float(P @ P) * nd
                rec.lip_F_exact_bound = 2 * float((w[-1] * P) @ (w[-1] * P)) * nd
        self._prev_bands = bands.copy()
        self.audit_log.append(rec)

    _prev_bands = None

    def total_shed(self, initial_active: list[np.ndarray]) -> float:
        return float(sum(
            b.base[a0 & ~b.active].sum() for b, a0 in zip(self.banks, initial_active)
        ))
