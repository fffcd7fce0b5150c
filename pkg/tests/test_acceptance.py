"""
Acceptance criteria 1-10.

Each test records one PASS/FAIL line (listed again in the terminal summary)
before asserting, so a failing criterion still reports its measured values.
"""

import hashlib
import time

import numpy as np
import pytest

from conftest import record_criterion
from microshed.bench import compare_protocols, gid_bench, sweep_configs
from microshed.config import bundled_scenario
from microshed.engine import run_scenario
from microshed.grid import (
    LoadBank,
    PrioritySchema,
    select_shedding_set,
    weighted_delta,
    weighted_remaining,
)
from microshed.io import emit_trace
from microshed.mmst import allocate_slots, baseline_schedule
from oracles import best_shedding_set, weighted_kept_oracle, weighted_shed_oracle

DEFICITS = (80.0, 120.0, 160.0, 200.0)
RULES = (1, 2, 3, 4, 5)
W = PrioritySchema((1.0, 2.0, 5.0))


@pytest.fixture(scope="module")
def criterion4_runs():
    """The 20 Case-1 runs shared by criteria 4, 5, 7 and 9."""
    base = bundled_scenario("case1")
    runs = {}
    for d in DEFICITS:
        for rule in RULES:
            cfg = base.replace(**{"fault.deficit": d, "dlss.tau_rule": rule})
            t0 = time.perf_counter()
            res = run_scenario(cfg)
            runs[d, rule] = (res, time.perf_counter() - t0, cfg)
    return runs


def test_criterion_01_slot_counts():
    graphs = {c: bundled_scenario(c).build_topology().comm_graph() for c in ("case1", "case2")}
    t0 = time.perf_counter()
    S1 = allocate_slots(graphs["case1"]).n_slots
    S2 = allocate_slots(graphs["case2"]).n_slots
    dt = (time.perf_counter() - t0) / 2
    base = {c: (baseline_schedule(g, "deterministic").n_slots, baseline_schedule(g, "round_robin").n_slots)
            for c, g in graphs.items()}
    ok = S1 == 4 and S2 == 3 and base["case1"] == (6, 10) and base["case2"] == (6, 10) and dt < 1e-3
    record_criterion(1, ok, f"MMST S={S1}/{S2}, baselines case1={base['case1']} case2={base['case2']}, "
                            f"{dt * 1e3:.3f} ms per allocation")
    assert ok


def test_criterion_02_gid_timing():
    out = []
    ok = True
    t0 = time.perf_counter()
    for case, S, iters_ref in (("case1", 4, 16), ("case2", 3, 19)):
        cfg = bundled_scenario(case)
        b = gid_bench(cfg, seed=0, tol=1e-3)
        lossless = gid_bench(cfg.replace(**{"protocol.name": "lossless"}), tol=1e-3)
        t_one_ok = b.t_one == pytest.approx(S * 0.005) and b.slots == S
        same = lossless.iterations == b.iterations
        within = b.iterations <= 1.25 * iters_ref
        ok &= t_one_ok and same and within
        out.append(f"{case}: t_one={b.t_one * 1e3:.0f} ms, {b.iterations} iterations "
                   f"(limit {1.25 * iters_ref:.2f}), T_gi={b.T_gi:.2f} s")
    dt = time.perf_counter() - t0
    ok &= dt < 1.0
    record_criterion(2, ok, "; ".join(out) + f"; {dt:.2f} s")
    assert ok


def test_criterion_03_loss_resilience():
    parts = []
    ok = True
    t0 = time.perf_counter()
    cfg = bundled_scenario("case1")
    mm = compare_protocols(sweep_configs(cfg, ("mmst",), (0.1,)), range(20))[0]
    base = compare_protocols(sweep_configs(cfg, ("round_robin", "deterministic"), (0.01, 0.05, 0.1)), range(20))
    dt = time.perf_counter() - t0
    ok &= mm.e_worst <= 5e-4
    parts.append(f"MMST r=10% worst e={mm.e_worst * 100:.4f}%")
    worst_base = min(r.e_worst for r in base)
    ok &= worst_base >= 1e-2
    parts.append("baselines worst-seed e " + ", ".join(
        f"{r.protocol[:3]}@{r.r * 100:.0f}%={r.e_worst * 100:.2f}%" for r in base))
    ok &= dt < 10.0
    record_criterion(3, ok, "; ".join(parts) + f"; {dt:.1f} s")
    assert ok


def test_criterion_04_dlss_convergence(criterion4_runs):
    bad = []
    slowest = 0.0
    for (d, rule), (res, dt, cfg) in criterion4_runs.items():
        slowest = max(slowest, dt)
        reps = res.iterations
        last = reps[-1] if reps else None
        eps = (0.02 * 690) ** 2
        good = (
            res.summary["dlss_terminated"]
            and last is not None and last.ND_max ** 2 <= eps
            and all(r.lam_min >= 0 for r in reps)
            and all(0.0 <= r.u_min and r.u_max <= 1.0 for r in reps)
            and dt < 5.0
        )
        if not good:
            bad.append(f"{d:.0f}/{rule}")
    ok = not bad
    record_criterion(4, ok, f"{len(criterion4_runs) - len(bad)}/{len(criterion4_runs)} runs terminate "
                            f"within eps and F tolerance with lambda>=0, u in [0,1]; slowest {slowest:.2f} s"
                            + (f"; failing {bad}" if bad else ""))
    assert ok


def test_criterion_05_shed_trends(criterion4_runs):
    shed = {k: v[0].summary["shed_total"] for k, v in criterion4_runs.items()}
    safety = {k: v[0].summary["safety_fired"] for k, v in criterion4_runs.items()}
    all_le = all(shed[d, r] <= d for d, r in shed)
    band_120 = all(60 <= shed[120.0, r] < 120 for r in RULES)
    s200 = shed[200.0, 1]
    safety_200 = safety[200.0, 1] and s200 >= 180
    # smallest tau (rule 1) leaves the most time for compensation
    order = all(shed[d, 1] < shed[d, 5] for d in (80.0, 120.0))
    ok = all_le and band_120 and safety_200 and order
    rows = "; ".join(f"{d:.0f}: " + "/".join(f"{shed[d, r]:.0f}" for r in RULES) for d in DEFICITS)
    record_criterion(5, ok, f"shed by rule 1..5 [{rows}]; 200 kW rule 1 safety={safety[200.0, 1]}")
    assert ok


def test_criterion_06_delay_monotonicity():
    cfg = bundled_scenario("case2").replace(**{"fault.deficit": 150.0})
    delays = (0.1, 0.2, 0.4, 0.6, 0.8)
    shed = [run_scenario(cfg.replace(**{"dlss.t_ad": t})).summary["shed_total"] for t in delays]
    unit = 2.0 * len(cfg.buses)
    mono = all(b >= a for a, b in zip(shed, shed[1:]))
    final = abs(shed[-1] - 150.0) <= unit
    ok = mono and final
    record_criterion(6, ok, "shed at t_ad " + ", ".join(f"{t * 1e3:.0f} ms={s:.0f}" for t, s in zip(delays, shed))
                            + f"; nondecreasing={mono}; |shed(800)-150|={abs(shed[-1] - 150):.0f} "
                              f"(quantization {unit:.0f} kW)")
    assert ok


def priority_violations(cfg, events) -> int:
    """Replay shed events; count units shed while a lower-priority unit stayed on."""
    topo = cfg.build_topology()
    active = {b: topo.bank_at(b).active.copy() for b in topo.buses}
    grade = {b: topo.bank_at(b).grade for b in topo.buses}
    bad = 0
    by_step: dict = {}
    for ev in events:
        by_step.setdefault((ev.t, ev.bus), []).append(ev)
    for (t, bus), evs in sorted(by_step.items()):
        for ev in evs:
            active[bus][ev.unit] = False
        for ev in evs:
            if np.any(active[bus] & (grade[bus] > ev.grade)):
                bad += 1
    return bad


def test_criterion_07_priority_protection(criterion4_runs):
    limit = (0.3406 + 0.2) * 690
    g1 = 0
    order = 0
    for (d, rule), (res, _, cfg) in criterion4_runs.items():
        if d <= limit:
            g1 += sum(1 for ev in res.trace.events if ev.grade == 1)
            order += priority_violations(cfg, res.trace.events)
    ok = g1 == 0 and order == 0
    record_criterion(7, ok, f"grade-1 units shed: {g1}; grade-order violations: {order} (deficits <= {limit:.0f} kW)")
    assert ok


def test_criterion_08_oracle_equivalence():
    rng = np.random.default_rng(20240601)
    t0 = time.perf_counter()
    mism = {"weighted_delta": 0, "weighted_remaining": 0, "select_shedding_set": 0}
    for _ in range(1000):
        n = int(rng.integers(1, 13))
        grades = rng.integers(1, 4, n)
        powers = rng.integers(1, 6, n).astype(float)
        units = list(zip(powers.tolist(), grades.tolist()))
        P = float(powers.sum())
        rho = np.bincount(grades - 1, weights=powers, minlength=3) / P
        amount = int(rng.integers(0, int(P) + 1))
        if weighted_delta(amount, rho, P, W) != pytest.approx(float(weighted_shed_oracle(units, W.weights, amount)),
                                                             rel=1e-12, abs=1e-12):
            mism["weighted_delta"] += 1
        kept = int(rng.integers(0, int(P) + 1))
        if weighted_remaining(kept / P, rho, P, W) != pytest.approx(
                float(weighted_kept_oracle(units, W.weights, kept)), rel=1e-12, abs=1e-12):
            mism["weighted_remaining"] += 1
        size = float(rng.choice([1.0, 2.0, 2.5]))
        active = rng.random(n) < 0.8
        bank = LoadBank(1, np.full(n, size), grades, active)
        u = float(rng.random())
        got = select_shedding_set(bank, u, W).tolist()
        if got != best_shedding_set(bank.base.tolist(), grades.tolist(), active.tolist(), W.weights, u):
            mism["select_shedding_set"] += 1
    dt = time.perf_counter() - t0
    ok = not any(mism.values()) and dt < 10.0
    record_criterion(8, ok, f"1000 cases, mismatches {mism}, {dt:.1f} s")
    assert ok


def test_criterion_09_bound_audit(criterion4_runs):
    viol: dict = {}
    exact_lip = 0
    worst_ratio = 0.0
    n_rec = 0
    for res, _, _ in criterion4_runs.values():
        for rec in res.audit:
            n_rec += 1
            for v in rec.violations():
                viol[v] = viol.get(v, 0) + 1
            if np.isfinite(rec.lip_J):
                worst_ratio = max(worst_ratio, rec.lip_J / rec.lip_J_bound)
                if rec.lip_J > rec.lip_J_exact_bound * (1 + 1e-9) or rec.lip_F > rec.lip_F_exact_bound * (1 + 1e-9):
                    exact_lip += 1
    ok = not viol
    record_criterion(9, ok, f"{n_rec} audited iterates, violations {viol or 'none'}; "
                            f"worst |dgradJ|/(2 P^2 |du|) = {worst_ratio:.2f}; "
                            f"against 2||P||^2 the Lipschitz checks give {exact_lip} violations")
    assert ok


def test_criterion_10_determinism(tmp_path):
    digests = {}
    for case, extra in (("case1", {"protocol.loss_rate": 0.05, "noise_sigma": 2e-3}),
                        ("case2", {"protocol.loss_rate": 0.1, "dlss.t_ad": 0.2})):
        cfg = bundled_scenario(case).replace(**{"seed": 17, **extra})
        h = []
        for k in range(2):
            p = emit_trace(run_scenario(cfg).trace, tmp_path / f"{case}_{k}.csv")
            h.append(hashlib.sha256(p.read_bytes()).hexdigest())
        digests[case] = h
    ok = all(a == b for a, b in digests.values())
    record_criterion(10, ok, ", ".join(f"{c}: {h[0][:12]} == {h[1][:12]}" for c, h in digests.items()))
    assert ok
