"""
Stand-alone benchmarks of global information discovery.

``gid_bench`` runs one discovery of the total load over a configured
protocol and loss rate; ``compare_protocols`` sweeps protocols, loss rates
and seeds and reports one row per (protocol, loss rate), averaged over seeds.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .config import ScenarioConfig
from .consensus import metropolis_matrix, run_gid
from .engine import make_network
from .mmst import Channel

COMPARE_PROTOCOLS = ("mmst", "round_robin", "deterministic")
COMPARE_LOSS = (0.0, 0.01, 0.05, 0.1)


@dataclass
class BenchResult:
    protocol: str
    loss_rate: float
    seed: int
    T_gi: float
    iterations: int
    converged: bool
    e: float
    e_max: float
    slots: int
    t_one: float


@dataclass
class CompareRow:
    protocol: str
    r: float
    T_gi: float
    e: float
    e_worst: float
    iterations: float
    slots: int
    seeds: int


def gid_bench(cfg: ScenarioConfig, seed: int | None = None, tol: float = 1e-3,
              max_iters: int | None = None) -> BenchResult:
    """Discover the system load from per-bus maxima.

    ``e`` is the RMS error of the agents' estimates relative to the true
    total and ``e_max`` the worst single agent, both as fractions.
    """
    topo = cfg.build_topology()
    graph = topo.comm_graph()
    A = metropolis_matrix(graph)
    x0 = np.array([topo.bank_at(b).p_max for b in sorted(topo.buses)])
    p = cfg.protocol
    seed = cfg.seed if seed is None else seed
    net = make_network(p.name, graph, A, Channel(p.loss_rate, seed, p.slot_duration),
                       p.slots, p.history_depth)
    res = run_gid(x0, net, tol, max_iters or cfg.gid.max_iters)
    truth = float(x0.sum())
    err = np.abs(res.estimates - truth) / truth
    return BenchResult(
        protocol=p.name, loss_rate=p.loss_rate, seed=seed, T_gi=res.T_gi,
        iterations=res.iters, converged=bool(res.converged),
        e=float(np.sqrt(np.mean(err**2))), e_max=float(err.max()),
        slots=int(getattr(net, "n_slots", 0) or round(net.t_one / p.slot_duration)),
        t_one=net.t_one,
    )


def _bench_job(args):
    cfg, seed, tol = args
    return gid_bench(cfg, seed, tol)


def compare_protocols(configs, seeds=range(20), tol: float = 1e-3, jobs: int = 1) -> list[CompareRow]:
    """One row per config, statistics taken over ``seeds``.

    ``T_gi``, ``e`` and ``iterations`` are seed means; ``e_worst`` is the
    error of the worst seed (``e`` maximised, not averaged).
    """
    configs = list(configs)
    seeds = list(seeds)
    tasks = [(cfg, s, tol) for cfg in configs for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_bench_job, tasks))
    else:
        results = [_bench_job(t) for t in tasks]
    rows = []
    for k, cfg in enumerate(configs):
        chunk = results[k * len(seeds) : (k + 1) * len(seeds)]
        rows.append(CompareRow(
            protocol=cfg.protocol.name, r=cfg.protocol.loss_rate,
            T_gi=float(np.mean([b.T_gi for b in chunk])),
            e=float(np.mean([b.e for b in chunk])),
            e_worst=float(max(b.e for b in chunk)),
            iterations=float(np.mean([b.iterations for b in chunk])),
            slots=chunk[0].slots, seeds=len(chunk),
        ))
    return rows


def sweep_configs(cfg: ScenarioConfig, protocols=COMPARE_PROTOCOLS, loss_rates=COMPARE_LOSS):
    return [
        cfg.replace(**{"protocol.name": p, "protocol.loss_rate": r})
        for p in protocols for r in loss_rates
    ]


def format_table(rows: list[CompareRow]) -> str:
    head = f"{'protocol':<14}{'r':>6}{'S':>4}{'T_gi [s]':>10}{'iters':>8}{'e [%]':>10}{'e_worst [%]':>13}"
    lines = [head, "-" * len(head)]
    for row in rows:
        lines.append(
            f"{row.protocol:<14}{row.r * 100:>5.0f}%{row.slots:>4}{row.T_gi:>10.3f}"
            f"{row.iterations:>8.1f}{row.e * 100:>10.4f}{row.e_worst * 100:>13.4f}"
        )
    return "\n".join(lines) + "\n"
