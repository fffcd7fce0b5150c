"""
Average consensus over the communication graph.

Agents repeatedly replace their value with a weighted average of their own
and their neighbours' values.  With a doubly stochastic weight matrix the
network-wide sum is conserved, so every agent converges to the mean, and
``N * mean`` recovers totals such as the system load or deficit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import networkx as nx


class TopologyError(ValueError):
    pass


def metropolis_matrix(graph: nx.Graph) -> np.ndarray:
    """Metropolis weights ``a_ij = 1/(max(d_i, d_j) + 1)``, rows in sorted node order."""
    if graph.number_of_nodes() == 0:
        raise TopologyError("empty graph")
    if graph.is_directed():
        raise TopologyError("graph must be undirected")
    if not nx.is_connected(graph):
        raise TopologyError("graph is not connected")
    nodes = sorted(graph.nodes)
    pos = {n: k for k, n in enumerate(nodes)}
    N = len(nodes)
    A = np.zeros((N, N))
    for i, j in graph.edges:
        if i == j:
            continue
        a = 1.0 / (max(graph.degree[i], graph.degree[j]) + 1)
        A[pos[i], pos[j]] = a
        A[pos[j], pos[i]] = a
    A[np.diag_indices(N)] = 1.0 - A.sum(axis=1)
    return A


def consensus_step(x, A: np.ndarray) -> np.ndarray:
    x = np.asarray(x, float)
    if x.shape[0] != A.shape[0]:
        raise ValueError("state length does not match the weight matrix")
    return A @ x


def coordination_error(x, x_star) -> float:
    """Root-mean-square deviation of agent values from the reference."""
    x = np.asarray(x, float)
    return float(np.sqrt(np.mean((x - x_star) ** 2)))


def relative_disagreement(x: np.ndarray) -> float:
    """Worst spread ``(max - min) / |mean|`` over the columns of ``x``."""
    x = np.atleast_2d(np.asarray(x, float).T).T
    spread = x.max(axis=0) - x.min(axis=0)
    scale = np.abs(x.mean(axis=0))
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(scale > 0, spread / np.where(scale > 0, scale, 1.0), spread)
    return float(rel.max()) if rel.size else 0.0


class LosslessTransport:
    """Ideal exchange: every agent sees every neighbour's current value."""

    def __init__(self, A: np.ndarray, t_one: float = 0.0):
        self.A = np.asarray(A, float)
        self.t_one = t_one

    def consensus_round(self, x: np.ndarray, k: int) -> np.ndarray:
        return self.A @ x


@dataclass
class GIDResult:
    estimates: np.ndarray
    X: np.ndarray
    T_gi: float
    iters: int
    converged: bool
    history: list = field(default_factory=list, repr=False)


def run_gid(x0, transport, tol: float = 1e-3, max_iters: int = 1000, keep_history=False,
            monitor=None) -> GIDResult:
    """Run consensus until the relative spread of the monitored quantities is below ``tol``.

    ``x0`` has one row per agent and one column per quantity.  ``transport``
    provides ``consensus_round(x, k)`` and ``t_one``.  ``monitor`` selects the
    columns used by the stopping test (all of them by default).  The result
    holds the per-agent estimates of the totals (``N * x``) and their
    average ``X``.
    """
    x = np.asarray(x0, float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    N = x.shape[0]
    hist = [x.copy()] if keep_history else []
    cols = slice(None) if monitor is None else list(np.atleast_1d(monitor))
    k = 0
    converged = relative_disagreement(x[:, cols]) < tol
    while not converged and k < max_iters:
        x = transport.consensus_round(x, k)
        k += 1
        if keep_history:
            hist.append(x.copy())
        converged = relative_disagreement(x[:, cols]) < tol
    est = N * x
    X = est.mean(axis=0)
    if squeeze:
        est, X = est[:, 0], X[0]
    return GIDResult(est, X, k * transport.t_one, k, converged, hist)
