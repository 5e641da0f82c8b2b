"""Node-level execution of the distributed solvers.

Each node owns one row shard and a replica of the shared iteration state.
Nodes talk only through ``Transport``, an in-memory mailbox that counts
every scalar crossing a link.  Two global-sum primitives sit on top of it:
a star gather/broadcast through node 0, and consensus propagation over a
tree.  The solver loop is the same for both.

Ledger modes: ``exact`` counts what is actually sent; ``table`` counts one
covariance scalar per message and skips the one-off ||y||^2 exchange, which
reproduces the closed-form communication costs.
"""
from __future__ import annotations

import csv
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Sequence, TextIO

import numpy as np

from . import consensus
from .consensus import NetworkGraph
from .mamp import (Coefficients, IterationRecord, MampEngine, MampError, MampState, Trajectory,
                   XiPolicy, _matvec, _rmatvec, memory_term, mse)
from .model import NodeShard, SignalPrior
from .spectral import SpectralStats, draw_probe

logger = logging.getLogger(__name__)

R_HAT = "r_hat"
COVARIANCE = "covariance"
INIT = "init"
LAMBDA = "lambda"


# --- communication accounting --------------------------------------------

@dataclass
class CommsLedger:
    variant: str
    exact: dict[int, dict[str, int]] = field(default_factory=lambda: defaultdict(lambda: defaultdict(int)))
    table: dict[int, dict[str, int]] = field(default_factory=lambda: defaultdict(lambda: defaultdict(int)))

    def record(self, iteration: int, payload: str, exact: int, table: int) -> None:
        self.exact[iteration][payload] += int(exact)
        self.table[iteration][payload] += int(table)

    def iterations(self) -> list[int]:
        return sorted(set(self.exact) | set(self.table))

    def per_iteration(self, mode: str = "exact") -> dict[int, int]:
        src = self.exact if mode == "exact" else self.table
        return {t: sum(src[t].values()) for t in self.iterations()}

    def by_payload(self, mode: str = "exact") -> dict[str, int]:
        src = self.exact if mode == "exact" else self.table
        out: dict[str, int] = defaultdict(int)
        for t in src:
            for k, v in src[t].items():
                out[k] += v
        return dict(out)

    def total(self, mode: str = "exact") -> int:
        return sum(self.per_iteration(mode).values())

    def write_csv(self, path) -> None:
        ex, tb = self.per_iteration("exact"), self.per_iteration("table")
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["iter", "scalars_sent_exact", "scalars_sent_table"])
            for t in self.iterations():
                w.writerow([t, ex.get(t, 0), tb.get(t, 0)])


def table_dmamp(T: int, N: int, K: int) -> int:
    return 2 * T * (N + 1) * (K - 1)


def table_fdmamp(T: int, Dprime: int, N: int, K: int) -> int:
    return 2 * T * Dprime * (N + 1) * (K - 1)


def table_lambda_central(T: int, K: int, M: int, N: int) -> int:
    """T odd/even step pairs through a star."""
    if M % K:
        raise ValueError("closed form assumes equal shards")
    return T * (K - 1) * (2 * N + M + M // K)


def table_lambda_decentralized(T: int, Dprime: int, K: int, M: int, N: int) -> int:
    return 2 * T * Dprime * (K - 1) * (M + N)


class Transport:
    """Lossless in-order mailboxes; every ``send`` is charged to the ledger."""

    def __init__(self, ledger: CommsLedger, trace: TextIO | None = None):
        self.ledger = ledger
        self.trace = trace
        self.iteration = 0
        self._boxes: dict[int, list[tuple[int, np.ndarray]]] = defaultdict(list)

    def send(self, src: int, dst: int, payload: np.ndarray, kind: str, table: int) -> None:
        if src == dst:
            raise ValueError("a node does not message itself")
        self._boxes[dst].append((src, payload))
        self.ledger.record(self.iteration, kind, np.size(payload), table)
        if self.trace is not None:
            self.trace.write(json.dumps({"iter": self.iteration, "src": src, "dst": dst,
                                         "kind": kind, "size": int(np.size(payload))}) + "\n")

    def receive(self, dst: int) -> dict[int, np.ndarray]:
        msgs = self._boxes.pop(dst, [])
        return dict(msgs)


# --- global sums -------------------------------------------------------------

GlobalSum = Callable[[list[np.ndarray], str, int], list[np.ndarray]]


def star_sum(net: Transport, graph: NetworkGraph, center: int = 0) -> GlobalSum:
    """Gather at the center, add in ascending node id, broadcast back."""
    if not graph.is_star(center):
        raise ValueError("central aggregation needs a star centered on the aggregator")

    def run(parts: list[np.ndarray], kind: str, table: int) -> list[np.ndarray]:
        for k in range(graph.K):
            if k != center:
                net.send(k, center, parts[k], kind, table)
        inbox = net.receive(center)
        inbox[center] = parts[center]
        total = inbox[0]
        for k in range(1, graph.K):
            total = total + inbox[k]
        for k in range(graph.K):
            if k != center:
                net.send(center, k, total, kind, table)
        out = []
        for k in range(graph.K):
            out.append(total if k == center else net.receive(k)[center])
        return out

    return run


def consensus_sum(net: Transport, graph: NetworkGraph, rounds: int) -> GlobalSum:
    """K times the consensus-propagation average after ``rounds`` rounds."""
    if rounds < 1:
        raise ValueError("D' must be >= 1")

    def run(parts: list[np.ndarray], kind: str, table: int) -> list[np.ndarray]:
        x = np.stack([np.atleast_1d(p) for p in parts])
        state = consensus.ConsensusState.empty(x)
        for _ in range(rounds):
            state = consensus.cp_round(graph, state, x)
            for (k, j), omega in state.omega.items():
                net.send(k, j, omega, kind, table)
            for k in range(graph.K):
                net.receive(k)
        est = graph.K * state.omega_hat
        return [est[k] if np.ndim(parts[k]) else est[k, 0] for k in range(graph.K)]

    return run


# --- node-local operations ---------------------------------------------------

@dataclass
class NodeState:
    shard: NodeShard
    z_hat_k: np.ndarray
    r_hat_prev: np.ndarray
    residuals: list[np.ndarray] = field(default_factory=list)
    replica: MampState | None = None

    @classmethod
    def start(cls, shard: NodeShard) -> "NodeState":
        M_k, N = shard.A_k.shape
        return cls(shard, np.zeros(M_k, dtype=complex), np.zeros(N, dtype=complex))


def node_local_mle(node: NodeState, c: Coefficients, lambda_dagger: float, x_t: np.ndarray,
                   r_hat_prev: np.ndarray) -> np.ndarray:
    """z_k <- theta lambda_dagger z_k + xi y_k - A_k(theta r_hat_{t-1} + xi x_t); returns A_k^H z_k."""
    A_k, y_k = node.shard.A_k, node.shard.y_k
    node.z_hat_k = (c.theta * lambda_dagger * node.z_hat_k + c.xi * y_k
                    - _matvec(A_k, c.theta * r_hat_prev + c.xi * x_t))
    return _rmatvec(A_k, node.z_hat_k)


def global_r(r_hat_parts: Sequence[np.ndarray], c: Coefficients,
             x_window: Sequence[np.ndarray]) -> np.ndarray:
    """(sum_k r_hat_k + sum_i p_i x_i) / eps, parts added in node order."""
    if c.eps == 0:
        raise MampError(f"epsilon_{c.t} = 0")
    total = r_hat_parts[0]
    for part in r_hat_parts[1:]:
        total = total + part
    return (total + memory_term(c.p, x_window)) / c.eps


def local_errors(node: NodeState, x_hat: np.ndarray, x_t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    A_k, y_k = node.shard.A_k, node.shard.y_k
    return y_k - _matvec(A_k, x_hat), y_k - _matvec(A_k, x_t)


def local_covariance_terms(h_hat: np.ndarray, past: Sequence[np.ndarray]) -> np.ndarray:
    """[|h_hat|^2, h_hat^H h_j ...]: the only quantities a node contributes to V."""
    return np.array([np.vdot(h_hat, h_hat)] + [np.vdot(h_hat, h) for h in past], dtype=complex)


def global_covariance(error_parts: Sequence[np.ndarray], delta: float, sigma2: float, w0: float,
                      N: int) -> tuple[float, np.ndarray]:
    """Sum the per-node terms and convert them to covariance entries.

    Returns (v_new_new, row) with row[j] = v_{new, j}; the upper triangle is
    the conjugate of ``row``.
    """
    total = error_parts[0]
    for part in error_parts[1:]:
        total = total + part
    v = (total / N - delta * sigma2) / w0
    return float(v[0].real), v[1:]


# --- solver loop -------------------------------------------------------------

def _run_distributed(variant: str, shards: Sequence[NodeShard], gsum: GlobalSum, net: Transport,
                     prior: SignalPrior, stats: SpectralStats, sigma2: float, T: int, L: int,
                     xi_policy: XiPolicy | None, x_true: np.ndarray | None) -> Trajectory:
    if T < 1:
        raise ValueError("T must be >= 1")
    K = len(shards)
    N = stats.N
    nodes = [NodeState.start(sh) for sh in shards]
    engines = [MampEngine(prior, stats, sigma2, L, xi_policy) for _ in range(K)]
    tr = Trajectory(variant)

    net.iteration = 0
    y_sq = gsum([np.array([np.vdot(nd.shard.y_k, nd.shard.y_k)]) for nd in nodes], INIT, 0)
    for nd, eng, s in zip(nodes, engines, y_sq):
        nd.replica = eng.new_state(float(np.real(s[0])))

    for t in range(1, T + 1):
        net.iteration = t
        coeffs = [eng.coefficients(nd.replica) for nd, eng in zip(nodes, engines)]
        parts = []
        for nd, c in zip(nodes, coeffs):
            x_t = nd.replica.estimates[-1]
            nd.residuals.append(nd.shard.y_k - _matvec(nd.shard.A_k, x_t))
            r_hat_k = node_local_mle(nd, c, stats.lambda_dagger, x_t, nd.r_hat_prev)
            ph = memory_term(c.p, nd.residuals)
            parts.append(np.concatenate([r_hat_k, [np.vdot(ph, ph)]]))
        sums = gsum(parts, R_HAT, N)

        outs = []
        for nd, eng, c, s in zip(nodes, engines, coeffs, sums):
            r_hat = s[:N]
            r, v_in = eng.linear_output(nd.replica, c, r_hat, float(s[N].real))
            nd.r_hat_prev = r_hat
            outs.append((eng.denoise(r, v_in), v_in))

        cov_parts = []
        for nd, eng, (d, _) in zip(nodes, engines, outs):
            h_hat = nd.shard.y_k - _matvec(nd.shard.A_k, d.x_orth)
            cov_parts.append(local_covariance_terms(h_hat, [nd.residuals[j] for j in eng.window(nd.replica)]))
        cov_sums = gsum(cov_parts, COVARIANCE, 1)

        results = []
        for nd, eng, (d, _), s in zip(nodes, engines, outs, cov_sums):
            results.append(eng.damp(nd.replica, d.x_orth, list(s[1:]), float(s[0].real)))

        d0, v0 = outs[0]
        err = float(np.mean([mse(d.x_post, x_true) for d, _ in outs])) if x_true is not None else float("nan")
        tr.records.append(IterationRecord(t, err, d0.v_post, coeffs[0].theta, coeffs[0].eps,
                                          len(results[0].zeta) - results[0].dropped, v0, results[0].v_bar))
        tr.x_hat = d0.x_post
        if not all(np.all(np.isfinite(nd.replica.estimates[-1])) for nd in nodes):
            logger.warning("%s: non-finite estimate at iteration %d; stopping", variant, t)
            tr.diverged = True
            for t_rest in range(t + 1, T + 1):
                tr.records.append(IterationRecord(t_rest, float("inf"), float("nan"), float("nan"),
                                                  float("nan"), 0))
            break

    tr.x_next = nodes[0].replica.estimates[-1]
    tr.extras = {"nodes": nodes}
    return tr


def run_dmamp(shards: Sequence[NodeShard], graph: NetworkGraph, prior: SignalPrior,
              stats: SpectralStats, T: int, L: int = 3, *, sigma2: float,
              x_true: np.ndarray | None = None, xi_policy: XiPolicy | None = None,
              trace: TextIO | None = None) -> tuple[Trajectory, CommsLedger]:
    """Central-aggregator variant; node 0 is the center and also holds a shard."""
    if graph.K != len(shards):
        raise ValueError("graph size does not match the number of shards")
    ledger = CommsLedger("dmamp")
    net = Transport(ledger, trace)
    tr = _run_distributed("dmamp", shards, star_sum(net, graph), net, prior, stats, sigma2, T, L,
                          xi_policy, x_true)
    return tr, ledger


def run_fdmamp(shards: Sequence[NodeShard], graph: NetworkGraph, prior: SignalPrior,
               stats: SpectralStats, T: int, L: int = 3, Dprime: int | None = None, *,
               sigma2: float, x_true: np.ndarray | None = None,
               xi_policy: XiPolicy | None = None,
               trace: TextIO | None = None) -> tuple[Trajectory, CommsLedger]:
    """Decentralized variant; every global sum takes ``Dprime`` consensus rounds."""
    if graph.K != len(shards):
        raise ValueError("graph size does not match the number of shards")
    Dprime = graph.diameter if Dprime is None else Dprime
    if graph.K > 1 and Dprime < graph.diameter:
        logger.info("D'=%d below the diameter %d: global sums will be approximate", Dprime, graph.diameter)
    ledger = CommsLedger("fdmamp")
    net = Transport(ledger, trace)
    gsum = consensus_sum(net, graph, max(Dprime, 1))
    tr = _run_distributed("fdmamp", shards, gsum, net, prior, stats, sigma2, T, L, xi_policy, x_true)
    return tr, ledger


# --- distributed moment recursion ------------------------------------------

def distributed_lambda(shards: Sequence[NodeShard], graph: NetworkGraph, tau_max: int, seed=None,
                       mode: str = "central", Dprime: int | None = None,
                       s0: np.ndarray | None = None) -> tuple[np.ndarray, CommsLedger]:
    """Probe recursion run through the transport.

    Odd steps produce the M-vector A s, one block per node; even steps add
    the local A_k^H s_k.  ``central`` routes both through node 0;
    ``decentralized`` runs consensus on the zero-padded M-vector and on the
    N-vector sum.  Returns node 0's moment estimates.
    """
    if graph.K != len(shards):
        raise ValueError("graph size does not match the number of shards")
    K = graph.K
    N = shards[0].A_k.shape[1]
    sizes = [sh.M_k for sh in shards]
    M = sum(sizes)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    ledger = CommsLedger(f"lambda-{mode}")
    net = Transport(ledger)
    if mode == "central":
        if not graph.is_star(0):
            raise ValueError("central mode needs a star centered on node 0")
    elif mode == "decentralized":
        Dprime = graph.diameter if Dprime is None else Dprime
        gsum = consensus_sum(net, graph, max(Dprime, 1))
    else:
        raise ValueError(f"unknown mode {mode!r}")

    s = [draw_probe(N, seed) if s0 is None else s0] * K
    blocks: list[np.ndarray] = []
    out = np.empty(tau_max)
    for t in range(1, tau_max + 1):
        net.iteration = (t + 1) // 2
        if t % 2:
            blocks = [sh.A_k @ s[k] for k, sh in enumerate(shards)]
            if mode == "central":
                for k in range(1, K):
                    net.send(k, 0, blocks[k], LAMBDA, M // K)
                inbox = net.receive(0)
                inbox[0] = blocks[0]
                full = np.concatenate([inbox[k] for k in range(K)])
                for k in range(1, K):
                    net.send(0, k, full, LAMBDA, M)
                    net.receive(k)
                out[t - 1] = np.vdot(full, full).real
            else:
                padded = []
                for k in range(K):
                    v = np.zeros(M, dtype=complex)
                    v[offsets[k]:offsets[k + 1]] = blocks[k]
                    padded.append(v)
                full = gsum(padded, LAMBDA, M)[0]
                out[t - 1] = np.vdot(full, full).real
        else:
            parts = [sh.A_k.conj().T @ b for sh, b in zip(shards, blocks)]
            if mode == "central":
                s = star_sum(net, graph)(parts, LAMBDA, N)
            else:
                s = gsum(parts, LAMBDA, N)
            out[t - 1] = np.vdot(s[0], s[0]).real
    return out, ledger
