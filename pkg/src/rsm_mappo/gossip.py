"""Synchronous peer-to-peer exchange of actor parameters.

All rounds are barriers: every transfer in a round is served from a frozen
snapshot of the pre-round actor parameters, so the order in which agents
are processed cannot change any payload. Critics never leave their agent.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass

import numpy as np

from . import mixture
from .errors import ConfigError
from .ledger import CommLedger

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Topology:
    neighbors: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        nb = tuple(tuple(sorted(set(int(j) for j in row))) for row in self.neighbors)
        object.__setattr__(self, "neighbors", nb)
        for i, row in enumerate(nb):
            if i in row:
                raise ConfigError(f"agent {i} lists itself as a neighbour")
            for j in row:
                if not 0 <= j < len(nb):
                    raise ConfigError(f"agent {i} has unknown neighbour {j}")
                if i not in nb[j]:
                    raise ConfigError(f"adjacency is not symmetric between {i} and {j}")

    @property
    def n(self) -> int:
        return len(self.neighbors)

    @property
    def min_degree(self) -> int:
        return min(len(row) for row in self.neighbors)

    def require_degree(self, P: int) -> None:
        for i, row in enumerate(self.neighbors):
            if len(row) < P:
                raise ConfigError(f"agent {i} has {len(row)} neighbours, fewer than P={P}")

    @classmethod
    def complete(cls, n: int) -> "Topology":
        return cls(tuple(tuple(j for j in range(n) if j != i) for i in range(n)))

    @classmethod
    def ring(cls, n: int, hops: int = 2) -> "Topology":
        """Each agent linked to the ``hops`` nearest agents on either side."""
        rows = []
        for i in range(n):
            rows.append({(i + h) % n for h in range(-hops, hops + 1) if h} - {i})
        return cls(tuple(tuple(r) for r in rows))

    @classmethod
    def random_geometric(cls, n: int, radius: float, seed) -> "Topology":
        pts = np.random.default_rng(seed).uniform(size=(n, 2))
        dist = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
        return cls(tuple(tuple(np.flatnonzero((dist[i] <= radius) & (np.arange(n) != i)))
                         for i in range(n)))

    @classmethod
    def build(cls, kind: str, n: int, radius: float = 0.5, hops: int = 2, seed=0) -> "Topology":
        if kind == "complete":
            return cls.complete(n)
        if kind == "ring":
            return cls.ring(n, hops)
        if kind == "geometric":
            return cls.random_geometric(n, radius, seed)
        raise ConfigError(f"unknown topology {kind!r}")


@dataclass(frozen=True)
class SegmentRequest:
    requester: int
    P: int
    target: int
    p: int


@dataclass(frozen=True)
class SegmentResponse:
    request: SegmentRequest
    segment: mixture.Segment


def select_targets(neighbors, P: int, rng) -> list[int]:
    neighbors = list(neighbors)
    if P > len(neighbors):
        raise ConfigError(f"cannot pick {P} distinct targets from {len(neighbors)} neighbours")
    return [int(j) for j in rng.choice(neighbors, size=P, replace=False)]


def handle_request(request: SegmentRequest, responder_theta) -> SegmentResponse:
    if not 1 <= request.p <= request.P:
        raise ValueError(f"segment index {request.p} outside 1..{request.P}")
    a, b = mixture.segment_bounds(len(responder_theta), request.P)[request.p - 1]
    seg = mixture.Segment(request.target, request.P, request.p,
                          np.array(responder_theta[a:b], dtype=np.float64))
    return SegmentResponse(request, seg)


def _checksum(theta) -> str:
    return hashlib.sha256(np.ascontiguousarray(theta, dtype="<f8").tobytes()).hexdigest()


class SegmentExchange:
    """Loss-free in-process transport serving requests from a snapshot."""

    def __init__(self, snapshot, topology: Topology, ledger: CommLedger | None = None):
        self.snapshot = [np.array(t, dtype=np.float64) for t in snapshot]
        self.topology = topology
        self.ledger = ledger
        self.sent = 0
        self.answered = 0
        self.checksums = [_checksum(t) for t in self.snapshot]

    def request(self, req: SegmentRequest) -> SegmentResponse:
        if req.target not in self.topology.neighbors[req.requester]:
            raise ValueError(f"agent {req.target} is not a neighbour of {req.requester}")
        if len(self.snapshot[req.target]) != len(self.snapshot[req.requester]):
            raise ValueError("agents hold actors of different sizes")
        self.sent += 1
        resp = handle_request(req, self.snapshot[req.target])
        self.answered += 1
        if self.ledger is not None:
            self.ledger.record_segment(len(resp.segment.values))
        return resp

    def snapshot_intact(self) -> bool:
        return [_checksum(t) for t in self.snapshot] == self.checksums


def build_replicas(i: int, kappa: int, P: int, exchange: SegmentExchange, rng) -> list:
    """``kappa`` replicas for agent ``i``, each from a fresh draw of P neighbours."""
    neighbors = exchange.topology.neighbors[i]
    replicas = []
    for _ in range(kappa):
        targets = select_targets(neighbors, P, rng)
        responses = [exchange.request(SegmentRequest(i, P, j, p))
                     for p, j in enumerate(targets, start=1)]
        replicas.append(mixture.reconstruct([r.segment for r in responses]))
    return replicas


@dataclass
class MixSettings:
    P: int = 4
    kappa: int = 2
    M: int = 200
    K: int = 50
    gamma: float = 0.9
    alpha_fraction: float = 0.9
    mix_mode: str = "all-positive"
    sequential: bool = True


def _exchange_all(agents, topology, settings, gossip_rngs, ledger):
    topology.require_degree(settings.P)
    exchange = SegmentExchange([a.theta for a in agents], topology, ledger)
    replicas = [build_replicas(i, settings.kappa, settings.P, exchange, gossip_rngs[i])
                for i in range(len(agents))]
    assert exchange.sent == exchange.answered
    return exchange, replicas


def _set_actor(agent, theta):
    agent.theta = theta
    agent.theta_old = theta.copy()


def round_rsm(agents, buffers, topology: Topology, policy, settings: MixSettings,
              gossip_rngs, mix_rngs, ledger: CommLedger):
    """One regulated segment-mixture round for every agent; returns per-agent reports."""
    _, replicas = _exchange_all(agents, topology, settings, gossip_rngs, ledger)
    all_reports = []
    for i, agent in enumerate(agents):
        theta, reports = mixture.regulated_mix_round(
            agent.theta, replicas[i], buffers[i], policy, M=settings.M, K=settings.K,
            gamma=settings.gamma, rng=mix_rngs[i], mode=settings.mix_mode,
            alpha_fraction=settings.alpha_fraction, sequential=settings.sequential)
        _set_actor(agent, theta)
        ledger.rho_total += len(reports)
        ledger.rho_ef += sum(r.accepted for r in reports)
        ledger.skipped += int(any(r.skipped for r in reports))
        all_reports.append(reports)
    ledger.rounds += 1
    return all_reports


def round_average_mixture(agents, topology: Topology, settings: MixSettings, gossip_rngs,
                          ledger: CommLedger):
    """Segment transport as in RSM, but every replica is averaged in unconditionally."""
    _, replicas = _exchange_all(agents, topology, settings, gossip_rngs, ledger)
    alpha = settings.kappa / (settings.kappa + 1.0)
    for i, agent in enumerate(agents):
        if replicas[i]:
            ref = np.mean([r.theta for r in replicas[i]], axis=0)
            _set_actor(agent, mixture.mix(agent.theta, ref, alpha))
        ledger.rho_total += len(replicas[i])
        ledger.rho_ef += len(replicas[i])
    ledger.rounds += 1
    return replicas


def round_average(agents, topology: Topology, ledger: CommLedger | None = None):
    """Neighbour-mean mixing with alpha = 1 - 1/|neighbours| over full parameter vectors."""
    snapshot = [a.theta.copy() for a in agents]
    for i, agent in enumerate(agents):
        nb = topology.neighbors[i]
        if not nb:
            raise ConfigError(f"agent {i} has no neighbours")
        if len(nb) == 1:
            log.warning("agent %d has a single neighbour: alpha = 0, no mixing", i)
        ref = np.mean([snapshot[j] for j in nb], axis=0)
        _set_actor(agent, mixture.mix(snapshot[i], ref, 1.0 - 1.0 / len(nb)))
        if ledger is not None:
            ledger.record_full_vectors(len(nb))
    if ledger is not None:
        ledger.rounds += 1


def round_central(agents, ledger: CommLedger | None = None):
    """Every actor replaced by the global mean (upload plus download per agent)."""
    mean = np.mean([a.theta for a in agents], axis=0)
    for agent in agents:
        _set_actor(agent, mean.copy())
    if ledger is not None:
        ledger.record_full_vectors(2 * len(agents))
        ledger.rounds += 1
