"""Segmented reassembly of policy parameters and advantage-regulated mixing.

A replica is only mixed into the local policy when its estimated policy
advantage is positive, and then with a mixing coefficient kept below

    sqrt( 2 * sqrt(A / C) / ((r - theta)^T G (r - theta)) ),
    C = 2 * eps * gamma / (1 - gamma)^2,

where ``A`` is the importance-weighted advantage estimate of replica ``r``
over the current policy, ``eps`` the largest absolute TD error in the
buffer and ``G`` the empirical Fisher information of the current policy.
The policy object passed in only needs ``log_prob(theta, S, A)`` and
``score(theta, S, A)``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .ppo import LOG_RATIO_CLAMP

Q_FLOOR = 1e-12
MIX_MODES = ("all-positive", "best-only")


@dataclass(frozen=True)
class Segment:
    owner: int | None
    P: int
    p: int            # 1-based
    values: np.ndarray


@dataclass
class Replica:
    theta: np.ndarray
    provenance: dict = field(default_factory=dict)   # p -> owner


@dataclass
class MixReport:
    replica_index: int
    provenance: dict
    advantage_estimate: float = 0.0
    epsilon_hat: float = 0.0
    C: float = 0.0
    quad_form: float = float("nan")
    alpha_bound: float = float("nan")
    alpha_used: float = 0.0
    accepted: bool = False
    skipped: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["provenance"] = {str(k): v for k, v in self.provenance.items()}
        return d


def segment_bounds(upsilon: int, P: int) -> list[tuple[int, int]]:
    """The first (upsilon mod P) segments are one entry longer than the rest."""
    if not 1 <= P <= upsilon:
        raise ValueError(f"need 1 <= P <= {upsilon}, got P={P}")
    base, extra = divmod(upsilon, P)
    bounds, start = [], 0
    for p in range(P):
        stop = start + base + (1 if p < extra else 0)
        bounds.append((start, stop))
        start = stop
    return bounds


def partition(theta, P: int, owner: int | None = None) -> list[Segment]:
    theta = np.asarray(theta, dtype=np.float64)
    return [Segment(owner, P, p + 1, theta[a:b].copy())
            for p, (a, b) in enumerate(segment_bounds(len(theta), P))]


def reconstruct(segments) -> Replica:
    segments = sorted(segments, key=lambda s: s.p)
    if not segments:
        raise ValueError("no segments to reconstruct from")
    P = segments[0].P
    if any(s.P != P for s in segments):
        raise ValueError("segments disagree on the total segment count")
    if [s.p for s in segments] != list(range(1, P + 1)):
        raise ValueError(f"need exactly one segment per index 1..{P}, got {[s.p for s in segments]}")
    upsilon = sum(len(s.values) for s in segments)
    for s, (a, b) in zip(segments, segment_bounds(upsilon, P)):
        if len(s.values) != b - a:
            raise ValueError(f"segment {s.p} has {len(s.values)} values, expected {b - a}")
    theta = np.concatenate([s.values for s in segments])
    return Replica(theta, {s.p: s.owner for s in segments})


def _clamped_ratio(logp, logp_old):
    logp, logp_old = np.asarray(logp, dtype=np.float64), np.asarray(logp_old, dtype=np.float64)
    return np.exp(np.clip(logp - logp_old, -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP))


def policy_advantage_estimate(logp_replica, logp_current, logp_old, deltas) -> float:
    """Mean of ((pi_r - pi) / pi_old) * delta over behaviour-policy samples."""
    gain = _clamped_ratio(logp_replica, logp_old) - _clamped_ratio(logp_current, logp_old)
    return float(np.mean(gain * np.asarray(deltas, dtype=np.float64)))


def fim_quadratic_form(scores):
    """Matrix-free d -> d^T G d for G = mean of score outer products."""
    scores = np.asarray(scores, dtype=np.float64)

    def q(d):
        proj = scores @ np.asarray(d, dtype=np.float64)
        return float(np.mean(proj * proj))

    return q


def fim_dense(scores) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    return scores.T @ scores / scores.shape[0]


def epsilon_and_C(deltas, gamma: float) -> tuple[float, float]:
    """Buffer surrogate for max |delta| and the penalty constant C."""
    deltas = np.asarray(deltas, dtype=np.float64)
    if deltas.size == 0:
        raise ValueError("need at least one delta")
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"discount factor must lie in (0, 1), got {gamma}")
    eps = float(np.max(np.abs(deltas)))
    return eps, 2.0 * eps * gamma / (1.0 - gamma) ** 2


def alpha_upper_bound(advantage: float, C: float, theta_tilde, theta, q) -> float:
    if not advantage > 0:
        raise ValueError("the bound only exists for a positive policy advantage")
    if not C > 0:
        raise ValueError("C must be positive")
    d = np.asarray(theta_tilde, dtype=np.float64) - np.asarray(theta, dtype=np.float64)
    quad = max(q(d), Q_FLOOR)
    return math.sqrt(2.0 * math.sqrt(advantage / C) / quad)


def mix(theta, theta_tilde, alpha: float) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    theta_tilde = np.asarray(theta_tilde, dtype=np.float64)
    if theta.shape != theta_tilde.shape:
        raise ValueError(f"length mismatch: {theta.shape} vs {theta_tilde.shape}")
    return theta + alpha * (theta_tilde - theta)


@dataclass
class MixBuffer:
    """Behaviour-policy samples with their TD errors under the current critic."""

    states: np.ndarray
    actions: np.ndarray
    logp_old: np.ndarray
    deltas: np.ndarray

    def __len__(self) -> int:
        return len(self.deltas)

    def draw(self, rng, m: int) -> np.ndarray:
        return rng.choice(len(self), size=min(m, len(self)), replace=False)


def _estimate(policy, theta, replica_theta, buf: MixBuffer, idx) -> float:
    S, A = buf.states[idx], buf.actions[idx]
    return policy_advantage_estimate(policy.log_prob(replica_theta, S, A),
                                     policy.log_prob(theta, S, A),
                                     buf.logp_old[idx], buf.deltas[idx])


def _mix_one(policy, theta, rep: Replica, report: MixReport, buf, rng, K, alpha_fraction):
    idx = buf.draw(rng, K)
    q = fim_quadratic_form(policy.score(theta, buf.states[idx], buf.actions[idx]))
    report.quad_form = q(rep.theta - theta)
    report.alpha_bound = alpha_upper_bound(report.advantage_estimate, report.C,
                                           rep.theta, theta, q)
    report.alpha_used = min(alpha_fraction * report.alpha_bound, 1.0)
    report.accepted = True
    return mix(theta, rep.theta, report.alpha_used)


def regulated_mix_round(theta, replicas, buffer: MixBuffer, policy, *, M: int, K: int,
                        gamma: float, rng, mode: str = "all-positive",
                        alpha_fraction: float = 0.9, sequential: bool = True):
    """Mix the replicas whose estimated advantage is positive.

    In ``all-positive`` mode replicas are visited in order; with
    ``sequential`` each is judged against the policy as already mixed by its
    predecessors, otherwise every estimate uses the pre-round policy.
    ``best-only`` mixes only the replica with the largest positive estimate.
    Returns ``(theta_mix, reports)``.
    """
    if mode not in MIX_MODES:
        raise ValueError(f"unknown mixing mode {mode!r}")
    if not 0.0 < alpha_fraction <= 1.0:
        raise ValueError("alpha_fraction must lie in (0, 1]")
    theta = np.asarray(theta, dtype=np.float64).copy()
    reports = [MixReport(u, dict(r.provenance)) for u, r in enumerate(replicas)]
    if not replicas:
        return theta, reports
    eps, C = epsilon_and_C(buffer.deltas, gamma)
    for rep in reports:
        rep.epsilon_hat, rep.C = eps, C
    if eps == 0.0:
        for rep in reports:
            rep.skipped = True
        return theta, reports

    if mode == "best-only":
        for rep, r in zip(reports, replicas):
            rep.advantage_estimate = _estimate(policy, theta, r.theta, buffer,
                                               buffer.draw(rng, M))
        best = max(range(len(reports)), key=lambda u: reports[u].advantage_estimate)
        if reports[best].advantage_estimate > 0:
            theta = _mix_one(policy, theta, replicas[best], reports[best], buffer, rng,
                             K, alpha_fraction)
        return theta, reports

    reference = theta.copy()
    for rep, r in zip(reports, replicas):
        base = theta if sequential else reference
        rep.advantage_estimate = _estimate(policy, base, r.theta, buffer, buffer.draw(rng, M))
        if rep.advantage_estimate > 0:
            theta = _mix_one(policy, theta, r, rep, buffer, rng, K, alpha_fraction)
    return theta, reports
