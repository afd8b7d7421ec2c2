"""Single-lane ring road with IDM human drivers and policy-driven CAVs.

Every CAV observes itself and its circular leader/follower::

    [own position / L, own speed / v_de,
     leader headway / L, leader speed / v_de,
     follower headway / L, follower speed / v_de]

where headways are centre-to-centre distances along the ring. All vehicles
share one global reward measuring closeness of the speed vector to the
desired speed vector.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError

log = logging.getLogger(__name__)

OBS_DIM = 6
HUMAN, CAV = "human", "cav"


@dataclass(frozen=True)
class IdmParams:
    v0: float = 10.0
    t_headway: float = 1.0
    s0: float = 2.0
    a_max: float = 1.0
    b_comf: float = 1.5
    delta: float = 4.0

    def __post_init__(self):
        for name in ("v0", "t_headway", "s0", "a_max", "b_comf", "delta"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"IDM parameter {name} must be positive")


@dataclass(frozen=True)
class RoadConfig:
    ring_length: float = 260.0
    n_human: int = 5
    n_cav: int = 9
    dt: float = 0.1
    v_desired: float = 8.0
    max_accel: float = 1.0
    max_decel: float = 1.0
    vehicle_length: float = 5.0
    jitter: float = 0.1
    epoch_steps: int = 1500
    idm: IdmParams = field(default_factory=IdmParams)

    def __post_init__(self):
        if self.ring_length <= 0:
            raise ConfigError("ring_length must be positive")
        if self.n_human < 0 or self.n_cav < 0 or self.n_human + self.n_cav < 2:
            raise ConfigError("need at least two vehicles")
        if self.dt < 0:
            raise ConfigError("dt must be non-negative")
        if self.v_desired <= 0:
            raise ConfigError("desired speed must be positive")
        if not 0 <= self.jitter < 0.5:
            raise ConfigError("jitter must lie in [0, 0.5)")
        if self.epoch_steps <= 0:
            raise ConfigError("epoch_steps must be positive")

    @property
    def n_vehicles(self) -> int:
        return self.n_human + self.n_cav

    @property
    def is_cav(self) -> np.ndarray:
        """Vehicle kinds around the ring; humans are spread as evenly as possible."""
        n = self.n_vehicles
        mask = np.ones(n, dtype=np.uint8)
        for i in range(self.n_human):
            mask[(i * n) // self.n_human] = 0
        return mask

    @property
    def cav_indices(self) -> np.ndarray:
        return np.flatnonzero(self.is_cav).astype(np.int64)


@dataclass
class VehicleState:
    position: float
    speed: float
    kind: str = HUMAN


@dataclass
class RingState:
    positions: np.ndarray
    speeds: np.ndarray
    steps: int = 0
    collided: bool = False

    def copy(self) -> "RingState":
        return RingState(self.positions.copy(), self.speeds.copy(), self.steps, self.collided)

    def vehicle(self, i: int, road: RoadConfig) -> VehicleState:
        kind = CAV if road.is_cav[i] else HUMAN
        return VehicleState(float(self.positions[i]), float(self.speeds[i]), kind)


def idm_acceleration(ego: VehicleState, leader: VehicleState, p: IdmParams,
                     road: RoadConfig | None = None) -> float:
    """IDM acceleration of ``ego`` behind ``leader``, clipped to the road's limits."""
    road = road or RoadConfig(idm=p)
    head = (leader.position - ego.position) % road.ring_length
    s = head - road.vehicle_length
    if s <= 0:
        raise ValueError(f"non-positive gap {s:.3f} m: vehicles have collided")
    v = ego.speed
    dv = v - leader.speed
    s_star = p.s0 + max(0.0, v * p.t_headway + v * dv / (2.0 * math.sqrt(p.a_max * p.b_comf)))
    a = p.a_max * (1.0 - (v / p.v0) ** p.delta - (s_star / s) ** 2)
    return min(max(a, -road.max_decel), road.max_accel)


def global_reward(v_actual, v_desired) -> float:
    v_actual = np.asarray(v_actual, dtype=np.float64)
    v_desired = np.asarray(v_desired, dtype=np.float64)
    norm_de = float(np.linalg.norm(v_desired))
    if norm_de <= 0:
        raise ConfigError("desired velocity vector must be non-zero")
    return max(norm_de - float(np.linalg.norm(v_actual - v_desired)), 0.0) / norm_de


def gaps(state: RingState, road: RoadConfig) -> np.ndarray:
    g, _ = kernels.ring_gaps(state.positions, road.ring_length, road.vehicle_length)
    return g


def detect_collision(state: RingState, road: RoadConfig) -> bool:
    return bool(np.any(gaps(state, road) <= 0.0))


def observe_many(state: RingState, road: RoadConfig, vehicles) -> np.ndarray:
    idx = np.ascontiguousarray(vehicles, dtype=np.int64)
    out = np.empty((len(idx), OBS_DIM), dtype=np.float64)
    kernels.ring_observe(state.positions, state.speeds, idx, road.ring_length,
                         road.v_desired, out)
    return out


def observe(state: RingState, road: RoadConfig, vehicle: int) -> np.ndarray:
    if not 0 <= vehicle < road.n_vehicles:
        raise IndexError(f"vehicle {vehicle} out of range")
    return observe_many(state, road, [vehicle])[0]


def reset(road: RoadConfig, seed) -> RingState:
    """Even spacing plus seeded jitter of up to ``road.jitter`` spacings, all at rest."""
    n = road.n_vehicles
    if n * road.vehicle_length >= road.ring_length:
        raise ConfigError("vehicles do not fit on the ring")
    spacing = road.ring_length / n
    rng = np.random.default_rng(seed)
    offsets = rng.uniform(-road.jitter, road.jitter, size=n) * spacing if road.jitter else np.zeros(n)
    pos = (np.arange(n) * spacing + offsets) % road.ring_length
    return RingState(np.ascontiguousarray(pos), np.zeros(n))


class RingRoadEnv:
    """Stateful wrapper that steps a ring with one action per CAV."""

    def __init__(self, road: RoadConfig):
        self.road = road
        self.is_cav = np.ascontiguousarray(road.is_cav)
        self.cav_idx = road.cav_indices
        self.v_de = np.full(road.n_vehicles, road.v_desired)
        self._actions = np.zeros(road.n_vehicles)
        self.accel = np.zeros(road.n_vehicles)
        self.state: RingState | None = None
        self.trajectory: list | None = None

    @property
    def n_agents(self) -> int:
        return len(self.cav_idx)

    def reset(self, seed) -> np.ndarray:
        self.state = reset(self.road, seed)
        return self.observe()

    def observe(self) -> np.ndarray:
        return observe_many(self.state, self.road, self.cav_idx)

    def step(self, cav_actions):
        """Returns (observations, reward, done, info)."""
        road, st = self.road, self.state
        if st.collided or st.steps >= road.epoch_steps:
            raise RuntimeError("episode is over; call reset()")
        cav_actions = np.asarray(cav_actions, dtype=np.float64).reshape(-1)
        if cav_actions.shape[0] != self.n_agents:
            raise ValueError(f"expected {self.n_agents} CAV actions, got {cav_actions.shape[0]}")
        n_clamped = int(np.count_nonzero(np.abs(cav_actions) > 1.0))
        if n_clamped:
            log.debug("clamping %d out-of-range CAV actions", n_clamped)
        self._actions[self.cav_idx] = cav_actions
        idm = road.idm
        collided = kernels.ring_step(
            st.positions, st.speeds, self.is_cav, self._actions, self.accel,
            road.dt, road.ring_length, road.vehicle_length, idm.v0, idm.t_headway,
            idm.s0, idm.a_max, idm.b_comf, idm.delta, road.max_accel, road.max_decel)
        st.steps += 1
        st.collided = bool(collided)
        reward = 0.0 if st.collided else global_reward(st.speeds, self.v_de)
        done = st.collided or st.steps >= road.epoch_steps
        if self.trajectory is not None:
            self._record(np.clip(cav_actions, -1.0, 1.0), reward)
        return self.observe(), reward, done, {"collision": st.collided, "clamped": n_clamped}

    def _record(self, cav_actions, reward):
        act = dict(zip(self.cav_idx.tolist(), cav_actions.tolist()))
        for i in range(self.road.n_vehicles):
            self.trajectory.append((
                self.state.steps, i, CAV if self.is_cav[i] else HUMAN,
                float(self.state.positions[i]), float(self.state.speeds[i]),
                act.get(i, ""), reward))
