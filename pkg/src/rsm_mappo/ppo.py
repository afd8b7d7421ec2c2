"""Local PPO learning phase: returns, clipped surrogate, critic regression."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import nnet
from .errors import NumericalError
from .kernels import discounted_reverse_cumsum

LOG_RATIO_CLAMP = 30.0


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    logp_old: float
    done: bool = False


@dataclass
class MiniBatch:
    """Column-stored run of consecutive transitions from one agent.

    ``dones`` marks collision terminations only; a batch cut by the epoch
    step budget still bootstraps from its last ``next_states`` row.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    logp_old: np.ndarray
    dones: np.ndarray

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64).reshape(len(self.states), -1)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.next_states = np.asarray(self.next_states, dtype=np.float64)
        self.logp_old = np.asarray(self.logp_old, dtype=np.float64)
        self.dones = np.asarray(self.dones, dtype=bool)
        if len(self.states) == 0:
            raise ValueError("empty mini-batch")
        if not np.all(np.isfinite(self.rewards)) or not np.all(np.isfinite(self.logp_old)):
            raise NumericalError("non-finite reward or behaviour log-probability")

    @classmethod
    def from_transitions(cls, transitions) -> "MiniBatch":
        return cls(
            states=np.stack([t.s for t in transitions]),
            actions=np.stack([np.atleast_1d(t.a) for t in transitions]),
            rewards=np.array([t.r for t in transitions]),
            next_states=np.stack([t.s_next for t in transitions]),
            logp_old=np.array([t.logp_old for t in transitions]),
            dones=np.array([t.done for t in transitions]),
        )

    def __len__(self) -> int:
        return len(self.states)

    @property
    def bootstrap_state(self) -> np.ndarray:
        return self.next_states[-1]

    @property
    def terminal(self) -> bool:
        return bool(self.dones[-1])

    @staticmethod
    def concat(batches) -> "MiniBatch":
        return MiniBatch(*(np.concatenate([getattr(b, f) for b in batches])
                           for f in ("states", "actions", "rewards", "next_states",
                                     "logp_old", "dones")))


def _check_gamma(gamma):
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"discount factor must lie in [0, 1), got {gamma}")


def compute_deltas(batch: MiniBatch, omega, value_cfg, gamma: float) -> np.ndarray:
    """One-step TD errors; terminal transitions drop the next-state value."""
    _check_gamma(gamma)
    v = nnet.value_forward(omega, value_cfg, batch.states)
    v_next = nnet.value_forward(omega, value_cfg, batch.next_states)
    v_next = np.where(batch.dones, 0.0, v_next)
    return batch.rewards + gamma * v_next - v


def compute_advantages(deltas, gamma: float) -> np.ndarray:
    deltas = np.ascontiguousarray(deltas, dtype=np.float64)
    if deltas.shape[0] == 0:
        raise ValueError("need at least one delta")
    return discounted_reverse_cumsum(deltas, gamma, 0.0)


def compute_value_targets(batch: MiniBatch, omega, value_cfg, gamma: float) -> np.ndarray:
    _check_gamma(gamma)
    tail = 0.0 if batch.terminal else nnet.value_forward(omega, value_cfg, batch.bootstrap_state)
    return discounted_reverse_cumsum(np.ascontiguousarray(batch.rewards), gamma, float(tail))


def importance_ratio(theta, policy_cfg, batch: MiniBatch) -> np.ndarray:
    lp = nnet.log_prob(theta, policy_cfg, batch.states, batch.actions)
    return np.exp(np.clip(lp - batch.logp_old, -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP))


def clip_ratio(ratio, clip_eps):
    return np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps)


def actor_loss_grad(theta, policy_cfg, batch: MiniBatch, advantages, clip_eps: float,
                    beta: float, need_grad: bool = True):
    """Clipped surrogate with entropy bonus; returns (loss, gradient)."""
    T = len(batch)
    adv = np.asarray(advantages, dtype=np.float64)
    if adv.shape != (T,):
        raise ValueError("advantages must align with the batch")
    mu, log_std, cache = nnet.policy_forward_cached(theta, policy_cfg, batch.states)
    inv_std = np.exp(-log_std)
    u = (batch.actions - mu) * inv_std
    lp = np.sum(-0.5 * u * u - log_std - nnet.HALF_LOG_2PI, axis=1)
    log_ratio = lp - batch.logp_old
    ratio = np.exp(np.clip(log_ratio, -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP))
    surr1 = ratio * adv
    surr2 = clip_ratio(ratio, clip_eps) * adv
    ent = nnet.entropy(theta, policy_cfg)
    loss = -float(np.mean(np.minimum(surr1, surr2))) - beta * ent
    if not need_grad:
        return loss, None
    active = (surr1 <= surr2) & (np.abs(log_ratio) < LOG_RATIO_CLAMP)
    dlp = np.where(active, -surr1 / T, 0.0)
    dmu = dlp[:, None] * u * inv_std
    dlog_std = (dlp[:, None] * (u * u - 1.0)).sum(axis=0) - beta
    grad = nnet.policy_backward(theta, policy_cfg, cache, dmu, dlog_std)
    return loss, grad


def actor_loss(theta, policy_cfg, batch, advantages, clip_eps, beta) -> float:
    return actor_loss_grad(theta, policy_cfg, batch, advantages, clip_eps, beta,
                           need_grad=False)[0]


def critic_loss_grad(omega, value_cfg, batch: MiniBatch, value_targets, need_grad: bool = True):
    targ = np.asarray(value_targets, dtype=np.float64)
    if targ.shape != (len(batch),):
        raise ValueError("value targets must align with the batch")
    v, hs = nnet.value_forward_cached(omega, value_cfg, batch.states)
    err = v - targ
    loss = float(np.mean(err * err))
    if not need_grad:
        return loss, None
    return loss, nnet.value_backward(omega, value_cfg, hs, 2.0 * err / len(batch))


def critic_loss(omega, value_cfg, batch, value_targets) -> float:
    return critic_loss_grad(omega, value_cfg, batch, value_targets, need_grad=False)[0]


@dataclass
class PPOParams:
    iterations: int = 3          # U
    lr_actor: float = 2.5e-5
    lr_critic: float = 5e-5
    gamma: float = 0.9
    clip_eps: float = 0.2
    entropy_coef: float = 0.01   # beta
    normalize_advantages: bool = False


@dataclass
class AgentState:
    theta: np.ndarray
    theta_old: np.ndarray
    omega: np.ndarray
    k: int = 0
    stats: dict = field(default_factory=dict)

    def copy(self) -> "AgentState":
        return replace(self, theta=self.theta.copy(), theta_old=self.theta_old.copy(),
                       omega=self.omega.copy(), stats=dict(self.stats))


def local_update(agent: AgentState, batch: MiniBatch, policy_cfg, value_cfg,
                 hp: PPOParams) -> AgentState:
    """U iterations of (targets, actor SGD, critic SGD); then sync the behaviour policy."""
    theta, omega = agent.theta, agent.omega
    actor_l = critic_l = float("nan")
    for _ in range(hp.iterations):
        deltas = compute_deltas(batch, omega, value_cfg, hp.gamma)
        adv = compute_advantages(deltas, hp.gamma)
        targ = compute_value_targets(batch, omega, value_cfg, hp.gamma)
        if hp.normalize_advantages and len(adv) > 1:
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        actor_l, g_a = actor_loss_grad(theta, policy_cfg, batch, adv, hp.clip_eps,
                                       hp.entropy_coef)
        critic_l, g_c = critic_loss_grad(omega, value_cfg, batch, targ)
        if not (np.isfinite(actor_l) and np.isfinite(critic_l)
                and np.all(np.isfinite(g_a)) and np.all(np.isfinite(g_c))):
            raise NumericalError(
                f"non-finite loss at local iteration {agent.k}: actor={actor_l}, critic={critic_l}")
        theta = nnet.sgd_step(theta, g_a, hp.lr_actor)
        omega = nnet.sgd_step(omega, g_c, hp.lr_critic)
    return AgentState(theta=theta, theta_old=theta.copy(), omega=omega,
                      k=agent.k + hp.iterations,
                      stats={"actor_loss": actor_l, "critic_loss": critic_l})
