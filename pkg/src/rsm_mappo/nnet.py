"""Tanh MLPs over flat float64 parameter vectors, with exact backprop.

Flat layout is layer-major: for each dense layer the weight matrix
(row-major, shape ``(fan_in, fan_out)``) followed by its bias. Policies
append their state-independent ``log_std`` vector last.

A policy maps a state to a Gaussian over actions whose mean is
``tanh`` of the last layer, so the mean already lies in ``[-1, 1]``.
"""
from __future__ import annotations

import functools
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

LOG_STD_INIT = math.log(0.5)
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    hidden_widths: tuple[int, ...] = (64, 64)
    output_dim: int = 1
    role: str = "policy"
    activation: str = "tanh"
    log_std_init: float = LOG_STD_INIT

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.input_dim <= 0 or self.output_dim <= 0:
            raise ConfigError("input_dim and output_dim must be positive")
        if any(w <= 0 for w in self.hidden_widths):
            raise ConfigError(f"hidden widths must be positive, got {self.hidden_widths}")
        if self.role not in ("policy", "value"):
            raise ConfigError(f"unknown network role {self.role!r}")
        if self.role == "value" and self.output_dim != 1:
            raise ConfigError("value networks have a scalar output")
        if self.activation != "tanh":
            raise ConfigError("only tanh activations are supported")

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_widths, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def has_log_std(self) -> bool:
        return self.role == "policy"

    @property
    def n_params(self) -> int:
        n = sum(i * o + o for i, o in self.layer_shapes)
        return n + (self.output_dim if self.has_log_std else 0)


def policy_config(input_dim: int, action_dim: int = 1, hidden=(64, 64)) -> MlpConfig:
    return MlpConfig(input_dim, tuple(hidden), action_dim, role="policy")


def value_config(input_dim: int, hidden=(64, 64)) -> MlpConfig:
    return MlpConfig(input_dim, tuple(hidden), 1, role="value")


@functools.lru_cache(maxsize=None)
def _layout(config: MlpConfig):
    """Offsets of every weight/bias block and of log_std."""
    blocks = []
    off = 0
    for fan_in, fan_out in config.layer_shapes:
        w = (off, off + fan_in * fan_out, (fan_in, fan_out))
        off = w[1]
        b = (off, off + fan_out)
        off = b[1]
        blocks.append((w, b))
    log_std = (off, off + config.output_dim) if config.has_log_std else None
    return tuple(blocks), log_std


def _check_params(theta, config: MlpConfig):
    if theta.ndim != 1 or theta.shape[0] != config.n_params:
        raise ValueError(
            f"parameter vector has shape {theta.shape}, expected ({config.n_params},)")


def _views(theta, config: MlpConfig):
    _check_params(theta, config)
    blocks, ls = _layout(config)
    Ws = [theta[w0:w1].reshape(shape) for (w0, w1, shape), _ in blocks]
    bs = [theta[b0:b1] for _, (b0, b1) in blocks]
    log_std = theta[ls[0]:ls[1]] if ls is not None else None
    return Ws, bs, log_std


@dataclass
class Network:
    """Structured (unflattened) view of a parameter vector."""

    config: MlpConfig
    weights: list
    biases: list
    log_std: np.ndarray | None = None


def flatten(net: Network) -> np.ndarray:
    parts = []
    for W, b in zip(net.weights, net.biases):
        parts.append(np.asarray(W, dtype=np.float64).reshape(-1))
        parts.append(np.asarray(b, dtype=np.float64).reshape(-1))
    if net.config.has_log_std:
        parts.append(np.asarray(net.log_std, dtype=np.float64).reshape(-1))
    theta = np.concatenate(parts)
    _check_params(theta, net.config)
    return theta


def unflatten(theta, config: MlpConfig) -> Network:
    theta = np.asarray(theta, dtype=np.float64)
    Ws, bs, log_std = _views(theta, config)
    return Network(config, [W.copy() for W in Ws], [b.copy() for b in bs],
                   None if log_std is None else log_std.copy())


def init_network(config: MlpConfig, seed) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases.

    ``seed`` may be an int or anything ``numpy.random.default_rng`` accepts.
    """
    rng = np.random.default_rng(seed)
    theta = np.empty(config.n_params, dtype=np.float64)
    blocks, ls = _layout(config)
    for (w0, w1, (fan_in, _)), (b0, b1) in blocks:
        bound = 1.0 / math.sqrt(fan_in)
        theta[w0:w1] = rng.uniform(-bound, bound, size=w1 - w0)
        theta[b0:b1] = rng.uniform(-bound, bound, size=b1 - b0)
    if ls is not None:
        theta[ls[0]:ls[1]] = config.log_std_init
    return theta


def zeros(config: MlpConfig) -> np.ndarray:
    """All-zero weights; log_std (if any) keeps its initial value."""
    theta = np.zeros(config.n_params, dtype=np.float64)
    _, ls = _layout(config)
    if ls is not None:
        theta[ls[0]:ls[1]] = config.log_std_init
    return theta


def _as_batch(s, dim):
    s = np.asarray(s, dtype=np.float64)
    single = s.ndim == 1
    S = s[None, :] if single else s
    if S.ndim != 2 or S.shape[1] != dim:
        raise ValueError(f"state has shape {s.shape}, expected trailing dim {dim}")
    return S, single


def _forward(theta, config, S):
    Ws, bs, log_std = _views(theta, config)
    hs = [S]
    h = S
    for W, b in zip(Ws[:-1], bs[:-1]):
        h = np.tanh(h @ W + b)
        hs.append(h)
    z = h @ Ws[-1] + bs[-1]
    return z, hs, log_std


def _backward(theta, config, hs, dz, dlog_std=None):
    """Gradient of a scalar loss given dL/d(last pre-activation)."""
    Ws, _, _ = _views(theta, config)
    blocks, ls = _layout(config)
    grad = np.zeros_like(theta)
    for layer in range(len(Ws) - 1, -1, -1):
        (w0, w1, _), (b0, b1) = blocks[layer]
        h_in = hs[layer]
        grad[w0:w1] = (h_in.T @ dz).reshape(-1)
        grad[b0:b1] = dz.sum(axis=0)
        if layer > 0:
            dz = (dz @ Ws[layer].T) * (1.0 - h_in * h_in)
    if ls is not None and dlog_std is not None:
        grad[ls[0]:ls[1]] = dlog_std
    return grad


# --- policy -----------------------------------------------------------------

def policy_forward(theta, config: MlpConfig, s):
    """Return (mean, std) for one state or a batch of states."""
    S, single = _as_batch(s, config.input_dim)
    z, _, log_std = _forward(theta, config, S)
    mu = np.tanh(z)
    sigma = np.exp(log_std)
    if single:
        return mu[0], sigma
    return mu, np.broadcast_to(sigma, mu.shape)


def _gaussian_logp(a, mu, log_std):
    u = (a - mu) * np.exp(-log_std)
    return np.sum(-0.5 * u * u - log_std - HALF_LOG_2PI, axis=-1)


def log_prob(theta, config: MlpConfig, s, a):
    S, single = _as_batch(s, config.input_dim)
    A = np.asarray(a, dtype=np.float64).reshape(S.shape[0], config.output_dim)
    if not (np.all(np.isfinite(S)) and np.all(np.isfinite(A))):
        raise ValueError("log_prob needs finite states and actions")
    z, _, log_std = _forward(theta, config, S)
    lp = _gaussian_logp(A, np.tanh(z), log_std)
    return float(lp[0]) if single else lp


def entropy(theta, config: MlpConfig, s=None) -> float:
    """Closed-form Gaussian entropy; the state only enters through shape checks."""
    if s is not None:
        _as_batch(s, config.input_dim)
    _, _, log_std = _views(theta, config)
    return float(np.sum(0.5 * math.log(2.0 * math.pi * math.e) + log_std))


def policy_forward_cached(theta, config, S):
    """Forward pass retaining what ``policy_backward`` needs."""
    z, hs, log_std = _forward(theta, config, S)
    mu = np.tanh(z)
    return mu, log_std, (hs, mu)


def policy_backward(theta, config, cache, dmu, dlog_std):
    hs, mu = cache
    return _backward(theta, config, hs, dmu * (1.0 - mu * mu), dlog_std)


def policy_score(theta, config: MlpConfig, s, a):
    """Per-sample gradients of log pi(a|s), shape (batch, n_params)."""
    S, _ = _as_batch(s, config.input_dim)
    A = np.asarray(a, dtype=np.float64).reshape(S.shape[0], config.output_dim)
    Ws, _, log_std = _views(theta, config)
    blocks, ls = _layout(config)
    z, hs, _ = _forward(theta, config, S)
    mu = np.tanh(z)
    inv_var = np.exp(-2.0 * log_std)
    diff = A - mu
    dz = diff * inv_var * (1.0 - mu * mu)
    B = S.shape[0]
    G = np.empty((B, config.n_params), dtype=np.float64)
    for layer in range(len(Ws) - 1, -1, -1):
        (w0, w1, _), (b0, b1) = blocks[layer]
        h_in = hs[layer]
        G[:, w0:w1] = (h_in[:, :, None] * dz[:, None, :]).reshape(B, -1)
        G[:, b0:b1] = dz
        if layer > 0:
            dz = (dz @ Ws[layer].T) * (1.0 - h_in * h_in)
    G[:, ls[0]:ls[1]] = diff * diff * inv_var - 1.0
    return G


class GaussianPolicy:
    """Config-bound policy; the interface the mixing round consumes."""

    def __init__(self, config: MlpConfig):
        if config.role != "policy":
            raise ConfigError("GaussianPolicy needs a policy config")
        self.config = config

    @property
    def n_params(self) -> int:
        return self.config.n_params

    def init(self, seed) -> np.ndarray:
        return init_network(self.config, seed)

    def forward(self, theta, s):
        return policy_forward(theta, self.config, s)

    def mean(self, theta, s):
        S, single = _as_batch(s, self.config.input_dim)
        z, _, _ = _forward(theta, self.config, S)
        mu = np.tanh(z)
        return mu[0] if single else mu

    def log_prob(self, theta, s, a):
        return log_prob(theta, self.config, s, a)

    def entropy(self, theta, s=None):
        return entropy(theta, self.config, s)

    def score(self, theta, s, a):
        return policy_score(theta, self.config, s, a)


# --- value ------------------------------------------------------------------

def value_forward(omega, config: MlpConfig, s):
    S, single = _as_batch(s, config.input_dim)
    z, _, _ = _forward(omega, config, S)
    v = z[:, 0]
    return float(v[0]) if single else v


def value_forward_cached(omega, config, S):
    z, hs, _ = _forward(omega, config, S)
    return z[:, 0], hs


def value_backward(omega, config, hs, dv):
    return _backward(omega, config, hs, np.asarray(dv, dtype=np.float64)[:, None])


# --- batched rollout helpers --------------------------------------------------

def stack_policies(thetas, config: MlpConfig):
    """Stack several agents' weights for one batched forward per env step."""
    views = [_views(np.asarray(t), config) for t in thetas]
    Ws = [np.stack([v[0][l] for v in views]) for l in range(len(config.layer_shapes))]
    bs = [np.stack([v[1][l] for v in views])[:, None, :]
          for l in range(len(config.layer_shapes))]
    log_std = np.stack([v[2] for v in views])
    return Ws, bs, log_std


def stacked_policy_mean(stack, obs):
    """Mean action of agent ``n`` at ``obs[n]``, for every ``n`` at once."""
    Ws, bs, _ = stack
    h = obs[:, None, :]
    for W, b in zip(Ws[:-1], bs[:-1]):
        h = np.tanh(h @ W + b)
    return np.tanh(h @ Ws[-1] + bs[-1])[:, 0, :]


# --- optimisation and serialisation -----------------------------------------

def sgd_step(params, grad, lr: float) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape:
        raise ValueError(f"length mismatch: params {params.shape}, grad {grad.shape}")
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    return params - lr * grad


_HEADER = struct.Struct("<Q")


def dumps_parameters(theta) -> bytes:
    """Little-endian float64 payload prefixed by a uint64 length header."""
    theta = np.ascontiguousarray(theta, dtype="<f8")
    return _HEADER.pack(theta.shape[0]) + theta.tobytes()


def loads_parameters(blob: bytes) -> np.ndarray:
    (n,) = _HEADER.unpack_from(blob, 0)
    body = blob[_HEADER.size:]
    if len(body) != 8 * n:
        raise ValueError(f"header says {n} values, payload holds {len(body) / 8}")
    return np.frombuffer(body, dtype="<f8").astype(np.float64)
