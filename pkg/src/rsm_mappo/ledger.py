"""Communication bookkeeping and evaluation metrics.

Volumes are tracked as exact integer counts of transmitted parameter
values; dividing by the actor size gives the figure in parameter-vector
units.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError

MODES = ("none", "rsm", "rsm-best", "average", "drl-ave", "central")


def per_round_units(mode: str, n_agents: int, kappa: int = 1) -> int:
    """Parameter vectors moved per communication round."""
    if n_agents < 2:
        raise ConfigError("need at least two agents")
    if mode == "none":
        return 0
    if mode in ("rsm", "rsm-best", "average"):
        return n_agents * kappa
    if mode in ("full-exchange", "drl-ave"):
        return n_agents * (n_agents - 1)
    if mode == "central":
        return 2 * n_agents
    raise ConfigError(f"unknown communication mode {mode!r}")


def per_round_cost(mode: str, n_agents: int, kappa: int, upsilon: int) -> int:
    return per_round_units(mode, n_agents, kappa) * upsilon


@dataclass
class CommLedger:
    upsilon: int
    rho_total: int = 0
    rho_ef: int = 0
    values_transferred: int = 0
    rounds: int = 0
    skipped: int = 0
    segment_requests: int = 0
    segment_responses: int = 0

    @property
    def transfers_in_upsilon(self) -> float:
        return self.values_transferred / self.upsilon

    def record_segment(self, n_values: int) -> None:
        self.segment_requests += 1
        self.segment_responses += 1
        self.values_transferred += int(n_values)

    def record_full_vectors(self, count: int) -> None:
        self.values_transferred += int(count) * self.upsilon

    def snapshot(self) -> dict:
        d = asdict(self)
        d["transfers_in_upsilon"] = self.transfers_in_upsilon
        return d


@dataclass(frozen=True)
class LedgerMetrics:
    rho_total: int
    rho_ef: int
    rho_r: float
    psi: int
    psi_upsilon_units: float


def ledger_metrics(ledger, upsilon: int | None = None) -> LedgerMetrics:
    """(rho_total, rho_ef, rho_r, psi) from a ledger or a ledger snapshot dict."""
    d = ledger if isinstance(ledger, dict) else ledger.snapshot()
    upsilon = upsilon or d["upsilon"]
    total, ef = int(d["rho_total"]), int(d["rho_ef"])
    psi = int(d["values_transferred"])
    return LedgerMetrics(
        rho_total=total,
        rho_ef=ef,
        rho_r=ef / total if total else 0.0,
        psi=psi,
        psi_upsilon_units=psi / upsilon,
    )


def centered_moving_average(x, window: int = 5) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    half = window // 2
    c = np.concatenate([[0.0], np.cumsum(x)])
    lo = np.maximum(np.arange(len(x)) - half, 0)
    hi = np.minimum(np.arange(len(x)) + half + 1, len(x))
    return (c[hi] - c[lo]) / (hi - lo)


def convergence_epoch(test_rewards, window: int = 5, tol: float = 0.02):
    """First test index whose (centred) moving average enters and stays in a
    ``tol`` band around the final moving average.

    Returns ``(index, converged)``; ``converged`` is False when only the last
    point qualifies.
    """
    x = np.asarray(test_rewards, dtype=np.float64)
    if len(x) < window:
        raise ValueError(f"need at least {window} test points, got {len(x)}")
    ma = centered_moving_average(x, window)
    band = tol * abs(ma[-1])
    outside = np.flatnonzero(np.abs(ma - ma[-1]) > band)
    idx = int(outside[-1]) + 1 if len(outside) else 0
    return idx, idx < len(x) - 1
