import numpy as np
import pytest

from rsm_mappo import nnet, ppo


def random_batch(rng, policy_cfg, theta_old, T=12, terminal=False, value_dim=None):
    """Mini-batch sampled from the Gaussian policy at ``theta_old``."""
    d = policy_cfg.input_dim
    S = rng.normal(size=(T, d))
    S2 = rng.normal(size=(T, d))
    mu, sigma = nnet.policy_forward(theta_old, policy_cfg, S)
    A = mu + sigma * rng.normal(size=mu.shape)
    lp = nnet.log_prob(theta_old, policy_cfg, S, A)
    dones = np.zeros(T, dtype=bool)
    dones[-1] = terminal
    return ppo.MiniBatch(S, A, rng.uniform(0, 1, T), S2, lp, dones)


def central_difference(f, x, h=1e-5):
    g = np.empty_like(x)
    for i in range(len(x)):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def oracle_forward(theta, cfg, s):
    """Independent forward pass reading the flat layout by hand."""
    off = 0
    h = np.asarray(s, dtype=float)
    dims = [cfg.input_dim, *cfg.hidden_widths, cfg.output_dim]
    for k in range(len(dims) - 1):
        fi, fo = dims[k], dims[k + 1]
        W = np.array([[theta[off + r * fo + c] for c in range(fo)] for r in range(fi)])
        off += fi * fo
        b = theta[off:off + fo]
        off += fo
        z = h @ W + b
        h = np.tanh(z) if k < len(dims) - 2 else z
    return h, theta[off:off + cfg.output_dim] if cfg.role == "policy" else None


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_policy():
    return nnet.policy_config(3, 1, hidden=(5, 4))


@pytest.fixture
def small_value():
    return nnet.value_config(3, hidden=(5, 4))


# --- acceptance report --------------------------------------------------------

ACCEPTANCE_LINES = {}


def record_acceptance(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[n] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
