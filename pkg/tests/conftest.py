import numpy as np
import pytest
from scipy.special import ndtr

from bilevel_smc.model import Dataset, PriorConfig, Theta


def random_dataset(n, p, q, r, seed=0, scale=0.6, link="probit"):
    """Generic random instance with groups assigned round-robin."""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p))
    U = rng.normal(size=(n, q))
    Z = rng.normal(size=(n, r))
    lin = (X @ rng.normal(scale=scale, size=p) + U @ rng.normal(scale=scale, size=q)
           + Z @ rng.normal(scale=scale, size=r))
    prob = ndtr(lin) if link == "probit" else 1.0 / (1.0 + np.exp(-lin))
    y = (rng.random(n) < prob).astype(int)
    group_map = np.arange(p) % q + 1
    return Dataset(y, X, U, Z, group_map)


def random_theta(data, rng, min_dim=0):
    """Valid theta drawn uniformly group by group."""
    while True:
        gamma = rng.random(data.q) < 0.6
        eta = gamma[data.group_index] & (rng.random(data.p) < 0.6)
        th = Theta(gamma, eta)
        if th.dim(data.r) >= min_dim:
            return th


def symmetric_dataset(half, d_cols, seed=0):
    """Every covariate row appears once with y=1 and once with y=0, so h is
    even in beta and the MAP is exactly 0."""
    rng = np.random.default_rng(seed)
    D = rng.normal(size=(half, d_cols))
    full = np.vstack([D, D])
    y = np.r_[np.ones(half), np.zeros(half)]
    return full, y


@pytest.fixture
def small_data():
    return random_dataset(n=40, p=4, q=2, r=1, seed=3)


@pytest.fixture
def small_prior(small_data):
    return PriorConfig.default(small_data.q, small_data.p, p_gamma=0.4, p_eta=0.3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE_LINES = []


@pytest.fixture
def report_criterion():
    """Record one pass/fail line per acceptance criterion; printed at session end."""
    def record(number, title, passed, detail=""):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title}" + (f" ({detail})" if detail else "")
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
