"""Shared fixtures: a tiny VolNP architecture and a small seeded synthetic market."""

import numpy as np
import pytest

from neurovol.config import ModelConfig, SyntheticMarketConfig
from neurovol.core import DayRecord, Quote
from neurovol.market import generate_market
from neurovol.ssvi import SsviParams


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run end-to-end training scenarios")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end scenario, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(d_r=8, L=1, L_prime=1, n_h=2, mlp_layers=1, mlp_width=8)


@pytest.fixture(scope="session")
def small_market_cfg():
    return SyntheticMarketConfig(n_days=6, seed=11, quotes_per_day=(150, 180))


@pytest.fixture(scope="session")
def small_market(small_market_cfg):
    return generate_market(small_market_cfg)


@pytest.fixture
def ssvi_params():
    return SsviParams(
        theta_curve=((0.1, 0.004), (0.5, 0.02), (1.0, 0.04), (2.0, 0.08)),
        rho=-0.5,
        eta=1.0,
        gamma_exp=0.4,
    )


def flat_day(n_per_slice=12, taus=(0.25, 0.5, 1.0), vol=0.2, day_id=0):
    """A day whose quotes all sit on one flat smile"""
    quotes = [Quote.at(k, tau, vol) for tau in taus for k in np.linspace(-0.3, 0.3, n_per_slice)]
    return DayRecord(day_id=day_id, quotes=tuple(quotes), forward_curve={t: 100.0 for t in taus})


def random_quotes(n, seed=0):
    rng = np.random.default_rng(seed)
    return [
        Quote.at(k, tau, v)
        for k, tau, v in zip(rng.uniform(-0.4, 0.4, n), rng.uniform(0.05, 2.0, n), rng.uniform(0.1, 0.4, n))
    ]
