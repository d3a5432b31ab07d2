"""Black-76 pricing and implied-vol inversion."""

import math

import numpy as np
import pytest
from scipy.integrate import quad

from neurovol import blackvol
from neurovol.blackvol import BlackInputs, black_price, black_vega, implied_vol
from neurovol.core import OptionType
from neurovol.errors import DomainError, NoConvergence, OutOfBounds


def _call(forward=100.0, strike=100.0, tau=1.0, df=1.0):
    return BlackInputs(forward, strike, tau, df, OptionType.CALL)


class TestBlackPrice:
    def test_zero_vol_limits(self):
        assert black_price(_call(), 1e-9) == pytest.approx(0.0, abs=1e-6)
        assert black_price(_call(strike=80.0), 1e-9) == pytest.approx(20.0, abs=1e-9)

    def test_atm_matches_risk_neutral_integral(self):
        """Quadrature of E[(F e^{X} - K)+] under the lognormal law"""
        vol, tau, forward, strike = 0.2, 1.0, 100.0, 100.0
        sd = vol * math.sqrt(tau)

        def payoff(z):
            spot = forward * math.exp(-0.5 * sd * sd + sd * z)
            return max(spot - strike, 0.0) * math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)

        expected, _ = quad(payoff, 0.5 * sd, 12.0, epsabs=1e-13, epsrel=1e-13)
        assert black_price(_call(), vol) == pytest.approx(expected, abs=1e-9)

    def test_put_call_parity(self):
        for strike in (60.0, 95.0, 100.0, 140.0):
            for vol in (0.05, 0.3, 1.5):
                call = black_price(BlackInputs(100.0, strike, 0.7, 0.96, OptionType.CALL), vol)
                put = black_price(BlackInputs(100.0, strike, 0.7, 0.96, OptionType.PUT), vol)
                assert call - put == pytest.approx(0.96 * (100.0 - strike), abs=1e-10)

    def test_monotone_in_vol(self):
        vols = np.linspace(0.05, 2.0, 60)
        prices = [black_price(_call(strike=120.0, tau=0.5), v) for v in vols]
        assert np.all(np.diff(prices) > 0)

    def test_invalid_inputs(self):
        with pytest.raises(DomainError):
            black_price(_call(), 0.0)
        with pytest.raises(DomainError):
            black_price(_call(), float("inf"))
        with pytest.raises(DomainError):
            BlackInputs(100.0, -1.0, 1.0)
        with pytest.raises(DomainError):
            BlackInputs(100.0, 100.0, 1.0, discount_factor=1.2)

    def test_vega_matches_finite_difference(self):
        inputs = _call(strike=110.0, tau=0.4, df=0.98)
        h = 1e-6
        numeric = (black_price(inputs, 0.25 + h) - black_price(inputs, 0.25 - h)) / (2 * h)
        assert black_vega(inputs, 0.25) == pytest.approx(numeric, rel=1e-7)


class TestImpliedVol:
    def test_round_trip(self):
        inputs = _call()
        assert implied_vol(inputs, black_price(inputs, 0.2)) == pytest.approx(0.2, abs=1e-8)

    def test_randomized_round_trips(self):
        rng = np.random.default_rng(42)
        checked = 0
        for _ in range(300):
            forward = 100.0
            strike = forward / rng.uniform(0.5, 2.0)
            tau = rng.uniform(0.01, 3.0)
            vol = rng.uniform(0.05, 2.0)
            df = rng.uniform(0.9, 1.0)
            option = OptionType.CALL if strike >= forward else OptionType.PUT
            inputs = BlackInputs(forward, strike, tau, df, option)
            # Prices with negligible vega carry no vol information at this precision
            if black_vega(inputs, vol) < 1e-3 * df * forward:
                continue
            price = black_price(inputs, vol)
            assert implied_vol(inputs, price) == pytest.approx(vol, abs=1e-8)
            checked += 1
        assert checked > 150

    def test_price_reproduced_within_tolerance(self):
        inputs = BlackInputs(100.0, 90.0, 0.3, 0.99, OptionType.PUT)
        price = black_price(inputs, 0.35)
        vol = implied_vol(inputs, price)
        assert abs(black_price(inputs, vol) - price) <= 1e-10 * 0.99 * 100.0

    def test_out_of_bounds(self):
        inputs = _call(strike=80.0)
        with pytest.raises(OutOfBounds):
            implied_vol(inputs, 19.0)
        with pytest.raises(OutOfBounds):
            implied_vol(inputs, 100.0)

    def test_collapsed_bracket_with_price_gap(self, monkeypatch):
        # A pricer that jumps at vol 0.3 leaves no vol reproducing a price inside the jump
        inputs = _call()
        exact = blackvol.black_price
        monkeypatch.setattr(blackvol, "black_price", lambda i, v: exact(i, v) + (0.5 if v > 0.3 else 0.0))
        monkeypatch.setattr(blackvol, "black_vega", lambda i, v: 0.0)
        with pytest.raises(NoConvergence):
            implied_vol(inputs, exact(inputs, 0.3) + 0.25)
