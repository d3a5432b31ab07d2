"""
Black Vol - Black-76 pricing and implied-volatility inversion
Converts forward-based option prices into the vol space every model works in
"""

import logging
import math
from dataclasses import dataclass

from scipy.special import ndtr

from .core import OptionType
from .errors import DomainError, NoConvergence, OutOfBounds

logger = logging.getLogger('NeuroVol.BlackVol')

VOL_LOWER = 1e-8
VOL_UPPER = 5.0
MAX_ITERATIONS = 200
PRICE_TOLERANCE = 1e-10
VOL_TOLERANCE = 1e-13
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class BlackInputs:
    forward: float
    strike: float
    tau: float
    discount_factor: float = 1.0
    option_type: OptionType = OptionType.CALL

    def __post_init__(self):
        values = (self.forward, self.strike, self.tau, self.discount_factor)
        if not all(math.isfinite(v) for v in values):
            raise DomainError(f"Black inputs must be finite: {self}")
        if self.forward <= 0 or self.strike <= 0 or self.tau <= 0:
            raise DomainError(f"forward, strike and tau must be positive: {self}")
        if not (0.0 < self.discount_factor <= 1.0):
            raise DomainError(f"discount factor must lie in (0, 1]: {self.discount_factor}")

    @property
    def intrinsic(self) -> float:
        if self.option_type is OptionType.CALL:
            return self.discount_factor * max(self.forward - self.strike, 0.0)
        return self.discount_factor * max(self.strike - self.forward, 0.0)

    @property
    def upper_bound(self) -> float:
        if self.option_type is OptionType.CALL:
            return self.discount_factor * self.forward
        return self.discount_factor * self.strike


def _d1_d2(inputs: BlackInputs, vol: float):
    sd = vol * math.sqrt(inputs.tau)
    d1 = (math.log(inputs.forward / inputs.strike) + 0.5 * sd * sd) / sd
    return d1, d1 - sd


def black_price(inputs: BlackInputs, vol: float) -> float:
    """
    Black-76 price of a European option on a forward

    Puts are priced from their own closed form, which equals the parity value
    DF*(K - F) + call without the cancellation parity suffers far from the money.

    Args:
        inputs: Forward, strike, expiry, discount factor and option type
        vol: Black volatility (> 0)

    Returns:
        Discounted option price
    """
    if not math.isfinite(vol):
        raise DomainError(f"vol must be finite, got {vol}")
    if vol <= 0:
        raise DomainError(f"vol must be positive, got {vol}")
    d1, d2 = _d1_d2(inputs, vol)
    df, f, k = inputs.discount_factor, inputs.forward, inputs.strike
    if inputs.option_type is OptionType.CALL:
        return df * (f * ndtr(d1) - k * ndtr(d2))
    return df * (k * ndtr(-d2) - f * ndtr(-d1))


def black_vega(inputs: BlackInputs, vol: float) -> float:
    """dPrice/dVol, identical for calls and puts"""
    d1, _ = _d1_d2(inputs, vol)
    return inputs.discount_factor * inputs.forward * math.sqrt(inputs.tau) * _INV_SQRT_2PI * math.exp(-0.5 * d1 * d1)


def implied_vol(inputs: BlackInputs, price: float) -> float:
    """
    Invert Black-76 for the volatility reproducing `price`

    Safeguarded Newton: a vol bracket is kept from the sign of the pricing
    error, Newton steps that leave the bracket (or stall on a tiny vega) fall
    back to bisection.

    Args:
        inputs: Contract description
        price: Observed discounted option price

    Returns:
        Implied vol with |black_price - price| <= 1e-10 * DF * F
    """
    if not math.isfinite(price):
        raise DomainError(f"price must be finite, got {price}")
    lower, upper = inputs.intrinsic, inputs.upper_bound
    if not (lower < price < upper):
        raise OutOfBounds(f"price {price:.12g} outside no-arbitrage bounds ({lower:.12g}, {upper:.12g})")

    tolerance = PRICE_TOLERANCE * inputs.discount_factor * inputs.forward
    lo, hi = VOL_LOWER, VOL_UPPER
    while black_price(inputs, hi) < price:
        lo, hi = hi, 2.0 * hi
        if hi > 1e3:
            raise NoConvergence(f"no vol below {hi} reaches price {price:.12g}")

    # Brenner-Subrahmanyam style starting point, kept inside the bracket
    vol = math.sqrt(2.0 * math.pi / inputs.tau) * price / (inputs.discount_factor * inputs.forward)
    vol = min(max(vol, 0.05), hi)

    for _ in range(MAX_ITERATIONS):
        error = black_price(inputs, vol) - price
        if error > 0:
            hi = vol
        else:
            lo = vol
        vega = black_vega(inputs, vol)
        step = error / vega if vega > 0 else math.inf
        candidate = vol - step
        if not (lo < candidate < hi) or not math.isfinite(candidate):
            candidate = 0.5 * (lo + hi)
            step = vol - candidate
        if abs(error) <= tolerance and abs(step) <= VOL_TOLERANCE * max(1.0, vol):
            return vol
        if hi - lo <= VOL_TOLERANCE * max(1.0, vol):
            best = min((vol, candidate), key=lambda v: abs(black_price(inputs, v) - price))
            residual = abs(black_price(inputs, best) - price)
            if residual <= tolerance:
                return best
            raise NoConvergence(
                f"vol bracket collapsed at {best:.12g} with price residual {residual:.3e} > {tolerance:.3e}"
            )
        vol = candidate

    if abs(black_price(inputs, vol) - price) <= tolerance:
        return vol
    raise NoConvergence(f"implied vol did not converge for price {price:.12g} ({inputs})")
