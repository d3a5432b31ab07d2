"""
SABR - Hagan implied-vol approximation, per-slice calibration and term-structure surfaces
Source of the dense pre-training surfaces and of the SABR baseline
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import minimize

from .core import Quote, group_by_maturity
from .errors import CalibrationFailed, DomainError, InsufficientQuotes

logger = logging.getLogger('NeuroVol.SABR')

RHO_LIMIT = 1.0 - 1e-6
# Below this |z| the ratio z/x(z) is evaluated from its Taylor expansion
_Z_SERIES = 1e-7
_START_RHOS = (-0.8, 0.0, 0.8)
_START_NUS = (0.1, 1.0)
_NM_OPTIONS = {"xatol": 1e-10, "fatol": 1e-18, "maxiter": 4000, "maxfev": 8000}
_DIVERGED = 1e6

ArrayLike = Union[float, Sequence[float], np.ndarray]


@dataclass(frozen=True)
class SabrParams:
    alpha: float
    beta: float
    rho: float
    nu: float

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and self.alpha > 0):
            raise DomainError(f"SABR alpha must be positive, got {self.alpha}")
        if not (0.0 <= self.beta <= 1.0):
            raise DomainError(f"SABR beta must lie in [0, 1], got {self.beta}")
        if not (-1.0 < self.rho < 1.0):
            raise DomainError(f"SABR rho must lie in (-1, 1), got {self.rho}")
        if not (math.isfinite(self.nu) and self.nu >= 0):
            raise DomainError(f"SABR nu must be non-negative, got {self.nu}")


@dataclass(frozen=True)
class SabrTermStructure:
    """Calibrated slices ordered by maturity plus the forward curve they were fitted on"""

    slices: Tuple[Tuple[float, SabrParams], ...]
    forward_curve: Mapping[float, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.slices:
            raise DomainError("a SABR term structure needs at least one slice")
        taus = [tau for tau, _ in self.slices]
        if any(b <= a for a, b in zip(taus, taus[1:])):
            raise DomainError(f"slice maturities must be strictly increasing: {taus}")
        object.__setattr__(self, "slices", tuple(self.slices))
        object.__setattr__(self, "forward_curve", dict(sorted(self.forward_curve.items())))

    @property
    def taus(self) -> List[float]:
        return [tau for tau, _ in self.slices]

    def forward(self, tau: float) -> float:
        if not self.forward_curve:
            return 1.0
        return float(np.interp(tau, list(self.forward_curve), list(self.forward_curve.values())))

    def to_json(self) -> str:
        document = {
            "slices": [{"tau": tau, **asdict(params)} for tau, params in self.slices],
            "forward_curve": [{"tau": tau, "forward": fwd} for tau, fwd in self.forward_curve.items()],
        }
        return json.dumps(document, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SabrTermStructure":
        document = json.loads(text)
        slices = tuple(
            (float(s["tau"]), SabrParams(s["alpha"], s["beta"], s["rho"], s["nu"]))
            for s in document["slices"]
        )
        curve = {float(p["tau"]): float(p["forward"]) for p in document.get("forward_curve", [])}
        return cls(slices=slices, forward_curve=curve)


def _z_over_x(z: np.ndarray, rho: float) -> np.ndarray:
    small = np.abs(z) < _Z_SERIES
    series = 1.0 - 0.5 * rho * z + (2.0 - 3.0 * rho * rho) * z * z / 12.0
    z_safe = np.where(small, 1.0, z)
    root = np.sqrt(1.0 - 2.0 * rho * z_safe + z_safe * z_safe)
    x = np.log((root + z_safe - rho) / (1.0 - rho))
    return np.where(small, series, z_safe / x)


def _hagan(alpha: float, beta: float, rho: float, nu: float, forward: float, strikes: np.ndarray, tau: float) -> np.ndarray:
    one_b = 1.0 - beta
    log_fk = np.log(forward / strikes)
    fk_half = (forward * strikes) ** (0.5 * one_b)
    denom = fk_half * (1.0 + one_b ** 2 / 24.0 * log_fk ** 2 + one_b ** 4 / 1920.0 * log_fk ** 4)
    z = nu / alpha * fk_half * log_fk
    correction = 1.0 + (
        one_b ** 2 / 24.0 * alpha * alpha / (fk_half * fk_half)
        + 0.25 * rho * beta * nu * alpha / fk_half
        + (2.0 - 3.0 * rho * rho) / 24.0 * nu * nu
    ) * tau
    atm = log_fk == 0.0
    ratio = np.where(atm, 1.0, _z_over_x(np.where(atm, 1.0, z), rho))
    return alpha / denom * ratio * correction


def hagan_vol(params: SabrParams, forward: float, strike: ArrayLike, tau: float) -> Union[float, np.ndarray]:
    """
    Hagan's lognormal implied-vol approximation

    At K = F the 0/0 factor z/x(z) is replaced by its limit 1, giving
    alpha / F^(1-beta) * (1 + [...] tau).

    Args:
        params: SABR parameters
        forward: Forward price
        strike: Strike or array of strikes
        tau: Time to expiry in years

    Returns:
        Implied vol, same shape as `strike`
    """
    strikes = np.asarray(strike, dtype=float)
    if forward <= 0 or tau <= 0 or np.any(strikes <= 0):
        raise DomainError(f"forward, strike and tau must be positive (F={forward}, tau={tau})")
    vols = _hagan(params.alpha, params.beta, params.rho, params.nu, float(forward), strikes, float(tau))
    return float(vols) if vols.ndim == 0 else vols


def _decode(u: np.ndarray, beta: float) -> Tuple[float, float, float, float]:
    rho = float(np.clip(np.tanh(u[1]), -RHO_LIMIT, RHO_LIMIT))
    return float(np.exp(u[0])), beta, rho, float(np.exp(u[2]))


def _slice_objective(u: np.ndarray, beta: float, forward: float, strikes: np.ndarray, vols: np.ndarray, tau: float) -> float:
    alpha, _, rho, nu = _decode(u, beta)
    if not (math.isfinite(alpha) and alpha > 0 and math.isfinite(nu)):
        return _DIVERGED
    with np.errstate(all="ignore"):
        model = _hagan(alpha, beta, rho, nu, forward, strikes, tau)
    value = float(np.sum((model - vols) ** 2))
    return value if math.isfinite(value) else _DIVERGED


def calibrate_slice(
    quotes_at_tau: Sequence[Quote],
    forward: float,
    tau: float,
    beta: float = 1.0,
    init: Optional[SabrParams] = None,
) -> SabrParams:
    """
    Fit (alpha, rho, nu) of one maturity slice with beta held fixed

    Multi-start Nelder-Mead in the unconstrained coordinates
    (log alpha, atanh rho, log nu); the best start is polished by a restart.

    Args:
        quotes_at_tau: Quotes of a single maturity (at least 3)
        forward: Forward of that maturity
        tau: Maturity in years
        beta: Fixed SABR beta
        init: Optional extra starting point

    Returns:
        Calibrated SabrParams
    """
    if len(quotes_at_tau) < 3:
        raise InsufficientQuotes(f"SABR slice at tau={tau:.4f} has {len(quotes_at_tau)} quotes, need 3")
    k = np.array([q.k for q in quotes_at_tau], dtype=float)
    vols = np.array([q.vol for q in quotes_at_tau], dtype=float)
    strikes = forward * np.exp(k)
    atm_vol = float(vols[np.argmin(np.abs(k))])
    alpha0 = atm_vol * forward ** (1.0 - beta)

    starts: List[np.ndarray] = []
    if init is not None:
        starts.append(np.array([math.log(init.alpha), math.atanh(np.clip(init.rho, -0.999, 0.999)), math.log(max(init.nu, 1e-4))]))
    for rho in _START_RHOS:
        for nu in _START_NUS:
            starts.append(np.array([math.log(alpha0), math.atanh(rho), math.log(nu)]))

    args = (beta, forward, strikes, vols, tau)
    best_x, best_f = None, math.inf
    for x0 in starts:
        result = minimize(_slice_objective, x0, args=args, method="Nelder-Mead", options=_NM_OPTIONS)
        if result.fun < best_f and result.fun < _DIVERGED:
            best_x, best_f = result.x, float(result.fun)
    if best_x is None:
        raise CalibrationFailed(f"every SABR start diverged at tau={tau:.4f}")

    polished = minimize(_slice_objective, best_x, args=args, method="Nelder-Mead", options=_NM_OPTIONS)
    if polished.fun <= best_f:
        best_x, best_f = polished.x, float(polished.fun)

    alpha, _, rho, nu = _decode(best_x, beta)
    logger.debug(f"SABR slice tau={tau:.4f}: alpha={alpha:.5f} rho={rho:.4f} nu={nu:.4f} sse={best_f:.3e}")
    return SabrParams(alpha=alpha, beta=beta, rho=rho, nu=nu)


def calibrate_term_structure(
    quotes: Sequence[Quote],
    forward_curve: Mapping[float, float],
    beta: float = 1.0,
    min_quotes: int = 3,
) -> SabrTermStructure:
    """
    Calibrate every maturity slice holding at least `min_quotes` quotes

    Thinner slices are skipped and later covered by interpolation.

    Returns:
        Term structure over the calibrated slices
    """
    curve = dict(sorted(forward_curve.items()))
    slices: List[Tuple[float, SabrParams]] = []
    skipped = 0
    for tau, slice_quotes in group_by_maturity(quotes).items():
        if len(slice_quotes) < min_quotes:
            skipped += 1
            continue
        forward = float(np.interp(tau, list(curve), list(curve.values()))) if curve else 1.0
        slices.append((tau, calibrate_slice(slice_quotes, forward, tau, beta=beta)))
    if skipped:
        logger.debug(f"Skipped {skipped} SABR slices with fewer than {min_quotes} quotes")
    if not slices:
        raise CalibrationFailed(f"no maturity slice with at least {min_quotes} quotes")
    return SabrTermStructure(slices=tuple(slices), forward_curve=curve)


def interpolate_params(ts: SabrTermStructure, tau: float) -> SabrParams:
    """Component-wise linear interpolation in tau, flat beyond the end slices"""
    taus = ts.taus
    stacked = np.array([[p.alpha, p.beta, p.rho, p.nu] for _, p in ts.slices], dtype=float)
    alpha, beta, rho, nu = (float(np.interp(tau, taus, stacked[:, j])) for j in range(4))
    rho = min(max(rho, -RHO_LIMIT), RHO_LIMIT)
    return SabrParams(alpha=alpha, beta=beta, rho=rho, nu=nu)


def term_structure_vols(ts: SabrTermStructure, k: ArrayLike, tau: float) -> np.ndarray:
    """Vols at log-moneyness `k` on the maturity `tau` of the term structure"""
    params = interpolate_params(ts, tau)
    forward = ts.forward(tau)
    return np.atleast_1d(hagan_vol(params, forward, forward * np.exp(np.asarray(k, dtype=float)), tau))


def generate_surface(ts: SabrTermStructure, k_grid: Sequence[float], tau_grid: Sequence[float]) -> List[Quote]:
    """
    Evaluate the term structure on a dense (tau x k) grid

    Returns:
        len(k_grid) * len(tau_grid) quotes, maturity-major
    """
    if len(k_grid) == 0 or len(tau_grid) == 0:
        raise DomainError("surface grids must be non-empty")
    k = np.asarray(k_grid, dtype=float)
    surface: List[Quote] = []
    for tau in tau_grid:
        if tau <= 0:
            raise DomainError(f"grid maturities must be positive, got {tau}")
        vols = term_structure_vols(ts, k, float(tau))
        surface.extend(Quote.at(kj, tau, vj) for kj, vj in zip(k, vols))
    return surface


def default_tau_grid(maturities: Sequence[float]) -> List[float]:
    """Observed maturities plus the midpoints between consecutive ones"""
    taus = sorted(set(float(t) for t in maturities))
    grid = list(taus)
    grid.extend(0.5 * (a + b) for a, b in zip(taus, taus[1:]))
    return sorted(grid)
