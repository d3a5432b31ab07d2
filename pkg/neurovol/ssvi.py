"""
SSVI - Surface SVI with power-law curvature, calibration under static-arbitrage constraints
The arbitrage-free parametric baseline
"""

import json
import logging
import math
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import isotonic_regression, minimize, minimize_scalar

from .core import Quote, group_by_maturity
from .errors import CalibrationFailed, DomainError, InsufficientQuotes

logger = logging.getLogger('NeuroVol.SSVI')

THETA_FLOOR = 1e-8
# Constraint slack kept when shrinking eta onto the admissible set
_SAFETY = 1.0 - 1e-9
_PENALTY = 1e3
_STARTS = ((-0.5, 1.0, 0.4), (-0.2, 0.5, 0.3), (-0.8, 1.5, 0.45))
_OUTER_OPTIONS = {"xatol": 1e-6, "fatol": 1e-12, "maxiter": 800, "maxfev": 1600}

ArrayLike = Union[float, Sequence[float], np.ndarray]


@dataclass(frozen=True)
class SsviParams:
    """
    SSVI surface: an ATM total-variance curve theta(tau) plus global (rho, eta, gamma_exp)

    phi(theta) = eta * theta ** -gamma_exp. Construction enforces a
    non-decreasing theta curve and both static-arbitrage inequalities
    theta*phi*(1+|rho|) <= 4 and theta*phi**2*(1+|rho|) <= 4.
    """

    theta_curve: Tuple[Tuple[float, float], ...]
    rho: float
    eta: float
    gamma_exp: float

    def __post_init__(self):
        curve = tuple((float(t), float(th)) for t, th in self.theta_curve)
        object.__setattr__(self, "theta_curve", curve)
        if not curve:
            raise DomainError("SSVI theta curve is empty")
        taus = [t for t, _ in curve]
        thetas = [th for _, th in curve]
        if any(b <= a for a, b in zip(taus, taus[1:])):
            raise DomainError(f"theta curve maturities must increase: {taus}")
        if any(th < 0 for th in thetas):
            raise DomainError("theta values must be non-negative")
        if any(b < a for a, b in zip(thetas, thetas[1:])):
            raise DomainError("theta must be non-decreasing in tau (calendar spread)")
        if not (-1.0 < self.rho < 1.0):
            raise DomainError(f"SSVI rho must lie in (-1, 1), got {self.rho}")
        if not self.eta > 0:
            raise DomainError(f"SSVI eta must be positive, got {self.eta}")
        if not (0.0 < self.gamma_exp < 1.0):
            raise DomainError(f"SSVI gamma_exp must lie in (0, 1), got {self.gamma_exp}")

    @property
    def taus(self) -> np.ndarray:
        return np.array([t for t, _ in self.theta_curve])

    @property
    def thetas(self) -> np.ndarray:
        return np.array([th for _, th in self.theta_curve])

    def theta(self, tau: float) -> float:
        """
        ATM total variance at tau

        Linear between nodes, proportional to tau before the first node and
        continued with the last segment's (non-negative) slope after the last.
        Short-end values never drop below `butterfly_theta_floor`, so the
        static-arbitrage inequalities hold at every maturity, not only on the nodes.
        """
        taus, thetas = self.taus, self.thetas
        if tau <= taus[0]:
            floor = min(self.butterfly_theta_floor(), thetas[0])
            return float(max(thetas[0] * tau / taus[0], floor))
        if tau >= taus[-1]:
            slope = (thetas[-1] - thetas[-2]) / (taus[-1] - taus[-2]) if len(taus) > 1 else thetas[-1] / taus[-1]
            return float(thetas[-1] + slope * (tau - taus[-1]))
        return float(np.interp(tau, taus, thetas))

    def phi(self, theta: float) -> float:
        return self.eta * theta ** (-self.gamma_exp)

    def butterfly_theta_floor(self) -> float:
        """
        Smallest theta with theta*phi**2*(1+|rho|) <= 4

        theta*phi**2 = eta**2 * theta**(1 - 2*gamma_exp) only grows as theta
        shrinks when gamma_exp > 1/2; otherwise every theta >= 0 qualifies.
        theta*phi*(1+|rho|) is increasing in theta and needs no floor.
        """
        if self.gamma_exp <= 0.5:
            return 0.0
        scale = 1.0 + abs(self.rho)
        return float((self.eta * self.eta * scale / 4.0) ** (1.0 / (2.0 * self.gamma_exp - 1.0)))

    def constraint_slack(self) -> Tuple[float, float]:
        """Smallest slack of the two static-arbitrage inequalities over the curve (>= 0 when admissible)"""
        thetas = self.thetas[self.thetas > 0]
        if len(thetas) == 0:
            return 4.0, 4.0
        phi = self.eta * thetas ** (-self.gamma_exp)
        scale = 1.0 + abs(self.rho)
        first = 4.0 - thetas * phi * scale
        second = 4.0 - thetas * phi * phi * scale
        return float(first.min()), float(second.min())

    def to_json(self) -> str:
        document = asdict(self)
        document["theta_curve"] = [{"tau": t, "theta": th} for t, th in self.theta_curve]
        return json.dumps(document, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SsviParams":
        document = json.loads(text)
        curve = tuple((p["tau"], p["theta"]) for p in document["theta_curve"])
        return cls(theta_curve=curve, rho=document["rho"], eta=document["eta"], gamma_exp=document["gamma_exp"])


def _raw_total_variance(theta: float, phi: float, rho: float, k: np.ndarray) -> np.ndarray:
    pk = phi * k
    return 0.5 * theta * (1.0 + rho * pk + np.sqrt((pk + rho) ** 2 + 1.0 - rho * rho))


def ssvi_total_variance(p: SsviParams, k: ArrayLike, tau: float) -> Union[float, np.ndarray]:
    """
    w(k, tau) = theta/2 * (1 + rho*phi*k + sqrt((phi*k + rho)^2 + 1 - rho^2))

    Args:
        p: Surface parameters
        k: Log-moneyness (scalar or array)
        tau: Maturity in years

    Returns:
        Total implied variance, same shape as `k`
    """
    theta = p.theta(tau)
    if theta < 0:
        raise DomainError(f"interpolated theta is negative at tau={tau}")
    ks = np.asarray(k, dtype=float)
    if theta == 0:
        w = np.zeros_like(ks)
    else:
        w = _raw_total_variance(theta, p.phi(theta), p.rho, ks)
    return float(w) if w.ndim == 0 else w


def ssvi_vol(p: SsviParams, k: ArrayLike, tau: float) -> Union[float, np.ndarray]:
    """Implied vol sqrt(w / tau)"""
    return np.sqrt(np.asarray(ssvi_total_variance(p, k, tau)) / tau)


def ssvi_slice_derivatives(p: SsviParams, k: ArrayLike, tau: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Closed-form (w, dw/dk, d2w/dk2) of one maturity slice"""
    theta = p.theta(tau)
    ks = np.atleast_1d(np.asarray(k, dtype=float))
    phi = p.phi(theta)
    rho = p.rho
    root = np.sqrt((phi * ks + rho) ** 2 + 1.0 - rho * rho)
    w = 0.5 * theta * (1.0 + rho * phi * ks + root)
    dw = 0.5 * theta * phi * (rho + (phi * ks + rho) / root)
    d2w = 0.5 * theta * phi * phi * (1.0 - rho * rho) / root ** 3
    return w, dw, d2w


def admissible_eta(thetas: np.ndarray, rho: float, eta: float, gamma_exp: float) -> float:
    """Largest eta' <= eta satisfying both static-arbitrage inequalities on every theta"""
    positive = thetas[thetas > 0]
    if len(positive) == 0:
        return eta
    scale = 1.0 + abs(rho)
    # theta*phi = eta * theta^(1-g) and theta*phi^2 = eta^2 * theta^(1-2g)
    bound_first = np.min(4.0 / (scale * positive ** (1.0 - gamma_exp)))
    bound_second = np.min(np.sqrt(4.0 / (scale * positive ** (1.0 - 2.0 * gamma_exp))))
    return float(min(eta, _SAFETY * bound_first, _SAFETY * bound_second))


def _penalty(thetas: np.ndarray, rho: float, eta: float, gamma_exp: float) -> float:
    positive = thetas[thetas > 0]
    if len(positive) == 0:
        return 0.0
    scale = 1.0 + abs(rho)
    phi = eta * positive ** (-gamma_exp)
    first = np.maximum(positive * phi * scale - 4.0, 0.0)
    second = np.maximum(positive * phi * phi * scale - 4.0, 0.0)
    return float(_PENALTY * (np.sum(first ** 2) + np.sum(second ** 2)))


class _SliceData:
    __slots__ = ("tau", "k", "vol", "theta_hi")

    def __init__(self, tau: float, quotes: Sequence[Quote]):
        self.tau = tau
        self.k = np.array([q.k for q in quotes], dtype=float)
        self.vol = np.array([q.vol for q in quotes], dtype=float)
        self.theta_hi = max(4.0 * float(np.max(self.vol)) ** 2 * tau, 1e-4)


def _fit_theta(data: _SliceData, rho: float, eta: float, gamma_exp: float) -> Tuple[float, float]:
    """Best theta for one slice given the global parameters; returns (theta, penalized sse)"""

    def sse(theta: float) -> float:
        phi = eta * theta ** (-gamma_exp)
        w = _raw_total_variance(theta, phi, rho, data.k)
        model = np.sqrt(np.maximum(w, 0.0) / data.tau)
        return float(np.sum((model - data.vol) ** 2)) + _penalty(np.array([theta]), rho, eta, gamma_exp)

    result = minimize_scalar(sse, bounds=(THETA_FLOOR, data.theta_hi), method="bounded", options={"xatol": 1e-12})
    return float(result.x), float(result.fun)


def _decode(u: np.ndarray) -> Tuple[float, float, float]:
    rho = float(np.clip(np.tanh(u[0]), -0.999, 0.999))
    eta = float(np.exp(np.clip(u[1], -10.0, 5.0)))
    gamma_exp = float(np.clip(1.0 / (1.0 + np.exp(-u[2])), 1e-3, 1.0 - 1e-3))
    return rho, eta, gamma_exp


def _surface_sse(slices: List[_SliceData], thetas: np.ndarray, rho: float, eta: float, gamma_exp: float) -> float:
    total = 0.0
    for data, theta in zip(slices, thetas):
        if theta <= 0:
            model = np.zeros_like(data.vol)
        else:
            w = _raw_total_variance(theta, eta * theta ** (-gamma_exp), rho, data.k)
            model = np.sqrt(np.maximum(w, 0.0) / data.tau)
        total += float(np.sum((model - data.vol) ** 2))
    return total


def calibrate_ssvi(quotes: Sequence[Quote], init: Optional[SsviParams] = None) -> SsviParams:
    """
    Fit an SSVI surface to quotes spanning several maturities

    The outer Nelder-Mead search runs over the global (rho, eta, gamma_exp) in
    unconstrained coordinates; for each candidate every slice's theta is the
    bounded 1-D minimizer of that slice's error, with a smooth penalty on the
    static-arbitrage inequalities. The winning thetas are projected onto a
    non-decreasing curve and eta is shrunk onto the admissible set, so the
    returned parameters satisfy every constraint exactly.

    Args:
        quotes: At least 5 quotes on at least 2 maturities
        init: Optional starting point for the global parameters

    Returns:
        Calibrated SsviParams
    """
    slices_by_tau = group_by_maturity(quotes)
    if len(quotes) < 5 or len(slices_by_tau) < 2:
        raise InsufficientQuotes(
            f"SSVI needs >= 5 quotes on >= 2 maturities, got {len(quotes)} on {len(slices_by_tau)}"
        )
    slices = [_SliceData(tau, qs) for tau, qs in slices_by_tau.items()]

    def objective(u: np.ndarray) -> float:
        rho, eta, gamma_exp = _decode(u)
        return sum(_fit_theta(data, rho, eta, gamma_exp)[1] for data in slices)

    starts = [np.array([math.atanh(r), math.log(e), math.log(g / (1.0 - g))]) for r, e, g in _STARTS]
    if init is not None:
        g = min(max(init.gamma_exp, 1e-3), 1 - 1e-3)
        starts.insert(0, np.array([math.atanh(np.clip(init.rho, -0.99, 0.99)), math.log(init.eta), math.log(g / (1 - g))]))

    best_u, best_f = None, math.inf
    for u0 in starts:
        result = minimize(objective, u0, method="Nelder-Mead", options=_OUTER_OPTIONS)
        if math.isfinite(result.fun) and result.fun < best_f:
            best_u, best_f = result.x, float(result.fun)
    if best_u is None:
        raise CalibrationFailed("SSVI calibration diverged from every start")

    rho, eta, gamma_exp = _decode(best_u)
    thetas = np.array([_fit_theta(data, rho, eta, gamma_exp)[0] for data in slices])
    taus = np.array([data.tau for data in slices])
    # Volume-weighted isotonic projection keeps the curve calendar-arbitrage free
    weights = np.array([len(data.k) for data in slices], dtype=float)
    thetas = np.maximum(isotonic_regression(thetas, weights=weights, increasing=True).x, THETA_FLOOR)
    thetas = np.maximum.accumulate(thetas)
    eta = admissible_eta(thetas, rho, eta, gamma_exp)

    params = SsviParams(theta_curve=tuple(zip(taus, thetas)), rho=rho, eta=eta, gamma_exp=gamma_exp)
    slack = params.constraint_slack()
    if min(slack) < 0:
        raise CalibrationFailed(f"SSVI projection left a constraint violated (slack {slack})")
    logger.debug(
        f"SSVI fit: rho={rho:.4f} eta={eta:.4f} gamma={gamma_exp:.4f} "
        f"sse={_surface_sse(slices, thetas, rho, eta, gamma_exp):.3e}"
    )
    return params
