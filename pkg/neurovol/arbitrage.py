"""
Arbitrage - Butterfly-arbitrage diagnostics on total-variance slices
Durrleman's g(k) from finite differences (or closed forms), violation intervals and surface reports
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid
from scipy.special import ndtr

from .errors import DomainError, IoError
from .ssvi import SsviParams, ssvi_slice_derivatives, ssvi_vol

logger = logging.getLogger('NeuroVol.Arbitrage')

VIOLATION_TOL = 1e-8
REFINE_BELOW = 1e-4

# (k array, tau) -> implied vols at those k
SurfaceFn = Callable[[np.ndarray, float], np.ndarray]
# (k array, tau) -> (w, dw/dk, d2w/dk2)
AnalyticFn = Callable[[np.ndarray, float], Tuple[np.ndarray, np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class SliceDiagnostic:
    tau: float
    k_grid: Tuple[float, ...]
    g_values: Tuple[float, ...]
    violation_intervals: Tuple[Tuple[float, float], ...]
    min_g: float
    violation_measure: float

    @property
    def clean(self) -> bool:
        return not self.violation_intervals

    def to_dict(self) -> dict:
        document = asdict(self)
        document["violation_intervals"] = [list(iv) for iv in self.violation_intervals]
        return document


@dataclass(frozen=True)
class SurfaceReport:
    slices: Tuple[SliceDiagnostic, ...]
    fraction_clean: float
    total_violation_measure: float

    def to_dict(self) -> dict:
        return {
            "summary": {
                "n_slices": len(self.slices),
                "fraction_clean": self.fraction_clean,
                "total_violation_measure": self.total_violation_measure,
            },
            "slices": [s.to_dict() for s in self.slices],
        }

    def write_json(self, path: Path) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")
        except OSError as e:
            raise IoError(f"Failed to write arbitrage report {path}: {e}") from e
        return path

    def write_csv(self, path: Path) -> Path:
        """Long format: one row per (tau, k) with g and a violation flag"""
        rows = [
            (s.tau, k, g, int(g < -VIOLATION_TOL))
            for s in self.slices
            for k, g in zip(s.k_grid, s.g_values)
        ]
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            pd.DataFrame(rows, columns=["tau", "k", "g", "violation"]).to_csv(path, index=False, float_format="%.17g")
        except OSError as e:
            raise IoError(f"Failed to write arbitrage CSV {path}: {e}") from e
        return path


def g_from_derivatives(k: np.ndarray, w: np.ndarray, dw: np.ndarray, d2w: np.ndarray) -> np.ndarray:
    """g(k) = (1 - k w'/(2w))^2 - (w'^2/4)(1/w + 1/4) + w''/2"""
    return (1.0 - k * dw / (2.0 * w)) ** 2 - 0.25 * dw * dw * (1.0 / w + 0.25) + 0.5 * d2w


def _total_variance(surface_fn: SurfaceFn, k: np.ndarray, tau: float) -> np.ndarray:
    vols = np.asarray(surface_fn(k, tau), dtype=float).reshape(k.shape)
    if not np.all(np.isfinite(vols)) or np.any(vols <= 0):
        raise DomainError(f"surface vols must be positive and finite on the grid (tau={tau})")
    return vols * vols * tau


def _central(surface_fn: SurfaceFn, k: np.ndarray, tau: float, h: float, w: np.ndarray):
    up = _total_variance(surface_fn, k + h, tau)
    down = _total_variance(surface_fn, k - h, tau)
    return (up - down) / (2.0 * h), (up - 2.0 * w + down) / (h * h)


def violation_intervals(k: np.ndarray, g: np.ndarray, tol: float = VIOLATION_TOL) -> List[Tuple[float, float]]:
    """Contiguous runs of grid points with g < -tol, as (first k, last k)"""
    bad = g < -tol
    intervals = []
    start = None
    for i, flag in enumerate(bad):
        if flag and start is None:
            start = i
        if not flag and start is not None:
            intervals.append((float(k[start]), float(k[i - 1])))
            start = None
    if start is not None:
        intervals.append((float(k[start]), float(k[-1])))
    return intervals


def durrleman_g(
    surface_fn: SurfaceFn,
    tau: float,
    k_grid: Sequence[float],
    fd_step: float = 1e-3,
    analytic: Optional[AnalyticFn] = None,
) -> SliceDiagnostic:
    """
    Durrleman's butterfly condition on one maturity slice

    w = vol^2 * tau is differentiated by central differences with step
    fd_step; where |g| < 1e-4 the derivatives are Richardson-refined with a
    half step. When `analytic` is given its closed-form derivatives are used
    instead.

    Args:
        surface_fn: Vectorized (k, tau) -> vol
        tau: Maturity of the slice
        k_grid: Log-moneyness points
        fd_step: Finite-difference step in k
        analytic: Optional closed-form (w, w', w'')

    Returns:
        SliceDiagnostic with violations where g < -1e-8
    """
    if fd_step <= 0:
        raise DomainError(f"fd_step must be positive, got {fd_step}")
    k = np.asarray(k_grid, dtype=float)
    if k.size == 0:
        raise DomainError("k grid is empty")

    if analytic is not None:
        w, dw, d2w = (np.asarray(a, dtype=float) for a in analytic(k, tau))
        if np.any(w <= 0):
            raise DomainError(f"total variance must be positive (tau={tau})")
        g = g_from_derivatives(k, w, dw, d2w)
    else:
        w = _total_variance(surface_fn, k, tau)
        dw, d2w = _central(surface_fn, k, tau, fd_step, w)
        g = g_from_derivatives(k, w, dw, d2w)
        near = np.abs(g) < REFINE_BELOW
        if np.any(near):
            kn, wn = k[near], w[near]
            dw_half, d2w_half = _central(surface_fn, kn, tau, 0.5 * fd_step, wn)
            dw_ref = dw_half + (dw_half - dw[near]) / 3.0
            d2w_ref = d2w_half + (d2w_half - d2w[near]) / 3.0
            g[near] = g_from_derivatives(kn, wn, dw_ref, d2w_ref)

    intervals = violation_intervals(k, g)
    measure = float(trapezoid(np.maximum(-g, 0.0), k)) if k.size > 1 else 0.0
    return SliceDiagnostic(
        tau=float(tau),
        k_grid=tuple(k.tolist()),
        g_values=tuple(g.tolist()),
        violation_intervals=tuple(intervals),
        min_g=float(g.min()),
        violation_measure=measure if intervals else 0.0,
    )


def surface_report(
    surface_fn: SurfaceFn,
    tau_list: Sequence[float],
    k_grid: Sequence[float],
    fd_step: float = 1e-3,
    analytic: Optional[AnalyticFn] = None,
    max_workers: Optional[int] = None,
) -> SurfaceReport:
    """Durrleman diagnostics for every slice plus the share of clean slices and the total violation measure"""
    if len(tau_list) == 0 or len(k_grid) == 0:
        raise DomainError("surface_report needs non-empty tau and k grids")
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        slices = tuple(pool.map(lambda tau: durrleman_g(surface_fn, tau, k_grid, fd_step, analytic), tau_list))
    clean = sum(1 for s in slices if s.clean)
    report = SurfaceReport(
        slices=slices,
        fraction_clean=clean / len(slices),
        total_violation_measure=float(sum(s.violation_measure for s in slices)),
    )
    if clean < len(slices):
        logger.debug(f"{len(slices) - clean}/{len(slices)} slices violate the butterfly condition")
    return report


def ssvi_surface_fn(params: SsviParams) -> SurfaceFn:
    return lambda k, tau: np.atleast_1d(ssvi_vol(params, k, tau))


def ssvi_analytic(params: SsviParams) -> AnalyticFn:
    return lambda k, tau: ssvi_slice_derivatives(params, k, tau)


def call_prices(surface_fn: SurfaceFn, tau: float, strikes: np.ndarray) -> np.ndarray:
    """Undiscounted Black calls on a unit forward at the surface's vols"""
    strikes = np.asarray(strikes, dtype=float)
    log_k = np.log(strikes)
    sd = np.sqrt(_total_variance(surface_fn, log_k, tau))
    d1 = (-log_k + 0.5 * sd * sd) / sd
    return ndtr(d1) - strikes * ndtr(d1 - sd)


def risk_neutral_density(surface_fn: SurfaceFn, tau: float, k_grid: Sequence[float], dk: float = 1e-3) -> np.ndarray:
    """Second strike derivative of call prices (unit forward) at K = exp(k)"""
    strikes = np.exp(np.asarray(k_grid, dtype=float))
    dK = dk * strikes
    up = call_prices(surface_fn, tau, strikes + dK)
    mid = call_prices(surface_fn, tau, strikes)
    down = call_prices(surface_fn, tau, strikes - dK)
    return (up - 2.0 * mid + down) / (dK * dK)
