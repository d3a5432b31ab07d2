"""
GP - Gaussian-process regression baseline over (k, tau)
Anisotropic RBF kernel, hyperparameters by multi-start log-marginal-likelihood maximization
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg
from scipy.optimize import minimize

from .core import Coordinate, Quote
from .errors import DomainError, InsufficientQuotes, SingularKernel

logger = logging.getLogger('NeuroVol.GP')

NOISE_FLOOR = 1e-10
JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)
# Bounds on the log hyperparameters (signal, length_k, length_tau, noise)
LOG_BOUNDS = (
    (math.log(1e-8), math.log(1.0)),
    (math.log(1e-3), math.log(10.0)),
    (math.log(1e-3), math.log(20.0)),
    (math.log(NOISE_FLOOR), math.log(1e-1)),
)
_START_SCALES = ((1.0, 1.0), (0.3, 0.3), (3.0, 3.0))


@dataclass(frozen=True)
class GpHyper:
    signal_var: float
    length_k: float
    length_tau: float
    noise_var: float = 1e-6

    def __post_init__(self):
        if not (self.signal_var > 0 and self.length_k > 0 and self.length_tau > 0):
            raise DomainError(f"GP signal variance and lengthscales must be positive: {self}")
        if not self.noise_var >= NOISE_FLOOR:
            raise DomainError(f"GP noise variance must be >= {NOISE_FLOOR}: {self.noise_var}")

    def to_log(self) -> np.ndarray:
        return np.log([self.signal_var, self.length_k, self.length_tau, self.noise_var])

    @classmethod
    def from_log(cls, theta: np.ndarray) -> "GpHyper":
        clipped = [min(max(float(v), lo), hi) for v, (lo, hi) in zip(theta, LOG_BOUNDS)]
        signal, lk, lt, noise = np.exp(clipped)
        return cls(float(signal), float(lk), float(lt), max(float(noise), NOISE_FLOOR))


@dataclass(frozen=True)
class GpState:
    """A fitted GP: training inputs, prior mean, hyperparameters and the Cholesky factor"""

    x: np.ndarray
    y: np.ndarray
    prior_mean: float
    hyper: GpHyper
    cholesky: Tuple[np.ndarray, bool]
    weights: np.ndarray
    log_marginal_likelihood: float


def _coords(points: Sequence) -> np.ndarray:
    return np.array([[p.k, p.tau] for p in points], dtype=float)


def rbf_kernel(a: np.ndarray, b: np.ndarray, hyper: GpHyper) -> np.ndarray:
    dk = (a[:, None, 0] - b[None, :, 0]) / hyper.length_k
    dt = (a[:, None, 1] - b[None, :, 1]) / hyper.length_tau
    return hyper.signal_var * np.exp(-0.5 * (dk * dk + dt * dt))


def _factor(x: np.ndarray, hyper: GpHyper) -> Tuple[np.ndarray, Tuple[np.ndarray, bool]]:
    """Kernel matrix and Cholesky factor of K + noise*I, escalating jitter on failure"""
    kernel = rbf_kernel(x, x, hyper)
    eye = np.eye(len(x))
    for jitter in JITTERS:
        try:
            return kernel, linalg.cho_factor(kernel + (hyper.noise_var + jitter) * eye, lower=True)
        except linalg.LinAlgError:
            continue
    raise SingularKernel(f"kernel factorization failed with jitter up to {JITTERS[-1]}")


def log_marginal_likelihood(x: np.ndarray, y: np.ndarray, hyper: GpHyper) -> float:
    """log p(y | x, hyper) for residuals y about the prior mean"""
    _, chol = _factor(x, hyper)
    alpha = linalg.cho_solve(chol, y)
    half_logdet = float(np.sum(np.log(np.diag(chol[0]))))
    return float(-0.5 * y @ alpha - half_logdet - 0.5 * len(y) * math.log(2.0 * math.pi))


def _nlml_and_grad(theta: np.ndarray, x: np.ndarray, y: np.ndarray) -> Tuple[float, np.ndarray]:
    """Negative LML and its gradient with respect to the log hyperparameters"""
    hyper = GpHyper.from_log(theta)
    try:
        kernel, chol = _factor(x, hyper)
    except SingularKernel:
        return 1e10, np.zeros(4)
    alpha = linalg.cho_solve(chol, y)
    half_logdet = float(np.sum(np.log(np.diag(chol[0]))))
    value = 0.5 * float(y @ alpha) + half_logdet + 0.5 * len(y) * math.log(2.0 * math.pi)

    inverse = linalg.cho_solve(chol, np.eye(len(y)))
    inner = np.outer(alpha, alpha) - inverse
    dk2 = (x[:, None, 0] - x[None, :, 0]) ** 2 / hyper.length_k ** 2
    dt2 = (x[:, None, 1] - x[None, :, 1]) ** 2 / hyper.length_tau ** 2
    derivatives = (kernel, kernel * dk2, kernel * dt2, hyper.noise_var * np.eye(len(y)))
    grad = np.array([-0.5 * float(np.sum(inner * d)) for d in derivatives])
    return value, grad


def gp_fit(
    context: Sequence[Quote],
    init: Optional[GpHyper] = None,
    optimize: bool = True,
) -> GpState:
    """
    Fit the GP to a context set

    Args:
        context: At least 2 quotes, not all at one coordinate
        init: Starting hyperparameters; defaults scale with the data
        optimize: Maximize the LML (multi-start L-BFGS-B in log space);
            False keeps `init` as is

    Returns:
        Fitted GpState
    """
    if len(context) < 2:
        raise InsufficientQuotes(f"GP needs at least 2 context points, got {len(context)}")
    x = _coords(context)
    if np.all(x == x[0]):
        raise DomainError("GP context coordinates are all identical")
    vols = np.array([q.vol for q in context], dtype=float)
    prior_mean = float(vols.mean())
    y = vols - prior_mean

    if init is None:
        init = GpHyper(signal_var=max(float(y.var()), 1e-6), length_k=0.2, length_tau=0.5, noise_var=1e-6)
    hyper = init
    if optimize:
        base = init.to_log()
        candidates: List[Tuple[float, np.ndarray]] = []
        for scale_k, scale_t in _START_SCALES:
            start = base + np.array([0.0, math.log(scale_k), math.log(scale_t), 0.0])
            start = np.array([min(max(v, lo), hi) for v, (lo, hi) in zip(start, LOG_BOUNDS)])
            candidates.append((_nlml_and_grad(start, x, y)[0], start))
            result = minimize(_nlml_and_grad, start, args=(x, y), jac=True, method="L-BFGS-B", bounds=LOG_BOUNDS)
            if np.all(np.isfinite(result.x)):
                candidates.append((float(result.fun), result.x))
        best = min(candidates, key=lambda item: item[0])
        hyper = GpHyper.from_log(best[1])

    _, chol = _factor(x, hyper)
    weights = linalg.cho_solve(chol, y)
    lml = log_marginal_likelihood(x, y, hyper)
    logger.debug(f"GP fit on {len(context)} points: {hyper} lml={lml:.3f}")
    return GpState(x=x, y=y, prior_mean=prior_mean, hyper=hyper, cholesky=chol, weights=weights, log_marginal_likelihood=lml)


def gp_predict(state: GpState, targets: Sequence[Coordinate]) -> List[Tuple[float, float]]:
    """Posterior (mean, variance) of the latent surface at each target"""
    if len(targets) == 0:
        return []
    xt = _coords(targets)
    cross = rbf_kernel(xt, state.x, state.hyper)
    mean = state.prior_mean + cross @ state.weights
    solved = linalg.cho_solve(state.cholesky, cross.T)
    variance = np.maximum(state.hyper.signal_var - np.sum(cross * solved.T, axis=1), 0.0)
    return [(float(m), float(v)) for m, v in zip(mean, variance)]
