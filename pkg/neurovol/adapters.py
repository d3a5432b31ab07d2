"""
Adapters - One fit-then-predict surface for every evaluated model
Classical models calibrate per day inside fit_day; VolNP encodes the context with frozen weights
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from typing import Callable, List, Optional, Sequence

import numpy as np

from .arbitrage import AnalyticFn, ssvi_analytic
from .core import Coordinate, DayRecord, Quote, group_by_maturity
from .errors import ConfigError
from .gp import GpState, gp_fit, gp_predict
from .sabr import SabrTermStructure, calibrate_term_structure, term_structure_vols
from .ssvi import SsviParams, calibrate_ssvi, ssvi_vol
from .volnp import VolatilityNeuralProcess, decode

logger = logging.getLogger('NeuroVol.Adapters')


class ModelKind(str, Enum):
    VOLNP_FT = "volnp_ft"
    VOLNP_BASE = "volnp_base"
    SABR = "sabr"
    SSVI = "ssvi"
    GP = "gp"

    @property
    def label(self) -> str:
        return {
            ModelKind.VOLNP_FT: "VolNP-FT",
            ModelKind.VOLNP_BASE: "VolNP-Base",
            ModelKind.SABR: "SABR",
            ModelKind.SSVI: "SSVI",
            ModelKind.GP: "GP",
        }[self]


@dataclass(frozen=True)
class Prediction:
    """Point predictions and, for probabilistic models, predictive variances"""

    means: np.ndarray
    variances: Optional[np.ndarray] = None


class DayFit(ABC):
    """A model conditioned on one day's context"""

    analytic: Optional[AnalyticFn] = None

    @abstractmethod
    def predict(self, coords: Sequence[Coordinate]) -> Prediction:
        ...

    def surface(self, k: np.ndarray, tau: float) -> np.ndarray:
        """Vectorized smile at one maturity, the form the arbitrage checks consume"""
        ks = np.atleast_1d(np.asarray(k, dtype=float))
        return self.predict([Coordinate(float(kk), float(tau)) for kk in ks]).means


class ModelAdapter(ABC):
    name: str

    @abstractmethod
    def fit_day(self, context: Sequence[Quote], day: DayRecord) -> DayFit:
        ...


def _by_slice(coords: Sequence[Coordinate], evaluate: Callable[[np.ndarray, float], np.ndarray]) -> np.ndarray:
    """Evaluate a per-maturity smile function at arbitrary coordinates, preserving order"""
    out = np.empty(len(coords))
    taus = np.array([c.tau for c in coords])
    ks = np.array([c.k for c in coords])
    for tau in np.unique(taus):
        mask = taus == tau
        out[mask] = evaluate(ks[mask], float(tau))
    return out


# ==================== SABR ====================

class _SabrFit(DayFit):
    def __init__(self, ts: SabrTermStructure):
        self.ts = ts

    def predict(self, coords: Sequence[Coordinate]) -> Prediction:
        return Prediction(_by_slice(coords, lambda k, tau: term_structure_vols(self.ts, k, tau)))

    def surface(self, k, tau):
        return term_structure_vols(self.ts, k, tau)


class SabrAdapter(ModelAdapter):
    """Per-slice Hagan SABR calibrated on the context, interpolated across maturities"""

    def __init__(self, beta: float = 1.0, min_quotes: int = 3, name: str = ModelKind.SABR.label):
        self.beta = beta
        self.min_quotes = min_quotes
        self.name = name

    def fit_day(self, context, day):
        return _SabrFit(calibrate_term_structure(context, day.forward_curve, self.beta, self.min_quotes))


# ==================== SSVI ====================

class _SsviFit(DayFit):
    def __init__(self, params: SsviParams):
        self.params = params
        self.analytic = ssvi_analytic(params)

    def predict(self, coords):
        return Prediction(_by_slice(coords, lambda k, tau: np.atleast_1d(ssvi_vol(self.params, k, tau))))

    def surface(self, k, tau):
        return np.atleast_1d(ssvi_vol(self.params, k, tau))


class SsviAdapter(ModelAdapter):
    def __init__(self, name: str = ModelKind.SSVI.label):
        self.name = name

    def fit_day(self, context, day):
        return _SsviFit(calibrate_ssvi(context))


# ==================== GP ====================

class _GpFit(DayFit):
    def __init__(self, state: GpState):
        self.state = state

    def predict(self, coords):
        pairs = gp_predict(self.state, coords)
        means = np.array([m for m, _ in pairs])
        # Predictive variance of an observation includes the fitted noise
        variances = np.array([v for _, v in pairs]) + self.state.hyper.noise_var
        return Prediction(means, variances)


class GpAdapter(ModelAdapter):
    def __init__(self, name: str = ModelKind.GP.label):
        self.name = name

    def fit_day(self, context, day):
        return _GpFit(gp_fit(context))


# ==================== VolNP ====================

class _VolnpFit(DayFit):
    def __init__(self, model: VolatilityNeuralProcess, encoded: np.ndarray):
        self.model = model
        self.encoded = encoded

    def predict(self, coords):
        if len(coords) == 0:
            return Prediction(np.empty(0), np.empty(0))
        preds = decode(self.encoded, coords, self.model.params, self.model.cfg)
        return Prediction(np.array([p.mu for p in preds]), np.array([p.variance for p in preds]))


class VolnpAdapter(ModelAdapter):
    """Frozen VolNP weights: no per-day calibration, only an encoder pass over the context"""

    def __init__(self, model: VolatilityNeuralProcess, name: str = "VolNP"):
        self.model = model
        self.name = name

    def fit_day(self, context, day):
        return _VolnpFit(self.model, self.model.encode(context))


def build_adapter(
    kind: ModelKind,
    model: Optional[VolatilityNeuralProcess] = None,
    sabr_beta: float = 1.0,
) -> ModelAdapter:
    """Construct the adapter for one evaluated model; VolNP kinds need a loaded model"""
    kind = ModelKind(kind)
    if kind in (ModelKind.VOLNP_FT, ModelKind.VOLNP_BASE):
        if model is None:
            raise ConfigError(f"{kind.label} needs a checkpoint")
        return VolnpAdapter(model, name=kind.label)
    if kind is ModelKind.SABR:
        return SabrAdapter(beta=sabr_beta)
    if kind is ModelKind.SSVI:
        return SsviAdapter()
    return GpAdapter()


def smile_maturities(day: DayRecord) -> List[float]:
    return list(group_by_maturity(day.quotes))
