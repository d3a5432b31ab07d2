"""
Core - Domain types shared by every module and deterministic task construction
A trading day is the unit of meta-learning; a task is a (context, targets) split of one day
"""

import datetime as dt
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import DomainError, InsufficientQuotes

logger = logging.getLogger('NeuroVol.Core')

VOL_CAP = 5.0
DEFAULT_SYNTHETIC_TARGETS = 256


@dataclass(frozen=True, order=True)
class Coordinate:
    """A point on the surface: log-moneyness k = ln(K/F) and time-to-expiry in years"""

    k: float
    tau: float

    def __post_init__(self):
        if not math.isfinite(self.k):
            raise DomainError(f"log-moneyness must be finite, got {self.k}")
        if not (math.isfinite(self.tau) and self.tau > 0):
            raise DomainError(f"time-to-expiry must be positive, got {self.tau}")


@dataclass(frozen=True)
class Quote:
    """One implied-volatility observation (absolute units, 0.20 = 20%)"""

    coord: Coordinate
    vol: float

    def __post_init__(self):
        if not (math.isfinite(self.vol) and 0.0 < self.vol < VOL_CAP):
            raise DomainError(f"implied vol must lie in (0, {VOL_CAP}), got {self.vol}")

    @property
    def k(self) -> float:
        return self.coord.k

    @property
    def tau(self) -> float:
        return self.coord.tau

    @classmethod
    def at(cls, k: float, tau: float, vol: float) -> "Quote":
        return cls(Coordinate(float(k), float(tau)), float(vol))


class OptionType(Enum):
    CALL = "call"
    PUT = "put"

    @classmethod
    def parse(cls, value: str) -> "OptionType":
        text = str(value).strip().lower()
        if text in ("c", "call"):
            return cls.CALL
        if text in ("p", "put"):
            return cls.PUT
        raise DomainError(f"Unknown option type: {value}")


@dataclass(frozen=True)
class RawQuoteRecord:
    """One row of the quote CSV, before conversion to vol space"""

    date: dt.date
    expiry: dt.date
    strike: float
    option_type: OptionType
    bid: float
    ask: float
    forward: float
    discount_factor: float

    def __post_init__(self):
        if self.expiry <= self.date:
            raise DomainError(f"expiry {self.expiry} is not after quote date {self.date}")
        if not (self.ask >= self.bid >= 0):
            raise DomainError(f"need ask >= bid >= 0, got bid={self.bid} ask={self.ask}")
        if self.strike <= 0 or self.forward <= 0:
            raise DomainError("strike and forward must be positive")
        if not (0.0 < self.discount_factor <= 1.0):
            raise DomainError(f"discount factor must lie in (0, 1], got {self.discount_factor}")

    @property
    def mid(self) -> float:
        return 0.5 * (self.bid + self.ask)

    @property
    def tau(self) -> float:
        return (self.expiry - self.date).days / 365.0

    @property
    def log_moneyness(self) -> float:
        return math.log(self.strike / self.forward)


@dataclass(frozen=True)
class DayRecord:
    """
    All quotes of one trading day

    Quotes are kept sorted by (tau, k) so every consumer sees one canonical order.
    `synthetic_surface` holds the dense SABR prior once built; `truth_surface`
    holds the noiseless generating surface of synthetic days.
    """

    day_id: int
    quotes: Tuple[Quote, ...]
    synthetic_surface: Optional[Tuple[Quote, ...]] = None
    forward_curve: Mapping[float, float] = field(default_factory=dict)
    date: Optional[dt.date] = None
    truth_surface: Optional[Tuple[Quote, ...]] = None
    discount_curve: Mapping[float, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.quotes:
            raise InsufficientQuotes(f"day {self.day_id} has no quotes")
        object.__setattr__(self, "quotes", tuple(sorted(self.quotes, key=_quote_key)))
        if self.synthetic_surface is not None:
            object.__setattr__(self, "synthetic_surface", tuple(self.synthetic_surface))
        if self.truth_surface is not None:
            object.__setattr__(self, "truth_surface", tuple(self.truth_surface))
        object.__setattr__(self, "forward_curve", dict(sorted(self.forward_curve.items())))
        object.__setattr__(self, "discount_curve", dict(sorted(self.discount_curve.items())))

    @property
    def label(self) -> str:
        return self.date.isoformat() if self.date else f"day-{self.day_id:05d}"

    def maturities(self) -> List[float]:
        return sorted({q.tau for q in self.quotes})

    def forward(self, tau: float) -> float:
        """Forward at tau, linear in tau between curve nodes and flat outside"""
        if not self.forward_curve:
            return 1.0
        taus = np.fromiter(self.forward_curve.keys(), dtype=float)
        fwds = np.fromiter(self.forward_curve.values(), dtype=float)
        return float(np.interp(tau, taus, fwds))

    def discount(self, tau: float) -> float:
        if not self.discount_curve:
            return 1.0
        return float(np.interp(tau, list(self.discount_curve), list(self.discount_curve.values())))

    def with_synthetic(self, surface: Optional[Sequence[Quote]]) -> "DayRecord":
        return replace(self, synthetic_surface=None if surface is None else tuple(surface))


class TaskSource(Enum):
    REAL_TO_REAL = "real_to_real"
    REAL_TO_SYNTHETIC = "real_to_synthetic"


@dataclass(frozen=True)
class Task:
    context: Tuple[Quote, ...]
    targets: Tuple[Quote, ...]
    day_id: int

    def __post_init__(self):
        if not self.context or not self.targets:
            raise InsufficientQuotes("a task needs at least one context and one target quote")

    @property
    def n_context(self) -> int:
        return len(self.context)

    @property
    def n_targets(self) -> int:
        return len(self.targets)


def _quote_key(quote: Quote) -> Tuple[float, float, float]:
    return (quote.tau, quote.k, quote.vol)


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic child seed for (seed, keys...) independent of call order"""
    sequence = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *(int(k) & 0xFFFFFFFF for k in keys)])
    return int(sequence.generate_state(1, dtype=np.uint32)[0])


def make_task(
    day: DayRecord,
    n_context: int,
    n_target: Optional[int] = None,
    source: TaskSource = TaskSource.REAL_TO_REAL,
    rng_seed: int = 0,
) -> Task:
    """
    Draw a (context, targets) task from one day

    The context is the first n_context entries of a seeded permutation of the
    day's quotes, so contexts drawn with the same seed are nested across sizes.

    Args:
        day: Source day
        n_context: Context size N
        n_target: Target count M; None means all remaining quotes
            (real_to_real) or DEFAULT_SYNTHETIC_TARGETS capped at the grid
            size (real_to_synthetic)
        source: Where targets come from
        rng_seed: Seed of the draw

    Returns:
        Task with context drawn uniformly without replacement
    """
    quotes = day.quotes
    if n_context < 1 or len(quotes) < n_context:
        raise InsufficientQuotes(
            f"day {day.day_id} has {len(quotes)} quotes, cannot draw a context of {n_context}"
        )
    rng = np.random.default_rng(rng_seed)
    order = rng.permutation(len(quotes))
    context = tuple(quotes[i] for i in order[:n_context])

    if source is TaskSource.REAL_TO_REAL:
        remaining = order[n_context:]
        wanted = len(remaining) if n_target is None else n_target
        if wanted < 1 or len(remaining) < wanted:
            raise InsufficientQuotes(
                f"day {day.day_id}: {len(remaining)} quotes left after the context, need {wanted} targets"
            )
        targets = tuple(quotes[i] for i in remaining[:wanted])
    else:
        surface = day.synthetic_surface
        if not surface:
            raise InsufficientQuotes(f"day {day.day_id} has no synthetic surface to draw targets from")
        wanted = min(DEFAULT_SYNTHETIC_TARGETS, len(surface)) if n_target is None else n_target
        if wanted < 1 or len(surface) < wanted:
            raise InsufficientQuotes(
                f"day {day.day_id}: synthetic surface has {len(surface)} points, need {wanted}"
            )
        picks = rng.choice(len(surface), size=wanted, replace=False)
        targets = tuple(surface[i] for i in picks)

    return Task(context=context, targets=targets, day_id=day.day_id)


def group_by_maturity(quotes: Sequence[Quote]) -> Dict[float, List[Quote]]:
    """Maturity slices sorted by tau, quotes inside each slice sorted by k"""
    slices: Dict[float, List[Quote]] = defaultdict(list)
    for quote in quotes:
        slices[quote.tau].append(quote)
    return {tau: sorted(slices[tau], key=lambda q: q.k) for tau in sorted(slices)}


def quotes_to_arrays(quotes: Sequence[Quote]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Columns (k, tau, vol) as float64 arrays"""
    k = np.array([q.k for q in quotes], dtype=float)
    tau = np.array([q.tau for q in quotes], dtype=float)
    vol = np.array([q.vol for q in quotes], dtype=float)
    return k, tau, vol


class Buckets:
    """Maturity and moneyness strata used for reporting and synthetic layouts"""

    MATURITY = ("short", "mid", "long")
    MONEYNESS = ("atm", "ntm", "ftm")
    # short: tau <= 3M, mid: 3M < tau <= 1Y, long: tau > 1Y
    MATURITY_EDGES = (0.25, 1.0)
    # atm: |k| <= 0.05, ntm: 0.05 < |k| <= 0.2, ftm: |k| > 0.2
    MONEYNESS_EDGES = (0.05, 0.2)

    @classmethod
    def maturity(cls, tau: float) -> str:
        if tau <= cls.MATURITY_EDGES[0]:
            return "short"
        if tau <= cls.MATURITY_EDGES[1]:
            return "mid"
        return "long"

    @classmethod
    def moneyness(cls, k: float) -> str:
        a = abs(k)
        if a <= cls.MONEYNESS_EDGES[0]:
            return "atm"
        if a <= cls.MONEYNESS_EDGES[1]:
            return "ntm"
        return "ftm"
