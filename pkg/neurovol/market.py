"""
Market - Quote ingestion, on-disk day bundles and the synthetic option market
Raw bid/ask CSVs become DayRecords in vol space; SABR priors are attached per day
"""

import datetime as dt
import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import ndtr

from .blackvol import BlackInputs, black_price, implied_vol
from .config import PreprocessConfig, PriorConfig, SyntheticMarketConfig, grid_points
from .core import VOL_CAP, Buckets, DayRecord, OptionType, Quote, RawQuoteRecord
from .errors import (
    CalibrationFailed,
    DomainError,
    EmptyAfterFilter,
    InsufficientQuotes,
    IoError,
    NeuroVolError,
    NoConvergence,
    OutOfBounds,
)
from .sabr import (
    SabrParams,
    SabrTermStructure,
    calibrate_term_structure,
    default_tau_grid,
    generate_surface,
    term_structure_vols,
)
from .ssvi import SsviParams, admissible_eta, ssvi_vol

logger = logging.getLogger('NeuroVol.Market')

QUOTE_COLUMNS = ["date", "expiry", "strike", "type", "bid", "ask", "forward", "discount_factor"]
SURFACE_COLUMNS = ["k", "tau", "vol"]
QUOTES_FILE = "quotes.csv"
PRIOR_FILE = "sabr_surface.csv"
TRUTH_FILE = "truth_surface.csv"
TRUTH_K_STEP = 0.025
_MIX_RANGE = (0.3, 0.7)
_SPOT_VOL = 0.01


# ==================== Ingestion ====================

def ingest_day(records: Sequence[RawQuoteRecord], cfg: PreprocessConfig, day_id: int = 0) -> DayRecord:
    """
    Turn one day's raw quotes into vol-space quotes

    Mid prices are inverted with Black-76 against each record's forward and
    discount factor. Quotes failing the liquidity filters, the (k, tau) ranges
    or the inversion are dropped and counted per reason.

    Args:
        records: Quotes of a single date
        cfg: Filters
        day_id: Identifier given to the resulting DayRecord

    Returns:
        DayRecord with forward and discount curves keyed by tau
    """
    if not records:
        raise EmptyAfterFilter(f"day {day_id} has no records")
    dates = {r.date for r in records}
    if len(dates) != 1:
        raise DomainError(f"ingest_day expects one date, got {sorted(dates)}")
    date = dates.pop()

    dropped: Counter = Counter()
    kept: Dict[Tuple[float, float], Tuple[float, Quote]] = {}
    forwards: Dict[float, List[float]] = {}
    discounts: Dict[float, List[float]] = {}
    duplicates = 0
    for record in records:
        if record.bid <= cfg.min_bid:
            dropped["bid"] += 1
            continue
        mid = record.mid
        rel_spread = (record.ask - record.bid) / mid
        if rel_spread > cfg.max_rel_spread:
            dropped["spread"] += 1
            continue
        k, tau = record.log_moneyness, record.tau
        if not (cfg.k_range[0] <= k <= cfg.k_range[1]) or not (cfg.tau_range[0] <= tau <= cfg.tau_range[1]):
            dropped["range"] += 1
            continue
        inputs = BlackInputs(record.forward, record.strike, tau, record.discount_factor, record.option_type)
        try:
            vol = implied_vol(inputs, mid)
        except (OutOfBounds, NoConvergence, DomainError):
            dropped["inversion"] += 1
            continue
        if not (0.0 < vol < VOL_CAP):
            dropped["inversion"] += 1
            continue
        quote = Quote.at(k, tau, vol)
        forwards.setdefault(tau, []).append(record.forward)
        discounts.setdefault(tau, []).append(record.discount_factor)
        key = (k, tau)
        if cfg.dedup and key in kept:
            duplicates += 1
            # Keep the tighter market at a repeated coordinate
            if rel_spread < kept[key][0]:
                kept[key] = (rel_spread, quote)
            continue
        kept[key if cfg.dedup else (k, tau, len(kept))] = (rel_spread, quote)

    if dropped or duplicates:
        reasons = ", ".join(f"{reason}={count}" for reason, count in sorted(dropped.items()))
        logger.warning(f"⚠️ {date}: dropped {sum(dropped.values())} quotes ({reasons}), merged {duplicates} duplicates")
    if not kept:
        raise EmptyAfterFilter(f"{date}: every quote was filtered out")

    return DayRecord(
        day_id=day_id,
        quotes=tuple(quote for _, quote in kept.values()),
        forward_curve={tau: float(np.mean(v)) for tau, v in forwards.items()},
        discount_curve={tau: float(np.mean(v)) for tau, v in discounts.items()},
        date=date,
    )


def read_quotes_csv(path: Path) -> List[RawQuoteRecord]:
    """Parse a quote CSV; rows violating record invariants are dropped and counted"""
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype={"type": str})
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise IoError(f"Failed to read quote file {path}: {e}") from e
    missing = [c for c in QUOTE_COLUMNS if c not in frame.columns]
    if missing:
        raise IoError(f"{path} is missing columns {missing}")
    try:
        dates = pd.to_datetime(frame["date"], format="%Y-%m-%d").dt.date
        expiries = pd.to_datetime(frame["expiry"], format="%Y-%m-%d").dt.date
    except ValueError as e:
        raise IoError(f"{path} has a malformed date: {e}") from e

    records, invalid = [], 0
    for i, row in enumerate(frame.itertuples(index=False)):
        try:
            records.append(RawQuoteRecord(
                date=dates.iloc[i],
                expiry=expiries.iloc[i],
                strike=float(row.strike),
                option_type=OptionType.parse(row.type),
                bid=float(row.bid),
                ask=float(row.ask),
                forward=float(row.forward),
                discount_factor=float(row.discount_factor),
            ))
        except (DomainError, ValueError, TypeError):
            invalid += 1
    if invalid:
        logger.warning(f"⚠️ {path}: skipped {invalid} malformed rows")
    return records


def write_quotes_csv(records: Sequence[RawQuoteRecord], path: Path) -> Path:
    frame = pd.DataFrame(
        [
            {
                "date": r.date.isoformat(),
                "expiry": r.expiry.isoformat(),
                "strike": r.strike,
                "type": r.option_type.value,
                "bid": r.bid,
                "ask": r.ask,
                "forward": r.forward,
                "discount_factor": r.discount_factor,
            }
            for r in records
        ],
        columns=QUOTE_COLUMNS,
    )
    return _write_frame(frame, path)


def read_surface_csv(path: Path) -> List[Quote]:
    path = Path(path)
    try:
        frame = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise IoError(f"Failed to read surface file {path}: {e}") from e
    if list(frame.columns[:3]) != SURFACE_COLUMNS:
        raise IoError(f"{path} must start with columns {SURFACE_COLUMNS}")
    return [Quote.at(k, tau, vol) for k, tau, vol in frame[SURFACE_COLUMNS].itertuples(index=False)]


def write_surface_csv(quotes: Sequence[Quote], path: Path) -> Path:
    frame = pd.DataFrame([(q.k, q.tau, q.vol) for q in quotes], columns=SURFACE_COLUMNS)
    return _write_frame(frame, path)


def _write_frame(frame: pd.DataFrame, path: Path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        # 17 significant digits round-trip float64 exactly
        frame.to_csv(path, index=False, float_format="%.17g")
    except OSError as e:
        raise IoError(f"Failed to write {path}: {e}") from e
    return path


def ingest_csv(path: Path, cfg: PreprocessConfig, max_workers: Optional[int] = None) -> List[DayRecord]:
    """Ingest a quote CSV that may hold many dates; each date becomes one day"""
    records = read_quotes_csv(path)
    by_date: Dict[dt.date, List[RawQuoteRecord]] = {}
    for record in records:
        by_date.setdefault(record.date, []).append(record)
    batches = [by_date[d] for d in sorted(by_date)]
    return _ingest_batches(batches, cfg, max_workers)


def _ingest_batches(batches: Sequence[Sequence[RawQuoteRecord]], cfg: PreprocessConfig,
                    max_workers: Optional[int]) -> List[DayRecord]:
    def work(item):
        day_id, batch = item
        try:
            return ingest_day(batch, cfg, day_id=day_id)
        except NeuroVolError as e:
            logger.warning(f"⚠️ Skipping day {day_id}: {e.category}: {e}")
            return None

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        days = list(pool.map(work, enumerate(batches)))
    return [day for day in days if day is not None]


# ==================== Day bundles ====================

def write_bundle(days: Sequence[DayRecord], root: Path, half_spread: float = 0.01) -> Path:
    """
    Write days as `days/<date>/quotes.csv` plus optional surface files

    Quotes are written as the out-of-the-money Black-76 prices of each day's
    vols, with the day's forward and discount curves.
    """
    root = Path(root)
    for day in days:
        folder = root / "days" / day.label
        write_quotes_csv(quote_records(day, half_spread), folder / QUOTES_FILE)
        if day.synthetic_surface:
            write_surface_csv(day.synthetic_surface, folder / PRIOR_FILE)
        if day.truth_surface:
            write_surface_csv(day.truth_surface, folder / TRUTH_FILE)
    logger.info(f"📦 Wrote {len(days)} days to {root / 'days'}")
    return root


def load_bundle(root: Path, cfg: PreprocessConfig, max_workers: Optional[int] = None) -> List[DayRecord]:
    """Ingest every `days/<date>/quotes.csv` and re-attach stored surfaces"""
    folder = Path(root) / "days"
    if not folder.is_dir():
        raise IoError(f"No day bundle at {folder}")
    day_dirs = sorted(p for p in folder.iterdir() if (p / QUOTES_FILE).exists())
    if not day_dirs:
        raise IoError(f"{folder} holds no {QUOTES_FILE} files")
    batches = [read_quotes_csv(d / QUOTES_FILE) for d in day_dirs]
    labels = {i: d for i, d in enumerate(day_dirs)}

    def work(item):
        day_id, batch = item
        try:
            day = ingest_day(batch, cfg, day_id=day_id)
        except NeuroVolError as e:
            logger.warning(f"⚠️ Skipping {labels[day_id].name}: {e.category}: {e}")
            return None
        prior, truth = labels[day_id] / PRIOR_FILE, labels[day_id] / TRUTH_FILE
        if prior.exists():
            day = day.with_synthetic(read_surface_csv(prior))
        if truth.exists():
            day = _with_truth(day, read_surface_csv(truth))
        return day

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        days = [day for day in pool.map(work, enumerate(batches)) if day is not None]
    logger.info(f"📂 Loaded {len(days)} of {len(day_dirs)} days from {folder}")
    return days


def write_priors(days: Sequence[DayRecord], root: Path) -> int:
    """Write each day's SABR surface into an existing bundle; returns the count written"""
    written = 0
    for day in days:
        if day.synthetic_surface:
            write_surface_csv(day.synthetic_surface, Path(root) / "days" / day.label / PRIOR_FILE)
            written += 1
    return written


def _with_truth(day: DayRecord, truth: Sequence[Quote]) -> DayRecord:
    return replace(day, truth_surface=tuple(truth))


def quote_records(day: DayRecord, half_spread: float = 0.01) -> List[RawQuoteRecord]:
    """
    Price a day's vols back into raw records

    Calls above the forward and puts below it, each quoted at mid * (1 -/+ half_spread).
    """
    if day.date is None:
        raise DomainError(f"day {day.day_id} has no date to write")
    records = []
    for quote in day.quotes:
        days_out = int(round(quote.tau * 365.0))
        forward, df = day.forward(quote.tau), day.discount(quote.tau)
        strike = forward * math.exp(quote.k)
        option_type = OptionType.CALL if quote.k >= 0 else OptionType.PUT
        price = black_price(BlackInputs(forward, strike, days_out / 365.0, df, option_type), quote.vol)
        records.append(RawQuoteRecord(
            date=day.date,
            expiry=day.date + dt.timedelta(days=days_out),
            strike=strike,
            option_type=option_type,
            bid=price * (1.0 - half_spread),
            ask=price * (1.0 + half_spread),
            forward=forward,
            discount_factor=df,
        ))
    return records


# ==================== SABR priors ====================

def build_pretraining_surfaces(
    days: Sequence[DayRecord],
    prior: PriorConfig = PriorConfig(),
    max_workers: Optional[int] = None,
) -> List[DayRecord]:
    """
    Attach a dense SABR surface to every day

    Per day the maturity slices with at least 3 quotes are calibrated, the
    term structure is interpolated and evaluated on the configured grid (the
    day's maturities and their midpoints when no tau grid is set). A day whose
    calibration fails keeps `synthetic_surface=None` and is logged.
    """
    k_grid = prior.grid.k_grid()

    def work(day: DayRecord) -> DayRecord:
        try:
            ts = calibrate_term_structure(day.quotes, day.forward_curve, beta=prior.beta)
            tau_grid = prior.grid.tau_grid or default_tau_grid(day.maturities())
            return day.with_synthetic(generate_surface(ts, k_grid, tau_grid))
        except (CalibrationFailed, InsufficientQuotes, DomainError) as e:
            logger.warning(f"⚠️ {day.label}: no SABR prior ({e.category}: {e})")
            return day.with_synthetic(None)

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        built = list(pool.map(work, days))
    usable = sum(1 for day in built if day.synthetic_surface)
    logger.info(f"🧩 SABR priors built for {usable}/{len(built)} days")
    return built


# ==================== Synthetic market ====================

@dataclass(frozen=True)
class TruthSurface:
    """Noiseless generating surface of one synthetic day"""

    kind: str
    ssvi: Optional[SsviParams] = None
    sabr: Tuple[SabrTermStructure, ...] = ()
    mix_weight: float = 1.0

    def vol(self, k, tau: float) -> np.ndarray:
        ks = np.atleast_1d(np.asarray(k, dtype=float))
        if self.ssvi is not None:
            return np.atleast_1d(ssvi_vol(self.ssvi, ks, tau))
        first, second = self.sabr
        # Blend in total variance at a common maturity
        w = self.mix_weight * term_structure_vols(first, ks, tau) ** 2
        w = w + (1.0 - self.mix_weight) * term_structure_vols(second, ks, tau) ** 2
        return np.sqrt(w)


class _Regime:
    """Stationary AR(1) latent factors mapped onto their configured ranges"""

    def __init__(self, ranges: Mapping[str, Tuple[float, float]], persistence: float, rng: np.random.Generator):
        self.ranges = dict(ranges)
        self.persistence = persistence
        self.rng = rng
        self.latent = {name: float(rng.standard_normal()) for name in self.ranges}

    def step(self) -> Dict[str, float]:
        phi = self.persistence
        shock = math.sqrt(1.0 - phi * phi)
        values = {}
        for name, (lo, hi) in self.ranges.items():
            self.latent[name] = phi * self.latent[name] + shock * float(self.rng.standard_normal())
            values[name] = lo + (hi - lo) * float(ndtr(self.latent[name]))
        return values


def _node_taus(cfg: SyntheticMarketConfig) -> np.ndarray:
    days = sorted({d for bucket in cfg.expiry_days.values() for d in bucket})
    return np.array(days, dtype=float) / 365.0


def _atm_vol(values: Mapping[str, float], tau) -> np.ndarray:
    return np.maximum(values["atm_vol"] + values["term_slope"] * np.sqrt(tau), 0.05)


def _draw_truth(cfg: SyntheticMarketConfig, values: Mapping[str, float]) -> TruthSurface:
    taus = _node_taus(cfg)
    atm = _atm_vol(values, taus)
    if cfg.generator == "ssvi_random":
        thetas = np.maximum.accumulate(atm * atm * taus)
        eta = admissible_eta(thetas, values["rho"], values["eta"], values["gamma"])
        params = SsviParams(theta_curve=tuple(zip(taus, thetas)), rho=values["rho"], eta=eta, gamma_exp=values["gamma"])
        return TruthSurface(kind="ssvi", ssvi=params)

    nus = values["nu"] * np.minimum(1.0, np.sqrt(0.25 / taus))
    first = SabrTermStructure(slices=tuple(
        (float(t), SabrParams(float(a), 1.0, values["rho"], float(n))) for t, a, n in zip(taus, atm, nus)
    ))
    second = SabrTermStructure(slices=tuple(
        (float(t), SabrParams(float(a) * 1.15, 1.0, 0.4 * values["rho"], 0.5 * float(n))) for t, a, n in zip(taus, atm, nus)
    ))
    return TruthSurface(kind="sabr_mixture", sabr=(first, second), mix_weight=values["mix"])


def _sample_k(bucket: str, k_max: float, rng: np.random.Generator) -> float:
    lo_edge, hi_edge = Buckets.MONEYNESS_EDGES
    if bucket == "atm":
        return float(rng.uniform(-lo_edge, lo_edge))
    sign = 1.0 if rng.random() < 0.5 else -1.0
    if bucket == "ntm":
        return sign * float(rng.uniform(lo_edge, hi_edge))
    return sign * float(rng.uniform(hi_edge, k_max))


def draw_truths(cfg: SyntheticMarketConfig) -> List[Tuple[dt.date, float, float, TruthSurface]]:
    """
    Per-day (date, spot, rate, truth surface) of the synthetic market

    Regime parameters follow stationary AR(1) paths with the configured
    persistence, so neighbouring days have similar surfaces.
    """
    rng = np.random.default_rng(cfg.seed)
    reg = cfg.regime_params
    ranges = {
        "atm_vol": reg.atm_vol, "term_slope": reg.term_slope, "rho": reg.rho,
        "eta": reg.eta, "gamma": reg.gamma, "nu": reg.nu,
        "rate": cfg.rate_range, "mix": _MIX_RANGE,
    }
    regime = _Regime(ranges, reg.persistence, rng)
    dates = [ts.date() for ts in pd.bdate_range(start=cfg.start_date, periods=cfg.n_days)]
    spot = cfg.spot
    out = []
    for date in dates:
        values = regime.step()
        spot *= math.exp(_SPOT_VOL * float(rng.standard_normal()))
        out.append((date, spot, values["rate"], _draw_truth(cfg, values)))
    return out


def generate_market(cfg: SyntheticMarketConfig) -> List[DayRecord]:
    """
    Seeded synthetic trading days with noisy quotes and their noiseless truth grid

    Quote coordinates follow the configured maturity and moneyness shares;
    expiries roll through the week so maturities drift from day to day.
    """
    truths = draw_truths(cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    mat_names = list(cfg.maturity_shares)
    mat_p = np.array([cfg.maturity_shares[n] for n in mat_names])
    mon_names = list(cfg.moneyness_shares)
    mon_p = np.array([cfg.moneyness_shares[n] for n in mon_names])
    noise = cfg.noise_bps * 1e-4
    truth_k = grid_points(-cfg.k_max, cfg.k_max, TRUTH_K_STEP)

    days = []
    for day_id, (date, spot, rate, truth) in enumerate(truths):
        shift = day_id % 5
        n_quotes = int(rng.integers(cfg.quotes_per_day[0], cfg.quotes_per_day[1] + 1))
        mat_draw = rng.choice(len(mat_names), size=n_quotes, p=mat_p)
        mon_draw = rng.choice(len(mon_names), size=n_quotes, p=mon_p)
        quotes = []
        for m, n in zip(mat_draw, mon_draw):
            expiry = cfg.expiry_days[mat_names[m]]
            tau = (expiry[int(rng.integers(len(expiry)))] - shift) / 365.0
            k = _sample_k(mon_names[n], cfg.k_max, rng)
            vol = float(truth.vol(k, tau)[0]) + noise * float(rng.standard_normal())
            quotes.append(Quote.at(k, tau, min(max(vol, 1e-4), VOL_CAP * 0.99)))

        taus = sorted({q.tau for q in quotes})
        truth_grid = tuple(Quote.at(k, tau, v) for tau in taus for k, v in zip(truth_k, truth.vol(truth_k, tau)))
        days.append(DayRecord(
            day_id=day_id,
            quotes=tuple(quotes),
            forward_curve={tau: spot * math.exp(rate * tau) for tau in taus},
            discount_curve={tau: math.exp(-rate * tau) for tau in taus},
            date=date,
            truth_surface=truth_grid,
        ))
    logger.info(f"🎲 Generated {len(days)} synthetic days ({cfg.generator}, noise {cfg.noise_bps:g} bps)")
    return days
