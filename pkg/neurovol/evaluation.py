"""
Evaluation - Paired out-of-sample comparison of surface models
Seeded context/target splits per test day, BPS error reports by bucket, sparsity sweeps, heatmaps, arbitrage comparison
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .adapters import ModelAdapter, Prediction, smile_maturities
from .arbitrage import durrleman_g
from .config import grid_points
from .core import Buckets, DayRecord, Task, TaskSource, derive_seed, make_task
from .errors import DomainError, InsufficientQuotes, IoError, NeuroVolError

logger = logging.getLogger('NeuroVol.Evaluation')

BPS = 1e4
Z95 = 1.959963984540054
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class ErrorCell:
    """Running sums of one stratum; errors are in vol units, reported in BPS"""

    sse: float = 0.0
    sae: float = 0.0
    count: int = 0

    def add(self, errors: np.ndarray) -> None:
        self.sse += float(np.sum(errors * errors))
        self.sae += float(np.sum(np.abs(errors)))
        self.count += int(errors.size)

    @property
    def mse(self) -> Optional[float]:
        return self.sse / self.count if self.count else None

    @property
    def rmse_bps(self) -> Optional[float]:
        return math.sqrt(self.sse / self.count) * BPS if self.count else None

    @property
    def mae_bps(self) -> Optional[float]:
        return self.sae / self.count * BPS if self.count else None

    def to_dict(self) -> dict:
        return {"rmse_bps": self.rmse_bps, "mae_bps": self.mae_bps, "count": self.count}


@dataclass
class ErrorReport:
    """
    Overall and stratified errors of one model

    `nll` (mean Gaussian negative log-likelihood per target, including the
    log 2pi term) and `coverage95` are filled only for models with predictive
    variances.
    """

    model_name: str
    overall: ErrorCell = field(default_factory=ErrorCell)
    by_maturity: Dict[str, ErrorCell] = field(default_factory=lambda: {b: ErrorCell() for b in Buckets.MATURITY})
    by_moneyness: Dict[str, ErrorCell] = field(default_factory=lambda: {b: ErrorCell() for b in Buckets.MONEYNESS})
    n_days: int = 0
    skipped_days: List[str] = field(default_factory=list)
    nll_sum: float = 0.0
    covered: int = 0
    probabilistic: bool = False

    def add_day(self, k: np.ndarray, tau: np.ndarray, errors: np.ndarray, variances: Optional[np.ndarray]) -> None:
        self.n_days += 1
        self.overall.add(errors)
        maturity = np.array([Buckets.maturity(t) for t in tau])
        moneyness = np.array([Buckets.moneyness(x) for x in k])
        for bucket, cell in self.by_maturity.items():
            cell.add(errors[maturity == bucket])
        for bucket, cell in self.by_moneyness.items():
            cell.add(errors[moneyness == bucket])
        if variances is not None:
            self.probabilistic = True
            var = np.maximum(variances, 1e-300)
            self.nll_sum += float(np.sum(0.5 * (_LOG_2PI + np.log(var) + errors * errors / var)))
            self.covered += int(np.sum(np.abs(errors) <= Z95 * np.sqrt(var)))

    @property
    def nll(self) -> Optional[float]:
        return self.nll_sum / self.overall.count if self.probabilistic and self.overall.count else None

    @property
    def coverage95(self) -> Optional[float]:
        return self.covered / self.overall.count if self.probabilistic and self.overall.count else None

    def to_dict(self) -> dict:
        return {
            "model_name": self.model_name,
            "overall": self.overall.to_dict(),
            "by_maturity": {b: c.to_dict() for b, c in self.by_maturity.items()},
            "by_moneyness": {b: c.to_dict() for b, c in self.by_moneyness.items()},
            "n_days": self.n_days,
            "skipped_days": list(self.skipped_days),
            "nll": self.nll,
            "coverage95": self.coverage95,
        }

    def rows(self) -> List[dict]:
        rows = [{"model": self.model_name, "stratum": "overall", "bucket": "all", **self.overall.to_dict()}]
        for stratum, cells in (("maturity", self.by_maturity), ("moneyness", self.by_moneyness)):
            rows.extend({"model": self.model_name, "stratum": stratum, "bucket": b, **c.to_dict()} for b, c in cells.items())
        return rows


def write_reports(reports: Sequence[ErrorReport], json_path: Path, csv_path: Optional[Path] = None) -> None:
    try:
        json_path = Path(json_path)
        json_path.parent.mkdir(parents=True, exist_ok=True)
        json_path.write_text(json.dumps([r.to_dict() for r in reports], indent=2), encoding="utf-8")
        if csv_path is not None:
            pd.DataFrame([row for r in reports for row in r.rows()]).to_csv(csv_path, index=False)
    except OSError as e:
        raise IoError(f"Failed to write evaluation report: {e}") from e


# ==================== Paired evaluation ====================

def evaluation_tasks(days: Sequence[DayRecord], n_context: int, seed: int) -> Tuple[List[Tuple[DayRecord, Task]], List[str]]:
    """
    The seeded split of every test day, shared by all models

    A day's context is a prefix of a permutation seeded by (seed, day_id), so
    contexts of different sizes are nested. Days without more than n_context
    quotes are skipped.
    """
    tasks, skipped = [], []
    for day in days:
        try:
            if len(day.quotes) <= n_context:
                raise InsufficientQuotes(f"{len(day.quotes)} quotes, need more than {n_context}")
            tasks.append((day, make_task(day, n_context, None, TaskSource.REAL_TO_REAL, derive_seed(seed, day.day_id))))
        except InsufficientQuotes as e:
            logger.warning(f"⚠️ Skipping {day.label}: {e}")
            skipped.append(day.label)
    return tasks, skipped


def _score_day(adapters: Sequence[ModelAdapter], day: DayRecord, task: Task) -> Optional[List[Prediction]]:
    coords = [q.coord for q in task.targets]
    predictions = []
    for adapter in adapters:
        try:
            prediction = adapter.fit_day(task.context, day).predict(coords)
        except NeuroVolError as e:
            logger.warning(f"⚠️ {adapter.name} failed on {day.label} ({e.category}: {e}); day skipped for all models")
            return None
        if not np.all(np.isfinite(prediction.means)):
            logger.warning(f"⚠️ {adapter.name} produced non-finite vols on {day.label}; day skipped for all models")
            return None
        predictions.append(prediction)
    return predictions


def evaluate_models(
    adapters: Sequence[ModelAdapter],
    test_days: Sequence[DayRecord],
    n_context: int = 100,
    seed: int = 0,
    max_workers: Optional[int] = None,
) -> Dict[str, ErrorReport]:
    """
    Evaluate several models on identical context/target splits

    A day on which any model fails to fit counts as skipped for every model,
    keeping the comparison paired. Days run in parallel; results are merged
    in day order.

    Returns:
        ErrorReport per model name, in adapter order
    """
    names = [a.name for a in adapters]
    if len(set(names)) != len(names):
        raise DomainError(f"adapter names must be unique, got {names}")
    tasks, skipped = evaluation_tasks(test_days, n_context, seed)
    reports = {a.name: ErrorReport(model_name=a.name, skipped_days=list(skipped)) for a in adapters}

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        results = list(pool.map(lambda item: _score_day(adapters, *item), tasks))

    for (day, task), predictions in zip(tasks, results):
        if predictions is None:
            for report in reports.values():
                report.skipped_days.append(day.label)
            continue
        k = np.array([q.k for q in task.targets])
        tau = np.array([q.tau for q in task.targets])
        truth = np.array([q.vol for q in task.targets])
        for adapter, prediction in zip(adapters, predictions):
            reports[adapter.name].add_day(k, tau, prediction.means - truth, prediction.variances)

    for report in reports.values():
        logger.info(
            f"📊 {report.model_name}: RMSE {_fmt(report.overall.rmse_bps)} / MAE {_fmt(report.overall.mae_bps)} bps "
            f"on {report.overall.count} targets over {report.n_days} days"
        )
    return reports


def evaluate(
    model_adapter: ModelAdapter,
    test_days: Sequence[DayRecord],
    n_context: int = 100,
    seed: int = 0,
    max_workers: Optional[int] = None,
) -> ErrorReport:
    """Single-model evaluation with the same seeded splits evaluate_models serves"""
    return evaluate_models([model_adapter], test_days, n_context, seed, max_workers)[model_adapter.name]


def _fmt(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.2f}"


# ==================== Sparsity sweep ====================

@dataclass
class SweepTable:
    reports: Dict[int, Dict[str, ErrorReport]]

    def rows(self) -> List[dict]:
        return [
            {"n_context": n, "model": name, **report.overall.to_dict()}
            for n, by_model in self.reports.items()
            for name, report in by_model.items()
        ]

    def write(self, json_path: Path, csv_path: Path) -> None:
        try:
            Path(json_path).parent.mkdir(parents=True, exist_ok=True)
            document = {str(n): [r.to_dict() for r in by_model.values()] for n, by_model in self.reports.items()}
            Path(json_path).write_text(json.dumps(document, indent=2), encoding="utf-8")
            pd.DataFrame(self.rows()).to_csv(csv_path, index=False)
        except OSError as e:
            raise IoError(f"Failed to write sweep table: {e}") from e


def sparsity_sweep(
    model_adapters: Sequence[ModelAdapter],
    test_days: Sequence[DayRecord],
    n_list: Sequence[int],
    seed: int = 0,
    max_workers: Optional[int] = None,
) -> SweepTable:
    """evaluate_models at every context size; contexts are nested across sizes on each day"""
    if not n_list:
        raise DomainError("sparsity sweep needs at least one context size")
    table = {}
    for n in n_list:
        logger.info(f"🔍 Sparsity sweep at N={n}")
        table[int(n)] = evaluate_models(model_adapters, test_days, int(n), seed, max_workers)
    return SweepTable(table)


# ==================== Heatmap ====================

@dataclass(frozen=True)
class HeatmapCell:
    k_lo: float
    k_hi: float
    tau_lo: float
    tau_hi: float
    rmse_bps: Optional[float]
    count: int


@dataclass
class Heatmap:
    model_name: str
    cells: List[HeatmapCell]

    @property
    def total_count(self) -> int:
        return sum(c.count for c in self.cells)

    def write_csv(self, path: Path) -> Path:
        frame = pd.DataFrame(
            [(c.k_lo, c.k_hi, c.tau_lo, c.tau_hi, c.rmse_bps, c.count) for c in self.cells],
            columns=["k_lo", "k_hi", "tau_lo", "tau_hi", "rmse_bps", "count"],
        )
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            frame.to_csv(path, index=False)
        except OSError as e:
            raise IoError(f"Failed to write heatmap {path}: {e}") from e
        return path


def _bin_index(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Half-open bins [lo, hi) with the last bin closed; -1 outside the edges"""
    idx = np.searchsorted(edges, values, side="right") - 1
    idx[values == edges[-1]] = len(edges) - 2
    idx[(values < edges[0]) | (values > edges[-1])] = -1
    return idx


def error_heatmap(
    model_adapter: ModelAdapter,
    test_days: Sequence[DayRecord],
    k_bins: Sequence[float],
    tau_bins: Sequence[float],
    seed: int = 0,
    n_context: int = 100,
    max_workers: Optional[int] = None,
) -> Heatmap:
    """
    RMSE per (k, tau) cell over the pooled test targets

    Targets outside the outer bin edges are not counted. Empty cells carry
    count 0 and no RMSE.
    """
    k_edges, tau_edges = np.asarray(k_bins, dtype=float), np.asarray(tau_bins, dtype=float)
    if k_edges.size < 2 or tau_edges.size < 2:
        raise DomainError("heatmap bins need at least two edges per axis")
    if np.any(np.diff(k_edges) <= 0) or np.any(np.diff(tau_edges) <= 0):
        raise DomainError("heatmap bin edges must increase")
    tasks, _ = evaluation_tasks(test_days, n_context, seed)
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        results = list(pool.map(lambda item: _score_day([model_adapter], *item), tasks))

    sse = np.zeros((k_edges.size - 1, tau_edges.size - 1))
    counts = np.zeros_like(sse, dtype=int)
    for (_, task), predictions in zip(tasks, results):
        if predictions is None:
            continue
        k = np.array([q.k for q in task.targets])
        tau = np.array([q.tau for q in task.targets])
        errors = predictions[0].means - np.array([q.vol for q in task.targets])
        ki, ti = _bin_index(k, k_edges), _bin_index(tau, tau_edges)
        inside = (ki >= 0) & (ti >= 0)
        np.add.at(sse, (ki[inside], ti[inside]), errors[inside] ** 2)
        np.add.at(counts, (ki[inside], ti[inside]), 1)

    cells = []
    for i in range(k_edges.size - 1):
        for j in range(tau_edges.size - 1):
            n = int(counts[i, j])
            rmse = math.sqrt(sse[i, j] / n) * BPS if n else None
            cells.append(HeatmapCell(float(k_edges[i]), float(k_edges[i + 1]), float(tau_edges[j]), float(tau_edges[j + 1]), rmse, n))
    return Heatmap(model_name=model_adapter.name, cells=cells)


# ==================== Arbitrage comparison ====================

@dataclass
class ViolationComparison:
    """Per-day total Durrleman violation measure of each model and pairwise win counts"""

    measures: Dict[str, List[Optional[float]]]
    days: List[str]

    def at_most(self, a: str, b: str) -> int:
        """Days on which model a's violation measure is <= model b's"""
        count = 0
        for x, y in zip(self.measures[a], self.measures[b]):
            if x is not None and (y is None or x <= y):
                count += 1
        return count

    def to_dict(self) -> dict:
        names = list(self.measures)
        return {
            "days": self.days,
            "measures": self.measures,
            "at_most": {a: {b: self.at_most(a, b) for b in names if b != a} for a in names},
        }


def compare_violation_measures(
    adapters: Sequence[ModelAdapter],
    test_days: Sequence[DayRecord],
    n_context: int = 100,
    seed: int = 0,
    k_grid: Tuple[float, float, float] = (-1.0, 1.0, 0.02),
    fd_step: float = 1e-3,
    max_workers: Optional[int] = None,
) -> ViolationComparison:
    """
    Reconstruct every model's smiles at each test day's maturities and total their butterfly violations

    A model whose smile is not positive on the grid gets no measure (None) for that day.
    """
    grid = grid_points(*k_grid)
    tasks, _ = evaluation_tasks(test_days, n_context, seed)

    def work(item) -> List[Optional[float]]:
        day, task = item
        out = []
        for adapter in adapters:
            try:
                fit = adapter.fit_day(task.context, day)
                total = 0.0
                for tau in smile_maturities(day):
                    total += durrleman_g(fit.surface, tau, grid, fd_step, fit.analytic).violation_measure
                out.append(total)
            except NeuroVolError as e:
                logger.warning(f"⚠️ {adapter.name} on {day.label}: {e.category}: {e}")
                out.append(None)
        return out

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        rows = list(pool.map(work, tasks))
    measures = {a.name: [row[i] for row in rows] for i, a in enumerate(adapters)}
    return ViolationComparison(measures=measures, days=[day.label for day, _ in tasks])
