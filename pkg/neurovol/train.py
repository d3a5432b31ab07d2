"""
Train - Two-stage meta-learning curriculum for the volatility neural process
Stage 1 pre-trains on dense SABR targets, stage 2 fine-tunes on held-out real quotes; AdamW throughout
"""

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import TrainConfig
from .core import DayRecord, Task, TaskSource, derive_seed, make_task
from .errors import DataStageMismatch, InsufficientQuotes, IoError, ShapeMismatch
from .volnp import ModelParams, VolatilityNeuralProcess, task_loss, task_loss_and_grads

logger = logging.getLogger('NeuroVol.Train')

# Seed streams kept apart from the per-epoch streams
_VALIDATION_STREAM = 0x7A11
_SPLIT_STREAM = 0x5B17


@dataclass
class OptimizerState:
    """AdamW first/second moments per parameter name and the step counter"""

    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "OptimizerState":
        return cls(
            m={name: np.zeros_like(a) for name, a in params.items()},
            v={name: np.zeros_like(a) for name, a in params.items()},
        )


@dataclass
class EpochLog:
    """One line of the JSON-lines training log; epoch 0 is the untrained model"""

    epoch: int
    train_nll: Optional[float]
    val_nll: float
    grad_norm: Optional[float]
    wall_time: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class TrainingResult:
    model: VolatilityNeuralProcess
    log: List[EpochLog] = field(default_factory=list)
    best_epoch: int = 0
    best_val_nll: float = math.inf

    def write_log(self, path: Path) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("".join(entry.to_json() + "\n" for entry in self.log), encoding="utf-8")
        except OSError as e:
            raise IoError(f"Failed to write training log {path}: {e}") from e
        return path


def adamw_step(
    params: ModelParams,
    grads: Dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    weight_decay: float,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> Tuple[ModelParams, OptimizerState]:
    """
    One AdamW update with decoupled weight decay and bias-corrected moments

    Inputs are left untouched; the updated parameters and state are returned.
    """
    if set(grads) != set(params.names):
        raise ShapeMismatch("gradient names do not match the parameters")
    beta1, beta2 = betas
    step = state.step + 1
    correction1 = 1.0 - beta1 ** step
    correction2 = 1.0 - beta2 ** step
    new_params, new_m, new_v = {}, {}, {}
    for name, value in params.items():
        g = grads[name]
        if g.shape != value.shape:
            raise ShapeMismatch(f"gradient of {name} has shape {g.shape}, parameter has {value.shape}")
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        update = (m / correction1) / (np.sqrt(v / correction2) + eps)
        new_params[name] = value * (1.0 - lr * weight_decay) - lr * update
        new_m[name], new_v[name] = m, v
    return ModelParams(new_params), OptimizerState(m=new_m, v=new_v, step=step)


def global_norm(grads: Dict[str, np.ndarray]) -> float:
    return math.sqrt(math.fsum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads: Dict[str, np.ndarray], max_norm: float) -> Tuple[Dict[str, np.ndarray], float]:
    """Rescale so the global L2 norm is at most max_norm; returns (grads, pre-clip norm)"""
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    factor = max_norm / norm
    return {name: g * factor for name, g in grads.items()}, norm


def split_days(
    days: Sequence[DayRecord],
    n_test: int,
    val_fraction: float,
    seed: int,
) -> Tuple[List[DayRecord], List[DayRecord], List[DayRecord]]:
    """
    Time-ordered out-of-sample split

    The last n_test days (by date, else day_id) are the test set; a random
    val_fraction of the rest is held out for validation.

    Returns:
        (train, validation, test), each in time order
    """
    ordered = sorted(days, key=lambda d: (d.date is None, d.date, d.day_id))
    if n_test >= len(ordered):
        raise InsufficientQuotes(f"cannot hold out {n_test} test days from {len(ordered)}")
    cut = len(ordered) - n_test
    history, test = ordered[:cut], ordered[cut:]
    n_val = int(round(val_fraction * len(history)))
    if val_fraction > 0 and n_val == 0 and len(history) > 1:
        n_val = 1
    rng = np.random.default_rng(derive_seed(seed, _SPLIT_STREAM))
    held = set(rng.permutation(len(history))[:n_val].tolist())
    train = [d for i, d in enumerate(history) if i not in held]
    val = [d for i, d in enumerate(history) if i in held]
    logger.info(f"📅 Split {len(ordered)} days: {len(train)} train / {len(val)} validation / {len(test)} test")
    return train, val, test


def _source_for(cfg: TrainConfig) -> TaskSource:
    return TaskSource.REAL_TO_SYNTHETIC if cfg.stage == "pretrain" else TaskSource.REAL_TO_REAL


def _check_stage_data(days: Sequence[DayRecord], cfg: TrainConfig, role: str) -> None:
    n_min = cfg.context_range[0]
    for day in days:
        if cfg.stage == "pretrain":
            if not day.synthetic_surface:
                raise DataStageMismatch(f"{role} day {day.label} has no SABR surface; run build-priors first")
            if len(day.quotes) < n_min:
                raise DataStageMismatch(f"{role} day {day.label} has {len(day.quotes)} quotes, need {n_min}")
        elif len(day.quotes) < n_min + 1:
            raise DataStageMismatch(
                f"{role} day {day.label} has {len(day.quotes)} quotes, stage '{cfg.stage}' needs {n_min + 1}"
            )


def _sample_task(day: DayRecord, cfg: TrainConfig, rng_seed: int) -> Task:
    source = _source_for(cfg)
    # Real targets need at least one quote outside the context
    cap = len(day.quotes) if source is TaskSource.REAL_TO_SYNTHETIC else len(day.quotes) - 1
    n_max = min(cfg.context_range[1], cap)
    n_min = min(cfg.context_range[0], n_max)
    rng = np.random.default_rng(rng_seed)
    n_context = int(rng.integers(n_min, n_max + 1))
    n_target = None
    if source is TaskSource.REAL_TO_SYNTHETIC:
        n_target = min(cfg.synthetic_targets, len(day.synthetic_surface))
    return make_task(day, n_context, n_target, source, derive_seed(rng_seed, 1))


def make_validation_tasks(val_days: Sequence[DayRecord], cfg: TrainConfig, seed: int) -> List[Task]:
    """One fixed task per validation day with a context of cfg.val_context quotes"""
    if not val_days:
        raise InsufficientQuotes("validation needs at least one day")
    source = _source_for(cfg)
    tasks = []
    for day in val_days:
        if source is TaskSource.REAL_TO_SYNTHETIC:
            n_context = min(cfg.val_context, len(day.quotes))
            n_target = min(cfg.synthetic_targets, len(day.synthetic_surface or ()))
        else:
            n_context = min(cfg.val_context, len(day.quotes) - 1)
            n_target = None
        tasks.append(make_task(day, n_context, n_target, source, derive_seed(seed, day.day_id)))
    return tasks


def _mean_nll(tasks: Sequence[Task], params: ModelParams, model: VolatilityNeuralProcess,
              pool: Optional[ThreadPoolExecutor]) -> float:
    """Summed NLL over all tasks divided by the total target count"""
    run = pool.map if pool is not None else map
    losses = list(run(lambda t: task_loss(t, params, model.cfg), tasks))
    return math.fsum(losses) / sum(t.n_targets for t in tasks)


def run_stage(
    days: Sequence[DayRecord],
    model: VolatilityNeuralProcess,
    cfg: TrainConfig,
    val_days: Sequence[DayRecord],
    max_workers: Optional[int] = None,
    log_path: Optional[Path] = None,
) -> TrainingResult:
    """
    Train one curriculum stage and keep the checkpoint with the best validation NLL

    Args:
        days: Training days; pretrain needs SABR surfaces on every day
        model: Starting model (fresh for pretrain/base, pretrained for finetune)
        cfg: Stage config
        val_days: Validation days scored once per epoch on fixed tasks
        max_workers: Threads for per-task forward/backward passes
        log_path: Optional JSON-lines log written as epochs complete

    Returns:
        TrainingResult with the best model and the per-epoch log
    """
    if not days:
        raise DataStageMismatch(f"stage '{cfg.stage}' has no training days")
    _check_stage_data(days, cfg, "training")
    _check_stage_data(val_days, cfg, "validation")
    val_tasks = make_validation_tasks(val_days, cfg, derive_seed(cfg.seed, _VALIDATION_STREAM))
    logger.info(
        f"🚀 Stage '{cfg.stage}': {len(days)} days, {len(val_tasks)} validation tasks, "
        f"lr={cfg.lr:g}, up to {cfg.max_epochs} epochs"
    )

    started = time.perf_counter()
    params = model.params.copy()
    state = OptimizerState.zeros(params)
    log_file = None
    if log_path is not None:
        try:
            Path(log_path).parent.mkdir(parents=True, exist_ok=True)
            log_file = open(log_path, "w", encoding="utf-8")
        except OSError as e:
            raise IoError(f"Failed to open training log {log_path}: {e}") from e

    pool = ThreadPoolExecutor(max_workers=max_workers) if max_workers != 1 else None
    try:
        best_val = _mean_nll(val_tasks, params, model, pool)
        result = TrainingResult(model=VolatilityNeuralProcess(params.copy(), model.cfg), best_val_nll=best_val)
        best_params = params.copy()
        _record(result, EpochLog(0, None, best_val, None, time.perf_counter() - started), log_file)
        stale = 0

        for epoch in range(1, cfg.max_epochs + 1):
            order = np.random.default_rng(derive_seed(cfg.seed, epoch)).permutation(len(days))
            epoch_loss, epoch_targets, last_norm = 0.0, 0, 0.0
            for step, start in enumerate(range(0, len(order), cfg.batch_tasks)):
                batch = order[start:start + cfg.batch_tasks]
                tasks = [
                    _sample_task(days[i], cfg, derive_seed(cfg.seed, epoch, step, j))
                    for j, i in enumerate(batch)
                ]
                run = pool.map if pool is not None else map
                outputs = list(run(lambda t: task_loss_and_grads(t, params, model.cfg), tasks))
                n_targets = sum(t.n_targets for t in tasks)
                grads = {name: np.zeros_like(a) for name, a in params.items()}
                for loss, task_grads in outputs:
                    epoch_loss += loss
                    for name, g in task_grads.items():
                        grads[name] += g
                grads = {name: g / n_targets for name, g in grads.items()}
                epoch_targets += n_targets
                grads, last_norm = clip_gradients(grads, cfg.grad_clip)
                params, state = adamw_step(params, grads, state, cfg.lr, cfg.weight_decay, cfg.betas, cfg.eps)

            val_nll = _mean_nll(val_tasks, params, model, pool)
            entry = EpochLog(epoch, epoch_loss / epoch_targets, val_nll, last_norm, time.perf_counter() - started)
            _record(result, entry, log_file)
            if val_nll < result.best_val_nll:
                result.best_val_nll, result.best_epoch = val_nll, epoch
                best_params = params.copy()
                stale = 0
            else:
                stale += 1
                if stale >= cfg.early_stop_patience:
                    logger.info(f"⏹️ Early stop at epoch {epoch}: no improvement for {stale} epochs")
                    break
    finally:
        if pool is not None:
            pool.shutdown()
        if log_file is not None:
            log_file.close()

    result.model = VolatilityNeuralProcess(best_params, model.cfg)
    logger.info(f"✅ Stage '{cfg.stage}' done: best val NLL {result.best_val_nll:.5f} at epoch {result.best_epoch}")
    return result


def _record(result: TrainingResult, entry: EpochLog, log_file) -> None:
    result.log.append(entry)
    if log_file is not None:
        log_file.write(entry.to_json() + "\n")
        log_file.flush()
    train = "-" if entry.train_nll is None else f"{entry.train_nll:.5f}"
    logger.info(f"📈 Epoch {entry.epoch}: train_nll={train} val_nll={entry.val_nll:.5f}")
