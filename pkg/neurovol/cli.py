"""
NeuroVol CLI - Pipeline entry point
Synthetic market, SABR priors, two-stage training, evaluation, arbitrage checks and surface reconstruction
"""

import argparse
import datetime as dt
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import pandas as pd
from dotenv import load_dotenv
from pydantic import BaseModel, Field

from . import __version__
from .adapters import ModelAdapter, ModelKind, build_adapter
from .arbitrage import surface_report
from .config import STAGE_DEFAULTS, PipelineConfig, grid_points, load_config
from .core import Coordinate, DayRecord, Quote
from .errors import ConfigError, DataStageMismatch, IoError, NeuroVolError
from .evaluation import (
    compare_violation_measures,
    error_heatmap,
    evaluate_models,
    evaluation_tasks,
    sparsity_sweep,
    write_reports,
)
from .market import (
    SURFACE_COLUMNS,
    build_pretraining_surfaces,
    generate_market,
    ingest_csv,
    load_bundle,
    read_surface_csv,
    write_bundle,
    write_priors,
)
from .train import run_stage, split_days
from .volnp import VolatilityNeuralProcess

logger = logging.getLogger('NeuroVol.CLI')

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'
MANIFEST_FILE = "manifest.json"
# Flags whose values are folded into the config snapshot of a run
CONFIG_FLAGS = {"--config": True, "--set": True, "--seed": True, "--days": True}
OUTPUT_FLAGS = {"--out"}
SEEDED_FIELDS = ("seed", "market.seed", "pretrain.seed", "finetune.seed", "base.seed", "eval.seed")


class RunManifest(BaseModel):
    """Everything needed to repeat one CLI invocation"""

    command: str
    argv: List[str]
    version: str = __version__
    config: Dict[str, Any]
    seed: int
    inputs: Dict[str, str] = Field(default_factory=dict)
    outputs: List[str] = Field(default_factory=list)
    run_dir: str
    started_at: str
    wall_time: float = 0.0
    exit_code: int = 0
    error: Optional[str] = None


class RunContext:
    """Per-invocation state: config, run directory and the manifest being recorded"""

    def __init__(self, args: argparse.Namespace, argv: Sequence[str], config: PipelineConfig):
        self.args = args
        self.config = config
        self.threads = args.threads
        started = dt.datetime.now()
        self.run_dir = Path(args.runs_dir) / f"{started.strftime('%Y%m%d-%H%M%S-%f')}-{args.command}"
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(
            command=args.command,
            argv=list(argv),
            config=config.model_dump(mode="json"),
            seed=config.seed,
            run_dir=str(self.run_dir),
            started_at=started.isoformat(),
        )
        self._clock = time.perf_counter()

    def input(self, path: Optional[Path]) -> Optional[Path]:
        if path is None:
            return None
        path = Path(path)
        self.manifest.inputs[str(path)] = content_hash(path)
        return path

    def output(self, path: Path) -> Path:
        self.manifest.outputs.append(str(path))
        return Path(path)

    def path(self, name: str) -> Path:
        return self.output(self.run_dir / name)

    def finish(self, exit_code: int, error: Optional[str] = None) -> None:
        self.manifest.wall_time = time.perf_counter() - self._clock
        self.manifest.exit_code = exit_code
        self.manifest.error = error
        try:
            (self.run_dir / MANIFEST_FILE).write_text(self.manifest.model_dump_json(indent=2), encoding="utf-8")
        except OSError as e:
            logger.error(f"Could not write run manifest: {e}")


def content_hash(path: Path) -> str:
    """sha256 of a file, or of every file under a directory keyed by relative path"""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Input not found: {path}")
    digest = hashlib.sha256()
    files = [path] if path.is_file() else sorted(p for p in path.rglob("*") if p.is_file())
    for file in files:
        if path.is_dir():
            digest.update(str(file.relative_to(path)).encode("utf-8") + b"\0")
        try:
            digest.update(file.read_bytes())
        except OSError as e:
            raise IoError(f"Failed to hash {file}: {e}") from e
    return digest.hexdigest()


# ==================== Shared helpers ====================

def _split(ctx: RunContext, days: List[DayRecord]):
    return split_days(days, ctx.config.split.n_test, ctx.config.split.val_fraction, ctx.config.seed)


def _load_days(ctx: RunContext, bundle: Path) -> List[DayRecord]:
    return load_bundle(ctx.input(bundle), ctx.config.preprocess, ctx.threads)


def _load_model(ctx: RunContext, path: Optional[Path]) -> Optional[VolatilityNeuralProcess]:
    if path is None:
        return None
    if not Path(path).exists():
        raise ConfigError(f"Checkpoint not found: {path}")
    return VolatilityNeuralProcess.load(ctx.input(path))


def _adapters(ctx: RunContext, kinds: Optional[Sequence[str]]) -> List[ModelAdapter]:
    ft = _load_model(ctx, ctx.args.ft)
    base = _load_model(ctx, ctx.args.base)
    if kinds:
        selected = [ModelKind(k) for k in kinds]
    else:
        selected = [k for k, m in ((ModelKind.VOLNP_FT, ft), (ModelKind.VOLNP_BASE, base)) if m is not None]
        selected += [ModelKind.SABR, ModelKind.SSVI, ModelKind.GP]
    models = {ModelKind.VOLNP_FT: ft, ModelKind.VOLNP_BASE: base}
    return [build_adapter(kind, models.get(kind), ctx.config.prior.beta) for kind in selected]


def _write_json(path: Path, document: Any) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(document, indent=2), encoding="utf-8")
    except OSError as e:
        raise IoError(f"Failed to write {path}: {e}") from e
    return path


def parse_grid(specs: Sequence[str]) -> Dict[str, List[float]]:
    """Parse `k:lo:hi:step tau:lo:hi:step` into inclusive grids"""
    grids: Dict[str, List[float]] = {}
    for spec in specs:
        parts = spec.split(":")
        if len(parts) != 4 or parts[0] not in ("k", "tau"):
            raise ConfigError(f"Grid must look like k:lo:hi:step or tau:lo:hi:step, got '{spec}'")
        try:
            lo, hi, step = (float(p) for p in parts[1:])
        except ValueError as e:
            raise ConfigError(f"Grid '{spec}' has a non-numeric bound") from e
        grids[parts[0]] = grid_points(lo, hi, step)
    if set(grids) != {"k", "tau"}:
        raise ConfigError("--grid needs both a k and a tau axis")
    if min(grids["tau"]) <= 0:
        raise ConfigError("tau grid must be positive")
    return grids


def _read_context(ctx: RunContext, path: Path) -> List[Quote]:
    """A context file is either a k,tau,vol surface CSV or a raw quote CSV of one date"""
    path = ctx.input(path)
    try:
        header = list(pd.read_csv(path, nrows=0).columns)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise IoError(f"Failed to read context file {path}: {e}") from e
    if header[:3] == SURFACE_COLUMNS:
        return read_surface_csv(path)
    days = ingest_csv(path, ctx.config.preprocess, ctx.threads)
    if len(days) != 1:
        raise ConfigError(f"Context file {path} must hold exactly one date, found {len(days)}")
    return list(days[0].quotes)


# ==================== Commands ====================

def cmd_gen_market(ctx: RunContext) -> None:
    market = ctx.config.market
    if ctx.args.generator:
        market = market.model_copy(update={"generator": ctx.args.generator})
    days = generate_market(market)
    out = ctx.output(Path(ctx.args.out) if ctx.args.out else ctx.run_dir / "market")
    write_bundle(days, out, half_spread=market.half_spread)


def cmd_ingest(ctx: RunContext) -> None:
    days = ingest_csv(ctx.input(ctx.args.quotes), ctx.config.preprocess, ctx.threads)
    if not days:
        raise ConfigError(f"No usable day in {ctx.args.quotes}")
    out = ctx.output(Path(ctx.args.out) if ctx.args.out else ctx.run_dir / "market")
    write_bundle(days, out)


def cmd_build_priors(ctx: RunContext) -> None:
    days = build_pretraining_surfaces(_load_days(ctx, ctx.args.bundle), ctx.config.prior, ctx.threads)
    if ctx.args.out:
        target = ctx.output(Path(ctx.args.out))
        write_bundle(days, target)
    else:
        target = ctx.output(Path(ctx.args.bundle))
        count = write_priors(days, target)
        logger.info(f"🧩 Wrote {count} SABR surfaces into {target}")


def cmd_train(ctx: RunContext) -> None:
    stage = ctx.args.stage
    cfg = ctx.config.stage(stage)
    train_days, val_days, _ = _split(ctx, _load_days(ctx, ctx.args.bundle))
    if stage == "pretrain":
        usable = [d for d in train_days if d.synthetic_surface]
        val_usable = [d for d in val_days if d.synthetic_surface]
        dropped = len(train_days) - len(usable) + len(val_days) - len(val_usable)
        if dropped:
            logger.warning(f"⚠️ {dropped} days have no SABR prior and are left out of pre-training")
        train_days, val_days = usable, val_usable
    if stage == "finetune" and ctx.args.init is None:
        raise ConfigError("train --stage finetune needs --init <pretrained checkpoint>")
    if not val_days:
        raise DataStageMismatch("no validation days; lower split.n_test or raise split.val_fraction")

    model = _load_model(ctx, ctx.args.init)
    if model is None:
        model = VolatilityNeuralProcess.initialize(ctx.config.model, rng_seed=cfg.seed)
    elif model.cfg != ctx.config.model:
        logger.warning("⚠️ Checkpoint architecture differs from the config; using the checkpoint's")

    result = run_stage(train_days, model, cfg, val_days, ctx.threads, log_path=ctx.path("train_log.jsonl"))
    out = ctx.output(Path(ctx.args.out) if ctx.args.out else ctx.run_dir / f"{stage}.npz")
    result.model.save(out)


def cmd_evaluate(ctx: RunContext) -> None:
    adapters = _adapters(ctx, ctx.args.models)
    _, _, test = _split(ctx, _load_days(ctx, ctx.args.bundle))
    n_context = ctx.args.n_context or ctx.config.eval.n_context
    reports = evaluate_models(adapters, test, n_context, ctx.config.eval.seed, ctx.threads)
    write_reports(list(reports.values()), ctx.path("report.json"), ctx.path("report.csv"))


def cmd_sweep(ctx: RunContext) -> None:
    adapters = _adapters(ctx, ctx.args.models)
    _, _, test = _split(ctx, _load_days(ctx, ctx.args.bundle))
    n_list = ctx.args.n_list or ctx.config.eval.sweep_n
    table = sparsity_sweep(adapters, test, n_list, ctx.config.eval.seed, ctx.threads)
    table.write(ctx.path("sweep.json"), ctx.path("sweep.csv"))


def cmd_heatmap(ctx: RunContext) -> None:
    adapters = _adapters(ctx, ctx.args.models)
    _, _, test = _split(ctx, _load_days(ctx, ctx.args.bundle))
    ev = ctx.config.eval
    for adapter in adapters:
        grid = error_heatmap(adapter, test, ev.k_bins, ev.tau_bins, ev.seed, ev.n_context, ctx.threads)
        grid.write_csv(ctx.path(f"heatmap_{_slug(adapter.name)}.csv"))


def cmd_arb_check(ctx: RunContext) -> None:
    adapters = _adapters(ctx, ctx.args.models)
    _, _, test = _split(ctx, _load_days(ctx, ctx.args.bundle))
    ev = ctx.config.eval
    comparison = compare_violation_measures(adapters, test, ev.n_context, ev.seed, ev.arb_k_grid, ev.fd_step, ctx.threads)
    _write_json(ctx.path("arbitrage_comparison.json"), comparison.to_dict())
    names = list(comparison.measures)
    for a in names:
        for b in names:
            if a != b:
                logger.info(f"⚖️ {a} <= {b} on {comparison.at_most(a, b)}/{len(comparison.days)} days")

    # Per-slice detail of one day for plotting
    tasks, _ = evaluation_tasks(test, ev.n_context, ev.seed)
    if ctx.args.day:
        tasks = [item for item in tasks if item[0].label == ctx.args.day]
        if not tasks:
            raise ConfigError(f"Day {ctx.args.day} is not an evaluable test day")
    if not tasks:
        return
    day, task = tasks[0]
    k_grid = grid_points(*ev.arb_k_grid)
    for adapter in adapters:
        try:
            fit = adapter.fit_day(task.context, day)
            report = surface_report(fit.surface, day.maturities(), k_grid, ev.fd_step, fit.analytic)
        except NeuroVolError as e:
            logger.warning(f"⚠️ No arbitrage detail for {adapter.name} on {day.label}: {e}")
            continue
        stem = f"arbitrage_{_slug(adapter.name)}_{day.label}"
        report.write_json(ctx.path(f"{stem}.json"))
        report.write_csv(ctx.path(f"{stem}.csv"))


def cmd_reconstruct(ctx: RunContext) -> None:
    model = _load_model(ctx, ctx.args.checkpoint)
    context = _read_context(ctx, ctx.args.context)
    grids = parse_grid(ctx.args.grid)
    coords = [Coordinate(k, tau) for tau in grids["tau"] for k in grids["k"]]
    preds = model.predict(context, coords)
    frame = pd.DataFrame(
        [(c.k, c.tau, p.mu, p.sigma) for c, p in zip(coords, preds)],
        columns=["k", "tau", "vol", "sigma"],
    )
    out = ctx.output(Path(ctx.args.out) if ctx.args.out else ctx.run_dir / "surface.csv")
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(out, index=False, float_format="%.17g")
    except OSError as e:
        raise IoError(f"Failed to write {out}: {e}") from e
    logger.info(f"🗺️ Wrote {len(frame)} surface points to {out}")


def _slug(name: str) -> str:
    return name.lower().replace("-", "_").replace(" ", "_")


COMMANDS: Dict[str, Callable[[RunContext], None]] = {
    "gen-market": cmd_gen_market,
    "ingest": cmd_ingest,
    "build-priors": cmd_build_priors,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "heatmap": cmd_heatmap,
    "arb-check": cmd_arb_check,
    "reconstruct": cmd_reconstruct,
}


# ==================== Parser ====================

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="Pipeline config JSON (all fields optional)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.FIELD=VALUE",
                        help="Override one config field; repeatable")
    common.add_argument("--seed", type=int, help="Master seed for the market, splits, training stages and evaluation")
    common.add_argument("--threads", type=int, default=os.cpu_count(), help="Worker threads (default: all cores)")
    common.add_argument("--runs-dir", type=Path, default=Path("runs"), help="Parent of per-run output directories")
    common.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help="Log level (default: $NEUROVOL_LOG_LEVEL or INFO)")

    models = argparse.ArgumentParser(add_help=False)
    models.add_argument("--bundle", type=Path, required=True, help="Day bundle directory")
    models.add_argument("--ft", type=Path, help="Fine-tuned VolNP checkpoint")
    models.add_argument("--base", type=Path, help="Base VolNP checkpoint")
    models.add_argument("--models", nargs="+", choices=[k.value for k in ModelKind],
                        help="Models to evaluate (default: every model with what it needs)")

    parser = argparse.ArgumentParser(prog="neurovol", description="Implied-volatility surfaces from sparse quotes")
    parser.add_argument("--version", action="version", version=f"neurovol {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-market", parents=[common], help="Generate a seeded synthetic market bundle")
    p.add_argument("--days", type=int, help="Number of trading days")
    p.add_argument("--generator", choices=["ssvi_random", "sabr_mixture"], help="Ground-truth family")
    p.add_argument("--out", type=Path, help="Bundle directory (default: inside the run directory)")

    p = sub.add_parser("ingest", parents=[common], help="Ingest a quote CSV into a day bundle")
    p.add_argument("--quotes", type=Path, required=True, help="CSV with date,expiry,strike,type,bid,ask,forward,discount_factor")
    p.add_argument("--out", type=Path, help="Bundle directory (default: inside the run directory)")

    p = sub.add_parser("build-priors", parents=[common], help="Calibrate SABR and attach dense prior surfaces")
    p.add_argument("--bundle", type=Path, required=True, help="Day bundle directory")
    p.add_argument("--out", type=Path, help="Write a new bundle instead of updating in place")

    p = sub.add_parser("train", parents=[common], help="Run one training stage")
    p.add_argument("--stage", choices=list(STAGE_DEFAULTS), required=True)
    p.add_argument("--bundle", type=Path, required=True, help="Day bundle directory")
    p.add_argument("--init", type=Path, help="Starting checkpoint (required for finetune)")
    p.add_argument("--out", type=Path, help="Checkpoint path (default: <run dir>/<stage>.npz)")

    p = sub.add_parser("evaluate", parents=[common, models], help="Paired out-of-sample error report")
    p.add_argument("--n-context", type=int, help="Context size (default: eval.n_context)")

    p = sub.add_parser("sweep", parents=[common, models], help="Errors as a function of context size")
    p.add_argument("--n-list", type=int, nargs="+", help="Context sizes (default: eval.sweep_n)")

    sub.add_parser("heatmap", parents=[common, models], help="RMSE per (k, tau) cell")

    p = sub.add_parser("arb-check", parents=[common, models], help="Butterfly-arbitrage diagnostics")
    p.add_argument("--day", help="Test day (YYYY-MM-DD) for per-slice detail (default: first test day)")

    p = sub.add_parser("reconstruct", parents=[common], help="Dense surface from a checkpoint and a context file")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--context", type=Path, required=True, help="k,tau,vol CSV or a one-date quote CSV")
    p.add_argument("--grid", nargs=2, required=True, metavar="AXIS:LO:HI:STEP", help="e.g. k:-0.5:0.5:0.025 tau:0.1:2:0.1")
    p.add_argument("--out", type=Path, help="Output CSV (default: <run dir>/surface.csv)")

    p = sub.add_parser("rerun", help="Repeat a recorded run into a fresh run directory")
    p.add_argument("manifest", type=Path)
    p.add_argument("--runs-dir", type=Path, default=Path("runs"))
    p.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return parser


def _config_for(args: argparse.Namespace) -> PipelineConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides += [f"{key}={args.seed}" for key in SEEDED_FIELDS]
    if getattr(args, "days", None) is not None:
        overrides.append(f"market.n_days={args.days}")
    return load_config(args.config, overrides)


def setup_logging(level: Optional[str]) -> None:
    load_dotenv()
    chosen = (level or os.getenv("NEUROVOL_LOG_LEVEL") or "INFO").upper()
    logging.basicConfig(level=getattr(logging, chosen, logging.INFO), format=LOG_FORMAT, force=True)


# ==================== Replay ====================

def _strip_flags(argv: Sequence[str], flags: Dict[str, bool]) -> List[str]:
    """Drop `--flag value` and `--flag=value` occurrences of the given flags"""
    out, skip = [], False
    for token in argv:
        if skip:
            skip = False
            continue
        name = token.split("=", 1)[0]
        if name in flags:
            skip = "=" not in token and flags[name]
            continue
        out.append(token)
    return out


def replay_argv(manifest: RunManifest, snapshot: Path, replay_dir: Path) -> List[str]:
    """Original argv with config flags replaced by the snapshot and outputs moved under replay_dir"""
    argv = _strip_flags(manifest.argv, CONFIG_FLAGS)
    remapped, i = [], 0
    while i < len(argv):
        token = argv[i]
        name = token.split("=", 1)[0]
        if name in OUTPUT_FLAGS:
            value = token.split("=", 1)[1] if "=" in token else argv[i + 1]
            remapped += [name, str(replay_dir / Path(value).name)]
            i += 1 if "=" in token else 2
            continue
        if name == "--runs-dir":
            i += 1 if "=" in token else 2
            continue
        remapped.append(token)
        i += 1
    return remapped + ["--config", str(snapshot), "--runs-dir", str(replay_dir)]


def cmd_rerun(args: argparse.Namespace) -> int:
    path = Path(args.manifest)
    try:
        manifest = RunManifest.model_validate_json(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise IoError(f"Failed to read manifest {path}: {e}") from e
    except ValueError as e:
        raise ConfigError(f"{path} is not a run manifest: {e}") from e
    for input_path, digest in manifest.inputs.items():
        if not Path(input_path).exists():
            raise ConfigError(f"Recorded input is missing: {input_path}")
        if content_hash(Path(input_path)) != digest:
            logger.warning(f"⚠️ Input {input_path} changed since the recorded run")

    replay_dir = Path(args.runs_dir) / f"{dt.datetime.now().strftime('%Y%m%d-%H%M%S-%f')}-rerun"
    replay_dir.mkdir(parents=True, exist_ok=True)
    snapshot = _write_json(replay_dir / "config.json", manifest.config)
    argv = replay_argv(manifest, snapshot, replay_dir)
    logger.info(f"🔁 Replaying '{manifest.command}' into {replay_dir}")
    return main(argv, configure_logging=False)


# ==================== Entry point ====================

def main(argv: Optional[Sequence[str]] = None, configure_logging: bool = True) -> int:
    """Run one subcommand; returns the process exit code"""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if configure_logging:
        setup_logging(args.log_level)

    if args.command == "rerun":
        try:
            return cmd_rerun(args)
        except NeuroVolError as e:
            logger.error(f"{e.category}: {e}")
            return e.exit_code

    ctx = None
    try:
        config = _config_for(args)
        ctx = RunContext(args, argv, config)
        logger.info(f"🚀 neurovol {args.command} → {ctx.run_dir}")
        COMMANDS[args.command](ctx)
    except NeuroVolError as e:
        logger.error(f"{e.category}: {e}")
        if ctx is not None:
            ctx.finish(e.exit_code, f"{e.category}: {e}")
        return e.exit_code
    except Exception as e:
        logger.exception(f"Unexpected failure: {e}")
        if ctx is not None:
            ctx.finish(1, f"unexpected: {e}")
        return 1
    ctx.finish(0)
    logger.info(f"✅ {args.command} finished in {ctx.manifest.wall_time:.1f}s")
    return 0
