"""
Desk-scale synthetic reproduction: 250 seeded days, two-stage VolNP against the classical models.

Run with `pytest --runslow tests/test_acceptance.py`; expect tens of minutes.
"""

import logging

import pytest

from neurovol.adapters import ModelKind, build_adapter
from neurovol.config import PipelineConfig, SyntheticMarketConfig, TrainConfig
from neurovol.evaluation import compare_violation_measures, evaluate_models, sparsity_sweep
from neurovol.market import build_pretraining_surfaces, generate_market
from neurovol.train import run_stage, split_days
from neurovol.volnp import VolatilityNeuralProcess

logger = logging.getLogger('NeuroVol.Acceptance')

pytestmark = pytest.mark.slow

SEED = 7


@pytest.fixture(scope="module")
def study():
    config = PipelineConfig(market=SyntheticMarketConfig(n_days=250, seed=SEED), seed=SEED)
    days = generate_market(config.market)
    train, val, test = split_days(days, n_test=50, val_fraction=0.1, seed=SEED)
    history = build_pretraining_surfaces(train + val, config.prior)
    train_ids = {d.day_id for d in train}
    prior_train = [d for d in history if d.synthetic_surface and d.day_id in train_ids]
    prior_val = [d for d in history if d.synthetic_surface and d.day_id not in train_ids]

    def stage(name, epochs):
        return TrainConfig.for_stage(name, max_epochs=epochs, seed=SEED)

    fresh = VolatilityNeuralProcess.initialize(config.model, rng_seed=SEED)
    pretrained = run_stage(prior_train, fresh, stage("pretrain", 40), prior_val).model
    finetuned = run_stage(train, pretrained, stage("finetune", 20), val).model
    base = run_stage(train, fresh, stage("base", 60), val).model

    adapters = [
        build_adapter(ModelKind.VOLNP_FT, finetuned),
        build_adapter(ModelKind.VOLNP_BASE, base),
        build_adapter(ModelKind.SABR),
        build_adapter(ModelKind.SSVI),
        build_adapter(ModelKind.GP),
    ]
    return adapters, test


def test_finetuning_beats_training_from_scratch(study):
    adapters, test = study
    reports = evaluate_models(adapters, test, n_context=100, seed=SEED)
    ft, base = reports["VolNP-FT"].overall.rmse_bps, reports["VolNP-Base"].overall.rmse_bps
    assert ft < 0.9 * base

    for bucket in ("mid", "long"):
        ft_cell = reports["VolNP-FT"].by_maturity[bucket].rmse_bps
        for name in ("SABR", "SSVI"):
            other = reports[name].by_maturity[bucket].rmse_bps
            if ft_cell is not None and other is not None:
                assert ft_cell <= other, f"{bucket}: VolNP-FT {ft_cell:.1f} vs {name} {other:.1f} bps"


def test_sparsity_sweep(study):
    adapters, test = study
    table = sparsity_sweep(adapters[:2], test, [10, 25, 50, 100, 200], seed=SEED)
    for n, by_model in table.reports.items():
        assert by_model["VolNP-FT"].overall.rmse_bps <= by_model["VolNP-Base"].overall.rmse_bps, f"N={n}"


def test_butterfly_comparison_is_reported(study):
    adapters, test = study
    comparison = compare_violation_measures(adapters[:2], test, n_context=100, seed=SEED)
    assert len(comparison.days) == len(comparison.measures["VolNP-FT"])
    wins = comparison.at_most("VolNP-FT", "VolNP-Base")
    # Observed behaviour rather than a guarantee; logged, not gated
    logger.info(f"VolNP-FT violation measure <= VolNP-Base on {wins}/{len(comparison.days)} test days")
