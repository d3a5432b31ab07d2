"""Pipeline configuration: defaults, file loading, dotted overrides and validation."""

import json

import pytest
from pydantic import ValidationError

from neurovol.config import (
    ModelConfig,
    PipelineConfig,
    SyntheticMarketConfig,
    TrainConfig,
    apply_overrides,
    grid_points,
    load_config,
)
from neurovol.errors import ConfigError


class TestDefaults:
    def test_stage_defaults(self):
        config = PipelineConfig()
        assert (config.stage("pretrain").lr, config.stage("pretrain").max_epochs) == (5e-5, 200)
        assert (config.stage("finetune").lr, config.stage("finetune").max_epochs) == (1e-6, 100)
        assert (config.stage("base").lr, config.stage("base").max_epochs) == (5e-5, 300)
        assert config.stage("finetune").stage == "finetune"

    def test_model_defaults(self):
        cfg = ModelConfig()
        assert (cfg.d_r, cfg.L, cfg.L_prime, cfg.n_h) == (128, 3, 3, 4)
        assert cfg.d_k == cfg.d_v == 32

    def test_unknown_stage(self):
        with pytest.raises(ConfigError):
            PipelineConfig().stage("warmup")
        with pytest.raises(ConfigError):
            TrainConfig.for_stage("warmup")


class TestLoading:
    def test_overrides(self):
        config = load_config(None, ["model.d_r=64", "seed=3", "market.generator=sabr_mixture"])
        assert config.model.d_r == 64
        assert config.seed == 3
        assert config.market.generator == "sabr_mixture"

    def test_file_values_keep_stage_defaults(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"finetune": {"max_epochs": 5}, "split": {"n_test": 3}}))
        config = load_config(path, ["finetune.batch_tasks=4"])
        assert config.finetune.max_epochs == 5
        assert config.finetune.lr == 1e-6
        assert config.finetune.batch_tasks == 4
        assert config.split.n_test == 3

    def test_snapshot_round_trip(self, tmp_path):
        config = load_config(None, ["model.d_r=16", "model.n_h=2", "pretrain.lr=0.001"])
        path = tmp_path / "snapshot.json"
        path.write_text(json.dumps(config.model_dump(mode="json")))
        assert load_config(path) == config

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.json")

    def test_bad_json(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_invalid_values(self):
        with pytest.raises(ConfigError):
            load_config(None, ["model.d_r=10"])
        with pytest.raises(ConfigError):
            load_config(None, ["split.val_fraction=1.5"])

    def test_malformed_overrides(self):
        with pytest.raises(ConfigError):
            apply_overrides({}, ["model.d_r"])
        with pytest.raises(ConfigError):
            apply_overrides({"seed": 1}, ["seed.value=2"])

    def test_override_values_parse_as_json(self):
        document = apply_overrides({}, ["a.b=[1, 2]", "a.c=true", "d=text"])
        assert document == {"a": {"b": [1, 2], "c": True}, "d": "text"}


class TestValidation:
    def test_heads_divide_width(self):
        with pytest.raises(ValidationError):
            ModelConfig(d_r=12, n_h=5)

    def test_shares_sum_to_one(self):
        with pytest.raises(ValidationError):
            SyntheticMarketConfig(maturity_shares={"short": 0.5, "mid": 0.2, "long": 0.1})

    def test_context_range(self):
        with pytest.raises(ValidationError):
            TrainConfig(context_range=(50, 20))

    def test_frozen(self):
        config = PipelineConfig()
        with pytest.raises(ValidationError):
            config.seed = 3


class TestGridPoints:
    def test_inclusive(self):
        grid = grid_points(-0.5, 0.5, 0.025)
        assert len(grid) == 41
        assert grid[0] == -0.5 and grid[-1] == pytest.approx(0.5)

    def test_single_point(self):
        assert grid_points(0.3, 0.3, 0.1) == [0.3]

    def test_invalid(self):
        with pytest.raises(ConfigError):
            grid_points(0.0, 1.0, 0.0)
        with pytest.raises(ConfigError):
            grid_points(1.0, 0.0, 0.1)
