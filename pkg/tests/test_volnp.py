"""Volatility neural process: encodings, encoder/decoder structure, objective, gradients, checkpoints."""

import math

import numpy as np
import pytest
from scipy.special import ndtr

from neurovol.config import ModelConfig
from neurovol.core import Coordinate, Quote, Task
from neurovol.errors import ConfigError, LengthMismatch, ShapeMismatch
from neurovol.tensor import numeric_gradient
from neurovol.volnp import (
    AttentionTrace,
    ModelParams,
    PredictiveDistribution,
    VolatilityNeuralProcess,
    decode,
    encode,
    encode_coordinates,
    init_params,
    load_checkpoint,
    nll_loss,
    parameter_shapes,
    positional_encoding,
    task_loss,
    task_loss_and_grads,
)

from conftest import random_quotes


def _randomized(cfg, seed=42, scale=0.3):
    """Parameters away from the initialization's symmetric regime, so no gradient vanishes"""
    rng = np.random.default_rng(seed)
    return ModelParams({name: scale * rng.standard_normal(shape) for name, shape in parameter_shapes(cfg).items()})


def _reference_encode(context, params, cfg):
    """The encoder written as straight numpy arithmetic"""

    def gelu(x):
        return x * ndtr(x)

    def norm(x, name):
        c = x - x.mean(axis=1, keepdims=True)
        return c / np.sqrt((c * c).mean(axis=1, keepdims=True) + cfg.ln_eps) * params[f"{name}.gain"] + params[f"{name}.bias"]

    def mlp(x, prefix, n):
        for i in range(n):
            x = x @ params[f"{prefix}.{i}.w"] + params[f"{prefix}.{i}.b"]
            if i < n - 1:
                x = gelu(x)
        return x

    k = np.array([q.k for q in context])
    tau = np.array([q.tau for q in context])
    vol = np.array([q.vol for q in context])
    raw = np.stack([k / cfg.coord_scale[0], tau / cfg.coord_scale[1], vol], axis=1)
    h = mlp(raw, "phi_e", cfg.mlp_layers + 1) + encode_coordinates(k, tau, cfg)
    for l in range(cfg.L):
        p = f"enc.{l}"
        n = norm(h, f"{p}.ln1")
        heads = []
        for j in range(cfg.n_h):
            q, kk, v = (n @ params[f"{p}.head{j}.{m}"] for m in ("w_q", "w_k", "w_v"))
            logits = q @ kk.T / math.sqrt(cfg.d_k)
            e = np.exp(logits - logits.max(axis=1, keepdims=True))
            heads.append(e / e.sum(axis=1, keepdims=True) @ v)
        h = h + np.concatenate(heads, axis=1) @ params[f"{p}.w_out"]
        h = h + mlp(norm(h, f"{p}.ln2"), f"{p}.ffn", 2)
    return h


class TestPositionalEncoding:
    def test_zero_phase(self, tiny_cfg):
        pe = encode_coordinates(np.array([0.0]), np.array([0.0]), tiny_cfg)[0]
        np.testing.assert_array_equal(pe[0::2], 0.0)
        np.testing.assert_array_equal(pe[1::2], 1.0)

    def test_constant_norm(self):
        cfg = ModelConfig()
        rng = np.random.default_rng(42)
        for k, tau in zip(rng.uniform(-1, 1, 50), rng.uniform(0.01, 3, 50)):
            pe = positional_encoding(Coordinate(k, tau), cfg)
            assert pe.shape == (cfg.d_r,)
            assert float(pe @ pe) == pytest.approx(cfg.d_r / 2, abs=1e-9)

    def test_distinct_on_a_grid(self):
        cfg = ModelConfig()
        ks, taus = np.meshgrid(np.linspace(-0.5, 0.5, 41), np.linspace(0.05, 2.0, 20))
        pe = encode_coordinates(ks.ravel(), taus.ravel(), cfg)
        gaps = np.linalg.norm(pe[:, None, :] - pe[None, :, :], axis=2)
        np.fill_diagonal(gaps, np.inf)
        assert gaps.min() > 1e-6


class TestEncoder:
    def test_single_quote_attends_to_itself(self, tiny_cfg):
        trace = AttentionTrace()
        encode([Quote.at(0.0, 0.5, 0.2)], init_params(tiny_cfg, 1), tiny_cfg, trace)
        assert len(trace.entries) == tiny_cfg.L * tiny_cfg.n_h
        for _, _, weights in trace.entries:
            np.testing.assert_array_equal(weights, [[1.0]])

    def test_row_equivariance(self, tiny_cfg):
        params = _randomized(tiny_cfg)
        context = random_quotes(9, seed=1)
        perm = np.random.default_rng(42).permutation(9)
        h = encode(context, params, tiny_cfg)
        h_perm = encode([context[i] for i in perm], params, tiny_cfg)
        np.testing.assert_allclose(h_perm, h[perm], atol=1e-12)

    def test_matches_reference_arithmetic(self):
        cfg = ModelConfig(d_r=16, L=2, L_prime=1, n_h=4, mlp_layers=2, mlp_width=12)
        params = _randomized(cfg, seed=3)
        context = random_quotes(5, seed=2)
        np.testing.assert_allclose(encode(context, params, cfg), _reference_encode(context, params, cfg), rtol=1e-12, atol=1e-12)

    def test_empty_context(self, tiny_cfg):
        with pytest.raises(ShapeMismatch):
            encode([], init_params(tiny_cfg), tiny_cfg)

    def test_attention_rows_are_distributions(self, tiny_cfg):
        trace = AttentionTrace()
        params = _randomized(tiny_cfg)
        h = encode(random_quotes(7), params, tiny_cfg, trace)
        decode(h, [Coordinate(0.0, 1.0), Coordinate(0.2, 0.3)], params, tiny_cfg, trace)
        assert len(trace.entries) == (tiny_cfg.L + tiny_cfg.L_prime) * tiny_cfg.n_h
        for _, _, weights in trace.entries:
            np.testing.assert_allclose(weights.sum(axis=1), 1.0, atol=1e-12)


class TestDecoder:
    def test_duplicate_targets_agree(self, tiny_cfg):
        params = _randomized(tiny_cfg)
        h = encode(random_quotes(6), params, tiny_cfg)
        a, b, c = decode(h, [Coordinate(0.1, 0.5), Coordinate(-0.3, 1.2), Coordinate(0.1, 0.5)], params, tiny_cfg)
        assert a.mu == pytest.approx(c.mu, abs=1e-14)
        assert a.log_var == pytest.approx(c.log_var, abs=1e-14)

    def test_targets_are_decoded_independently(self, tiny_cfg):
        params = _randomized(tiny_cfg)
        h = encode(random_quotes(6), params, tiny_cfg)
        targets = [Coordinate(0.1, 0.5), Coordinate(-0.3, 1.2), Coordinate(0.25, 2.0)]
        full = decode(h, targets, params, tiny_cfg)
        partial = decode(h, [targets[0], targets[2]], params, tiny_cfg)
        for x, y in zip([full[0], full[2]], partial):
            assert x.mu == pytest.approx(y.mu, abs=1e-14)
            assert x.log_var == pytest.approx(y.log_var, abs=1e-14)

    def test_context_permutation_invariance(self, tiny_cfg):
        params = _randomized(tiny_cfg)
        context = random_quotes(10, seed=4)
        targets = [Coordinate(k, t) for k, t in zip(np.linspace(-0.4, 0.4, 5), np.linspace(0.1, 2.0, 5))]
        model = VolatilityNeuralProcess(params, tiny_cfg)
        base = model.predict(context, targets)
        rng = np.random.default_rng(42)
        for _ in range(20):
            shuffled = [context[i] for i in rng.permutation(len(context))]
            for p, q in zip(model.predict(shuffled, targets), base):
                assert abs(p.mu - q.mu) <= 1e-10
                assert abs(p.log_var - q.log_var) <= 1e-10

    def test_log_variance_is_clamped(self, tiny_cfg):
        arrays = {name: a.copy() for name, a in init_params(tiny_cfg).items()}
        arrays[f"phi_d.{tiny_cfg.mlp_layers}.b"][0, 1] = 1e6
        params = ModelParams(arrays)
        context = random_quotes(4)
        preds = VolatilityNeuralProcess(params, tiny_cfg).predict(context, [q.coord for q in context])
        assert all(p.log_var == tiny_cfg.log_var_bounds[1] for p in preds)
        assert math.isfinite(nll_loss(preds, context))

    def test_no_targets(self, tiny_cfg):
        params = init_params(tiny_cfg)
        with pytest.raises(ShapeMismatch):
            decode(encode(random_quotes(3), params, tiny_cfg), [], params, tiny_cfg)


class TestObjective:
    def test_perfect_fit_at_unit_variance(self):
        targets = random_quotes(5)
        preds = [PredictiveDistribution(q.vol, 0.0) for q in targets]
        assert nll_loss(preds, targets) == 0.0

    def test_single_target(self):
        assert nll_loss([PredictiveDistribution(1.2, 0.0)], [Quote.at(0.0, 1.0, 0.2)]) == pytest.approx(0.5)

    def test_matches_termwise_formula(self):
        rng = np.random.default_rng(42)
        targets = random_quotes(8)
        preds = [PredictiveDistribution(float(m), float(v)) for m, v in zip(rng.uniform(0.1, 0.4, 8), rng.uniform(-6, 1, 8))]
        expected = 0.5 * sum(math.exp(-p.log_var) * (q.vol - p.mu) ** 2 + p.log_var for p, q in zip(preds, targets))
        assert nll_loss(preds, targets) == pytest.approx(expected, rel=1e-14)

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            nll_loss([PredictiveDistribution(0.2, 0.0)], random_quotes(2))

    def test_tape_loss_agrees_with_scalar_loss(self, tiny_cfg):
        params = _randomized(tiny_cfg)
        quotes = random_quotes(8, seed=6)
        task = Task(context=tuple(quotes[:5]), targets=tuple(quotes[5:]), day_id=0)
        preds = VolatilityNeuralProcess(params, tiny_cfg).predict(task.context, [q.coord for q in task.targets])
        assert task_loss(task, params, tiny_cfg) == pytest.approx(nll_loss(preds, task.targets), rel=1e-12)
        assert task_loss_and_grads(task, params, tiny_cfg)[0] == pytest.approx(task_loss(task, params, tiny_cfg), rel=1e-14)

    def test_gradients_match_finite_differences(self, tiny_cfg):
        """Every parameter matrix of a 5-context / 3-target task"""
        params = _randomized(tiny_cfg, seed=7)
        quotes = random_quotes(8, seed=7)
        task = Task(context=tuple(quotes[:5]), targets=tuple(quotes[5:]), day_id=0)
        _, grads = task_loss_and_grads(task, params, tiny_cfg)
        for name in params.names:
            numeric = numeric_gradient(lambda: task_loss(task, params, tiny_cfg), params[name], h=1e-4, points=4)
            np.testing.assert_allclose(grads[name], numeric, rtol=1e-5, atol=1e-7, err_msg=name)


class TestParameters:
    def test_same_seed_is_bitwise_identical(self, tiny_cfg):
        assert init_params(tiny_cfg, 5).equals(init_params(tiny_cfg, 5))
        assert not init_params(tiny_cfg, 5).equals(init_params(tiny_cfg, 6))

    def test_initial_log_variance_near_zero(self):
        cfg = ModelConfig()
        model = VolatilityNeuralProcess.initialize(cfg, rng_seed=0)
        rng = np.random.default_rng(42)
        targets = [Coordinate(k, t) for k, t in zip(rng.uniform(-0.8, 0.8, 40), rng.uniform(0.02, 3.0, 40))]
        preds = model.predict(random_quotes(30, seed=11), targets)
        assert all(-0.5 <= p.log_var <= 0.5 for p in preds)
        assert np.ptp([p.mu for p in preds]) < 0.1

    def test_default_parameter_count(self):
        cfg = ModelConfig()
        d, w, f = cfg.d_r, cfg.mlp_width, cfg.ffn_multiplier * cfg.d_r
        mlp_hidden = (cfg.mlp_layers - 1) * (w * w + w)
        phi_e = 3 * w + w + mlp_hidden + w * d + d
        phi_d = d * w + w + mlp_hidden + w * 2 + 2
        attention = 3 * cfg.n_h * d * cfg.d_k + cfg.n_h * cfg.d_v * d
        ffn = d * f + f + f * d + d
        sa = 2 * d + attention + 2 * d + ffn
        ca = sa + 2 * d
        expected = phi_e + cfg.L * sa + cfg.L_prime * ca + phi_d
        params = init_params(cfg)
        assert params.count() == expected
        assert all(params[n].shape == s for n, s in parameter_shapes(cfg).items())

    def test_layout_validation(self, tiny_cfg):
        with pytest.raises(ShapeMismatch):
            VolatilityNeuralProcess(init_params(ModelConfig(d_r=16, n_h=2)), tiny_cfg)


class TestCheckpoint:
    def test_round_trip_is_bitwise(self, tiny_cfg, tmp_path):
        model = VolatilityNeuralProcess(_randomized(tiny_cfg), tiny_cfg)
        path = model.save(tmp_path / "ckpt" / "model.npz")
        loaded = VolatilityNeuralProcess.load(path)
        assert loaded.cfg == tiny_cfg
        assert loaded.params.equals(model.params)
        assert loaded.params.names == list(parameter_shapes(tiny_cfg))

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(ConfigError):
            load_checkpoint(tmp_path / "nope.npz")
