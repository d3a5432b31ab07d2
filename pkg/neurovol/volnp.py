"""
VolNP - Attentive neural process mapping sparse quotes to a full volatility surface
Self-attention encoder over the context set, cross-attention decoder over target coordinates,
Gaussian prediction head; everything runs on the tensor module's tape
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .core import Coordinate, Quote, Task
from .errors import ConfigError, IoError, LengthMismatch, ShapeMismatch
from .tensor import Tape, Tensor

logger = logging.getLogger('NeuroVol.VolNP')

CHECKPOINT_FORMAT = "neurovol-checkpoint/1"
FREQUENCY_BASE = 10000.0
HEAD_INIT_SCALE = 1e-3


@dataclass(frozen=True)
class PredictiveDistribution:
    """Gaussian prediction N(mu, exp(log_var)) for one target"""

    mu: float
    log_var: float

    @property
    def variance(self) -> float:
        return math.exp(self.log_var)

    @property
    def sigma(self) -> float:
        return math.exp(0.5 * self.log_var)


@dataclass
class AttentionTrace:
    """Collects attention weight matrices as (block, head, weights) during a forward pass"""

    entries: List[Tuple[str, int, np.ndarray]] = field(default_factory=list)

    def add(self, block: str, head: int, weights: np.ndarray) -> None:
        self.entries.append((block, head, weights.copy()))


class ModelParams:
    """
    Every learnable matrix of the model, keyed by name in a fixed order

    Names follow `<module>.<index>.<part>`: `phi_e.*`, `enc.<l>.*`,
    `dec.<l>.*`, `phi_d.*`. Biases, layer-norm gains and shifts are 1 x n rows.
    """

    def __init__(self, arrays: Dict[str, np.ndarray]):
        self._arrays: Dict[str, np.ndarray] = {name: np.asarray(a, dtype=np.float64) for name, a in arrays.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def items(self):
        return self._arrays.items()

    @property
    def names(self) -> List[str]:
        return list(self._arrays)

    def copy(self) -> "ModelParams":
        return ModelParams({name: a.copy() for name, a in self._arrays.items()})

    def count(self) -> int:
        return int(np.sum([a.size for a in self._arrays.values()]))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self._arrays.values())

    def equals(self, other: "ModelParams") -> bool:
        """Bitwise equality of names, shapes and values"""
        if self.names != other.names:
            return False
        return all(
            self[n].shape == other[n].shape and self[n].tobytes() == other[n].tobytes() for n in self.names
        )


# ==================== Parameter layout ====================

def _mlp_shapes(prefix: str, dims: Sequence[int]) -> Dict[str, Tuple[int, int]]:
    shapes = {}
    for i, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
        shapes[f"{prefix}.{i}.w"] = (fan_in, fan_out)
        shapes[f"{prefix}.{i}.b"] = (1, fan_out)
    return shapes


def _block_shapes(prefix: str, cfg: ModelConfig, cross: bool) -> Dict[str, Tuple[int, int]]:
    d = cfg.d_r
    shapes: Dict[str, Tuple[int, int]] = {}
    norms = ("ln_q", "ln_kv") if cross else ("ln1",)
    for norm in norms:
        shapes[f"{prefix}.{norm}.gain"] = (1, d)
        shapes[f"{prefix}.{norm}.bias"] = (1, d)
    for h in range(cfg.n_h):
        shapes[f"{prefix}.head{h}.w_q"] = (d, cfg.d_k)
        shapes[f"{prefix}.head{h}.w_k"] = (d, cfg.d_k)
        shapes[f"{prefix}.head{h}.w_v"] = (d, cfg.d_v)
    shapes[f"{prefix}.w_out"] = (cfg.n_h * cfg.d_v, d)
    shapes[f"{prefix}.ln2.gain"] = (1, d)
    shapes[f"{prefix}.ln2.bias"] = (1, d)
    shapes.update(_mlp_shapes(f"{prefix}.ffn", (d, cfg.ffn_multiplier * d, d)))
    return shapes


def parameter_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, int]]:
    """Ordered name -> shape map of every parameter for a config"""
    hidden = [cfg.mlp_width] * cfg.mlp_layers
    shapes = _mlp_shapes("phi_e", [3, *hidden, cfg.d_r])
    for l in range(cfg.L):
        shapes.update(_block_shapes(f"enc.{l}", cfg, cross=False))
    for l in range(cfg.L_prime):
        shapes.update(_block_shapes(f"dec.{l}", cfg, cross=True))
    shapes.update(_mlp_shapes("phi_d", [cfg.d_r, *hidden, 2]))
    return shapes


def init_params(cfg: ModelConfig, rng_seed: int = 0) -> ModelParams:
    """
    Fresh parameters: fan-in scaled uniform weights, zero biases, unit layer-norm gains

    The last phi_d layer is shrunk so the untrained model predicts a nearly
    constant mean with log variance close to 0.
    """
    rng = np.random.default_rng(rng_seed)
    last_head = f"phi_d.{cfg.mlp_layers}.w"
    arrays: Dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(cfg).items():
        part = name.rsplit(".", 1)[-1]
        if part == "gain":
            arrays[name] = np.ones(shape)
        elif part in ("b", "bias"):
            arrays[name] = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            arrays[name] = rng.uniform(-bound, bound, size=shape)
            if name == last_head:
                arrays[name] *= HEAD_INIT_SCALE
    return ModelParams(arrays)


# ==================== Positional encoding ====================

def _sinusoid(x: np.ndarray, width: int) -> np.ndarray:
    i = np.arange(width // 2)
    freq = FREQUENCY_BASE ** (-2.0 * i / width)
    phase = x[:, None] * freq[None, :]
    out = np.empty((len(x), width))
    out[:, 0::2] = np.sin(phase)
    out[:, 1::2] = np.cos(phase)
    return out


def encode_coordinates(k: np.ndarray, tau: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Sinusoidal encodings of many coordinates, (M, d_r)"""
    half = cfg.d_r // 2
    k_scaled = np.asarray(k, dtype=float) / cfg.coord_scale[0]
    tau_scaled = np.asarray(tau, dtype=float) / cfg.coord_scale[1]
    return np.concatenate([_sinusoid(k_scaled, half), _sinusoid(tau_scaled, half)], axis=1)


def positional_encoding(coord: Coordinate, cfg: ModelConfig) -> np.ndarray:
    """
    Fixed two-axis sinusoidal encoding of one coordinate

    The first d_r/2 entries carry k / k_scale, the last d_r/2 carry
    tau / tau_scale, each as interleaved (sin, cos) pairs over frequencies
    10000^(-2i/(d_r/2)).
    """
    return encode_coordinates(np.array([coord.k]), np.array([coord.tau]), cfg)[0]


# ==================== Forward pass ====================

def bind(params: ModelParams, tape: Optional[Tape] = None) -> Dict[str, Tensor]:
    """Wrap parameter arrays as tensors: tape leaves when differentiating, constants otherwise"""
    if tape is None:
        return {name: Tensor(a, name=name) for name, a in params.items()}
    return {name: tape.leaf(a, name=name) for name, a in params.items()}


def _mlp(x: Tensor, w: Dict[str, Tensor], prefix: str, n_linear: int) -> Tensor:
    for i in range(n_linear):
        x = T.linear(x, w[f"{prefix}.{i}.w"], w[f"{prefix}.{i}.b"])
        if i < n_linear - 1:
            x = T.gelu(x)
    return x


def _mha(queries: Tensor, keys: Tensor, w: Dict[str, Tensor], prefix: str, cfg: ModelConfig,
         trace: Optional[AttentionTrace]) -> Tensor:
    scale = 1.0 / math.sqrt(cfg.d_k)
    heads = []
    for h in range(cfg.n_h):
        q = T.matmul(queries, w[f"{prefix}.head{h}.w_q"])
        k = T.matmul(keys, w[f"{prefix}.head{h}.w_k"])
        v = T.matmul(keys, w[f"{prefix}.head{h}.w_v"])
        weights = T.row_softmax(T.scale(T.matmul(q, T.transpose(k)), scale))
        if trace is not None:
            trace.add(prefix, h, weights.data)
        heads.append(T.matmul(weights, v))
    return T.matmul(T.concat_cols(heads), w[f"{prefix}.w_out"])


def _norm(x: Tensor, w: Dict[str, Tensor], name: str, cfg: ModelConfig) -> Tensor:
    return T.layer_norm(x, w[f"{name}.gain"], w[f"{name}.bias"], eps=cfg.ln_eps)


def _feed_forward(x: Tensor, w: Dict[str, Tensor], prefix: str, cfg: ModelConfig) -> Tensor:
    return T.add(x, _mlp(_norm(x, w, f"{prefix}.ln2", cfg), w, f"{prefix}.ffn", 2))


def _context_features(context: Sequence[Quote], cfg: ModelConfig) -> Tuple[np.ndarray, np.ndarray]:
    k = np.array([q.k for q in context], dtype=float)
    tau = np.array([q.tau for q in context], dtype=float)
    vol = np.array([q.vol for q in context], dtype=float)
    raw = np.stack([k / cfg.coord_scale[0], tau / cfg.coord_scale[1], vol], axis=1)
    return raw, encode_coordinates(k, tau, cfg)


def encode_tensor(context: Sequence[Quote], w: Dict[str, Tensor], cfg: ModelConfig,
                  trace: Optional[AttentionTrace] = None) -> Tensor:
    """h_i = phi_e([k; tau; y]) + gamma(x_i), then L pre-LN self-attention blocks"""
    if len(context) == 0:
        raise ShapeMismatch("encoder needs at least one context quote")
    raw, pe = _context_features(context, cfg)
    h = T.add(_mlp(Tensor(raw), w, "phi_e", cfg.mlp_layers + 1), Tensor(pe))
    for l in range(cfg.L):
        prefix = f"enc.{l}"
        normed = _norm(h, w, f"{prefix}.ln1", cfg)
        h = T.add(h, _mha(normed, normed, w, prefix, cfg, trace))
        h = _feed_forward(h, w, prefix, cfg)
    return h


def decode_tensor(h: Tensor, targets: Sequence[Coordinate], w: Dict[str, Tensor], cfg: ModelConfig,
                  trace: Optional[AttentionTrace] = None) -> Tuple[Tensor, Tensor]:
    """z_j = gamma(x_j), L' pre-LN cross-attention blocks over h, then phi_d -> (mu, log_var)"""
    if h.shape[0] == 0 or h.shape[1] != cfg.d_r:
        raise ShapeMismatch(f"context representation must be (N>=1, {cfg.d_r}), got {h.shape}")
    if len(targets) == 0:
        raise ShapeMismatch("decoder needs at least one target coordinate")
    k = np.array([c.k for c in targets], dtype=float)
    tau = np.array([c.tau for c in targets], dtype=float)
    z = Tensor(encode_coordinates(k, tau, cfg))
    for l in range(cfg.L_prime):
        prefix = f"dec.{l}"
        z = T.add(z, _mha(_norm(z, w, f"{prefix}.ln_q", cfg), _norm(h, w, f"{prefix}.ln_kv", cfg), w, prefix, cfg, trace))
        z = _feed_forward(z, w, prefix, cfg)
    out = _mlp(z, w, "phi_d", cfg.mlp_layers + 1)
    lo, hi = cfg.log_var_bounds
    return T.slice_cols(out, 0, 1), T.clamp(T.slice_cols(out, 1, 2), lo, hi)


def encode(context: Sequence[Quote], params: ModelParams, cfg: ModelConfig,
           trace: Optional[AttentionTrace] = None) -> np.ndarray:
    """Contextualized representation H of the context set, (N, d_r)"""
    return encode_tensor(context, bind(params), cfg, trace).data


def decode(h: np.ndarray, targets: Sequence[Coordinate], params: ModelParams, cfg: ModelConfig,
           trace: Optional[AttentionTrace] = None) -> List[PredictiveDistribution]:
    """Per-target Gaussian predictions given an encoded context"""
    mu, log_var = decode_tensor(Tensor(h), targets, bind(params), cfg, trace)
    return [PredictiveDistribution(float(m), float(v)) for m, v in zip(mu.data[:, 0], log_var.data[:, 0])]


# ==================== Objective ====================

def nll_tensor(mu: Tensor, log_var: Tensor, y: np.ndarray) -> Tensor:
    """0.5 * sum(exp(-log_var) * (y - mu)^2 + log_var)"""
    diff = T.sub(Tensor(np.asarray(y, dtype=float).reshape(-1, 1)), mu)
    terms = T.add(T.mul(T.exp(T.scale(log_var, -1.0)), T.mul(diff, diff)), log_var)
    return T.scale(T.sum(terms), 0.5)


def nll_loss(preds: Sequence[PredictiveDistribution], targets: Sequence[Quote]) -> float:
    """Negative log-likelihood of the targets, without the constant term"""
    if len(preds) != len(targets):
        raise LengthMismatch(f"{len(preds)} predictions for {len(targets)} targets")
    if len(preds) == 0:
        raise LengthMismatch("nll_loss needs at least one target")
    total = 0.0
    for pred, quote in zip(preds, targets):
        total += math.exp(-pred.log_var) * (quote.vol - pred.mu) ** 2 + pred.log_var
    return 0.5 * total


def task_loss_and_grads(task: Task, params: ModelParams, cfg: ModelConfig) -> Tuple[float, Dict[str, np.ndarray]]:
    """
    Forward and backward pass for one task on its own tape

    Returns:
        (summed task NLL, gradient per parameter name)
    """
    tape = Tape()
    w = bind(params, tape)
    h = encode_tensor(task.context, w, cfg)
    mu, log_var = decode_tensor(h, [q.coord for q in task.targets], w, cfg)
    loss = nll_tensor(mu, log_var, np.array([q.vol for q in task.targets]))
    tape.backward(loss)
    grads = {name: (t.grad if t.grad is not None else np.zeros_like(t.data)) for name, t in w.items()}
    return loss.item(), grads


def task_loss(task: Task, params: ModelParams, cfg: ModelConfig) -> float:
    """Summed task NLL without building a tape"""
    w = bind(params)
    h = encode_tensor(task.context, w, cfg)
    mu, log_var = decode_tensor(h, [q.coord for q in task.targets], w, cfg)
    return nll_tensor(mu, log_var, np.array([q.vol for q in task.targets])).item()


# ==================== Model wrapper and checkpoints ====================

class VolatilityNeuralProcess:
    """Trained parameters plus architecture, with surface reconstruction helpers"""

    def __init__(self, params: ModelParams, cfg: ModelConfig):
        expected = parameter_shapes(cfg)
        if list(expected) != params.names or any(params[n].shape != s for n, s in expected.items()):
            raise ShapeMismatch("parameters do not match the model config")
        self.params = params
        self.cfg = cfg

    @classmethod
    def initialize(cls, cfg: ModelConfig, rng_seed: int = 0) -> "VolatilityNeuralProcess":
        return cls(init_params(cfg, rng_seed), cfg)

    def encode(self, context: Sequence[Quote]) -> np.ndarray:
        return encode(context, self.params, self.cfg)

    def predict(self, context: Sequence[Quote], targets: Sequence[Coordinate]) -> List[PredictiveDistribution]:
        return decode(self.encode(context), targets, self.params, self.cfg)

    def save(self, path: Path) -> Path:
        return save_checkpoint(path, self.params, self.cfg)

    @classmethod
    def load(cls, path: Path) -> "VolatilityNeuralProcess":
        params, cfg = load_checkpoint(path)
        return cls(params, cfg)


def save_checkpoint(path: Path, params: ModelParams, cfg: ModelConfig) -> Path:
    """Write config and named parameter arrays to an .npz container"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {name: array for name, array in params.items()}
    payload["__config__"] = np.array(cfg.model_dump_json())
    payload["__format__"] = np.array(CHECKPOINT_FORMAT)
    try:
        with open(path, "wb") as f:
            np.savez(f, **payload)
    except OSError as e:
        raise IoError(f"Failed to write checkpoint {path}: {e}") from e
    logger.info(f"💾 Saved checkpoint {path} ({params.count()} parameters)")
    return path


def load_checkpoint(path: Path) -> Tuple[ModelParams, ModelConfig]:
    """Read a checkpoint written by save_checkpoint; values are restored bitwise"""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as archive:
            fmt = str(archive["__format__"])
            if fmt != CHECKPOINT_FORMAT:
                raise ConfigError(f"Unsupported checkpoint format '{fmt}' in {path}")
            cfg = ModelConfig.model_validate(json.loads(str(archive["__config__"])))
            stored = {name: archive[name] for name in archive.files if not name.startswith("__")}
    except (OSError, ValueError, KeyError) as e:
        raise IoError(f"Failed to read checkpoint {path}: {e}") from e
    order = list(parameter_shapes(cfg))
    missing = [name for name in order if name not in stored]
    if missing:
        raise ConfigError(f"Checkpoint {path} is missing parameters: {missing[:3]}")
    return ModelParams({name: stored[name] for name in order}), cfg
