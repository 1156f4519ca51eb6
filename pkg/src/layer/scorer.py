"""The classifier contract used by the explainability code, and its two implementations."""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Protocol, Sequence, Tuple, Union, runtime_checkable

import numpy as np
from pydantic import BaseModel, Field
from scipy.special import expit

from .air import AirWeightGenerator
from .errors import CapabilityError, ConfigError, FormatError, ShapeError, TrainingError
from .resample import axis_matrices, separable_apply, separable_transpose
from .volume import TISSUE_LAYERS, LayerMaskSet, Modality, Sample, as_channels, layer_means

Params = Dict[str, np.ndarray]

_STD_FLOOR = 1e-12


@runtime_checkable
class Scorer(Protocol):
    """Maps a volume or multimodal tuple of volumes to a real logit."""

    has_input_gradient: bool

    def score(self, sample: Sample) -> float:
        ...

    def input_gradient(self, sample: Sample) -> Tuple[np.ndarray, ...]:
        ...


def score(scorer: Scorer, sample: Sample) -> float:
    """Raw logit of the sample."""
    return scorer.score(sample)


def probability(scorer: Scorer, sample: Sample) -> float:
    """sigmoid(logit), in (0, 1)."""
    return float(expit(scorer.score(sample)))


def input_gradient(scorer: Scorer, sample: Sample) -> Tuple[np.ndarray, ...]:
    """
    Gradient of the logit w.r.t. every input voxel, one (nz, ny, nx) array per channel.

    :raises CapabilityError: If the scorer cannot differentiate its input.
    """
    if not getattr(scorer, "has_input_gradient", False):
        raise CapabilityError(f"{type(scorer).__name__} does not provide input gradients.")
    return scorer.input_gradient(sample)


class AnalyticScorer:
    """
    Closed-form scorer: logit = b + sum_i w_i * mean(V over layer i).

    Multimodal samples use the channel average of each layer mean; an empty layer
    contributes 0.

    :param weights: Six per-layer weights, dermis first.
    :param bias: The intercept b.
    :param masks: The layer masks the means are taken over.
    """

    has_input_gradient = True

    def __init__(self, weights: Sequence[float], bias: float, masks: LayerMaskSet) -> None:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (len(TISSUE_LAYERS),):
            raise ShapeError(f"Expected {len(TISSUE_LAYERS)} layer weights, got shape {weights.shape}.")
        self.weights = weights
        self.bias = float(bias)
        self.masks = masks

    def score(self, sample: Sample) -> float:
        return float(self.bias + self.weights @ layer_means(sample, self.masks))

    def input_gradient(self, sample: Sample) -> Tuple[np.ndarray, ...]:
        channels = as_channels(sample)
        if channels[0].dims != self.masks.dims:
            raise ShapeError(f"Volume dims {channels[0].dims} do not match mask dims {self.masks.dims}.")
        counts = self.masks.counts()
        per_code = np.zeros(len(TISSUE_LAYERS) + 1)
        for code in TISSUE_LAYERS:
            if counts[code]:
                per_code[code] = self.weights[code - 1] / (counts[code] * len(channels))
        gradient = per_code[self.masks.labels]
        return tuple(gradient.copy() for _ in channels)


class ScorerConfig(BaseModel):
    """Architecture of the trainable scorer."""

    dims: Tuple[int, int, int]
    modalities: Tuple[str, ...] = ("bmode",)
    pool: Tuple[int, int, int] = (8, 8, 8)
    hidden: int = Field(default=64, ge=1)
    standardize: bool = True
    air: bool = False
    air_grid: Tuple[int, int, int] = (4, 4, 4)
    seed: int = 0

    @property
    def shape(self) -> Tuple[int, int, int]:
        nx, ny, nz = self.dims
        return (nz, ny, nx)

    @property
    def pooled_shape(self) -> Tuple[int, int, int]:
        px, py, pz = self.pool
        return (pz, py, px)

    @property
    def features(self) -> int:
        return len(self.modalities) * int(np.prod(self.pool))


@dataclass
class ForwardCache:
    """Intermediate values of one forward pass, consumed by backward()."""

    x: np.ndarray
    weighted: np.ndarray
    air_weights: Optional[np.ndarray]
    centered: np.ndarray
    scale: np.ndarray
    constant: np.ndarray
    standardized: np.ndarray
    features: np.ndarray
    pre_activation: np.ndarray
    hidden: np.ndarray
    logit: float = field(default=0.0)


class TrainableScorer:
    """
    Per-modality average pooling to a fixed grid, a rectified dense layer and a scalar
    output, optionally preceded by an AIR weight generator. Gradients are derived by hand.

    :param config: The architecture.
    :param params: Classifier parameters W1, b1, w2, b2; initialized from config.seed if omitted.
    :param air: The weight generator, required when config.air is set.
    """

    has_input_gradient = True

    def __init__(self, config: ScorerConfig, params: Optional[Params] = None,
                 air: Optional[AirWeightGenerator] = None, metadata: Optional[Dict[str, Any]] = None) -> None:
        self.config = config
        if any(d < p for d, p in zip(config.dims, config.pool)):
            raise ConfigError(f"Pooling grid {config.pool} is larger than the volume {config.dims}.")
        self._pool = axis_matrices("pool", config.pooled_shape, config.shape)
        self.params = {name: np.asarray(value, dtype=np.float64) for name, value in
                       (params or init_params(config, np.random.default_rng(config.seed))).items()}
        expected = param_shapes(config)
        for name, shape in expected.items():
            if self.params.get(name) is None or self.params[name].shape != shape:
                raise ShapeError(f"Parameter {name} must have shape {shape}.")
        if config.air and air is None:
            air = AirWeightGenerator(config.shape, len(config.modalities), config.air_grid)
        self.air = air if config.air else None
        self.metadata = dict(metadata or {})

    # parameters

    def all_params(self) -> Params:
        params = dict(self.params)
        if self.air is not None:
            params.update(self.air.params)
        return params

    def with_params(self, params: Params) -> "TrainableScorer":
        classifier = {name: params[name] for name in self.params}
        air = self.air.with_params(params) if self.air is not None else None
        return TrainableScorer(self.config, classifier, air, self.metadata)

    # forward / backward

    def stack(self, sample: Sample) -> np.ndarray:
        """Validate a sample and return its channels as a float64 (C, nz, ny, nx) array."""
        channels = as_channels(sample)
        if channels[0].dims != tuple(self.config.dims):
            raise ShapeError(f"Scorer expects dims {tuple(self.config.dims)}, got {channels[0].dims}.")
        if len(channels) != len(self.config.modalities):
            raise ShapeError(f"Scorer expects {len(self.config.modalities)} modalities, got {len(channels)}.")
        expected = [Modality.from_slug(slug) for slug in self.config.modalities]
        if [c.modality for c in channels] != expected:
            raise ShapeError(f"Scorer expects modalities {self.config.modalities}.")
        return np.stack([c.voxels.astype(np.float64) for c in channels])

    def forward(self, x: np.ndarray) -> ForwardCache:
        if self.air is not None:
            weighted, air_weights = self.air.forward(x)
        else:
            weighted, air_weights = x, None
        axes = (1, 2, 3)
        if self.config.standardize:
            centered = weighted - weighted.mean(axis=axes, keepdims=True)
            std = np.sqrt((centered**2).mean(axis=axes, keepdims=True))
            constant = std <= _STD_FLOOR
            scale = np.where(constant, 1.0, std)
        else:
            centered = weighted
            scale = np.ones((weighted.shape[0], 1, 1, 1))
            constant = np.zeros_like(scale, dtype=bool)
        standardized = centered / scale
        features = separable_apply(standardized, *self._pool).ravel()
        pre_activation = self.params["W1"] @ features + self.params["b1"]
        hidden = np.maximum(pre_activation, 0.0)
        logit = float(self.params["w2"] @ hidden + self.params["b2"][0])
        return ForwardCache(x, weighted, air_weights, centered, scale, constant, standardized, features, pre_activation,
                            hidden, logit)

    def backward(self, cache: ForwardCache, grad_logit: float,
                 need_input: bool = True) -> Tuple[Params, Optional[np.ndarray]]:
        """
        Back-propagate d(loss)/d(logit).

        :return: Gradients for all_params() and, if requested, for the input stack.
        """
        grads: Params = {
            "w2": grad_logit * cache.hidden,
            "b2": np.array([grad_logit]),
        }
        grad_pre = grad_logit * self.params["w2"] * (cache.pre_activation > 0)
        grads["W1"] = np.outer(grad_pre, cache.features)
        grads["b1"] = grad_pre
        if self.air is None and not need_input:
            return grads, None

        grad_features = (self.params["W1"].T @ grad_pre).reshape((cache.x.shape[0],) + self.config.pooled_shape)
        grad_std = separable_transpose(grad_features, *self._pool)
        grad_weighted = self._standardize_backward(cache, grad_std)
        if self.air is not None:
            grad_x, air_grads = self.air.backward(cache.x, cache.air_weights, grad_weighted)
            grads.update(air_grads)
        else:
            grad_x = grad_weighted
        return grads, grad_x if need_input else None

    def _standardize_backward(self, cache: ForwardCache, grad: np.ndarray) -> np.ndarray:
        if not self.config.standardize:
            return grad
        axes = (1, 2, 3)
        n = int(np.prod(cache.centered.shape[1:]))
        grad_centered = grad / cache.scale
        out = grad_centered - grad_centered.mean(axis=axes, keepdims=True)
        correction = cache.centered * (grad * cache.centered).sum(axis=axes, keepdims=True) / (n * cache.scale**3)
        return np.where(cache.constant, out, out - correction)

    # scorer contract

    def score(self, sample: Sample) -> float:
        return self.forward(self.stack(sample)).logit

    def input_gradient(self, sample: Sample) -> Tuple[np.ndarray, ...]:
        cache = self.forward(self.stack(sample))
        _, grad_x = self.backward(cache, 1.0, need_input=True)
        return tuple(grad_x)

    def loss_and_gradients(self, x: np.ndarray, target: int) -> Tuple[float, float, Params]:
        """
        Binary cross-entropy on the logit and its gradient for every parameter.

        :return: (loss, logit, gradients)
        """
        cache = self.forward(x)
        loss = bce_with_logit(cache.logit, target)
        grads, _ = self.backward(cache, float(expit(cache.logit)) - target, need_input=False)
        return loss, cache.logit, grads


def bce_with_logit(logit: float, target: int) -> float:
    """Binary cross-entropy computed in log-sum-exp form: log(1 + e^z) - y z."""
    return float(np.logaddexp(0.0, logit) - target * logit)


def param_shapes(config: ScorerConfig) -> Dict[str, Tuple[int, ...]]:
    return {"W1": (config.hidden, config.features), "b1": (config.hidden,), "w2": (config.hidden,), "b2": (1,)}


def init_params(config: ScorerConfig, rng: np.random.Generator) -> Params:
    """Dense weights uniform in +-sqrt(6 / (fan_in + fan_out)), biases 0."""
    fan_in, hidden = config.features, config.hidden
    limit1 = np.sqrt(6.0 / (fan_in + hidden))
    limit2 = np.sqrt(6.0 / (hidden + 1))
    return {
        "W1": rng.uniform(-limit1, limit1, size=(hidden, fan_in)),
        "b1": np.zeros(hidden),
        "w2": rng.uniform(-limit2, limit2, size=hidden),
        "b2": np.zeros(1),
    }


def randomize(scorer: TrainableScorer, seed: int) -> TrainableScorer:
    """
    Copy of a trainable scorer with freshly initialized classifier and AIR parameters.

    :raises CapabilityError: If the scorer has no trainable parameters.
    """
    if not isinstance(scorer, TrainableScorer):
        raise CapabilityError(f"{type(scorer).__name__} has no trainable parameters to randomize.")
    rng = np.random.default_rng(seed)
    params = init_params(scorer.config, rng)
    air = scorer.air.initialized(rng) if scorer.air is not None else None
    metadata = dict(scorer.metadata, randomized_seed=seed)
    return TrainableScorer(scorer.config, params, air, metadata)


# optimizer


@dataclass
class OptimizerState:
    """Adam moments, step count and hyper-parameters."""

    m: Params
    v: Params
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Params, lr: float = 1e-4, **kwargs) -> "OptimizerState":
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()}, lr=lr, **kwargs)


def adam_step(params: Params, grads: Params, state: OptimizerState) -> Tuple[Params, OptimizerState]:
    """
    One Adam update with bias correction.

    :raises ShapeError: If a gradient or moment does not match its parameter.
    :raises TrainingError: If any gradient is not finite.
    """
    step = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, value in params.items():
        grad = np.asarray(grads[name], dtype=np.float64)
        if grad.shape != value.shape or state.m[name].shape != value.shape:
            raise ShapeError(f"Gradient for {name} has shape {grad.shape}, expected {value.shape}.")
        if not np.all(np.isfinite(grad)):
            raise TrainingError(f"Non-finite gradient for parameter {name} at step {step}.")
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * grad
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * grad**2
        m_hat = m / (1.0 - state.beta1**step)
        v_hat = v / (1.0 - state.beta2**step)
        new_params[name] = value - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name], new_v[name] = m, v
    return new_params, OptimizerState(new_m, new_v, step, state.lr, state.beta1, state.beta2, state.eps)


# checkpoints

CHECKPOINT_MAGIC = b"LCKP"
_LENGTH = struct.Struct("<I")


def save_checkpoint(path: Union[str, Path], scorer: TrainableScorer) -> None:
    """
    Write magic, u32 header length, JSON header and the little-endian float32 parameter blob.

    The header lists the parameters in blob order.
    """
    params = scorer.all_params()
    header = {
        "architecture": "pooled-mlp",
        "config": scorer.config.model_dump(mode="json"),
        "parameters": [{"name": name, "shape": list(value.shape)} for name, value in params.items()],
        "metadata": scorer.metadata,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fp:
        fp.write(CHECKPOINT_MAGIC)
        fp.write(_LENGTH.pack(len(header_bytes)))
        fp.write(header_bytes)
        for value in params.values():
            fp.write(np.ascontiguousarray(value, dtype="<f4").tobytes())


def load_checkpoint(path: Union[str, Path]) -> TrainableScorer:
    """
    Read a checkpoint written by save_checkpoint.

    :raises FormatError: On bad magic, a malformed header or a truncated blob.
    """
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"Bad checkpoint magic {data[:4]!r}", offset=0)
    if len(data) < 8:
        raise FormatError("Checkpoint is truncated inside the header length", offset=len(data))
    (length,) = _LENGTH.unpack_from(data, 4)
    if len(data) < 8 + length:
        raise FormatError("Checkpoint is truncated inside the JSON header", offset=len(data))
    try:
        header = json.loads(data[8:8 + length].decode("utf-8"))
        config = ScorerConfig.model_validate(header["config"])
        layout = [(entry["name"], tuple(entry["shape"])) for entry in header["parameters"]]
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"Malformed checkpoint header: {e}", offset=8) from None
    offset = 8 + length
    params: Params = {}
    for name, shape in layout:
        size = int(np.prod(shape)) * 4
        if len(data) < offset + size:
            raise FormatError(f"Checkpoint is truncated inside parameter {name}", offset=len(data))
        values = np.frombuffer(data, dtype="<f4", count=size // 4, offset=offset)
        params[name] = values.astype(np.float64).reshape(shape)
        offset += size
    if offset != len(data):
        raise FormatError("Trailing data after the parameter blob", offset=offset)
    air = None
    if config.air:
        air = AirWeightGenerator(config.shape, len(config.modalities), config.air_grid, params.pop("air_theta"))
    return TrainableScorer(config, params, air, header.get("metadata"))
