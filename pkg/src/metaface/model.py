"""Sequence-to-vertex regression network with low-rank adapters.

Decoder, per frame t::

    e_t   = a_t W_in + b_in
    s_t   = sum_{k<t} (1-d) d^(t-1-k) e_k          causal running summary
    e_t   = tanh([e_t, s_t, z] W_l + b_l)           for each block l
    out_t = e_t W_out + b_out                       reshaped to [L, 3]

Every decoder weight matrix can carry a :class:`LoraAdapter`; the effective
weight is ``X + B @ A`` with no scaling factor.

The style encoder used by :mod:`metaface.relation` lives in the same
:class:`ParameterSet` under the ``enc.`` prefix, so a checkpoint holds the
whole model.

Parameter count for a config (``h`` hidden, ``d`` feature dim, ``z`` latent
dim, ``V`` = 3 * vertex_count, ``n`` blocks, ``g`` encoder hidden)::

    decoder  = (d*h + h) + n*((2h + z)*h + h) + (h*V + V)
    encoder  = (d + V)*g + g + g*2z + 2z
    adapters = u * [(d + h) + n*(2h + z + h) + (h + V)]
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "ConfigError",
    "ModelConfig",
    "ParameterSet",
    "LoraAdapter",
    "FeatureClip",
    "MotionClip",
    "TrainableReport",
    "init_params",
    "init_adapters",
    "decoder_matrices",
    "lora_merge",
    "predict",
    "forward",
    "trainable_report",
    "parameter_count",
]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 16
    hidden_dim: int = 32
    num_layers: int = 2
    vertex_count: int = 64
    lip_start: int = 0
    lip_stop: int = 16
    latent_dim: int = 8
    lora_rank: int = 4
    encoder_hidden: int = 32
    ema_decay: float = 0.8

    def __post_init__(self):
        for name in ("feature_dim", "hidden_dim", "num_layers", "vertex_count", "latent_dim", "encoder_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not 1 <= self.lora_rank < min(self.hidden_dim, 3 * self.vertex_count):
            raise ConfigError(
                f"lora_rank={self.lora_rank} must satisfy 1 <= u < min(hidden_dim, 3*vertex_count)"
            )
        if not 0 <= self.lip_start < self.lip_stop <= self.vertex_count:
            raise ConfigError(f"lip range [{self.lip_start}, {self.lip_stop}) not inside [0, {self.vertex_count})")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError("ema_decay must lie in [0, 1)")

    @property
    def out_dim(self):
        return 3 * self.vertex_count

    @property
    def lip_range(self):
        return (self.lip_start, self.lip_stop)

    def digest(self):
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class FeatureClip:
    frames: np.ndarray  # [T, feature_dim]

    def __post_init__(self):
        arr = np.array(self.frames, dtype=np.float64)
        if arr.ndim != 2:
            raise ConfigError(f"feature clip must be [T, d], got {list(arr.shape)}")
        arr.flags.writeable = False
        object.__setattr__(self, "frames", arr)

    @property
    def length(self):
        return self.frames.shape[0]


@dataclass(frozen=True, eq=False)
class MotionClip:
    frames: np.ndarray  # [T, L, 3] offsets from the template
    frame_rate: float = 30.0

    def __post_init__(self):
        arr = np.array(self.frames, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ConfigError(f"motion clip must be [T, L, 3], got {list(arr.shape)}")
        if not np.isfinite(arr).all():
            raise ConfigError("motion clip contains non-finite values")
        arr.flags.writeable = False
        object.__setattr__(self, "frames", arr)

    @property
    def length(self):
        return self.frames.shape[0]

    def flat(self):
        return self.frames.reshape(self.frames.shape[0], -1)


class ParameterSet:
    """Ordered, immutable name -> Tensor map tied to a config digest."""

    def __init__(self, tensors, config_hash=""):
        self._tensors = dict(tensors)
        self.config_hash = config_hash

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def keys(self):
        return self._tensors.keys()

    def values(self):
        return self._tensors.values()

    def items(self):
        return self._tensors.items()

    def replace(self, updates):
        """New set with some tensors swapped; order is preserved."""
        unknown = set(updates) - set(self._tensors)
        if unknown:
            raise KeyError(f"unknown parameter names: {sorted(unknown)}")
        merged = dict(self._tensors)
        merged.update(updates)
        return ParameterSet(merged, self.config_hash)

    def subset(self, prefix):
        return ParameterSet({k: v for k, v in self._tensors.items() if k.startswith(prefix)}, self.config_hash)

    def numel(self):
        return int(np.sum([t.size for t in self._tensors.values()], dtype=np.int64))

    def as_variables(self):
        """Fresh leaf copies that require grad."""
        return ParameterSet({k: ad.tensor(v.data, requires_grad=True) for k, v in self._tensors.items()},
                            self.config_hash)

    def detached(self):
        return ParameterSet({k: ad.detach(v) for k, v in self._tensors.items()}, self.config_hash)

    def arrays(self):
        return {k: v.data for k, v in self._tensors.items()}


@dataclass(frozen=True, eq=False)
class LoraAdapter:
    base_name: str
    B: Tensor  # [w, u]
    A: Tensor  # [u, o]

    def __post_init__(self):
        if self.B.ndim != 2 or self.A.ndim != 2 or self.B.shape[1] != self.A.shape[0]:
            raise ad.ShapeError(
                f"adapter {self.base_name}: B {list(self.B.shape)} and A {list(self.A.shape)} do not chain"
            )

    @property
    def rank(self):
        return self.B.shape[1]

    @property
    def shape(self):
        return (self.B.shape[0], self.A.shape[1])

    def numel(self):
        return self.B.size + self.A.size

    def delta(self):
        return ad.matmul(self.B, self.A)

    def with_factors(self, B, A):
        return LoraAdapter(self.base_name, B, A)


def decoder_matrices(config):
    """Names and shapes of the decoder weight matrices, in forward order."""
    h = config.hidden_dim
    mats = [("dec.in.W", (config.feature_dim, h))]
    for i in range(config.num_layers):
        mats.append((f"dec.block{i}.W", (2 * h + config.latent_dim, h)))
    mats.append(("dec.out.W", (h, config.out_dim)))
    return mats


def _layout(config):
    h, g, z = config.hidden_dim, config.encoder_hidden, config.latent_dim
    out = []
    for name, shape in decoder_matrices(config):
        out.append((name, shape))
        out.append((name[:-1] + "b", (shape[1],)))
    out += [
        ("enc.W1", (config.feature_dim + config.out_dim, g)),
        ("enc.b1", (g,)),
        ("enc.W2", (g, 2 * z)),
        ("enc.b2", (2 * z,)),
    ]
    return out


def parameter_count(config):
    return int(sum(int(np.prod(s)) for _, s in _layout(config)))


ENC_LOG_VAR_INIT = -4.0


def init_params(config, seed):
    """Fan-in scaled uniform weights and zero biases, except the encoder's
    log-variance bias, which starts at ``ENC_LOG_VAR_INIT`` so the initial
    posterior is narrow and z is informative from the first step."""
    rng = np.random.default_rng([seed, 0x5EED])
    tensors = {}
    for name, shape in _layout(config):
        if len(shape) == 2:
            bound = 1.0 / np.sqrt(shape[0])
            tensors[name] = ad.tensor(rng.uniform(-bound, bound, size=shape))
        else:
            tensors[name] = ad.tensor(np.zeros(shape))
    b2 = np.zeros(2 * config.latent_dim)
    b2[config.latent_dim:] = ENC_LOG_VAR_INIT
    tensors["enc.b2"] = ad.tensor(b2)
    return ParameterSet(tensors, config.digest())


def init_adapters(config, seed, b_scale=None):
    """One adapter per decoder matrix: B small uniform, A zero (delta starts at 0)."""
    rng = np.random.default_rng([seed, 0xADA])
    u = config.lora_rank
    adapters = {}
    for name, (w, o) in decoder_matrices(config):
        bound = (1.0 / np.sqrt(w)) if b_scale is None else b_scale
        adapters[name] = LoraAdapter(
            name,
            ad.tensor(rng.uniform(-bound, bound, size=(w, u))),
            ad.tensor(np.zeros((u, o))),
        )
    return adapters


def lora_merge(base, adapter):
    """X + B @ A; ``base`` is left untouched."""
    if tuple(base.shape) != adapter.shape:
        raise ad.ShapeError(
            f"adapter {adapter.base_name} delta {list(adapter.shape)} does not match base {list(base.shape)}"
        )
    return ad.add(base, adapter.delta())


@lru_cache(maxsize=256)
def _summary_matrix(length, decay):
    # strictly lower triangular: row t mixes frames < t
    idx = np.arange(length)
    lag = idx[:, None] - idx[None, :] - 1
    m = np.where(lag >= 0, (1.0 - decay) * decay ** np.maximum(lag, 0), 0.0)
    return ad.constant(m)


def _weight(params, adapters, name):
    w = params[name]
    if adapters and name in adapters:
        return lora_merge(w, adapters[name])
    return w


def _affine(x, params, adapters, prefix):
    y = ad.matmul(x, _weight(params, adapters, prefix + "W"))
    return ad.add(y, ad.broadcast(params[prefix + "b"], y.shape))


def predict(params, adapters, features, z, config):
    """Differentiable forward pass; returns a [T, 3L] tensor.

    ``features`` is an array [T, d] (or Tensor), ``z`` a [latent_dim] tensor.
    """
    x = features if isinstance(features, Tensor) else ad.constant(features)
    if x.ndim != 2 or x.shape[1] != config.feature_dim:
        raise ad.ShapeError(f"features {list(x.shape)} do not match feature_dim={config.feature_dim}")
    z = z if isinstance(z, Tensor) else ad.constant(z)
    if z.shape != (config.latent_dim,):
        raise ad.ShapeError(f"z has shape {list(z.shape)}, expected [{config.latent_dim}]")
    length = x.shape[0]
    mixer = _summary_matrix(length, config.ema_decay)
    zb = ad.broadcast(z, (length, config.latent_dim))
    e = _affine(x, params, adapters, "dec.in.")
    for i in range(config.num_layers):
        s = ad.matmul(mixer, e)
        e = ad.tanh(_affine(ad.concat([e, s, zb]), params, adapters, f"dec.block{i}."))
    return _affine(e, params, adapters, "dec.out.")


def forward(params, adapters, features, z, config, frame_rate=30.0):
    """Predict a :class:`MotionClip` for one :class:`FeatureClip`."""
    frames = features.frames if isinstance(features, FeatureClip) else features
    out = predict(params, adapters, frames, z, config)
    return MotionClip(out.data.reshape(out.shape[0], config.vertex_count, 3), frame_rate)


@dataclass(frozen=True)
class TrainableReport:
    full_count: int
    lora_count: int
    ratio: float
    trainable: int


def trainable_report(params, adapters, mode="lora-only"):
    """Compare the full parameter count with the adapter count.

    ``ratio`` is lora_count / full_count; ``trainable`` is what ``mode``
    would actually update.
    """
    if mode not in ("full", "lora-only"):
        raise ConfigError(f"mode must be 'full' or 'lora-only', got {mode!r}")
    full = params.numel()
    lora = int(sum(a.rank * (a.shape[0] + a.shape[1]) for a in adapters.values()))
    return TrainableReport(full, lora, lora / full, full if mode == "full" else lora)
