"""Run configuration: one flat ``key=value`` namespace over every sub-config."""

import dataclasses
from dataclasses import dataclass, fields

from .meta import MetaConfig
from .model import ConfigError, ModelConfig
from .objectives import LossWeights

__all__ = ["RunConfig", "parse_config_text", "load_config_file"]


def _parse_bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class RunConfig:
    # paths and seeds
    corpus: str = "corpus"
    out: str = "runs/default"
    seed: int = 0
    # model
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
    # meta-learning
    inner_lr: float = 5e-5
    outer_lr: float = 1e-4
    inner_steps: int = 3
    n_way: int = 11
    k_shot: int = 1
    query_size: int = 1
    order: str = "second"
    adapt_scope: str = "lora-only"
    lam: float = 0.5
    proximal_weight: float = 0.0
    # loss weights
    w_recon: float = 1000.0
    w_vel: float = 1000.0
    w_lnp: float = 10.0
    # protocol
    outer_steps: int = 200
    meta_init: bool = True
    drmn: bool = True
    held_out: str = "spk11"
    adapt_clips: int = 4
    adapt_steps: int = 100
    finetune_scope: str = "lora-only"
    seeds: str = "0,1,2,3,4"
    sweep: str = "1,2,3,4"

    def __post_init__(self):
        if self.finetune_scope not in ("all", "lora-only"):
            raise ConfigError(f"finetune_scope must be 'all' or 'lora-only', got {self.finetune_scope!r}")
        if self.outer_steps < 0 or self.adapt_steps < 0:
            raise ConfigError("step counts must be non-negative")
        # validates the sub-configs eagerly
        self.model_config()
        self.meta_config()
        self.loss_weights()

    def model_config(self):
        return ModelConfig(**{f.name: getattr(self, f.name) for f in fields(ModelConfig)})

    def meta_config(self):
        return MetaConfig(**{f.name: getattr(self, f.name) for f in fields(MetaConfig)})

    def loss_weights(self):
        return LossWeights(self.w_recon, self.w_vel, self.w_lnp)

    @property
    def held_out_speakers(self):
        return [s.strip() for s in self.held_out.split(",") if s.strip()]

    @property
    def seed_list(self):
        return [int(s) for s in self.seeds.split(",") if s.strip()]

    @property
    def sweep_list(self):
        return [int(s) for s in self.sweep.split(",") if s.strip()]

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    def with_overrides(self, overrides):
        """Apply a ``{key: text}`` map; unknown keys are rejected."""
        known = {f.name: f for f in fields(self)}
        unknown = sorted(set(overrides) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values = {}
        for key, raw in overrides.items():
            ftype = known[key].type
            try:
                if ftype in (bool, "bool"):
                    values[key] = raw if isinstance(raw, bool) else _parse_bool(raw)
                elif ftype in (int, "int"):
                    values[key] = int(raw)
                elif ftype in (float, "float"):
                    values[key] = float(raw)
                else:
                    values[key] = str(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}") from exc
        return dataclasses.replace(self, **values)


def parse_config_text(text):
    """Parse ``key=value`` lines (``#`` comments allowed) into a dict of strings."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        out[key.strip()] = value.strip()
    return out


def load_config_file(path):
    with open(path) as fh:
        return RunConfig().with_overrides(parse_config_text(fh.read()))
