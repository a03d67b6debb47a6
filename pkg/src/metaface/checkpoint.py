"""Checkpoint files: full model snapshots and adapter-only personal deltas."""

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .model import LoraAdapter, ModelConfig, ParameterSet
from .serialization import FormatError, decode_checkpoint, encode_checkpoint

__all__ = ["CHECKPOINT_VERSION", "CheckpointError", "Checkpoint", "save_checkpoint", "load_checkpoint"]

CHECKPOINT_VERSION = "metaface-ckpt/1"


class CheckpointError(ValueError):
    pass


@dataclass(eq=False)
class Checkpoint:
    kind: str  # "full" or "delta"
    model_config: ModelConfig
    params: ParameterSet
    adapters: dict
    step: int = 0
    rng_state: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)  # additional named arrays, e.g. the support latent

    @property
    def config_hash(self):
        return self.model_config.digest()

    def tensors(self):
        out = {k: v.data for k, v in self.params.items()}
        for base, a in self.adapters.items():
            out[f"lora.{base}.B"] = a.B.data
            out[f"lora.{base}.A"] = a.A.data
        for k, v in self.extra.items():
            out[f"extra.{k}"] = np.asarray(v, dtype=np.float64)
        return out

    def header(self):
        return {
            "version": CHECKPOINT_VERSION,
            "kind": self.kind,
            "config_hash": self.config_hash,
            "model_config": dataclasses.asdict(self.model_config),
            "step": int(self.step),
            "rng_state": self.rng_state,
            "info": self.info,
        }

    def to_bytes(self):
        return encode_checkpoint(self.header(), self.tensors())


def save_checkpoint(ckpt, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(ckpt.to_bytes())
    return path


def checkpoint_from_bytes(blob, expected_config_hash=None):
    try:
        header, tensors = decode_checkpoint(blob)
    except FormatError as exc:
        raise CheckpointError(str(exc)) from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')!r}")
    config = ModelConfig(**header["model_config"])
    if config.digest() != header["config_hash"]:
        raise CheckpointError("checkpoint header is inconsistent: model config does not match its hash")
    if expected_config_hash is not None and header["config_hash"] != expected_config_hash:
        raise CheckpointError(
            f"config hash mismatch: checkpoint has {header['config_hash']}, expected {expected_config_hash}"
        )
    params, factors, extra = {}, {}, {}
    for name, arr in tensors.items():
        if name.startswith("lora."):
            base, factor = name[len("lora."):].rsplit(".", 1)
            factors.setdefault(base, {})[factor] = ad.tensor(arr)
        elif name.startswith("extra."):
            extra[name[len("extra."):]] = arr
        else:
            params[name] = ad.tensor(arr)
    adapters = {b: LoraAdapter(b, f["B"], f["A"]) for b, f in factors.items()}
    return Checkpoint(
        kind=header["kind"],
        model_config=config,
        params=ParameterSet(params, header["config_hash"]),
        adapters=adapters,
        step=header["step"],
        rng_state=header["rng_state"],
        info=header["info"],
        extra=extra,
    )


def load_checkpoint(path, expected_config_hash=None):
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"no checkpoint at {path}")
    return checkpoint_from_bytes(path.read_bytes(), expected_config_hash)
