"""Synthetic speaker corpus with a known generator per speaker.

Each speaker maps features to vertex offsets with
``v_t = amplitude * tanh(a_{t-lag} @ M)``, where ``M`` is a mixing matrix
shared by all speakers plus a per-speaker low-rank perturbation. Features
are white noise passed through a first-order low-pass filter whose
coefficient is the speaker's ``smoothing``, rescaled to unit variance.
Observations add isotropic Gaussian noise.

Every random draw comes from a generator seeded by (corpus seed, stream,
speaker index[, clip index]), so speakers and clips can be regenerated
independently and the whole corpus is reproducible from its manifest.
"""

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .model import FeatureClip, MotionClip
from .serialization import decode_clip, encode_clip

__all__ = [
    "CorpusError",
    "StyleSpec",
    "CorpusManifest",
    "Corpus",
    "Split",
    "default_manifest",
    "speaker_styles",
    "oracle_motion",
    "synthesize_clip",
    "build_corpus",
    "generate_corpus",
    "load_corpus",
    "corpus_digest",
    "split",
    "expected_noise_norm",
]

_STREAM_BASE, _STREAM_SPEAKER, _STREAM_CLIP = 0, 1, 2


class CorpusError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class StyleSpec:
    speaker_id: str
    mixing_matrix: np.ndarray  # [d_a, 3L]
    amplitude: float
    phase_lag: int
    smoothing: float


@dataclass(frozen=True)
class CorpusManifest:
    seed: int = 7
    speakers: tuple = ()  # ((speaker_id, clip_count), ...)
    frame_rate: float = 30.0
    feature_dim: int = 16
    vertex_count: int = 64
    min_frames: int = 24
    max_frames: int = 48
    noise_std: float = 0.01
    style_rank: int = 4
    style_scale: float = 0.5

    def validate(self):
        if len(self.speakers) < 2:
            raise CorpusError(f"need at least 2 speakers, got {len(self.speakers)}")
        ids = [s for s, _ in self.speakers]
        if len(set(ids)) != len(ids):
            raise CorpusError("speaker ids must be unique")
        for sid, n in self.speakers:
            if n < 2:
                raise CorpusError(f"speaker {sid} needs at least 2 clips, got {n}")
        if self.feature_dim < 1 or self.vertex_count < 1:
            raise CorpusError("feature_dim and vertex_count must be positive")
        if not 2 <= self.min_frames <= self.max_frames:
            raise CorpusError(f"frame range [{self.min_frames}, {self.max_frames}] invalid (need 2 <= min <= max)")
        if not 1 <= self.style_rank <= 4:
            raise CorpusError("style_rank must lie in [1, 4]")
        if self.noise_std < 0:
            raise CorpusError("noise_std must be non-negative")

    def to_json(self):
        d = dataclasses.asdict(self)
        d["speakers"] = [{"id": s, "clips": n} for s, n in self.speakers]
        return json.dumps(d, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        d["speakers"] = tuple((s["id"], int(s["clips"])) for s in d["speakers"])
        return cls(**d)

    def digest(self):
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def default_manifest(speakers=12, clips=10, seed=7, **overrides):
    spk = tuple((f"spk{i:02d}", clips) for i in range(speakers))
    return CorpusManifest(seed=seed, speakers=spk, **overrides)


def _rng(manifest, *stream):
    return np.random.default_rng([manifest.seed, *stream])


def speaker_styles(manifest):
    """Regenerate every speaker's StyleSpec from the manifest."""
    d, out = manifest.feature_dim, 3 * manifest.vertex_count
    base = _rng(manifest, _STREAM_BASE).standard_normal((d, out)) / math.sqrt(d)
    styles = {}
    for idx, (sid, _) in enumerate(manifest.speakers):
        rng = _rng(manifest, _STREAM_SPEAKER, idx)
        r = manifest.style_rank
        u = rng.standard_normal((d, r))
        v = rng.standard_normal((r, out))
        mix = base + (manifest.style_scale / math.sqrt(d * r)) * (u @ v)
        mix.flags.writeable = False
        styles[sid] = StyleSpec(
            speaker_id=sid,
            mixing_matrix=mix,
            amplitude=float(rng.uniform(0.5, 2.0)),
            phase_lag=int(rng.integers(0, 4)),
            smoothing=float(rng.uniform(0.6, 0.9)),
        )
    return styles


def oracle_motion(spec, features, frame_rate=30.0):
    """Noise-free motion of ``spec`` for a feature array or FeatureClip."""
    a = features.frames if isinstance(features, FeatureClip) else np.asarray(features, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != spec.mixing_matrix.shape[0]:
        raise CorpusError(f"features {list(a.shape)} do not match mixing matrix {list(spec.mixing_matrix.shape)}")
    shifted = np.zeros_like(a)
    lag = spec.phase_lag
    if lag < a.shape[0]:
        shifted[lag:] = a[: a.shape[0] - lag]
    v = spec.amplitude * np.tanh(shifted @ spec.mixing_matrix)
    return MotionClip(v.reshape(a.shape[0], -1, 3), frame_rate)


def synthesize_clip(manifest, spec, speaker_index, clip_index):
    rng = _rng(manifest, _STREAM_CLIP, speaker_index, clip_index)
    length = int(rng.integers(manifest.min_frames, manifest.max_frames + 1))
    white = rng.standard_normal((length, manifest.feature_dim))
    s = spec.smoothing
    feats = kernels.lowpass(white, s) * math.sqrt((1.0 + s) / (1.0 - s))
    clean = oracle_motion(spec, feats, manifest.frame_rate).frames
    noisy = clean + manifest.noise_std * rng.standard_normal(clean.shape)
    return FeatureClip(feats), MotionClip(noisy, manifest.frame_rate)


@dataclass
class Corpus:
    manifest: CorpusManifest
    clips: dict = field(default_factory=dict)  # speaker_id -> [(FeatureClip, MotionClip), ...]

    @property
    def speaker_ids(self):
        return [s for s, _ in self.manifest.speakers]

    def styles(self):
        return speaker_styles(self.manifest)


def build_corpus(manifest):
    """Generate the corpus in memory."""
    manifest.validate()
    styles = speaker_styles(manifest)
    clips = {}
    for idx, (sid, count) in enumerate(manifest.speakers):
        clips[sid] = [synthesize_clip(manifest, styles[sid], idx, c) for c in range(count)]
    return Corpus(manifest, clips)


def _clip_name(i):
    return f"clip_{i:03d}.bin"


def generate_corpus(manifest, root):
    """Write ``manifest.json`` and one directory of clip files per speaker."""
    corpus = build_corpus(manifest)
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
        (root / "manifest.json").write_text(manifest.to_json())
        for sid, pairs in corpus.clips.items():
            sdir = root / sid
            sdir.mkdir(exist_ok=True)
            for i, (f, m) in enumerate(pairs):
                (sdir / _clip_name(i)).write_bytes(encode_clip(f.frames, m.frames))
    except OSError as exc:
        raise OSError(f"cannot write corpus under {root}: {exc}") from exc
    return corpus


def load_corpus(root):
    root = Path(root)
    path = root / "manifest.json"
    if not path.is_file():
        raise CorpusError(f"no manifest.json under {root}")
    manifest = CorpusManifest.from_json(path.read_text())
    clips = {}
    for sid, count in manifest.speakers:
        pairs = []
        for i in range(count):
            f, m = decode_clip((root / sid / _clip_name(i)).read_bytes())
            pairs.append((FeatureClip(f), MotionClip(m, manifest.frame_rate)))
        clips[sid] = pairs
    return Corpus(manifest, clips)


def corpus_digest(root):
    """SHA-256 over every file's relative path and bytes, in sorted order."""
    root = Path(root)
    h = hashlib.sha256()
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            p = Path(dirpath) / name
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@dataclass
class Split:
    meta_train: dict  # speaker_id -> pairs
    adapt: dict
    eval: dict

    def verification(self):
        """Lines asserting that held-out data never reaches meta-training."""
        lines = []
        for sid in sorted(self.adapt):
            leak = sid in self.meta_train
            lines.append(f"held_out={sid} in_meta_train={int(leak)} adapt={len(self.adapt[sid])} eval={len(self.eval[sid])}")
            if leak:
                raise CorpusError(f"speaker {sid} leaked into meta-training")
            a_ids = {id(p[1]) for p in self.adapt[sid]}
            if any(id(p[1]) in a_ids for p in self.eval[sid]):
                raise CorpusError(f"speaker {sid}: adapt and eval clips overlap")
        lines.append(f"meta_train_speakers={len(self.meta_train)} overlap=0")
        return lines


def split(corpus, held_out_speakers, adapt_clip_count):
    """Hold speakers out; their first ``adapt_clip_count`` clips adapt, the rest evaluate."""
    held = list(held_out_speakers)
    known = set(corpus.clips)
    missing = [s for s in held if s not in known]
    if missing:
        raise CorpusError(f"unknown held-out speakers: {missing}")
    if adapt_clip_count < 1:
        raise CorpusError("adapt_clip_count must be at least 1")
    adapt, evals = {}, {}
    for sid in held:
        pairs = corpus.clips[sid]
        if adapt_clip_count >= len(pairs):
            raise CorpusError(
                f"speaker {sid} has {len(pairs)} clips; cannot use {adapt_clip_count} for adaptation and keep any for evaluation"
            )
        adapt[sid] = list(pairs[:adapt_clip_count])
        evals[sid] = list(pairs[adapt_clip_count:])
    train = {s: list(p) for s, p in corpus.clips.items() if s not in set(held)}
    result = Split(train, adapt, evals)
    result.verification()
    return result


def expected_noise_norm(noise_std):
    """E|n| for n ~ N(0, sigma^2 I_3): sigma * sqrt(8 / pi)."""
    return noise_std * math.sqrt(8.0 / math.pi)
