"""Neural-process style encoder over sets of (feature, motion) clips.

q(z | set) is a diagonal Gaussian. Each pair is embedded frame by frame,
averaged over time, then averaged over the set. Pairs are deduplicated and
pooled in a content-defined order, so the result is bit-identical under any
permutation or repetition of the input list.
"""

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .objectives import recon_loss

__all__ = [
    "LOG_VAR_BOUND",
    "LatentDistribution",
    "encode_set",
    "sample_latent",
    "kl_gaussian",
    "np_objective",
]

LOG_VAR_BOUND = 10.0


@dataclass(frozen=True, eq=False)
class LatentDistribution:
    mean: ad.Tensor
    log_var: ad.Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_var.shape or self.mean.ndim != 1:
            raise ad.ShapeError(f"mean {list(self.mean.shape)} and log_var {list(self.log_var.shape)} must be equal 1-D")
        if np.any(np.abs(self.log_var.data) > LOG_VAR_BOUND):
            raise ValueError(f"log_var outside [-{LOG_VAR_BOUND}, {LOG_VAR_BOUND}]")

    @property
    def dim(self):
        return self.mean.shape[0]


def _pair_arrays(pair):
    feats, motion = pair
    f = feats.frames if hasattr(feats, "frames") else np.asarray(feats, dtype=np.float64)
    m = motion.frames if hasattr(motion, "frames") else np.asarray(motion, dtype=np.float64)
    m = m.reshape(m.shape[0], -1)
    if f.shape[0] != m.shape[0]:
        raise ad.ShapeError(f"pair has {f.shape[0]} feature frames but {m.shape[0]} motion frames")
    return f, m


def _pair_key(f, m):
    h = hashlib.sha1()
    h.update(np.asarray(f.shape + m.shape, dtype=np.int64).tobytes())
    h.update(np.ascontiguousarray(f).tobytes())
    h.update(np.ascontiguousarray(m).tobytes())
    return h.digest()


def encode_set(params, pairs):
    """Posterior q(z | pairs) from the ``enc.*`` tensors of ``params``."""
    if not pairs:
        raise ValueError("encode_set needs at least one pair")
    unique = {}
    for pair in pairs:
        f, m = _pair_arrays(pair)
        unique.setdefault(_pair_key(f, m), (f, m))
    w1, b1, w2, b2 = params["enc.W1"], params["enc.b1"], params["enc.W2"], params["enc.b2"]
    if w1.shape[0] != f.shape[1] + m.shape[1]:
        raise ad.ShapeError(f"encoder expects {w1.shape[0]} inputs per frame, got {f.shape[1] + m.shape[1]}")
    pooled = None
    for key in sorted(unique):
        f, m = unique[key]
        x = ad.constant(np.concatenate([f, m], axis=1))
        h = ad.matmul(x, w1)
        h = ad.tanh(ad.add(h, ad.broadcast(b1, h.shape)))
        emb = ad.mean(ad.matmul(h, w2), axis=0)
        pooled = emb if pooled is None else ad.add(pooled, emb)
    if len(unique) > 1:
        pooled = ad.scale(pooled, 1.0 / len(unique))
    out = ad.add(pooled, b2)
    dim = out.shape[0] // 2
    raw = ad.slice_last(out, dim, 2 * dim)
    # smooth clamp into (-bound, bound)
    log_var = ad.scale(ad.tanh(ad.scale(raw, 1.0 / LOG_VAR_BOUND)), LOG_VAR_BOUND)
    return LatentDistribution(ad.slice_last(out, 0, dim), log_var)


def sample_latent(dist, seed):
    """Reparameterised draw mean + exp(log_var / 2) * eps, eps from ``seed``."""
    eps = np.random.default_rng(seed).standard_normal(dist.dim)
    std = ad.exp(ad.scale(dist.log_var, 0.5))
    return ad.add(dist.mean, ad.mul(std, ad.constant(eps)))


def kl_gaussian(q, p):
    """KL(q || p) for diagonal Gaussians, summed over dimensions."""
    if q.dim != p.dim:
        raise ad.ShapeError(f"KL between {q.dim}-D and {p.dim}-D distributions")
    ratio = ad.exp(ad.sub(q.log_var, p.log_var))
    maha = ad.mul(ad.square(ad.sub(q.mean, p.mean)), ad.exp(ad.scale(p.log_var, -1.0)))
    inner = ad.add(ad.sub(ad.add(ratio, maha), 1.0), ad.sub(p.log_var, q.log_var))
    return ad.scale(ad.sum(inner), 0.5)


def np_objective(params, decoder, task, seed, sample_from="query"):
    """(reconstruction term, KL term) for one task.

    ``decoder(features, z)`` returns the predicted motion for a feature
    array. z is drawn from q(z|query) when ``sample_from == "query"``
    (training) and from q(z|support) otherwise. The KL term is
    KL(q(z|query) || q(z|support)); both terms are minimised.
    """
    if not task.support or not task.query:
        raise ValueError("task needs a non-empty support and query set")
    q_query = encode_set(params, task.query)
    q_support = encode_set(params, task.support)
    z = sample_latent(q_query if sample_from == "query" else q_support, seed)
    recon = None
    for feats, motion in task.query:
        frames = feats.frames if hasattr(feats, "frames") else feats
        term = recon_loss(decoder(frames, z), motion)
        recon = term if recon is None else ad.add(recon, term)
    return recon, kl_gaussian(q_query, q_support)
