"""The task loss used for meta-training, personalisation and evaluation."""

import numpy as np

from . import autodiff as ad
from .model import predict
from .objectives import LossWeights, l2_metrics, recon_loss, velocity_loss
from .relation import encode_set, kl_gaussian, sample_latent

__all__ = ["FaceObjective", "style_latent"]


def style_latent(params, pairs, config, seed, drmn=True):
    """z conditioned on ``pairs`` (a sampled draw from q(z|pairs)), or zeros without DRMN."""
    if not drmn:
        return ad.constant(np.zeros(config.latent_dim))
    return sample_latent(encode_set(params, pairs), seed)


class FaceObjective:
    """Weighted recon + velocity loss over clips, plus the latent consistency term.

    z is drawn from q(z | clips). When ``context`` differs from ``clips``
    (a query set scored against its support set) the KL term
    KL(q(z|clips) || q(z|context)) is added with weight ``w_lnp``.
    """

    def __init__(self, config, weights=None, drmn=True):
        self.config = config
        self.weights = weights or LossWeights()
        self.drmn = drmn

    def __call__(self, params, adapters, clips, context=None, seed=0):
        cfg, w = self.config, self.weights
        kl = None
        if self.drmn:
            q_clips = encode_set(params, clips)
            if context is not None and context is not clips:
                kl = kl_gaussian(q_clips, encode_set(params, context))
            z = sample_latent(q_clips, seed)
        else:
            z = ad.constant(np.zeros(cfg.latent_dim))
        total = None
        recon_sum = vel_sum = face_sum = 0.0
        for feats, motion in clips:
            pred = predict(params, adapters, feats.frames, z, cfg)
            r = recon_loss(pred, motion)
            v = velocity_loss(pred, motion)
            term = ad.add(ad.scale(r, w.w_recon), ad.scale(v, w.w_vel))
            total = term if total is None else ad.add(total, term)
            recon_sum += r.item()
            vel_sum += v.item()
            face_sum += l2_metrics(pred.data.reshape(motion.frames.shape), motion.frames, cfg.lip_range)[0]
        lnp = 0.0
        if kl is not None:
            total = ad.add(total, ad.scale(kl, w.w_lnp))
            lnp = kl.item()
        n = len(clips)
        aux = {"recon": recon_sum / n, "vel": vel_sum / n, "lnp": lnp, "l2_face": face_sum / n}
        return total, aux
