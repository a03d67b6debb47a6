"""Training losses and evaluation metrics.

Losses take a prediction (Tensor [T, 3L], MotionClip or array) and a ground
truth clip and return a differentiable scalar. Metrics work on plain arrays
and return floats in the corpus' model-space length unit.
"""

from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from . import kernels
from .model import MotionClip

__all__ = [
    "LossWeights",
    "MetricReport",
    "recon_loss",
    "velocity_loss",
    "total_loss",
    "l2_metrics",
    "dtw_lip_sync",
    "evaluate_clip",
    "aggregate",
]


@dataclass(frozen=True)
class LossWeights:
    w_recon: float = 1000.0
    w_vel: float = 1000.0
    w_lnp: float = 10.0

    def __post_init__(self):
        if min(self.w_recon, self.w_vel, self.w_lnp) < 0:
            raise ValueError("loss weights must be non-negative")


def _flat_pred(pred):
    if isinstance(pred, ad.Tensor):
        return pred if pred.ndim == 2 else ad.constant(pred.data.reshape(pred.shape[0], -1))
    frames = pred.frames if isinstance(pred, MotionClip) else np.asarray(pred, dtype=np.float64)
    return ad.constant(frames.reshape(frames.shape[0], -1))


def _flat_gt(gt):
    frames = gt.frames if isinstance(gt, MotionClip) else np.asarray(gt, dtype=np.float64)
    return frames.reshape(frames.shape[0], -1)


def recon_loss(pred, gt):
    """Mean squared error over all T*L*3 components."""
    p, g = _flat_pred(pred), _flat_gt(gt)
    if p.shape != g.shape:
        raise ad.ShapeError(f"recon_loss: prediction {list(p.shape)} vs ground truth {list(g.shape)}")
    return ad.mean(ad.square(ad.sub(p, ad.constant(g))))


def _difference_matrix(length):
    d = np.zeros((length - 1, length))
    idx = np.arange(length - 1)
    d[idx, idx + 1] = 1.0
    d[idx, idx] = -1.0
    return d


def velocity_loss(pred, gt):
    """Mean over t=2..T of the per-frame MSE between frame differences."""
    p, g = _flat_pred(pred), _flat_gt(gt)
    if p.shape != g.shape:
        raise ad.ShapeError(f"velocity_loss: prediction {list(p.shape)} vs ground truth {list(g.shape)}")
    if p.shape[0] < 2:
        raise ValueError("velocity_loss needs at least two frames")
    d = _difference_matrix(p.shape[0])
    dp = ad.matmul(ad.constant(d), p)
    return ad.mean(ad.square(ad.sub(dp, ad.constant(d @ g))))


def total_loss(recon, vel, lnp, weights):
    terms = [ad.scale(recon, weights.w_recon), ad.scale(vel, weights.w_vel), ad.scale(lnp, weights.w_lnp)]
    return ad.add(ad.add(terms[0], terms[1]), terms[2])


# --- metrics -----------------------------------------------------------------

@dataclass(frozen=True)
class MetricReport:
    l2_face: float
    l2_lip: float
    lip_max: float
    lip_sync: float
    clip_count: int = 1

    def to_text(self):
        """One ``name=value`` line per field, 17 significant digits."""
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={v}" if isinstance(v, int) else f"{f.name}={v:.17g}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        values = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            k, _, v = line.partition("=")
            values[k] = int(v) if k == "clip_count" else float(v)
        return cls(**values)


def _frames(x):
    if isinstance(x, MotionClip):
        return x.frames
    if isinstance(x, ad.Tensor):
        x = x.data
    return np.asarray(x, dtype=np.float64)


def l2_metrics(pred, gt, lip_range):
    """(l2_face, l2_lip, lip_max) from per-vertex Euclidean distances."""
    p, g = _frames(pred), _frames(gt)
    if p.shape != g.shape:
        raise ad.ShapeError(f"l2_metrics: prediction {list(p.shape)} vs ground truth {list(g.shape)}")
    lo, hi = lip_range
    if not 0 <= lo < hi <= p.shape[1]:
        raise ValueError(f"lip range [{lo}, {hi}) invalid for {p.shape[1]} vertices")
    dist = np.sqrt(np.sum((p - g) ** 2, axis=-1))  # [T, L]
    lip = dist[:, lo:hi]
    return float(dist.mean()), float(lip.mean()), float(lip.max(axis=1).mean())


def dtw_lip_sync(pred, gt, lip_range):
    """DTW over lip frames, normalised by the optimal path's length.

    Local cost is the mean per-vertex Euclidean distance between a predicted
    and a ground-truth lip frame; steps are (1,0), (0,1), (1,1).
    """
    p, g = _frames(pred), _frames(gt)
    if p.shape[0] == 0 or g.shape[0] == 0:
        raise ValueError("dtw_lip_sync needs non-empty clips")
    lo, hi = lip_range
    cost = kernels.lip_cost_matrix(p[:, lo:hi], g[:, lo:hi])
    total, length = kernels.dtw_accumulate(cost)
    return total / length


def evaluate_clip(pred, gt, lip_range):
    face, lip, lmax = l2_metrics(pred, gt, lip_range)
    return MetricReport(face, lip, lmax, dtw_lip_sync(pred, gt, lip_range), 1)


def aggregate(reports):
    """Arithmetic mean over clips (clip-count weighted)."""
    reports = list(reports)
    n = sum(r.clip_count for r in reports)
    if n == 0:
        raise ValueError("no reports to aggregate")

    def avg(name):
        return float(sum(getattr(r, name) * r.clip_count for r in reports) / n)

    return MetricReport(avg("l2_face"), avg("l2_lip"), avg("lip_max"), avg("lip_sync"), n)
