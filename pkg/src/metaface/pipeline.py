"""Training, personalisation, evaluation and the ablation matrix.

These are the library-level drivers behind the command line; they take
in-memory corpora and return in-memory results so tests can call them
directly.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .meta import joint_step, meta_outer_step, personalize, sample_tasks
from .model import forward, init_adapters, init_params, trainable_report
from .objective import FaceObjective, style_latent
from .objectives import aggregate, evaluate_clip
from .relation import LatentDistribution, encode_set, sample_latent

__all__ = [
    "TRACE_FIELDS",
    "TrainResult",
    "meta_train",
    "adapt_speaker",
    "support_latent",
    "evaluate_speaker",
    "zero_predictions",
    "AblationCell",
    "run_ablation",
    "ablation_cells",
]

log = logging.getLogger(__name__)

TRACE_FIELDS = ("step", "recon", "vel", "lnp", "query_l2_face")


@dataclass
class TrainResult:
    params: object
    adapters: dict
    rows: list
    rng_state: dict
    steps: int


def meta_train(train_clips, run, seed, meta_init=None, drmn=None, steps=None, on_row=None):
    """Meta-train (or, with ``meta_init=False``, jointly train) from a fresh init.

    With meta-initialisation off, only base weights are trained and the
    adapters stay at their fresh initialisation. Each outer step appends a
    trace row with the pre-update task-averaged losses.
    """
    meta_init = run.meta_init if meta_init is None else meta_init
    drmn = run.drmn if drmn is None else drmn
    steps = run.outer_steps if steps is None else steps
    cfg, mc = run.model_config(), run.meta_config()
    params, adapters = init_params(cfg, seed), init_adapters(cfg, seed)
    objective = FaceObjective(cfg, run.loss_weights(), drmn=drmn)
    rng = np.random.default_rng([seed, 0x7A5C])
    rows = []
    for step in range(steps):
        tasks = sample_tasks(train_clips, mc, int(rng.integers(2**31 - 1)))
        try:
            if meta_init:
                result = meta_outer_step(params, adapters, tasks, mc, objective)
            else:
                result = joint_step(params, adapters, tasks, mc, objective, update_scope="base", use_support=False)
        except ad.NumericError as exc:
            raise ad.NumericError(f"outer step {step}: {exc}") from exc
        params, adapters = result.params, result.adapters
        row = {"step": step}
        for key in ("recon", "vel", "lnp"):
            row[key] = float(np.mean([a[key] for a in result.aux]))
        row["query_l2_face"] = float(np.mean([a["l2_face"] for a in result.aux]))
        rows.append(row)
        if on_row is not None:
            on_row(row)
    return TrainResult(params, adapters, rows, rng.bit_generator.state, steps)


def adapt_speaker(params, adapters, clips, run, seed, scope=None, steps=None, drmn=None):
    """Personalise on ``clips``; returns (params, adapters)."""
    scope = run.finetune_scope if scope is None else scope
    steps = run.adapt_steps if steps is None else steps
    drmn = run.drmn if drmn is None else drmn
    objective = FaceObjective(run.model_config(), run.loss_weights(), drmn=drmn)
    return personalize(params, adapters, clips, run.meta_config(), objective, steps, scope=scope, seed=seed)


def support_latent(params, clips, run, drmn=True):
    """(mean, log_var) arrays of q(z | clips), or None without DRMN."""
    if not drmn:
        return None
    with ad.no_grad():
        dist = encode_set(params, clips)
    return dist.mean.data, dist.log_var.data


def evaluate_speaker(params, adapters, context_clips, eval_clips, run, seed, drmn=None, latent=None):
    """Per-clip MetricReports plus their aggregate.

    z is drawn from q(z | context_clips), or from the stored ``latent``
    (mean, log_var) when given, using the same seed either way.
    """
    drmn = run.drmn if drmn is None else drmn
    cfg = run.model_config()
    with ad.no_grad():
        if drmn and latent is not None:
            z = sample_latent(LatentDistribution(ad.constant(latent[0]), ad.constant(latent[1])), seed)
        else:
            z = style_latent(params, context_clips, cfg, seed, drmn=drmn)
        reports = []
        for feats, motion in eval_clips:
            pred = forward(params, adapters, feats, z, cfg, motion.frame_rate)
            reports.append(evaluate_clip(pred, motion, cfg.lip_range))
    return reports, aggregate(reports)


def zero_predictions(eval_clips, lip_range):
    reports = [evaluate_clip(np.zeros_like(m.frames), m, lip_range) for _, m in eval_clips]
    return reports, aggregate(reports)


# --- ablation ----------------------------------------------------------------

@dataclass
class AblationCell:
    meta_init: bool
    drmn: bool
    scope: str
    adapt_clips: int
    seeds: list
    metrics: dict = field(default_factory=dict)  # seed -> MetricReport
    status: str = "pending"
    error: str = ""
    trainable: int = 0

    @property
    def label(self):
        return (
            f"meta_init={'on' if self.meta_init else 'off'} drmn={'on' if self.drmn else 'off'} "
            f"finetune={self.scope} clips={self.adapt_clips}"
        )

    def summary(self, name):
        values = [getattr(self.metrics[s], name) for s in self.seeds if s in self.metrics]
        if not values:
            return float("nan"), float("nan"), float("nan")
        return float(np.mean(values)), float(np.min(values)), float(np.max(values))


def ablation_cells(run):
    """The 2x2x2 matrix at ``run.adapt_clips`` followed by the clip-count sweep."""
    seeds = run.seed_list
    cells = []
    for meta_init in (True, False):
        for drmn in (True, False):
            for scope in ("lora-only", "all"):
                cells.append(AblationCell(meta_init, drmn, scope, run.adapt_clips, seeds))
    for n in run.sweep_list:
        if n != run.adapt_clips:
            cells.append(AblationCell(True, True, "lora-only", n, seeds))
    return cells


def run_ablation(split, run, cells=None, on_cell=None, models=None):
    """Evaluate every cell on every seed; one trained model per (seed, meta_init, drmn).

    Per held-out speaker the first ``adapt_clips`` clips of its adapt pool
    personalise the model; every remaining clip of that speaker (beyond the
    largest adapt count used) is evaluated, so all cells score the same clips.
    Failures are recorded per cell and do not stop the run. ``models`` is an
    optional dict cache keyed by (seed, meta_init, drmn), filled as models
    are trained and reused across calls.
    """
    cells = ablation_cells(run) if cells is None else cells
    pool_size = max(c.adapt_clips for c in cells)
    held = sorted(split.adapt)
    pools = {s: list(split.adapt[s]) + list(split.eval[s]) for s in held}
    for s in held:
        if len(pools[s]) <= pool_size:
            raise ValueError(f"speaker {s} has {len(pools[s])} clips, need more than {pool_size}")
    models = {} if models is None else models
    for seed in sorted({s for c in cells for s in c.seeds}):
        for key in sorted({(c.meta_init, c.drmn) for c in cells}, reverse=True):
            if (seed,) + key in models:
                continue
            try:
                res = meta_train(split.meta_train, run, seed, meta_init=key[0], drmn=key[1])
                models[(seed,) + key] = res
            except Exception as exc:  # noqa: BLE001 - recorded per cell
                models[(seed,) + key] = exc
            log.info("trained seed=%d meta_init=%s drmn=%s", seed, *key)
    for cell in cells:
        try:
            for seed in cell.seeds:
                res = models[(seed, cell.meta_init, cell.drmn)]
                if isinstance(res, Exception):
                    raise res
                per_speaker = []
                for s in held:
                    support = pools[s][: cell.adapt_clips]
                    eval_clips = pools[s][pool_size:]
                    p, a = adapt_speaker(res.params, res.adapters, support, run, seed, scope=cell.scope, drmn=cell.drmn)
                    per_speaker.append(evaluate_speaker(p, a, support, eval_clips, run, seed, drmn=cell.drmn)[1])
                cell.metrics[seed] = aggregate(per_speaker)
            first = models[(cell.seeds[0], cell.meta_init, cell.drmn)]
            cell.trainable = trainable_report(first.params, first.adapters, "full" if cell.scope == "all" else "lora-only").trainable
            cell.status = "ok"
        except Exception as exc:  # noqa: BLE001 - recorded per cell
            cell.status = "failed"
            cell.error = f"{type(exc).__name__}: {exc}"
        if on_cell is not None:
            on_cell(cell)
    return cells
