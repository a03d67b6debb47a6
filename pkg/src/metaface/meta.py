"""Episodic meta-training over speakers.

``loss_fn`` is any callable ``loss_fn(params, adapters, clips, context,
seed)`` returning a scalar Tensor, or ``(Tensor, aux_dict)``. ``clips`` are
the pairs being fitted; ``context`` the pairs the model may condition on
(the task's support set). ``params`` is a :class:`ParameterSet` (or any
name -> Tensor mapping with ``replace``) and ``adapters`` a dict of
:class:`LoraAdapter`, possibly empty.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .model import ConfigError

__all__ = [
    "MetaError",
    "Task",
    "MetaConfig",
    "OuterStep",
    "sample_tasks",
    "inner_adapt",
    "meta_outer_step",
    "joint_step",
    "personalize",
    "trainable_tensors",
]


class MetaError(ValueError):
    """Task sampling could not be satisfied."""


@dataclass(frozen=True, eq=False)
class Task:
    speaker_id: str
    support: list
    query: list
    seed: int = 0


@dataclass(frozen=True)
class MetaConfig:
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

    def __post_init__(self):
        if self.inner_lr <= 0 or self.outer_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.inner_steps < 1:
            raise ConfigError("inner_steps must be at least 1")
        if self.n_way < 1 or self.k_shot < 1 or self.query_size < 1:
            raise ConfigError("n_way, k_shot and query_size must be positive")
        if self.order not in ("second", "first"):
            raise ConfigError(f"order must be 'second' or 'first', got {self.order!r}")
        if self.adapt_scope not in ("all", "lora-only"):
            raise ConfigError(f"adapt_scope must be 'all' or 'lora-only', got {self.adapt_scope!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lam must lie in [0, 1]")
        if self.proximal_weight < 0:
            raise ConfigError("proximal_weight must be non-negative")


def sample_tasks(corpus, meta_config, seed):
    """One task per speaker for ``n_way`` distinct speakers.

    ``corpus`` maps speaker id -> list of (FeatureClip, MotionClip).
    """
    speakers = sorted(corpus)
    need = meta_config.k_shot + meta_config.query_size
    if len(speakers) < meta_config.n_way:
        raise MetaError(f"{meta_config.n_way}-way sampling needs {meta_config.n_way} speakers, corpus has {len(speakers)}")
    short = [f"{s} ({len(corpus[s])} clips)" for s in speakers if len(corpus[s]) < need]
    rng = np.random.default_rng(seed)
    chosen = [speakers[i] for i in rng.permutation(len(speakers))[: meta_config.n_way]]
    bad = [s for s in short if s.split(" ")[0] in chosen]
    if bad:
        raise MetaError(f"each speaker needs {need} clips (k_shot + query_size); short: {', '.join(bad)}")
    tasks = []
    for sid in chosen:
        order = rng.permutation(len(corpus[sid]))
        pairs = corpus[sid]
        support = [pairs[i] for i in order[: meta_config.k_shot]]
        query = [pairs[i] for i in order[meta_config.k_shot: need]]
        tasks.append(Task(sid, support, query, int(rng.integers(2**31 - 1))))
    return tasks


def _split_loss(out):
    if isinstance(out, tuple):
        return out[0], out[1]
    return out, {}


def _lora_key(base, factor):
    return f"lora.{base}.{factor}"


def trainable_tensors(params, adapters, scope):
    """Ordered name -> Tensor map of what ``scope`` updates.

    ``all``: base tensors then adapter factors; ``lora-only``: adapter
    factors; ``base``: base tensors only.
    """
    out = {}
    if scope in ("all", "base"):
        out.update(params.items())
    if scope == "base":
        return out
    for base, a in (adapters or {}).items():
        out[_lora_key(base, "B")] = a.B
        out[_lora_key(base, "A")] = a.A
    return out


def _apply(params, adapters, updates):
    base = {k: v for k, v in updates.items() if not k.startswith("lora.")}
    new_params = params.replace(base) if base else params
    new_adapters = {}
    for name, a in (adapters or {}).items():
        b = updates.get(_lora_key(name, "B"), a.B)
        aa = updates.get(_lora_key(name, "A"), a.A)
        new_adapters[name] = a if (b is a.B and aa is a.A) else a.with_factors(b, aa)
    return new_params, new_adapters


def inner_adapt(params, adapters, support, meta_config, loss_fn, seed=0):
    """``inner_steps`` gradient steps on the support set at ``inner_lr``.

    With ``order == "second"`` the backward pass is recorded, so the
    returned tensors stay differentiable with respect to the inputs.
    """
    if not support:
        raise ValueError("inner_adapt needs a non-empty support set")
    create_graph = meta_config.order == "second"
    # plain tensors would receive zero gradients; promote them to leaves
    frozen = {k: ad.tensor(v.data, requires_grad=True)
              for k, v in trainable_tensors(params, adapters, meta_config.adapt_scope).items() if not v.requires_grad}
    if frozen:
        params, adapters = _apply(params, adapters, frozen)
    for step in range(meta_config.inner_steps):
        try:
            loss, _ = _split_loss(loss_fn(params, adapters, support, support, seed))
            trainable = trainable_tensors(params, adapters, meta_config.adapt_scope)
            grads = ad.gradient(loss, trainable, create_graph=create_graph)
        except ad.NumericError as exc:
            raise ad.NumericError(f"inner step {step}: {exc}") from exc
        updates = {k: ad.sub(v, ad.scale(grads[k], meta_config.inner_lr)) for k, v in trainable.items()}
        params, adapters = _apply(params, adapters, updates)
    return params, adapters


def _as_variables(params, adapters):
    vp = params.as_variables()
    va = {
        k: a.with_factors(ad.tensor(a.B.data, requires_grad=True), ad.tensor(a.A.data, requires_grad=True))
        for k, a in (adapters or {}).items()
    }
    return vp, va


def _descend(variables, grads, lr):
    return {k: ad.tensor(v.data - lr * grads[k]) for k, v in variables.items()}


@dataclass
class OuterStep:
    params: object
    adapters: dict
    grads: dict
    query_losses: list = field(default_factory=list)
    aux: list = field(default_factory=list)


def _accumulate(total, grads):
    if total is None:
        return {k: g.data.copy() for k, g in grads.items()}
    for k, g in grads.items():
        total[k] += g.data
    return total


def meta_outer_step(params, adapters, tasks, meta_config, loss_fn, update_scope="all"):
    """One meta-update: theta <- theta - outer_lr * sum over tasks of d(query loss after adaptation)/d theta.

    Base weights and adapters are both updated (``update_scope="all"``).
    Per-task gradients are summed in task order.
    """
    if not tasks:
        raise ValueError("meta_outer_step needs at least one task")
    vparams, vadapters = _as_variables(params, adapters)
    variables = trainable_tensors(vparams, vadapters, update_scope)
    total = None
    losses, auxes = [], []
    for i, task in enumerate(tasks):
        adapted_p, adapted_a = inner_adapt(vparams, vadapters, task.support, meta_config, loss_fn, seed=task.seed)
        try:
            loss, aux = _split_loss(loss_fn(adapted_p, adapted_a, task.query, task.support, task.seed + 1))
            grads = ad.gradient(loss, variables)
        except ad.NumericError as exc:
            raise ad.NumericError(f"query loss of task {i} ({task.speaker_id}): {exc}") from exc
        total = _accumulate(total, grads)
        losses.append(loss.item())
        auxes.append(aux)
    new_params, new_adapters = _apply(params, adapters, _descend(variables, total, meta_config.outer_lr))
    return OuterStep(new_params, new_adapters, total, losses, auxes)


def joint_step(params, adapters, tasks, meta_config, loss_fn, update_scope="all", use_support=True):
    """Plain multi-speaker training step (no inner adaptation).

    Minimises the summed support and query losses at theta itself. With
    ``use_support=False`` only the query loss is used, which is exactly
    :func:`meta_outer_step` with the inner loop removed.
    """
    if not tasks:
        raise ValueError("joint_step needs at least one task")
    vparams, vadapters = _as_variables(params, adapters)
    variables = trainable_tensors(vparams, vadapters, update_scope)
    total = None
    losses, auxes = [], []
    for i, task in enumerate(tasks):
        try:
            q_loss, aux = _split_loss(loss_fn(vparams, vadapters, task.query, task.support, task.seed + 1))
            objective = q_loss
            if use_support:
                s_loss, _ = _split_loss(loss_fn(vparams, vadapters, task.support, task.support, task.seed))
                objective = ad.add(s_loss, q_loss)
            grads = ad.gradient(objective, variables)
        except ad.NumericError as exc:
            raise ad.NumericError(f"joint loss of task {i} ({task.speaker_id}): {exc}") from exc
        total = _accumulate(total, grads)
        losses.append(q_loss.item())
        auxes.append(aux)
    new_params, new_adapters = _apply(params, adapters, _descend(variables, total, meta_config.outer_lr))
    return OuterStep(new_params, new_adapters, total, losses, auxes)


def personalize(meta_params, meta_adapters, person_clips, meta_config, loss_fn, steps, scope="lora-only", seed=0):
    """Fine-tune on one person's clips; returns (params, adapters).

    Minimises lam * L_person(theta) + mu * (1 - lam) * |theta - theta_meta|^2
    by ``steps`` gradient steps at ``inner_lr``. With mu = 0 (default) the
    second term vanishes, matching a literal reading of the personalisation
    objective whose pre-trained term does not depend on theta. Only the
    adapters move unless ``scope == "all"``.
    """
    if not person_clips:
        raise ValueError("personalize needs at least one clip")
    if scope not in ("all", "lora-only"):
        raise ConfigError(f"scope must be 'all' or 'lora-only', got {scope!r}")
    lam, mu = meta_config.lam, meta_config.proximal_weight
    params = meta_params.detached() if scope == "lora-only" else meta_params
    adapters = dict(meta_adapters or {})
    anchor = {k: v.data for k, v in trainable_tensors(params, adapters, scope).items()}
    for step in range(steps):
        variables = {k: ad.tensor(v.data, requires_grad=True) for k, v in trainable_tensors(params, adapters, scope).items()}
        p, a = _apply(params, adapters, variables)
        try:
            loss, _ = _split_loss(loss_fn(p, a, person_clips, person_clips, seed))
            objective = ad.scale(loss, lam)
            if mu > 0 and lam < 1:
                prox = None
                for k, v in variables.items():
                    term = ad.sum(ad.square(ad.sub(v, ad.constant(anchor[k]))))
                    prox = term if prox is None else ad.add(prox, term)
                objective = ad.add(objective, ad.scale(prox, mu * (1.0 - lam)))
            grads = ad.gradient(objective, variables)
        except ad.NumericError as exc:
            raise ad.NumericError(f"personalize step {step}: {exc}") from exc
        params, adapters = _apply(params, adapters, _descend(variables, {k: g.data for k, g in grads.items()}, meta_config.inner_lr))
    if scope == "lora-only":
        params = meta_params
    return params, adapters
