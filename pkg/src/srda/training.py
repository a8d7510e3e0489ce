"""The alternating optimization schedule.

Every iteration runs a supervised step on a source batch (generator and
classifier both move), then builds perturbed target features and takes a
smoothing step that moves the generator only.
"""

from __future__ import annotations

import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .data import BatchStream, Dataset
from .errors import DivergedError, InvalidInput, ShapeError
from .metrics import RunRecord, accuracy, perturbed_eval
from .model import Model, entropy_loss, forward_features, source_loss
from .numeric import Optimizer, make_rng
from .perturbation import NoisePlan, PlanKind, generate_noise, lsd_loss

log = logging.getLogger(__name__)

# sub-stream ids mixed with the run seed
STREAM_INIT = 0
STREAM_SOURCE = 1
STREAM_TARGET = 2
STREAM_NOISE = 3
STREAM_EVAL = 4

DEFAULT_LR = {PlanKind.ISOTROPIC: 1e-3, PlanKind.VAT: 1e-3, PlanKind.FGSM: 1e-4}


def stream_rng(seed, stream):
    return make_rng([int(seed), stream])


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 128
    lr_source: float = 1e-3
    lr_smooth: float | None = None
    optimizer: str = "adam"
    plan: NoisePlan | None = field(default_factory=NoisePlan)
    eval_plan: NoisePlan | None = None
    entropy_weight: float = 0.0
    entropy_step: str = "smooth"
    warmup_epochs: int = 0
    seed: int = 0
    eval_every: int = 1

    def __post_init__(self):
        if self.epochs < 0:
            raise InvalidInput("epochs must be >= 0")
        if self.batch_size < 1:
            raise InvalidInput("batch_size must be >= 1")
        if self.lr_smooth is None:
            self.lr_smooth = DEFAULT_LR[self.plan.kind] if self.plan is not None else 1e-3
        if not (self.lr_source > 0 and self.lr_smooth > 0):
            raise InvalidInput("learning rates must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise InvalidInput(f"unknown optimizer {self.optimizer!r}")
        if self.entropy_weight < 0:
            raise InvalidInput("entropy_weight must be >= 0")
        if self.entropy_step not in ("source", "smooth"):
            raise InvalidInput("entropy_step must be 'source' or 'smooth'")
        if self.warmup_epochs < 0 or self.eval_every < 1:
            raise InvalidInput("warmup_epochs must be >= 0 and eval_every >= 1")

    @property
    def resolved_eval_plan(self) -> NoisePlan:
        if self.eval_plan is not None:
            return self.eval_plan
        if self.plan is not None:
            return self.plan
        return NoisePlan(PlanKind.ISOTROPIC)


@dataclass
class TrainState:
    model: Model
    rng: np.random.Generator
    source_opt: Optimizer
    smooth_opt: Optimizer
    entropy_weight: float = 0.0
    entropy_step: str = "smooth"
    epoch: int = 0
    step: int = 0
    history: list = field(default_factory=list)
    step_log: list = field(default_factory=list)
    hook: object = None

    @classmethod
    def create(cls, model: Model, config: TrainConfig, rng=None):
        return cls(
            model=model,
            rng=stream_rng(config.seed, STREAM_NOISE) if rng is None else rng,
            source_opt=Optimizer(model.params, config.optimizer),
            smooth_opt=Optimizer(model.generator.param_store, config.optimizer),
            entropy_weight=config.entropy_weight,
            entropy_step=config.entropy_step,
        )

    def _after(self, kind):
        self.step_log.append((kind, self.step))
        if self.hook is not None:
            self.hook(kind, self)


@contextmanager
def _divergence_guard(state):
    # datasets are finite by construction, so non-finite logits mean the model blew up
    try:
        yield
    except InvalidInput as e:
        raise DivergedError(f"{e} at step {state.step}", step=state.step) from e
    except DivergedError as e:
        if e.step is None:
            raise DivergedError(f"{e} at step {state.step}", step=state.step) from e
        raise


def _check_finite(value, what, state):
    if not math.isfinite(value):
        raise DivergedError(f"{what} became non-finite at step {state.step}", step=state.step)


def step_source(state: TrainState, x_s, y_s, lr, x_t=None) -> float:
    """One supervised update of generator and classifier; returns the pre-step loss."""
    model = state.model
    model.params.zero_grads()
    with _divergence_guard(state):
        loss = source_loss(model, x_s, y_s, backward=True)
        _check_finite(loss, "source loss", state)
        if state.entropy_weight and state.entropy_step == "source" and x_t is not None:
            ent = entropy_loss(model, x_t, backward=True, weight=state.entropy_weight)
            _check_finite(ent, "entropy loss", state)
        state.source_opt.step(lr)
    state._after("source")
    return loss


def step_smooth(state: TrainState, x_t, plan: NoisePlan, lr) -> float:
    """One generator-only update that lowers LSD on a target batch.

    The perturbations are built from the current model and then held fixed
    while differentiating.  Returns the pre-step mean LSD.
    """
    model = state.model
    model.generator.param_store.zero_grads()
    weight = state.entropy_weight if state.entropy_step == "smooth" else 0.0
    with _divergence_guard(state):
        g = forward_features(model, x_t)
        r, fallbacks = generate_noise(model, g, plan, state.rng)
        if fallbacks:
            log.debug("step %d: %d rows fell back to isotropic noise", state.step, fallbacks)
        lsd = lsd_loss(model, x_t, r, backward=True, entropy_weight=weight)
        _check_finite(lsd, "LSD", state)
        state.smooth_opt.step(lr)
    state._after("smooth")
    return lsd


def evaluate(model: Model, target: Dataset, config: TrainConfig):
    """(mean_lsd, hdh_proxy, accuracy_or_None) on the target set.

    The eval rng is re-seeded identically every call so successive epochs are
    compared under the same random draws.
    """
    res = perturbed_eval(model, target, config.resolved_eval_plan, stream_rng(config.seed, STREAM_EVAL))
    acc = accuracy(model, target) if target.labeled else None
    return res.mean_lsd, res.hdh_proxy, acc


def train_schedule(model: Model, source: Dataset, target: Dataset, config: TrainConfig,
                   hook=None, on_epoch=None) -> TrainState:
    """Run the schedule on a copy of ``model``.

    ``hook(kind, state)`` fires after every step; ``on_epoch(state)`` after
    every epoch's record is appended.  Target labels, if present, are used for
    reporting accuracy only.
    """
    if not source.labeled:
        raise InvalidInput("source dataset must be labeled")
    if source.dim != model.input_dim or target.dim != model.input_dim:
        raise ShapeError(f"data dim ({source.dim}, {target.dim}) != generator input width {model.input_dim}")
    if source.num_classes > model.num_classes:
        raise ShapeError(f"source has {source.num_classes} classes, model outputs {model.num_classes}")
    state = TrainState.create(model.copy(), config)
    state.hook = hook
    src = BatchStream(source, config.batch_size, stream_rng(config.seed, STREAM_SOURCE))
    tgt = BatchStream(target, config.batch_size, stream_rng(config.seed, STREAM_TARGET))
    iters = math.ceil(max(len(source), len(target)) / config.batch_size)
    need_target_for_source = config.entropy_weight > 0 and config.entropy_step == "source"

    for epoch in range(config.epochs):
        smoothing = config.plan is not None and epoch >= config.warmup_epochs
        losses = []
        for _ in range(iters):
            sb = src.next_batch()
            tb = tgt.next_batch() if (smoothing or need_target_for_source) else None
            losses.append(step_source(state, sb.features, sb.labels, config.lr_source,
                                      None if tb is None else tb.features))
            if smoothing:
                step_smooth(state, tb.features, config.plan, config.lr_smooth)
            state.step += 1
        state.epoch = epoch + 1
        if state.epoch % config.eval_every == 0 or state.epoch == config.epochs:
            lsd, hdh, acc = evaluate(state.model, target, config)
            rec = RunRecord(state.epoch, state.step, float(np.mean(losses)), lsd, acc, hdh)
            state.history.append(rec)
            log.info("epoch %d step %d source_loss %.4f lsd %.4f acc %s hdh %.4f", rec.epoch,
                     rec.step, rec.source_loss, lsd, "NA" if acc is None else f"{acc:.4f}", hdh)
        if on_epoch is not None:
            on_epoch(state)
    return state
