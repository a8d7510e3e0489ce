"""Feature-space perturbations (isotropic, FGSM-style, VAT-style) and the local
smooth discrepancy LSD(g, r) = CE(C(g + r), C(g)) with C(g) held constant.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import FlatGradient, InternalError, InvalidInput, ShapeError
from .model import Model, entropy_grad_logits, predict_from_probs
from .numeric import NORM_FLOOR, as_matrix, cross_entropy, row_norms, softmax

MAX_RESAMPLE = 100


class PlanKind(str, Enum):
    ISOTROPIC = "isotropic"
    FGSM = "fgsm"
    VAT = "vat"


@dataclass(frozen=True)
class NoisePlan:
    kind: PlanKind = PlanKind.ISOTROPIC
    epsilon: float = 0.5
    vat_xi: float = 1e-1
    vat_power_iters: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", PlanKind(self.kind))
        if not self.epsilon > 0:
            raise InvalidInput("epsilon must be positive")
        if not self.vat_xi > 0:
            raise InvalidInput("vat_xi must be positive")
        if int(self.vat_power_iters) < 1:
            raise InvalidInput("vat_power_iters must be >= 1")


# --------------------------------------------------------------------------- #
# isotropic


def isotropic_rows(n, dim, epsilon, rng) -> np.ndarray:
    """``n`` independent vectors uniform on the sphere of radius ``epsilon``."""
    if dim < 1:
        raise InvalidInput("dim must be >= 1")
    m = rng.standard_normal((n, dim))
    norms = row_norms(m)
    for _ in range(MAX_RESAMPLE):
        bad = norms < NORM_FLOOR
        if not bad.any():
            break
        m[bad] = rng.standard_normal((int(bad.sum()), dim))
        norms = row_norms(m)
    else:
        raise InternalError("isotropic sampler kept drawing degenerate vectors")
    return epsilon * (m / norms[:, None])


def sample_isotropic(dim, epsilon, rng) -> np.ndarray:
    return isotropic_rows(1, dim, epsilon, rng)[0]


# --------------------------------------------------------------------------- #
# anisotropic directions; batched versions return a flat-row mask instead of
# raising, single-row versions raise FlatGradient


def _classifier_input_grad(model: Model, g, dz_fn):
    z, caches = model.classifier.forward(g)
    p = softmax(z)
    dz = dz_fn(p)
    return model.classifier.backward(caches, dz, accumulate=False), p


def _scale_to_epsilon(m, epsilon):
    norms = row_norms(m)
    flat = norms < NORM_FLOOR
    safe = np.where(flat, 1.0, norms)
    return epsilon * (m / safe[:, None]), flat


def fgsm_rows(model: Model, g, epsilon):
    """Per-row FGSM-style directions against the model's own pseudo-labels.

    Returns ``(r, flat)`` where ``flat`` marks rows whose gradient vanished
    (their ``r`` entries are meaningless).
    """
    g = as_matrix(g)

    def dz(p):
        onehot = np.zeros_like(p)
        onehot[np.arange(p.shape[0]), predict_from_probs(p)] = 1.0
        # gradient of CE(p, onehot) wrt logits, per row (no batch mean)
        return p - onehot

    m, _ = _classifier_input_grad(model, g, dz)
    return _scale_to_epsilon(m, epsilon)


def fgsm_direction(model: Model, g, epsilon) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 1:
        raise ShapeError("fgsm_direction expects a single feature row")
    r, flat = fgsm_rows(model, g, epsilon)
    if flat[0]:
        raise FlatGradient("FGSM probe gradient vanished")
    return r[0]


def power_iteration(grad_fn, d0, iters):
    """Repeat ``d <- normalize(grad_fn(d))`` row-wise, starting from unit rows ``d0``.

    Returns ``(d, flat)``; rows whose gradient vanished at any iteration are
    flagged in ``flat``.
    """
    d = as_matrix(d0).copy()
    flat = np.zeros(d.shape[0], dtype=bool)
    for _ in range(int(iters)):
        m = as_matrix(grad_fn(d))
        d, now_flat = _scale_to_epsilon(m, 1.0)
        flat |= now_flat
    return d, flat


def vat_rows(model: Model, g, plan: NoisePlan, start):
    """Per-row VAT directions from unit start vectors ``start``."""
    g = as_matrix(g)
    p_clean = softmax(model.classifier(g))

    def grad_fn(d):
        # d/dd CE(C(g + xi d), p_clean) = xi * (q - p) backpropagated to the input;
        # the xi factor is dropped since only the direction is kept
        probe = g + plan.vat_xi * d
        m, _ = _classifier_input_grad(model, probe, lambda q: q - p_clean)
        return m

    d, flat = power_iteration(grad_fn, start, plan.vat_power_iters)
    return plan.epsilon * d, flat


def vat_direction(model: Model, g, plan: NoisePlan, rng) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 1:
        raise ShapeError("vat_direction expects a single feature row")
    start = isotropic_rows(1, g.size, 1.0, rng)
    r, flat = vat_rows(model, g, plan, start)
    if flat[0]:
        raise FlatGradient("VAT probe gradient vanished")
    return r[0]


# --------------------------------------------------------------------------- #
# batch noise generation
#
# Random draws are taken for the whole batch up front, in a fixed order, before
# any row is processed: the isotropic fallback matrix first, then (VAT only)
# the start directions.  A row's noise therefore depends only on its index and
# the rng state, never on how the batch is split.


@dataclass
class NoiseDraws:
    fallback: np.ndarray
    start: np.ndarray | None = None


def draw_noise(n, dim, plan: NoisePlan, rng) -> NoiseDraws:
    fallback = isotropic_rows(n, dim, plan.epsilon, rng)
    start = isotropic_rows(n, dim, 1.0, rng) if plan.kind is PlanKind.VAT else None
    return NoiseDraws(fallback, start)


def directions_from_draws(model: Model, g, plan: NoisePlan, draws: NoiseDraws):
    """Return ``(r, n_fallback)`` for feature batch ``g``."""
    g = as_matrix(g)
    if plan.kind is PlanKind.ISOTROPIC:
        return draws.fallback.copy(), 0
    if plan.kind is PlanKind.FGSM:
        r, flat = fgsm_rows(model, g, plan.epsilon)
    else:
        r, flat = vat_rows(model, g, plan, draws.start)
    r[flat] = draws.fallback[flat]
    return r, int(flat.sum())


def generate_noise(model: Model, g, plan: NoisePlan, rng):
    """Per-row perturbations for a feature batch; flat rows fall back to isotropic."""
    g = as_matrix(g)
    return directions_from_draws(model, g, plan, draw_noise(g.shape[0], g.shape[1], plan, rng))


def perturb(g, r) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if g.shape != r.shape:
        raise ShapeError(f"perturbation shape {r.shape} != feature shape {g.shape}")
    return g + r


# --------------------------------------------------------------------------- #
# LSD


def lsd_rows(model: Model, g, r) -> np.ndarray:
    g = as_matrix(g)
    r = as_matrix(r)
    p = softmax(model.classifier(g))
    q = softmax(model.classifier(perturb(g, r)))
    return cross_entropy(q, p)


def lsd_value(model: Model, g, r) -> float:
    g = np.asarray(g, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if g.ndim != 1 or g.shape != r.shape:
        raise ShapeError("lsd_value expects matching single rows")
    return float(lsd_rows(model, g, r)[0])


def lsd_grad_logits(q, p):
    """d/dz_q of CE(softmax(z_q), p) per row, p constant."""
    return q - p


def lsd_feature_grad(model: Model, g, r) -> np.ndarray:
    """Gradient of the batch-mean LSD w.r.t. the clean features g (r fixed)."""
    g = as_matrix(g)
    p = softmax(model.classifier(g))
    z, caches = model.classifier.forward(perturb(g, as_matrix(r)))
    q = softmax(z)
    return model.classifier.backward(caches, lsd_grad_logits(q, p) / g.shape[0], accumulate=False)


def lsd_loss(model: Model, x, r, backward=False, entropy_weight=0.0) -> float:
    """Mean LSD over the batch x with fixed noise r, plus optional entropy term.

    With ``backward`` the gradient flows into generator parameters only; the
    classifier acts as a fixed function and its grads are left untouched.
    Returns the mean LSD (without the entropy term).
    """
    g, g_caches = model.generator.forward(x)
    z_clean, clean_caches = model.classifier.forward(g)
    p = softmax(z_clean)
    z_pert, pert_caches = model.classifier.forward(perturb(g, as_matrix(r)))
    q = softmax(z_pert)
    n = g.shape[0]
    loss = float(np.mean(cross_entropy(q, p)))
    if backward:
        dg = model.classifier.backward(pert_caches, lsd_grad_logits(q, p) / n, accumulate=False)
        if entropy_weight:
            dz_ent = entropy_weight * entropy_grad_logits(p) / n
            dg = dg + model.classifier.backward(clean_caches, dz_ent, accumulate=False)
        model.generator.backward(g_caches, dg)
    return loss
