"""Backprop vs central finite differences for every training loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Model, entropy_loss, source_loss
from .numeric import (
    LayeredNet,
    cross_entropy,
    finite_diff_grad,
    finite_diff_input_grad,
    make_rng,
    relative_error,
    softmax,
)
from .perturbation import isotropic_rows, lsd_feature_grad, lsd_loss

LOSSES = ("source_loss", "entropy_loss", "lsd_value")
DEFAULT_TOL = 1e-4


@dataclass
class LossCheck:
    loss: str
    max_rel_error: float
    worst_segment: str


def random_model(rng, max_width=8) -> Model:
    """Generator with 3 layers and a 1-2 layer classifier, widths <= max_width."""
    gen_widths = [int(w) for w in rng.integers(2, max_width + 1, size=4)]
    n_clf = int(rng.integers(1, 3))
    clf_widths = [gen_widths[-1]] + [int(w) for w in rng.integers(2, max_width + 1, size=n_clf)]
    model = Model(LayeredNet.build("G", gen_widths, rng), LayeredNet.build("C", clf_widths, rng))
    # push pre-activations off the ReLU kink so central differences stay smooth
    for p in model.params:
        p.value += 0.1 * rng.standard_normal(p.value.shape)
    return model


def _worst(names, analytic, numeric):
    errs = [relative_error(a, b) for a, b in zip(analytic, numeric)]
    i = int(np.argmax(errs))
    return errs[i], names[i]


def check_model(seed, h=1e-5, corrupt=None) -> list[LossCheck]:
    """Run the three gradient checks on one random model.

    ``corrupt`` names a parameter segment whose analytic gradient is scaled by
    1.5 before comparison; it exists only as a negative control.
    """
    rng = make_rng([seed, 7])
    model = random_model(rng)
    params = model.params
    gen = model.generator.param_store
    n = 5
    x = rng.standard_normal((n, model.input_dim))
    y = rng.integers(0, model.num_classes, n)
    r = isotropic_rows(n, model.feature_dim, 0.5, rng)

    def spoil(store, grads):
        if corrupt is not None and corrupt in store.names:
            grads[store.names.index(corrupt)] *= 1.5
        return grads

    results = []

    params.zero_grads()
    source_loss(model, x, y, backward=True)
    analytic = spoil(params, params.grads())
    numeric = finite_diff_grad(lambda: source_loss(model, x, y), params, h)
    results.append(LossCheck("source_loss", *_worst(params.names, analytic, numeric)))

    params.zero_grads()
    entropy_loss(model, x, backward=True)
    analytic = spoil(params, params.grads())
    numeric = finite_diff_grad(lambda: entropy_loss(model, x), params, h)
    results.append(LossCheck("entropy_loss", *_worst(params.names, analytic, numeric)))

    # the clean prediction is a constant in the LSD gradient, so the numeric
    # side freezes it at the unperturbed parameters
    g0 = model.generator(x)
    p0 = softmax(model.classifier(g0))

    def lsd_fixed_ref():
        q = softmax(model.classifier(model.generator(x) + r))
        return float(np.mean(cross_entropy(q, p0)))

    params.zero_grads()
    lsd_loss(model, x, r, backward=True)
    analytic = spoil(gen, gen.grads())
    numeric = finite_diff_grad(lsd_fixed_ref, gen, h)
    analytic.append(lsd_feature_grad(model, g0, r))
    numeric.append(finite_diff_input_grad(
        lambda g: float(np.mean(cross_entropy(softmax(model.classifier(g + r)), p0))), g0, h))
    results.append(LossCheck("lsd_value", *_worst(gen.names + ["features"], analytic, numeric)))
    params.zero_grads()
    return results


def run_gradcheck(seeds=range(10), h=1e-5, corrupt=None) -> dict:
    """Max relative error per loss over all seeds: {loss: LossCheck}."""
    worst = {}
    for seed in seeds:
        for chk in check_model(seed, h, corrupt):
            if chk.loss not in worst or chk.max_rel_error > worst[chk.loss].max_rel_error:
                worst[chk.loss] = chk
    return worst
