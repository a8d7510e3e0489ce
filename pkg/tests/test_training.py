import io

import numpy as np
import pytest

from srda.data import Dataset, make_shifted_pair, standardize
from srda.errors import DivergedError, InvalidInput, ShapeError
from srda.metrics import emit_csv
from srda.model import ClassifierSpec, GeneratorSpec, Model, forward_features, source_loss
from srda.numeric import (
    Dense,
    LayeredNet,
    Param,
    cross_entropy,
    finite_diff_grad,
    make_rng,
    relative_error,
    softmax,
)
from srda.perturbation import NoisePlan, generate_noise, lsd_loss
from srda.training import TrainConfig, TrainState, step_smooth, step_source, train_schedule


def _moons(n=60, seed=0):
    s, t = make_shifted_pair("two-moons", n, rotate=30, seed=seed)
    return standardize(s, s), standardize(s, t)


def _model(seed=0):
    return Model.build(GeneratorSpec([2, 8, 4]), ClassifierSpec([4, 2]), seed=seed)


def _state(model, **kw):
    return TrainState.create(model, TrainConfig(**kw))


def test_config_validation():
    assert TrainConfig(plan=NoisePlan("fgsm")).lr_smooth == 1e-4
    assert TrainConfig(plan=NoisePlan("vat")).lr_smooth == 1e-3
    for kw in ({"epochs": -1}, {"batch_size": 0}, {"lr_source": 0.0}, {"entropy_weight": -1.0},
               {"optimizer": "rmsprop"}):
        with pytest.raises(InvalidInput):
            TrainConfig(**kw)


def test_source_step_zero_lr_keeps_params():
    m = _model()
    before = m.params.checksum()
    st = _state(m)
    x, y = np.ones((3, 2)), np.array([0, 1, 0])
    loss = step_source(st, x, y, 0.0)
    assert loss == source_loss(m, x, y)
    assert m.params.checksum() == before


def test_source_step_decreases_loss_on_separable_pair():
    gen = LayeredNet([Dense(Param("G.0.weight", np.eye(1)), Param("G.0.bias", np.zeros(1)))])
    clf = LayeredNet([Dense(Param("C.0.weight", np.array([[0.1, -0.1]])), Param("C.0.bias", np.zeros(2)))])
    m = Model(gen, clf)
    x, y = np.array([[1.0], [-1.0]]), np.array([0, 1])
    st = _state(m, optimizer="sgd")
    before = step_source(st, x, y, 0.1)
    assert source_loss(m, x, y) < before


def test_source_step_uses_backprop_gradient(rng):
    m = _model(3)
    x, y = rng.standard_normal((5, 2)), rng.integers(0, 2, 5)
    numeric = finite_diff_grad(lambda: source_loss(m, x, y), m.params)
    seen = {}

    class Spy:
        def step(self, lr):
            seen.update({p.name: p.grad.copy() for p in m.params})

    st = _state(m)
    st.source_opt = Spy()
    step_source(st, x, y, 1e-3)
    for p, g in zip(m.params, numeric):
        assert relative_error(seen[p.name], g) < 1e-5, p.name


@pytest.mark.parametrize("kind", ["isotropic", "fgsm", "vat"])
def test_smooth_step_freezes_classifier(kind, rng):
    m = _model(1)
    st = _state(m)
    before = m.classifier.param_store.checksum()
    gen_before = m.generator.param_store.checksum()
    step_smooth(st, rng.standard_normal((16, 2)), NoisePlan(kind), 1e-2)
    assert m.classifier.param_store.checksum() == before
    assert m.generator.param_store.checksum() != gen_before


def test_smooth_step_zero_lr_keeps_generator(rng):
    m = _model(1)
    before = m.params.checksum()
    step_smooth(_state(m), rng.standard_normal((8, 2)), NoisePlan(), 0.0)
    assert m.params.checksum() == before


def test_smooth_gradient_matches_finite_differences(rng):
    m = _model(2)
    for p in m.params:
        p.value += 0.1 * rng.standard_normal(p.value.shape)
    x = rng.standard_normal((6, 2))
    r, _ = generate_noise(m, forward_features(m, x), NoisePlan(), rng)
    gen = m.generator.param_store
    gen.zero_grads()
    lsd_loss(m, x, r, backward=True)
    analytic = [p.grad.copy() for p in gen]

    # the clean prediction is a constant of the smoothing objective
    p0 = softmax(m.classifier(forward_features(m, x)))

    def fixed():
        g = forward_features(m, x)
        return float(np.mean(cross_entropy(softmax(m.classifier(g + r)), p0)))

    for a, b in zip(analytic, finite_diff_grad(fixed, gen)):
        assert relative_error(a, b) < 1e-5


def test_repeated_smoothing_lowers_lsd():
    rng = make_rng(4)
    m = _model(4)
    x = rng.standard_normal((32, 2))
    st = _state(m, plan=NoisePlan())
    r, _ = generate_noise(m, forward_features(m, x), NoisePlan(), make_rng(0))
    start = lsd_loss(m, x, r)
    for _ in range(20):
        step_smooth(st, x, NoisePlan(), 1e-3)
    assert lsd_loss(m, x, r) < start


def test_zero_epochs_returns_identical_model():
    s, t = _moons()
    m = _model()
    st = train_schedule(m, s, t, TrainConfig(epochs=0))
    assert st.model.params.checksum() == m.params.checksum()
    assert st.history == [] and st.step == 0


def test_schedule_is_deterministic():
    s, t = _moons()

    def run():
        st = train_schedule(_model(), s, t, TrainConfig(epochs=3, batch_size=16, plan=NoisePlan("vat"), seed=5))
        buf = io.StringIO()
        emit_csv(st.history, buf)
        return buf.getvalue(), st.model.params.checksum()

    assert run() == run()


def test_schedule_step_order_and_counts():
    s, t = _moons(50)
    st = train_schedule(_model(), s, t, TrainConfig(epochs=2, batch_size=16))
    iters = 4  # ceil(50 / 16)
    assert st.step == 2 * iters
    assert [k for k, _ in st.step_log] == ["source", "smooth"] * (2 * iters)
    for (k1, s1), (k2, s2) in zip(st.step_log[::2], st.step_log[1::2]):
        assert s1 == s2
    assert [h.epoch for h in st.history] == [1, 2]
    assert [h.step for h in st.history] == [iters, 2 * iters]


def test_source_only_and_warmup_skip_smoothing():
    s, t = _moons(40)
    st = train_schedule(_model(), s, t, TrainConfig(epochs=1, batch_size=20, plan=None))
    assert {k for k, _ in st.step_log} == {"source"}
    st = train_schedule(_model(), s, t, TrainConfig(epochs=2, batch_size=20, warmup_epochs=1))
    assert [k for k, _ in st.step_log] == ["source", "source", "source", "smooth", "source", "smooth"]


def test_eval_every_keeps_final_record():
    s, t = _moons(40)
    st = train_schedule(_model(), s, t, TrainConfig(epochs=5, batch_size=40, eval_every=2))
    assert [h.epoch for h in st.history] == [2, 4, 5]


def test_entropy_on_source_step_runs():
    s, t = _moons(40)
    st = train_schedule(_model(), s, t, TrainConfig(epochs=1, batch_size=20, entropy_weight=0.1,
                                                    entropy_step="source"))
    assert st.step == 2


def test_divergence_reports_step():
    s, t = _moons(40)

    def poison(kind, state):
        if state.step == 3 and kind == "source":
            state.model.params["G.0.weight"].value[0, 0] = np.inf

    with pytest.raises(DivergedError) as err:
        train_schedule(_model(), s, t, TrainConfig(epochs=2, batch_size=10), hook=poison)
    assert err.value.step == 3


def test_schedule_rejects_mismatched_data():
    s, t = _moons(20)
    with pytest.raises(ShapeError):
        train_schedule(Model.build(GeneratorSpec([3, 4]), ClassifierSpec([4, 2])), s, t, TrainConfig(epochs=1))
    with pytest.raises(InvalidInput):
        train_schedule(_model(), s.unlabeled(), t, TrainConfig(epochs=1))
    with pytest.raises(ShapeError):
        bad = Dataset(s.features, s.labels, num_classes=3)
        train_schedule(_model(), bad, t, TrainConfig(epochs=1))
