"""Feature generator + classifier composition, supervised losses and checkpoints."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError, InvalidInput, InvalidLabel, ShapeError
from .numeric import PROB_FLOOR, Dense, LayeredNet, Param, ParamStore, as_matrix, make_rng, softmax

CHECKPOINT_FORMAT = "srda-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class GeneratorSpec:
    """Widths from input dim to feature dim; ReLU hidden, identity output."""

    widths: tuple

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise InvalidInput(f"generator needs >= 1 layer with positive widths, got {self.widths}")


@dataclass(frozen=True)
class ClassifierSpec:
    """Widths from feature dim to K logits."""

    widths: tuple

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise InvalidInput(f"classifier needs >= 1 layer with positive widths, got {self.widths}")
        if self.widths[-1] < 2:
            raise InvalidInput("classifier must output at least 2 classes")


class Model:
    def __init__(self, generator: LayeredNet, classifier: LayeredNet):
        if generator.widths[-1] != classifier.widths[0]:
            raise ShapeError(
                f"generator output width {generator.widths[-1]} != classifier input width {classifier.widths[0]}"
            )
        self.generator = generator
        self.classifier = classifier

    @classmethod
    def build(cls, gen_spec: GeneratorSpec, clf_spec: ClassifierSpec, rng=None, seed=0):
        rng = make_rng(seed) if rng is None else rng
        return cls(
            LayeredNet.build("G", gen_spec.widths, rng),
            LayeredNet.build("C", clf_spec.widths, rng),
        )

    @property
    def input_dim(self):
        return self.generator.widths[0]

    @property
    def feature_dim(self):
        return self.generator.widths[-1]

    @property
    def num_classes(self):
        return self.classifier.widths[-1]

    @property
    def params(self) -> ParamStore:
        return self.generator.param_store + self.classifier.param_store

    def copy(self) -> "Model":
        return copy.deepcopy(self)


# --------------------------------------------------------------------------- #
# forward passes


def forward_features(model: Model, x):
    return model.generator(x)


def classify(model: Model, g):
    return softmax(model.classifier(g))


def predict_from_probs(probs) -> np.ndarray:
    # np.argmax returns the first maximum, which is the lowest-index tie rule
    return np.argmax(as_matrix(probs), axis=1)


def predict_labels(model: Model, x) -> np.ndarray:
    return predict_from_probs(classify(model, forward_features(model, x)))


# --------------------------------------------------------------------------- #
# losses; each optionally backpropagates and accumulates into parameter grads


def _check_labels(y, n, k):
    y = np.asarray(y)
    if y.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise InvalidLabel("labels must be integers")
        y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= k):
        raise InvalidLabel(f"labels must lie in [0, {k})")
    return y


def source_loss(model: Model, x, y, backward=False) -> float:
    """Mean negative log-probability of the true class over the batch."""
    g, g_caches = model.generator.forward(x)
    z, c_caches = model.classifier.forward(g)
    n, k = z.shape
    y = _check_labels(y, n, k)
    p = softmax(z)
    rows = np.arange(n)
    loss = float(-np.mean(np.log(np.maximum(p[rows, y], PROB_FLOOR))))
    if backward:
        dz = p.copy()
        dz[rows, y] -= 1.0
        dz /= n
        dg = model.classifier.backward(c_caches, dz)
        model.generator.backward(g_caches, dg)
    return loss


def entropy_grad_logits(p: np.ndarray) -> np.ndarray:
    """d/dz of the per-row Shannon entropy of p = softmax(z)."""
    logp = np.log(np.maximum(p, PROB_FLOOR))
    h = -np.sum(p * logp, axis=1, keepdims=True)
    return -p * (logp + h)


def entropy_loss(model: Model, x, backward=False, weight=1.0) -> float:
    """Mean Shannon entropy of the predicted class distributions.

    ``weight`` scales only the accumulated gradients, not the returned value.
    """
    g, g_caches = model.generator.forward(x)
    z, c_caches = model.classifier.forward(g)
    p = softmax(z)
    logp = np.log(np.maximum(p, PROB_FLOOR))
    loss = float(np.mean(-np.sum(p * logp, axis=1))) + 0.0
    if backward:
        dz = weight * entropy_grad_logits(p) / z.shape[0]
        dg = model.classifier.backward(c_caches, dz)
        model.generator.backward(g_caches, dg)
    return loss


# --------------------------------------------------------------------------- #
# checkpoints
#
# JSON document; every float is written with float.hex() so a write/read round
# trip is bit-exact and the bytes depend only on the parameter values.


def _hex_list(a):
    return [float(v).hex() for v in np.asarray(a, dtype=np.float64).reshape(-1)]


def _from_hex(items, shape):
    return np.array([float.fromhex(s) for s in items], dtype=np.float64).reshape(shape)


def checkpoint_dict(model: Model, preprocess=None) -> dict:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "generator": {"widths": model.generator.widths, "activations": model.generator.activations},
        "classifier": {"widths": model.classifier.widths, "activations": model.classifier.activations},
        "segments": [
            {"name": p.name, "shape": list(p.value.shape), "values": _hex_list(p.value)}
            for p in model.params
        ],
    }
    if preprocess is not None:
        doc["preprocess"] = {k: _hex_list(v) for k, v in preprocess.items()}
    return doc


def dumps_checkpoint(model: Model, preprocess=None) -> str:
    return json.dumps(checkpoint_dict(model, preprocess), indent=1) + "\n"


def save_checkpoint(model: Model, path, preprocess=None):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_checkpoint(model, preprocess))


def _net_from_doc(name, block, segments):
    widths = block["widths"]
    acts = block["activations"]
    if len(acts) != len(widths) - 1:
        raise CheckpointError(f"{name}: activation count does not match widths")
    layers = []
    for i, act in enumerate(acts):
        w_seg = segments.pop(f"{name}.{i}.weight", None)
        b_seg = segments.pop(f"{name}.{i}.bias", None)
        if w_seg is None or b_seg is None:
            raise CheckpointError(f"missing segment for {name}.{i}")
        w = _from_hex(w_seg["values"], w_seg["shape"])
        b = _from_hex(b_seg["values"], b_seg["shape"])
        if w.shape != (widths[i], widths[i + 1]) or b.shape != (widths[i + 1],):
            raise CheckpointError(f"{name}.{i}: segment shape disagrees with widths")
        layers.append(Dense(Param(f"{name}.{i}.weight", w), Param(f"{name}.{i}.bias", b), act))
    return LayeredNet(layers)


def loads_checkpoint(text: str):
    """Parse a checkpoint document; returns ``(model, preprocess_or_None)``."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"checkpoint is not valid JSON: {e}") from e
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError("not an srda checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')}")
    try:
        segments = {s["name"]: s for s in doc["segments"]}
        gen = _net_from_doc("G", doc["generator"], segments)
        clf = _net_from_doc("C", doc["classifier"], segments)
        pre = doc.get("preprocess")
        if pre is not None:
            pre = {k: np.array([float.fromhex(s) for s in v]) for k, v in pre.items()}
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, CheckpointError):
            raise
        raise CheckpointError(f"malformed checkpoint: {e}") from e
    if segments:
        raise CheckpointError(f"unexpected segments {sorted(segments)}")
    return Model(gen, clf), pre


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        return loads_checkpoint(fh.read())
