"""Dense float64 primitives: softmax/cross-entropy, affine+activation layers with
explicit backward passes, parameter storage, optimizers and a finite-difference
gradient oracle.

Row-wise results never depend on which other rows share the batch: the affine
map and its input gradient go through ``einsum`` (no BLAS gemm/gemv switch) and
every reduction runs along the last axis.  Batched evaluation and a per-sample
loop therefore agree bit for bit.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergedError, InvalidInput, ShapeError, ZeroNorm

DTYPE = np.float64
PROB_FLOOR = 1e-12
NORM_FLOOR = 1e-12
ACTIVATIONS = ("identity", "relu")


def make_rng(seed) -> np.random.Generator:
    """Seeded PCG64 generator.  ``seed`` may be an int or a sequence of ints."""
    return np.random.Generator(np.random.PCG64(seed))


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=DTYPE)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def row_norms(a: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(a * a, axis=-1))


def softmax(logits) -> np.ndarray:
    """Softmax along the last axis with max-subtraction."""
    z = np.asarray(logits, dtype=DTYPE)
    if not np.all(np.isfinite(z)):
        raise InvalidInput("softmax received non-finite logits")
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def cross_entropy(q, p) -> np.ndarray | float:
    """D(q, p) = -sum_k p_k log q_k along the last axis.

    ``p`` is the reference distribution and is treated as a constant.  Returns
    a float for 1-D inputs and a per-row array otherwise.
    """
    q = np.asarray(q, dtype=DTYPE)
    p = np.asarray(p, dtype=DTYPE)
    if q.shape != p.shape:
        raise ShapeError(f"cross_entropy shape mismatch {q.shape} vs {p.shape}")
    out = -np.sum(p * np.log(np.maximum(q, PROB_FLOOR)), axis=-1)
    # -0.0 -> 0.0 so one-hot matches compare cleanly
    out = out + 0.0
    return float(out) if out.ndim == 0 else out


def entropy(p) -> np.ndarray | float:
    return cross_entropy(p, p)


def l2_normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=DTYPE)
    if not np.all(np.isfinite(v)):
        raise InvalidInput("cannot normalize a non-finite vector")
    if v.ndim != 1:
        raise ShapeError("l2_normalize expects a vector")
    n = float(row_norms(v))
    if n < NORM_FLOOR:
        raise ZeroNorm(f"vector norm {n:.3g} is below {NORM_FLOOR}")
    return v / n


# --------------------------------------------------------------------------- #
# parameters


@dataclass(eq=False)
class Param:
    """One named parameter segment: values and a same-shaped gradient buffer."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=DTYPE)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape


class ParamStore:
    """Ordered collection of :class:`Param` segments.

    The store holds references: layers and the store share the same arrays, so
    in-place updates made through either are visible to both.
    """

    def __init__(self, params):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise InvalidInput(f"duplicate parameter names in {names}")

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def __getitem__(self, name: str) -> Param:
        for p in self.params:
            if p.name == name:
                return p
        raise KeyError(name)

    def __add__(self, other: "ParamStore") -> "ParamStore":
        return ParamStore(self.params + other.params)

    @property
    def names(self):
        return [p.name for p in self.params]

    def zero_grads(self):
        for p in self.params:
            p.grad[...] = 0.0

    def values(self):
        return [p.value.copy() for p in self.params]

    def grads(self):
        return [p.grad.copy() for p in self.params]

    def load_values(self, values):
        if len(values) != len(self.params):
            raise ShapeError("segment count mismatch")
        for p, v in zip(self.params, values):
            v = np.asarray(v, dtype=DTYPE)
            if v.shape != p.value.shape:
                raise ShapeError(f"{p.name}: shape {v.shape} != {p.value.shape}")
            p.value[...] = v

    def checksum(self, include_grads=False) -> str:
        h = hashlib.sha256()
        for p in self.params:
            h.update(p.name.encode())
            h.update(p.value.tobytes())
            if include_grads:
                h.update(p.grad.tobytes())
        return h.hexdigest()


# --------------------------------------------------------------------------- #
# layers


def affine(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("ij,jk->ik", x, w) + b


@dataclass
class LayerCache:
    x: np.ndarray
    pre: np.ndarray


class Dense:
    """Affine map followed by an elementwise activation: act(x W + b)."""

    def __init__(self, weight: Param, bias: Param, activation="identity"):
        if activation not in ACTIVATIONS:
            raise InvalidInput(f"unknown activation {activation!r}")
        if weight.value.ndim != 2 or bias.value.shape != (weight.value.shape[1],):
            raise ShapeError("bias length must equal weight output width")
        self.weight = weight
        self.bias = bias
        self.activation = activation

    @classmethod
    def init(cls, name, n_in, n_out, activation, rng):
        # He-normal weights, zero bias
        # uniform fan-in init for weights and biases (the usual framework default)
        bound = 1.0 / np.sqrt(n_in)
        w = rng.uniform(-bound, bound, (n_in, n_out))
        b = rng.uniform(-bound, bound, n_out)
        return cls(Param(f"{name}.weight", w), Param(f"{name}.bias", b), activation)

    @property
    def n_in(self):
        return self.weight.value.shape[0]

    @property
    def n_out(self):
        return self.weight.value.shape[1]

    @property
    def params(self):
        return [self.weight, self.bias]

    def forward(self, x):
        x = as_matrix(x)
        if x.shape[1] != self.n_in:
            raise ShapeError(f"{self.weight.name}: input width {x.shape[1]} != {self.n_in}")
        pre = affine(x, self.weight.value, self.bias.value)
        out = np.maximum(pre, 0.0) if self.activation == "relu" else pre
        return out, LayerCache(x, pre)

    def backward(self, cache: LayerCache, upstream, accumulate=True):
        """Return the input gradient; add parameter gradients when ``accumulate``."""
        upstream = as_matrix(upstream)
        if upstream.shape != cache.pre.shape:
            raise ShapeError(f"upstream shape {upstream.shape} != output shape {cache.pre.shape}")
        d_pre = upstream * (cache.pre > 0.0) if self.activation == "relu" else upstream
        if accumulate:
            self.weight.grad += cache.x.T @ d_pre
            self.bias.grad += d_pre.sum(axis=0)
        return np.einsum("ik,jk->ij", d_pre, self.weight.value)


def layer_forward(layer: Dense, x):
    return layer.forward(x)


def layer_backward(layer: Dense, cache: LayerCache, upstream, accumulate=True):
    return layer.backward(cache, upstream, accumulate=accumulate)


class LayeredNet:
    """An ordered stack of :class:`Dense` layers."""

    def __init__(self, layers):
        layers = list(layers)
        if not layers:
            raise InvalidInput("a LayeredNet needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.n_out != b.n_in:
                raise ShapeError(f"layer widths do not chain: {a.n_out} -> {b.n_in}")
        self.layers = layers
        self.param_store = ParamStore(p for layer in layers for p in layer.params)

    @classmethod
    def build(cls, name, widths, rng, hidden="relu", output="identity"):
        widths = list(widths)
        if len(widths) < 2 or min(widths) < 1:
            raise InvalidInput(f"invalid layer widths {widths}")
        n = len(widths) - 1
        layers = [
            Dense.init(f"{name}.{i}", widths[i], widths[i + 1], hidden if i < n - 1 else output, rng)
            for i in range(n)
        ]
        return cls(layers)

    @property
    def widths(self):
        return [self.layers[0].n_in] + [layer.n_out for layer in self.layers]

    @property
    def activations(self):
        return [layer.activation for layer in self.layers]

    def forward(self, x):
        caches = []
        out = as_matrix(x)
        for layer in self.layers:
            out, cache = layer.forward(out)
            caches.append(cache)
        return out, caches

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, caches, upstream, accumulate=True):
        grad = upstream
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            grad = layer.backward(cache, grad, accumulate=accumulate)
        return grad


# --------------------------------------------------------------------------- #
# gradient oracle and optimizers


def finite_diff_grad(loss_fn, params: ParamStore, h=1e-5):
    """Central-difference gradient of ``loss_fn()`` w.r.t. every entry of ``params``.

    ``loss_fn`` takes no arguments and reads the parameters in place.  Values are
    restored exactly after each probe.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = loss_fn()
            flat[i] = orig - h
            f_minus = loss_fn()
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * h)
        grads.append(g)
    return grads


def finite_diff_input_grad(loss_fn, x: np.ndarray, h=1e-5):
    """Central-difference gradient of ``loss_fn(x)`` w.r.t. the array ``x``."""
    x = np.array(x, dtype=DTYPE)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = loss_fn(x)
        flat[i] = orig - h
        f_minus = loss_fn(x)
        flat[i] = orig
        g.reshape(-1)[i] = (f_plus - f_minus) / (2.0 * h)
    return g


def relative_error(a, b, floor=1e-8) -> float:
    """||a - b|| / max(||a||, ||b||, floor)."""
    a = np.asarray(a, dtype=DTYPE).reshape(-1)
    b = np.asarray(b, dtype=DTYPE).reshape(-1)
    denom = max(float(np.sqrt(a @ a)), float(np.sqrt(b @ b)), floor)
    d = a - b
    return float(np.sqrt(d @ d)) / denom


class Optimizer:
    """Plain SGD or Adam over a fixed :class:`ParamStore`.

    Adam uses beta1=0.9, beta2=0.999, eps=1e-8 with bias correction.  Moment
    buffers live on the optimizer, so two optimizers over overlapping stores
    keep independent state.
    """

    def __init__(self, params: ParamStore, kind="adam", beta1=0.9, beta2=0.999, eps=1e-8):
        if kind not in ("sgd", "adam"):
            raise InvalidInput(f"unknown optimizer {kind!r}")
        self.params = params
        self.kind = kind
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]

    def step(self, lr: float):
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise DivergedError(f"non-finite gradient in {p.name}")
        self.t += 1
        if self.kind == "sgd":
            for p in self.params:
                p.value -= lr * p.grad
            return
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * (p.grad * p.grad)
            p.value -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def optimizer_step(optimizer: Optimizer, lr: float):
    optimizer.step(lr)
