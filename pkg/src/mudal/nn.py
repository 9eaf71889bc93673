"""Minimal dense-network engine in float64 NumPy.

Provides exactly what the rest of the package needs: dense layers with a
handful of activations, an explicit forward/backward pass that also returns
input gradients (required to chain gradients into an upstream encoder and to
flip the sign of adversarial updates), an Adam optimizer over flat parameter
lists, weighted softmax/sigmoid cross-entropy losses, and a central
finite-difference gradient checker used as the test oracle.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "leaky_relu", "sigmoid", "identity")
LEAKY_SLOPE = 0.01


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "leaky_relu":
        return np.where(z > 0.0, z, LEAKY_SLOPE * z)
    if kind == "sigmoid":
        return _sigmoid(z)
    if kind == "identity":
        return z
    raise ValueError(f"unknown activation {kind!r}")


def _activation_grad(z: np.ndarray, post: np.ndarray, kind: str) -> np.ndarray:
    # Derivative with respect to the pre-activation. The subgradient of relu
    # at 0 is taken as 0; leaky_relu uses its negative-side slope there.
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    if kind == "leaky_relu":
        return np.where(z > 0.0, 1.0, LEAKY_SLOPE)
    if kind == "sigmoid":
        return post * (1.0 - post)
    if kind == "identity":
        return np.ones_like(z)
    raise ValueError(f"unknown activation {kind!r}")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class Layer:
    """One dense layer: weight (out, in), bias (out,), activation tag.

    ``version`` increments on every in-place parameter update so a forward
    trace can detect that it has gone stale.
    """

    __slots__ = ("W", "b", "activation", "version")

    def __init__(self, W: np.ndarray, b: np.ndarray, activation: str = "identity"):
        W = np.array(W, dtype=np.float64)
        b = np.array(b, dtype=np.float64)
        if W.ndim != 2 or b.ndim != 1 or b.shape[0] != W.shape[0]:
            raise ValueError(f"layer shapes inconsistent: W {W.shape}, b {b.shape}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.W = W
        self.b = b
        self.activation = activation
        self.version = 0

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]

    def bump(self) -> None:
        self.version += 1

    @classmethod
    def random(cls, in_dim: int, out_dim: int, activation: str, rng: np.random.Generator) -> "Layer":
        # He-style scaling for the rectified activations, Glorot otherwise.
        if activation in ("relu", "leaky_relu"):
            scale = np.sqrt(2.0 / in_dim)
        else:
            scale = np.sqrt(1.0 / in_dim)
        W = rng.standard_normal((out_dim, in_dim)) * scale
        b = np.zeros(out_dim)
        return cls(W, b, activation)


@dataclass
class Batch:
    """A minibatch: features (B, D) plus optional labels, domain ids, weights."""

    features: np.ndarray
    labels: np.ndarray | None = None
    domain_ids: np.ndarray | None = None
    weights: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"features must be (B>=1, D), got {self.features.shape}")
        b = self.features.shape[0]
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (b,):
                raise ValueError("labels must be shape (B,)")
        if self.domain_ids is not None:
            self.domain_ids = np.asarray(self.domain_ids, dtype=np.int64)
            if self.domain_ids.shape != (b,):
                raise ValueError("domain_ids must be shape (B,)")
        if self.weights is None:
            self.weights = np.ones(b)
        else:
            self.weights = np.asarray(self.weights, dtype=np.float64)
            if self.weights.shape != (b,):
                raise ValueError("weights must be shape (B,)")
            if not np.all(np.isfinite(self.weights)) or np.any(self.weights < 0):
                raise ValueError("weights must be finite and nonnegative")

    @property
    def size(self) -> int:
        return self.features.shape[0]


@dataclass
class ActivationTrace:
    """Everything forward() saw, sufficient for an exact backward pass."""

    net: "DenseNet"
    inputs: list[np.ndarray]   # input to each layer
    pre: list[np.ndarray]      # pre-activations per layer
    post: list[np.ndarray]     # post-activations per layer
    versions: tuple[int, ...]

    @property
    def output(self) -> np.ndarray:
        return self.post[-1]


@dataclass
class Gradients:
    """Per-parameter gradients aligned with net.param_arrays(), plus d(loss)/d(input)."""

    params: list[np.ndarray]
    input: np.ndarray


class DenseNet:
    """A stack of dense layers. Layer objects may be shared between nets;
    composing nets that reuse layers (e.g. a shared classifier trunk) is the
    intended way to express parameter tying."""

    def __init__(self, layers: list[Layer]):
        if not layers:
            raise ValueError("a DenseNet needs at least one layer")
        for a, bnext in zip(layers, layers[1:]):
            if a.out_dim != bnext.in_dim:
                raise ValueError(
                    f"layer dimensions do not chain: {a.out_dim} -> {bnext.in_dim}"
                )
        self.layers = list(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @classmethod
    def create(cls, dims: list[int], activations: list[str], rng: np.random.Generator) -> "DenseNet":
        if len(dims) < 2 or len(activations) != len(dims) - 1:
            raise ValueError("need dims [d0..dL] and one activation per layer")
        layers = [
            Layer.random(dims[k], dims[k + 1], activations[k], rng)
            for k in range(len(dims) - 1)
        ]
        return cls(layers)

    def param_arrays(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for layer in self.layers:
            out.append(layer.W)
            out.append(layer.b)
        return out

    def versions(self) -> tuple[int, ...]:
        return tuple(layer.version for layer in self.layers)

    def bump_versions(self) -> None:
        for layer in self.layers:
            layer.bump()

    def forward(self, batch: Batch | np.ndarray) -> ActivationTrace:
        x = batch.features if isinstance(batch, Batch) else np.asarray(batch, dtype=np.float64)
        if x.ndim != 2:
            raise ValueError(f"expected (B, D) features, got shape {x.shape}")
        if x.shape[1] != self.input_dim:
            raise ValueError(
                f"feature dim {x.shape[1]} does not match net input dim {self.input_dim}"
            )
        inputs, pre, post = [], [], []
        for layer in self.layers:
            inputs.append(x)
            z = x @ layer.W.T + layer.b
            a = _activate(z, layer.activation)
            pre.append(z)
            post.append(a)
            x = a
        if not np.all(np.isfinite(x)):
            raise FloatingPointError("non-finite values in forward output")
        return ActivationTrace(self, inputs, pre, post, self.versions())

    def backward(self, trace: ActivationTrace, output_grad: np.ndarray) -> Gradients:
        if trace.net is not self:
            raise ValueError("trace was produced by a different net")
        if trace.versions != self.versions():
            raise ValueError("stale trace: parameters changed since forward()")
        delta = np.asarray(output_grad, dtype=np.float64)
        if delta.shape != trace.output.shape:
            raise ValueError(
                f"output_grad shape {delta.shape} != output shape {trace.output.shape}"
            )
        grads: list[np.ndarray] = [np.empty(0)] * (2 * len(self.layers))
        for k in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[k]
            dz = delta * _activation_grad(trace.pre[k], trace.post[k], layer.activation)
            grads[2 * k] = dz.T @ trace.inputs[k]
            grads[2 * k + 1] = dz.sum(axis=0)
            delta = dz @ layer.W
        return Gradients(params=grads, input=delta)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x).output


@dataclass
class AdamState:
    """First/second moment accumulators mirroring a flat parameter list."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: list[np.ndarray], beta1: float = 0.9, beta2: float = 0.999,
             eps: float = 1e-8) -> "AdamState":
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            beta1=beta1, beta2=beta2, eps=eps,
        )


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState,
              lr: float) -> None:
    """Apply one bias-corrected Adam update in place and advance the step counter."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params/grads/state length mismatch")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {p.shape} vs grad {g.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("NaN/Inf in gradients; aborting optimizer step")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class ParamSet:
    """An ordered, de-duplicated collection of layers updated together."""

    def __init__(self, layers: list[Layer]):
        seen: dict[int, Layer] = {}
        for layer in layers:
            seen.setdefault(id(layer), layer)
        self.layers = list(seen.values())

    def params(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for layer in self.layers:
            out.append(layer.W)
            out.append(layer.b)
        return out

    def zero_grads(self) -> list[np.ndarray]:
        return [np.zeros_like(p) for p in self.params()]

    def grads_from(self, by_layer: dict[Layer, tuple[np.ndarray, np.ndarray]]) -> list[np.ndarray]:
        flat = self.zero_grads()
        for k, layer in enumerate(self.layers):
            if layer in by_layer:
                dw, db = by_layer[layer]
                flat[2 * k] += dw
                flat[2 * k + 1] += db
        return flat

    def step(self, grads: list[np.ndarray], state: AdamState, lr: float) -> None:
        adam_step(self.params(), grads, state, lr)
        for layer in self.layers:
            layer.bump()


def accumulate_layer_grads(acc: dict[Layer, tuple[np.ndarray, np.ndarray]],
                           net: DenseNet, grads: Gradients, scale: float = 1.0) -> None:
    """Add a net's Gradients into a per-layer accumulator (handles shared layers)."""
    for k, layer in enumerate(net.layers):
        dw = scale * grads.params[2 * k]
        db = scale * grads.params[2 * k + 1]
        if layer in acc:
            odw, odb = acc[layer]
            acc[layer] = (odw + dw, odb + db)
        else:
            acc[layer] = (dw, db)


def softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Stable softmax over the last axis at a temperature."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    scaled = np.asarray(logits, dtype=np.float64) / temperature
    shifted = scaled - scaled.max(axis=-1, keepdims=True)
    expz = np.exp(shifted)
    return expz / expz.sum(axis=-1, keepdims=True)


def softmax_ce(logits: np.ndarray, labels: np.ndarray, temperature: float = 1.0,
               weights: np.ndarray | None = None) -> tuple[float, np.ndarray, np.ndarray]:
    """Weighted-mean softmax cross-entropy at a temperature.

    Returns (loss, dloss/dlogits, probabilities). The loss is
    sum_b w_b * CE_b / sum_b w_b with CE computed on logits / temperature,
    so the gradient rows are w_b * (p_b - onehot_b) / (T * sum w).
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    b, c = logits.shape
    if labels.shape != (b,):
        raise ValueError("labels must be shape (B,)")
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValueError("labels out of range")
    if weights is None:
        weights = np.ones(b)
    else:
        weights = np.asarray(weights, dtype=np.float64)
    wsum = weights.sum()
    if wsum <= 0:
        raise ValueError("weights must not all be zero")

    scaled = logits / temperature
    shifted = scaled - scaled.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    denom = expz.sum(axis=1)
    probs = expz / denom[:, None]
    # log-sum-exp form keeps the per-sample CE finite even for extreme logits
    ce = np.log(denom) - shifted[np.arange(b), labels]
    loss = float((weights * ce).sum() / wsum)

    onehot = np.zeros_like(probs)
    onehot[np.arange(b), labels] = 1.0
    dlogits = (weights / (wsum * temperature))[:, None] * (probs - onehot)
    return loss, dlogits, probs


def sigmoid_bce(logits: np.ndarray, targets: np.ndarray,
                weights: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Weighted-mean binary cross-entropy on logits. Returns (loss, dloss/dlogits)."""
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if z.shape != t.shape:
        raise ValueError("logit/target shape mismatch")
    if np.any((t != 0.0) & (t != 1.0)):
        raise ValueError("targets must be 0 or 1")
    if weights is None:
        weights = np.ones_like(z)
    else:
        weights = np.asarray(weights, dtype=np.float64).reshape(-1)
        if weights.shape != z.shape:
            raise ValueError("weights shape mismatch")
    wsum = weights.sum()
    if wsum <= 0:
        raise ValueError("weights must not all be zero")
    # max(z,0) - z*t + log(1 + exp(-|z|)) is the overflow-safe BCE
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    loss = float((weights * per).sum() / wsum)
    dlogits = weights * (_sigmoid(z) - t) / wsum
    return loss, dlogits


def grad_check(net: DenseNet, features: np.ndarray, loss_fn, eps: float = 1e-6) -> float:
    """Max relative error between analytic parameter gradients and central
    finite differences. ``loss_fn`` maps the net output to (scalar, dloss/doutput).
    """
    features = np.asarray(features, dtype=np.float64)
    trace = net.forward(features)
    _, dout = loss_fn(trace.output)
    analytic = net.backward(trace, dout).params

    def loss_at() -> float:
        value, _ = loss_fn(net.forward(features).output)
        return value

    worst = 0.0
    params = net.param_arrays()
    for p, g in zip(params, analytic):
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + eps
            up = loss_at()
            flat_p[i] = orig - eps
            down = loss_at()
            flat_p[i] = orig
            fd = (up - down) / (2.0 * eps)
            denom = max(abs(flat_g[i]), abs(fd), 1e-12)
            worst = max(worst, abs(flat_g[i] - fd) / denom)
    return worst
