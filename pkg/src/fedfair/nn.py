"""Dense numeric core: softmax regression / small MLP with manual backprop.

Everything is float64 numpy. Models are plain lists of (weight, bias) pairs
so that server-side aggregation is ordinary linear algebra over parameters.
Hidden layers use ReLU; the output layer emits raw logits and losses go
through a numerically stable softmax + cross entropy.

All functions are pure with respect to their inputs except `optimizer_step`,
which advances the optimizer state it is given (each client owns its state,
so concurrent training of distinct clients stays safe).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, TrainingDivergedError, ValidationError
from .rng import INIT, substream

# Probabilities are clamped here before any log so a confident wrong
# prediction yields a large finite loss instead of inf.
PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class ModelSpec:
    """Architecture: input_dim -> hidden_dims (ReLU) -> num_classes logits.

    Empty hidden_dims means plain softmax regression.
    """

    input_dim: int
    hidden_dims: tuple[int, ...] = ()
    num_classes: int = 2

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValidationError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.num_classes < 2:
            raise ValidationError(f"num_classes must be >= 2, got {self.num_classes}")
        if any(h < 1 for h in self.hidden_dims):
            raise ValidationError(f"hidden dims must be >= 1, got {self.hidden_dims}")
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.num_classes]
        return list(zip(dims[:-1], dims[1:]))


@dataclass
class ModelParams:
    """Ordered (weight, bias) pairs; weight is (in_dim, out_dim), bias (out_dim,)."""

    layers: list[tuple[np.ndarray, np.ndarray]]

    def __post_init__(self):
        if not self.layers:
            raise ValidationError("ModelParams needs at least one layer")
        prev_out = None
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
                raise DimensionError(f"layer {i}: weight {w.shape} vs bias {b.shape}")
            if prev_out is not None and w.shape[0] != prev_out:
                raise DimensionError(
                    f"layer {i}: input dim {w.shape[0]} != previous output {prev_out}"
                )
            prev_out = w.shape[1]

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def num_classes(self) -> int:
        return self.layers[-1][0].shape[1]

    def arrays(self):
        """All parameter arrays in a fixed order: W0, b0, W1, b1, ..."""
        for w, b in self.layers:
            yield w
            yield b

    def copy(self) -> "ModelParams":
        return ModelParams([(w.copy(), b.copy()) for w, b in self.layers])

    def zeros_like(self) -> "ModelParams":
        return ModelParams([(np.zeros_like(w), np.zeros_like(b)) for w, b in self.layers])

    def shape_signature(self) -> tuple:
        return tuple((w.shape, b.shape) for w, b in self.layers)

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())


# Gradients share the container: same layer structure, same shapes.
Gradients = ModelParams


def init_params(spec: ModelSpec, seed: int) -> ModelParams:
    """Glorot-uniform init: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).

    Each layer draws from its own stream so adding layers never reshuffles
    earlier ones.
    """
    layers = []
    for i, (fan_in, fan_out) in enumerate(spec.layer_dims):
        rng = substream(seed, INIT, i)
        a = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-a, a, size=(fan_in, fan_out))
        b = np.zeros(fan_out)
        layers.append((w, b))
    return ModelParams(layers)


def _check_batch(params: ModelParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"batch must be 2-D, got shape {x.shape}")
    if x.shape[1] != params.input_dim:
        raise DimensionError(
            f"batch has {x.shape[1]} features, model expects {params.input_dim}"
        )
    return x


def forward_logits(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Forward pass, returning (batch, num_classes) logits."""
    x = _check_batch(params, x)
    a = x
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        z = a @ w + b
        a = z if i == last else np.maximum(z, 0.0)
    return a


def softmax(logits: np.ndarray) -> np.ndarray:
    """Stable softmax along the last axis (accepts a single row or a batch)."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-sample and mean cross entropy of probabilities vs one-hot targets.

    Probabilities below PROB_CLAMP are clamped before the log.
    """
    probs = np.asarray(probs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if probs.shape != targets.shape:
        raise DimensionError(f"probs {probs.shape} vs targets {targets.shape}")
    logp = np.log(np.clip(probs, PROB_CLAMP, None))
    per_sample = -(targets * logp).sum(axis=-1)
    return per_sample, float(per_sample.mean())


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValidationError(f"labels outside [0, {num_classes})")
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def batch_loss(params: ModelParams, x: np.ndarray, targets: np.ndarray) -> float:
    """Mean cross entropy of the model on a batch (one-hot targets)."""
    _, mean = cross_entropy(softmax(forward_logits(params, x)), targets)
    return mean


def backward_grads(
    params: ModelParams, x: np.ndarray, targets: np.ndarray
) -> tuple[Gradients, float]:
    """Analytic gradients of the mean softmax cross entropy over the batch."""
    x = _check_batch(params, x)
    targets = np.asarray(targets, dtype=np.float64)
    n = x.shape[0]
    if targets.shape != (n, params.num_classes):
        raise DimensionError(
            f"targets {targets.shape}, expected {(n, params.num_classes)}"
        )

    # Forward, caching post-activation outputs (a) per layer.
    acts = [x]
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        z = acts[-1] @ w + b
        acts.append(z if i == last else np.maximum(z, 0.0))

    probs = softmax(acts[-1])
    _, mean_loss = cross_entropy(probs, targets)

    # d(mean loss)/d(logits) = (p - t) / n; push back through each layer.
    # ReLU derivative taken as 1 where the cached activation is > 0.
    delta = (probs - targets) / n
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(params.layers)
    for i in range(last, -1, -1):
        a_prev = acts[i]
        w, _ = params.layers[i]
        grads[i] = (a_prev.T @ delta, delta.sum(axis=0))
        if i > 0:
            delta = (delta @ w.T) * (acts[i] > 0)
    return Gradients(grads), mean_loss


def central_difference(loss_fn, params: ModelParams, h: float = 1e-5) -> Gradients:
    """Central-difference gradient of an arbitrary scalar loss over params.

    Test oracle; O(#params) loss evaluations, so keep the model small.
    """
    if h <= 0:
        raise ValidationError(f"h must be positive, got {h}")
    out = params.zeros_like()
    work = params.copy()
    for arr, garr in zip(work.arrays(), out.arrays()):
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + h
            up = loss_fn(work)
            arr[idx] = orig - h
            down = loss_fn(work)
            arr[idx] = orig
            garr[idx] = (up - down) / (2.0 * h)
    return out


def finite_diff_grad(
    params: ModelParams, x: np.ndarray, targets: np.ndarray, h: float = 1e-5
) -> Gradients:
    """Central-difference gradient of `batch_loss` (cross-check for backprop)."""
    return central_difference(lambda p: batch_loss(p, x, targets), params, h)


@dataclass
class OptimizerState:
    """SGD or Adam state; moments mirror the parameter structure (Adam only)."""

    kind: str  # "sgd" | "adam"
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    first_moment: ModelParams | None = None
    second_moment: ModelParams | None = None

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValidationError(f"unknown optimizer kind {self.kind!r}")


def make_optimizer(kind: str, params: ModelParams, **hyper) -> OptimizerState:
    state = OptimizerState(kind=kind, **hyper)
    if kind == "adam":
        state.first_moment = params.zeros_like()
        state.second_moment = params.zeros_like()
    return state


def optimizer_step(
    params: ModelParams, grads: Gradients, state: OptimizerState, lr: float
) -> ModelParams:
    """One update step; returns new params and advances `state` in place."""
    if lr < 0:
        raise ValidationError(f"lr must be >= 0, got {lr}")
    if params.shape_signature() != grads.shape_signature():
        raise DimensionError("gradient shapes do not match parameters")
    if not grads.all_finite():
        raise TrainingDivergedError("non-finite gradient; update rejected")

    state.step_count += 1
    new_layers = []
    if state.kind == "sgd":
        for (w, b), (gw, gb) in zip(params.layers, grads.layers):
            new_layers.append((w - lr * gw, b - lr * gb))
        return ModelParams(new_layers)

    # Adam with bias correction.
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for (w, b), (gw, gb), (mw, mb), (vw, vb) in zip(
        params.layers, grads.layers, state.first_moment.layers, state.second_moment.layers
    ):
        mw[...] = state.beta1 * mw + (1.0 - state.beta1) * gw
        mb[...] = state.beta1 * mb + (1.0 - state.beta1) * gb
        vw[...] = state.beta2 * vw + (1.0 - state.beta2) * gw**2
        vb[...] = state.beta2 * vb + (1.0 - state.beta2) * gb**2
        new_w = w - lr * (mw / c1) / (np.sqrt(vw / c2) + state.epsilon)
        new_b = b - lr * (mb / c1) / (np.sqrt(vb / c2) + state.epsilon)
        new_layers.append((new_w, new_b))
    return ModelParams(new_layers)


def cosine_lr(round_index: int, total_rounds: int, base_lr: float) -> float:
    """Cosine decay from base_lr at index 0 down to 0 at index == total_rounds."""
    if total_rounds < 1:
        raise ValidationError(f"total_rounds must be >= 1, got {total_rounds}")
    if not 0 <= round_index <= total_rounds:
        raise ValidationError(f"round_index {round_index} outside [0, {total_rounds}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * round_index / total_rounds))


def linear_combination(terms: list[tuple[float, ModelParams]]) -> ModelParams:
    """Elementwise sum of weight * params, reduced in list order."""
    if not terms:
        raise ValidationError("linear_combination needs at least one term")
    sig = terms[0][1].shape_signature()
    for _, p in terms[1:]:
        if p.shape_signature() != sig:
            raise DimensionError("parameter sets differ in shape")
    acc = terms[0][1].zeros_like()
    for weight, p in terms:
        for dst, src in zip(acc.arrays(), p.arrays()):
            dst += weight * src
    return acc


def predict_proba(params: ModelParams, x: np.ndarray) -> np.ndarray:
    return softmax(forward_logits(params, x))


def predict_labels(params: ModelParams, x: np.ndarray) -> np.ndarray:
    return np.argmax(forward_logits(params, x), axis=1)


def accuracy_of(params: ModelParams, x: np.ndarray, labels: np.ndarray) -> float:
    if x.shape[0] == 0:
        raise ValidationError("cannot score an empty batch")
    return float(np.mean(predict_labels(params, x) == np.asarray(labels)))
