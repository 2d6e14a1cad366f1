"""Dense layers, SGD with weight decay, and a finite-difference gradient checker.

Matrices are plain ``float64`` numpy arrays, one sample per row.  Everything
here is deliberately small: the networks in this package are stacks of fully
connected layers, trained by hand-written backpropagation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("identity", "sigmoid", "relu")

# Inference runs in fixed-size, zero-padded blocks so a row's result does not
# depend on how many other rows share its BLAS call.
INFERENCE_BLOCK = 64


class ShapeError(ValueError):
    """Raised when array dimensions do not line up."""


def make_rng(seed: int, stream: int | None = None) -> np.random.Generator:
    """Seeded PCG64 generator; the only source of randomness in the package.

    ``stream`` selects an independent sequence for the same seed, so stages
    of a run can draw without disturbing each other.
    """
    entropy = int(seed) if stream is None else [int(seed), int(stream)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "sigmoid":
        return sigmoid(z)
    return z


def _activation_grad(out: np.ndarray, activation: str) -> np.ndarray:
    """Derivative of the activation expressed through its output."""
    if activation == "relu":
        return (out > 0.0).astype(np.float64)
    if activation == "sigmoid":
        return out * (1.0 - out)
    return np.ones_like(out)


@dataclass
class DenseLayer:
    """Fully connected layer ``activation(W x + b)`` with ``W`` of shape (out, in)."""

    weights: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"weights {self.weights.shape} and bias {self.bias.shape} disagree"
            )

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def create(
        cls, in_dim: int, out_dim: int, activation: str, rng: np.random.Generator
    ) -> "DenseLayer":
        """Glorot-uniform weights, zero bias."""
        s = np.sqrt(6.0 / (in_dim + out_dim))
        w = rng.uniform(-s, s, size=(out_dim, in_dim))
        return cls(w, np.zeros(out_dim), activation)

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weights.copy(), self.bias.copy(), self.activation)


@dataclass
class LayerGrad:
    weights: np.ndarray
    bias: np.ndarray


@dataclass
class SgdConfig:
    learning_rate: float = 0.001
    weight_decay: float = 0.004
    batch_size: int = 64
    max_iterations: int = 5000

    def __post_init__(self) -> None:
        if not self.learning_rate >= 0:
            # zero is allowed: it is the documented "null update" used in tests
            raise ValueError("learning_rate must be non-negative")
        if not self.weight_decay >= 0:
            raise ValueError("weight_decay must be non-negative")
        if self.batch_size < 1 or self.max_iterations < 0:
            raise ValueError("batch_size must be >= 1 and max_iterations >= 0")


def _check_input(layer: DenseLayer, x: np.ndarray) -> None:
    if x.ndim != 2 or x.shape[1] != layer.in_dim:
        raise ShapeError(f"layer expects (batch, {layer.in_dim}) input, got {x.shape}")


def dense_forward(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    _check_input(layer, x)
    return _activate(x @ layer.weights.T + layer.bias, layer.activation)


def dense_backward(
    layer: DenseLayer,
    cached_input: np.ndarray,
    upstream_grad: np.ndarray,
    output: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(weight_grad, bias_grad, input_grad)`` for one layer.

    ``output`` is the forward result for ``cached_input``; it is recomputed
    when not supplied.
    """
    _check_input(layer, cached_input)
    if output is None:
        output = dense_forward(layer, cached_input)
    if upstream_grad.shape != (cached_input.shape[0], layer.out_dim):
        raise ShapeError(
            f"upstream grad {upstream_grad.shape} does not match output "
            f"({cached_input.shape[0]}, {layer.out_dim})"
        )
    delta = upstream_grad * _activation_grad(output, layer.activation)
    return delta.T @ cached_input, delta.sum(axis=0), delta @ layer.weights


def stack_forward(layers: Sequence[DenseLayer], x: np.ndarray) -> list[np.ndarray]:
    """Forward through a stack; returns every activation, input first."""
    acts = [x]
    for layer in layers:
        acts.append(dense_forward(layer, acts[-1]))
    return acts


def stack_backward(
    layers: Sequence[DenseLayer], acts: Sequence[np.ndarray], grad_out: np.ndarray
) -> tuple[list[LayerGrad], np.ndarray]:
    grads: list[LayerGrad] = [None] * len(layers)  # type: ignore[list-item]
    g = grad_out
    for k in range(len(layers) - 1, -1, -1):
        gw, gb, g = dense_backward(layers[k], acts[k], g, output=acts[k + 1])
        grads[k] = LayerGrad(gw, gb)
    return grads, g


def predict(layers: Sequence[DenseLayer], x: np.ndarray, block: int = INFERENCE_BLOCK) -> np.ndarray:
    """Batch inference whose rows are bit-identical to one-row calls.

    Rows are pushed through the stack in zero-padded blocks of exactly
    ``block`` rows.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected a 2-D batch, got shape {x.shape}")
    out_dim = layers[-1].out_dim if layers else x.shape[1]
    out = np.empty((x.shape[0], out_dim))
    buf = np.zeros((block, x.shape[1]))
    for start in range(0, x.shape[0], block):
        chunk = x[start : start + block]
        buf[: len(chunk)] = chunk
        buf[len(chunk) :] = 0.0
        h = buf
        for layer in layers:
            h = dense_forward(layer, h)
        out[start : start + len(chunk)] = h[: len(chunk)]
    return out


def sgd_step(
    layers: Sequence[DenseLayer], grads: Sequence[LayerGrad], config: SgdConfig
) -> Sequence[DenseLayer]:
    """In-place update ``w <- w - lr * (g + decay * w)``; biases are not decayed."""
    if len(layers) != len(grads):
        raise ShapeError(f"{len(layers)} layers but {len(grads)} gradients")
    lr, wd = config.learning_rate, config.weight_decay
    for layer, grad in zip(layers, grads):
        if grad.weights.shape != layer.weights.shape or grad.bias.shape != layer.bias.shape:
            raise ShapeError("gradient shape does not match parameter shape")
        if wd:
            layer.weights -= lr * (grad.weights + wd * layer.weights)
        else:
            layer.weights -= lr * grad.weights
        layer.bias -= lr * grad.bias
    return layers


@dataclass
class GradCheckResult:
    max_relative_error: float
    checked: int
    worst: tuple[int, tuple[int, ...]] | None = field(default=None)


def finite_difference_check(
    loss_fn: Callable[[], tuple[float, Sequence[np.ndarray]]],
    params: Sequence[np.ndarray],
    step: float = 1e-5,
    floor: float = 1e-7,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckResult:
    """Compare analytic gradients against central differences.

    ``loss_fn`` reads ``params`` (mutated in place here) and returns the scalar
    loss together with one gradient array per parameter array.  With
    ``max_entries`` set, that many entries of each array are sampled instead
    of checking all of them.

    The error for one entry is ``|a - n| / max(|a| + |n|, floor)``.
    """
    value, analytic = loss_fn()
    if not np.isfinite(value):
        raise FloatingPointError(f"loss is not finite: {value}")
    analytic = [np.array(g, dtype=np.float64, copy=True) for g in analytic]
    if len(analytic) != len(params):
        raise ShapeError("loss_fn returned a different number of gradients than params")

    worst_err, worst_at, checked = 0.0, None, 0
    for p_idx, (p, g) in enumerate(zip(params, analytic)):
        if g.shape != p.shape:
            raise ShapeError(f"gradient {g.shape} vs parameter {p.shape}")
        if not p.flags.c_contiguous:
            raise ValueError("parameters must be C-contiguous to be perturbed in place")
        flat = p.reshape(-1)
        if max_entries is not None and flat.size > max_entries:
            gen = rng if rng is not None else make_rng(0)
            idx = gen.choice(flat.size, size=max_entries, replace=False)
        else:
            idx = np.arange(flat.size)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn()[0]
            flat[i] = orig - step
            down = loss_fn()[0]
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError("loss became non-finite during perturbation")
            numeric = (up - down) / (2.0 * step)
            a = g.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a) + abs(numeric), floor)
            checked += 1
            if err > worst_err:
                worst_err, worst_at = err, (p_idx, np.unravel_index(i, p.shape))
    return GradCheckResult(float(worst_err), checked, worst_at)
