"""Bias-free fully-connected networks with per-example backpropagation.

Weights are ``(d_out, d_in)`` matrices and a layer maps ``z = W a``. Parameters
are flattened row by row, layer after layer, so ``vec(W)[i * d_in + j] ==
W[i, j]``. Every Kronecker identity in :mod:`kfacbo.curvature` relies on this
ordering.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .errors import ShapeError, StaleTraceError

ACTIVATIONS = ("identity", "relu", "tanh")
CRITERIA = ("square", "cross_entropy")


def _activate(kind, z):
    if kind == "identity":
        return z
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activation_derivative(kind, z, out):
    if kind == "identity":
        return np.ones_like(z)
    if kind == "relu":
        # derivative at exactly 0 is 0
        return (z > 0).astype(z.dtype)
    return 1.0 - out * out


@dataclass
class LinearLayer:
    weight: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        self.weight = np.array(self.weight, dtype=np.float64, ndmin=2)
        if self.weight.ndim != 2 or min(self.weight.shape) < 1:
            raise ShapeError(f"weight must be a non-empty matrix, got {self.weight.shape}")
        if not np.all(np.isfinite(self.weight)):
            raise ValueError("weight entries must be finite")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]


class Network:
    """Ordered stack of :class:`LinearLayer` with a flat parameter view.

    ``version`` increments whenever the weights are replaced through
    :func:`unflatten_params`; traces remember the version they were taken at.
    """

    def __init__(self, layers: Sequence[LinearLayer]):
        layers = list(layers)
        if not layers:
            raise ShapeError("a network needs at least one layer")
        for k in range(1, len(layers)):
            if layers[k].d_in != layers[k - 1].d_out:
                raise ShapeError(
                    f"input dim {layers[k].d_in} != previous output dim {layers[k - 1].d_out}",
                    layer=k,
                )
        self.layers: List[LinearLayer] = layers
        self.version = 0

    @classmethod
    def from_sizes(cls, sizes, activations=None, rng=None, scale=None):
        """Random network with layer widths ``sizes = [in, h1, ..., out]``.

        Hidden layers default to tanh and the last layer to identity. Weights
        are Gaussian with standard deviation ``scale`` (``1/sqrt(fan_in)`` if
        not given).
        """
        rng = np.random.default_rng(rng)
        n = len(sizes) - 1
        if activations is None:
            activations = ["tanh"] * (n - 1) + ["identity"]
        layers = []
        for k in range(n):
            std = scale if scale is not None else 1.0 / np.sqrt(sizes[k])
            layers.append(LinearLayer(std * rng.standard_normal((sizes[k + 1], sizes[k])), activations[k]))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].d_in

    @property
    def out_dim(self) -> int:
        return self.layers[-1].d_out

    @property
    def layout(self):
        """List of ``(offset, length)`` per layer into the flat vector."""
        offsets = []
        pos = 0
        for layer in self.layers:
            size = layer.weight.size
            offsets.append((pos, size))
            pos += size
        return offsets

    @property
    def num_params(self) -> int:
        return sum(layer.weight.size for layer in self.layers)

    def split(self, v):
        """View a flat vector (or a trailing-axis batch of them) as per-layer matrices."""
        v = np.asarray(v, dtype=np.float64)
        if v.shape[-1] != self.num_params:
            raise ShapeError(f"expected length {self.num_params}, got {v.shape[-1]}")
        lead = v.shape[:-1]
        return [
            v[..., off:off + size].reshape(lead + layer.weight.shape)
            for (off, size), layer in zip(self.layout, self.layers)
        ]

    def copy(self) -> "Network":
        return Network([LinearLayer(l.weight.copy(), l.activation) for l in self.layers])


def flatten_params(net: Network) -> np.ndarray:
    return np.concatenate([layer.weight.ravel() for layer in net.layers])


def unflatten_params(net: Network, v) -> None:
    """Write a flat vector back into the layer weights (in place)."""
    for layer, w in zip(net.layers, net.split(v)):
        layer.weight = np.array(w, dtype=np.float64)
    net.version += 1


@dataclass
class ForwardTrace:
    """Per-layer inputs ``a`` and pre-activations ``z`` from one forward pass.

    ``inputs[k]`` has shape ``(N, d_in_k)`` and ``preacts[k]`` ``(N, d_out_k)``.
    """

    inputs: List[np.ndarray]
    preacts: List[np.ndarray]
    activations: List[np.ndarray]
    outputs: np.ndarray
    version: int

    @property
    def batch_size(self) -> int:
        return self.outputs.shape[0]


def forward(net: Network, inputs) -> ForwardTrace:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ShapeError(f"input has shape {x.shape}, expected (N, {net.in_dim})", layer=0)
    ins, pre, acts = [], [], []
    a = x
    for layer in net.layers:
        z = a @ layer.weight.T
        out = _activate(layer.activation, z)
        ins.append(a)
        pre.append(z)
        acts.append(out)
        a = out
    return ForwardTrace(ins, pre, acts, a, net.version)


@dataclass
class Criterion:
    """Loss on network outputs, optionally with per-example weights.

    ``square`` is ``0.5 * ||f - y||^2`` and ``cross_entropy`` is
    ``-log softmax(f)[y]``. The batch loss is ``sum_n w_n * l_n / N``.
    """

    kind: str = "square"
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in CRITERIA:
            raise ValueError(f"unknown criterion {self.kind!r}; expected one of {CRITERIA}")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64)
            if w.ndim != 1 or not np.all(np.isfinite(w)) or np.any(w < 0):
                raise ValueError("per-example weights must be a finite nonnegative vector")
            self.weights = w

    def with_weights(self, weights) -> "Criterion":
        return Criterion(self.kind, weights)


def softmax(f):
    f = f - f.max(axis=1, keepdims=True)
    e = np.exp(f)
    return e / e.sum(axis=1, keepdims=True)


def _check_targets(criterion, outputs, targets):
    n, c = outputs.shape
    if criterion.kind == "cross_entropy":
        y = np.asarray(targets)
        if y.shape != (n,):
            raise ShapeError(f"expected {n} class indices, got shape {y.shape}")
        if not np.issubdtype(y.dtype, np.integer):
            if not np.all(y == np.round(y)):
                raise ValueError("class indices must be integers")
            y = y.astype(np.int64)
        if np.any(y < 0) or np.any(y >= c):
            raise ValueError(f"class index out of range [0, {c})")
        return y
    y = np.asarray(targets, dtype=np.float64)
    if y.ndim == 1 and c == 1:
        y = y[:, None]
    if y.shape != outputs.shape:
        raise ShapeError(f"targets have shape {y.shape}, outputs {outputs.shape}")
    return y


def _check_weights(criterion, n):
    if criterion.weights is not None and criterion.weights.shape != (n,):
        raise ShapeError(f"{criterion.weights.shape[0]} weights for a batch of {n}")
    return criterion.weights


def per_example_loss(criterion: Criterion, outputs, targets) -> np.ndarray:
    """Unweighted per-example losses."""
    f = np.asarray(outputs, dtype=np.float64)
    y = _check_targets(criterion, f, targets)
    if criterion.kind == "square":
        r = f - y
        return 0.5 * np.sum(r * r, axis=1)
    m = f.max(axis=1, keepdims=True)
    logz = m[:, 0] + np.log(np.exp(f - m).sum(axis=1))
    return logz - f[np.arange(f.shape[0]), y]


def loss_and_output_grad(criterion: Criterion, outputs, targets):
    """Mean (weighted) loss and per-example gradients of ``w_n * l_n`` w.r.t. ``f_n``."""
    f = np.asarray(outputs, dtype=np.float64)
    n = f.shape[0]
    y = _check_targets(criterion, f, targets)
    w = _check_weights(criterion, n)
    losses = per_example_loss(criterion, f, y)
    if criterion.kind == "square":
        grad = f - y
    else:
        grad = softmax(f)
        grad[np.arange(n), y] -= 1.0
    if w is not None:
        losses = w * losses
        grad = w[:, None] * grad
    return losses.sum() / n, grad


def output_hessian(criterion: Criterion, outputs, targets=None) -> np.ndarray:
    """Per-example Hessians of ``w_n * l_n`` w.r.t. the outputs, shape ``(N, C, C)``."""
    f = np.asarray(outputs, dtype=np.float64)
    n, c = f.shape
    if targets is not None:
        _check_targets(criterion, f, targets)
    w = _check_weights(criterion, n)
    if criterion.kind == "square":
        hess = np.broadcast_to(np.eye(c), (n, c, c)).copy()
    else:
        p = softmax(f)
        hess = -p[:, :, None] * p[:, None, :]
        idx = np.arange(c)
        hess[:, idx, idx] += p
    if w is not None:
        hess *= w[:, None, None]
    return hess


@dataclass
class GradientBundle:
    """Weight gradients plus the per-example pre-activation gradients.

    ``preact_grads[k][n]`` is the gradient of example ``n``'s loss w.r.t. the
    pre-activation of layer ``k`` (not divided by ``N``).
    """

    weight_grads: List[np.ndarray]
    preact_grads: List[np.ndarray]
    flat: np.ndarray = field(repr=False)


def _check_trace(net, trace):
    if trace.version != net.version:
        raise StaleTraceError(
            f"trace taken at network version {trace.version}, network is at {net.version}"
        )


def backpropagate(net: Network, trace: ForwardTrace, output_grads) -> List[np.ndarray]:
    """Per-example pre-activation gradients for arbitrary output cotangents.

    ``output_grads`` may carry extra leading axes, e.g. ``(M, N, C)`` for
    ``M`` pseudo-gradient samples; the result keeps them.
    """
    _check_trace(net, trace)
    delta = np.asarray(output_grads, dtype=np.float64)
    if delta.shape[-2:] != trace.outputs.shape:
        raise ShapeError(f"output grads {delta.shape} do not match outputs {trace.outputs.shape}")
    grads = [None] * len(net.layers)
    for k in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[k]
        delta = delta * _activation_derivative(layer.activation, trace.preacts[k], trace.activations[k])
        grads[k] = delta
        if k > 0:
            delta = delta @ layer.weight
    return grads


def backward(net: Network, trace: ForwardTrace, output_grads) -> GradientBundle:
    g = backpropagate(net, trace, output_grads)
    n = trace.batch_size
    weight_grads = [gk.T @ ak / n for gk, ak in zip(g, trace.inputs)]
    flat = np.concatenate([wg.ravel() for wg in weight_grads])
    return GradientBundle(weight_grads, g, flat)


def per_example_grads(net: Network, trace: ForwardTrace, output_grads) -> np.ndarray:
    """Per-example flat parameter gradients, shape ``(N, d)``."""
    g = backpropagate(net, trace, output_grads)
    n = trace.batch_size
    return np.concatenate(
        [np.einsum("ni,nj->nij", gk, ak).reshape(n, -1) for gk, ak in zip(g, trace.inputs)],
        axis=1,
    )


def linearized_forward(net: Network, trace: ForwardTrace, v) -> np.ndarray:
    """Jacobian-vector product ``J_theta f . v`` for every example, shape ``(N, C)``."""
    _check_trace(net, trace)
    blocks = net.split(v)
    da = np.zeros_like(trace.inputs[0])
    for k, layer in enumerate(net.layers):
        dz = trace.inputs[k] @ blocks[k].T
        if k > 0:
            dz += da @ layer.weight.T
        da = dz * _activation_derivative(layer.activation, trace.preacts[k], trace.activations[k])
    return da


def loss_value(net: Network, criterion: Criterion, inputs, targets) -> float:
    return loss_and_output_grad(criterion, forward(net, inputs).outputs, targets)[0]


def loss_gradient(net: Network, criterion: Criterion, inputs, targets):
    """Mean loss and flat gradient at the network's current weights."""
    trace = forward(net, inputs)
    loss, dout = loss_and_output_grad(criterion, trace.outputs, targets)
    return loss, backward(net, trace, dout).flat
