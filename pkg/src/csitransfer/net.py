"""Fully-connected network with hand-written exact derivatives.

The forward map is a cascade of affine layers, ReLU on hidden layers and
identity on the output. The loss over a batch is the per-sample sum of
squared errors averaged over the batch. Besides plain reverse-mode
gradients the module provides the directional derivative of the gradient
map (a Hessian-vector product, computed forward-over-reverse), which is
what lets the meta-learner differentiate exactly through its own
gradient-descent steps.

All math is 64-bit. ReLU's subgradient at zero is fixed to zero so results
are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

RELU = "relu"
LINEAR = "linear"


@dataclass(frozen=True)
class LayerSpec:
    """Layer widths and activation tags; hidden layers ReLU, output linear."""

    sizes: tuple[int, ...]
    activations: tuple[str, ...]

    def __post_init__(self):
        if len(self.sizes) < 2:
            raise ValueError("a network needs at least an input and an output layer")
        if any(n < 1 for n in self.sizes):
            raise ValueError(f"layer widths must be positive, got {self.sizes}")
        if len(self.activations) != len(self.sizes) - 1:
            raise ValueError("need one activation tag per non-input layer")
        if self.sizes[0] != self.sizes[-1]:
            raise ValueError("input and output widths must match (both are 2M)")
        for act in self.activations[:-1]:
            if act != RELU:
                raise ValueError(f"hidden activations must be {RELU!r}, got {act!r}")
        if self.activations[-1] != LINEAR:
            raise ValueError(f"output activation must be {LINEAR!r}")

    @classmethod
    def fnn(cls, m: int, hidden: Iterable[int] = (128, 128)) -> "LayerSpec":
        """Standard prediction network: 2M -> hidden... -> 2M."""
        hidden = tuple(hidden)
        sizes = (2 * m, *hidden, 2 * m)
        activations = (RELU,) * len(hidden) + (LINEAR,)
        return cls(sizes=sizes, activations=activations)

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1


@dataclass
class NetParams:
    """Per-layer weight matrices (n_l x n_{l-1}) and bias vectors (n_l)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ValueError("need one bias vector per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ValueError(f"layer {i}: weight {w.shape} and bias {b.shape} mismatch")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i}: input width {w.shape[1]} does not chain "
                                 f"with previous output {self.weights[i - 1].shape[0]}")

    def layer_spec(self, activations: tuple[str, ...] | None = None) -> LayerSpec:
        sizes = (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)
        if activations is None:
            activations = (RELU,) * (len(self.weights) - 1) + (LINEAR,)
        return LayerSpec(sizes=sizes, activations=activations)

    def copy(self) -> "NetParams":
        return NetParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def ravel(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.weights + self.biases])


@dataclass
class Batch:
    """Input/label matrices, one row per sample."""

    xs: np.ndarray
    ys: np.ndarray

    def __post_init__(self):
        self.xs = np.atleast_2d(np.asarray(self.xs, dtype=np.float64))
        self.ys = np.atleast_2d(np.asarray(self.ys, dtype=np.float64))
        if self.xs.shape[0] != self.ys.shape[0]:
            raise ValueError(f"batch has {self.xs.shape[0]} inputs but "
                             f"{self.ys.shape[0]} labels")

    def __len__(self) -> int:
        return self.xs.shape[0]


@dataclass
class GradTape:
    """Forward-pass cache: input, per-layer pre-activations and activations."""

    x: np.ndarray
    pre_activations: list[np.ndarray]
    activations: list[np.ndarray]


def params_map(fn: Callable[..., np.ndarray], *ps: NetParams) -> NetParams:
    """Structural elementwise map over one or more parameter trees."""
    return NetParams(
        [fn(*(p.weights[i] for p in ps)) for i in range(len(ps[0].weights))],
        [fn(*(p.biases[i] for p in ps)) for i in range(len(ps[0].biases))],
    )


def zeros_like_params(p: NetParams) -> NetParams:
    return params_map(np.zeros_like, p)


def params_axpy(alpha: float, x: NetParams, y: NetParams) -> NetParams:
    """y + alpha * x, elementwise, as a new tree."""
    return params_map(lambda xa, ya: ya + alpha * xa, x, y)


def params_dot(a: NetParams, b: NetParams) -> float:
    total = 0.0
    for wa, wb in zip(a.weights, b.weights):
        total += float(np.sum(wa * wb))
    for ba, bb in zip(a.biases, b.biases):
        total += float(np.sum(ba * bb))
    return total


def params_norm(a: NetParams) -> float:
    return float(np.sqrt(params_dot(a, a)))


def _check_same_shape(a: NetParams, b: NetParams):
    for wa, wb in zip(a.weights, b.weights):
        if wa.shape != wb.shape:
            raise ValueError(f"weight shape mismatch: {wa.shape} vs {wb.shape}")
    for ba, bb in zip(a.biases, b.biases):
        if ba.shape != bb.shape:
            raise ValueError(f"bias shape mismatch: {ba.shape} vs {bb.shape}")
    if len(a.weights) != len(b.weights):
        raise ValueError("layer count mismatch")


def _truncated_normal(rng: np.random.Generator, sigma: float, shape) -> np.ndarray:
    """Normal(0, sigma^2) restricted to two standard deviations, by rejection."""
    out = rng.normal(0.0, 1.0, size=shape)
    bad = np.abs(out) > 2.0
    while np.any(bad):
        out[bad] = rng.normal(0.0, 1.0, size=int(bad.sum()))
        bad = np.abs(out) > 2.0
    return sigma * out


def init_params(spec: LayerSpec, rng: np.random.Generator, fan: str = "in") -> NetParams:
    """Truncated-normal weights with variance 1/fan, zero biases.

    ``fan`` selects whether the normalising width is the layer's input
    (``"in"``, the default) or its own output width (``"out"``).
    """
    if fan not in ("in", "out"):
        raise ValueError(f"fan must be 'in' or 'out', got {fan!r}")
    weights, biases = [], []
    for l in range(spec.n_layers):
        n_in, n_out = spec.sizes[l], spec.sizes[l + 1]
        sigma = 1.0 / np.sqrt(n_in if fan == "in" else n_out)
        weights.append(_truncated_normal(rng, sigma, (n_out, n_in)))
        biases.append(np.zeros(n_out))
    return NetParams(weights, biases)


def _forward_matrices(params: NetParams, xs: np.ndarray,
                      activations: tuple[str, ...] | None = None):
    """Batched forward pass; returns (output, pre-activations, activations).

    ``activations[l]`` lists the post-affine activation per layer; layer
    activations include the input as entry 0.
    """
    n_layers = len(params.weights)
    if activations is None:
        activations = (RELU,) * (n_layers - 1) + (LINEAR,)
    if xs.shape[1] != params.weights[0].shape[1]:
        raise ValueError(f"input width {xs.shape[1]} does not match first layer "
                         f"({params.weights[0].shape[1]})")
    acts = [xs]
    pres = []
    a = xs
    for l in range(n_layers):
        z = a @ params.weights[l].T + params.biases[l]
        pres.append(z)
        a = np.maximum(z, 0.0) if activations[l] == RELU else z
        acts.append(a)
    return a, pres, acts


def forward(params: NetParams, x: np.ndarray) -> tuple[np.ndarray, GradTape]:
    """Single-input forward pass with its tape."""
    x = np.asarray(x, dtype=np.float64)
    out, pres, acts = _forward_matrices(params, x[None, :])
    tape = GradTape(x=x, pre_activations=[z[0] for z in pres],
                    activations=[a[0] for a in acts])
    return out[0], tape


def forward_batch(params: NetParams, xs: np.ndarray) -> np.ndarray:
    """Batched prediction (no tape)."""
    out, _, _ = _forward_matrices(params, np.atleast_2d(np.asarray(xs, dtype=np.float64)))
    return out


def mse_loss(params: NetParams, batch: Batch) -> float:
    """Per-sample sum of squared errors, averaged over the batch."""
    if len(batch) == 0:
        raise ValueError("batch must be nonempty")
    out, _, _ = _forward_matrices(params, batch.xs)
    diff = out - batch.ys
    return float(np.sum(diff * diff) / len(batch))


def loss_and_grad(params: NetParams, batch: Batch) -> tuple[float, NetParams]:
    """Loss and its exact gradient in one reverse sweep."""
    if len(batch) == 0:
        raise ValueError("batch must be nonempty")
    v = len(batch)
    out, pres, acts = _forward_matrices(params, batch.xs)
    diff = out - batch.ys
    loss = float(np.sum(diff * diff) / v)

    n_layers = len(params.weights)
    g_weights = [None] * n_layers
    g_biases = [None] * n_layers
    delta = 2.0 / v * diff  # output layer is linear
    for l in range(n_layers - 1, -1, -1):
        g_weights[l] = delta.T @ acts[l]
        g_biases[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ params.weights[l]) * (pres[l - 1] > 0)
    return loss, NetParams(g_weights, g_biases)


def backward(params: NetParams, batch: Batch) -> NetParams:
    """Exact gradient of :func:`mse_loss` at ``params``."""
    return loss_and_grad(params, batch)[1]


def forward_param_jvp(params: NetParams, direction: NetParams, batch: Batch) -> NetParams:
    """Directional derivative of the gradient map along ``direction``.

    Equivalently the Hessian-vector product of the batch loss. Tangents are
    pushed through the forward pass and then through the reverse sweep, so
    the result is exact up to rounding (the ReLU masks are constants of the
    linearisation, matching the zero subgradient convention).
    """
    _check_same_shape(params, direction)
    if len(batch) == 0:
        raise ValueError("batch must be nonempty")
    v = len(batch)
    n_layers = len(params.weights)

    # Forward sweep with tangents.
    acts = [batch.xs]
    tacts = [np.zeros_like(batch.xs)]
    masks = []
    a, ta = batch.xs, np.zeros_like(batch.xs)
    for l in range(n_layers):
        z = a @ params.weights[l].T + params.biases[l]
        tz = ta @ params.weights[l].T + a @ direction.weights[l].T + direction.biases[l]
        if l < n_layers - 1:
            mask = z > 0
            a, ta = z * mask, tz * mask
        else:
            mask = None
            a, ta = z, tz
        masks.append(mask)
        acts.append(a)
        tacts.append(ta)

    # Reverse sweep carrying (value, tangent) of each delta.
    hw = [None] * n_layers
    hb = [None] * n_layers
    delta = 2.0 / v * (acts[-1] - batch.ys)
    tdelta = 2.0 / v * tacts[-1]
    for l in range(n_layers - 1, -1, -1):
        hw[l] = tdelta.T @ acts[l] + delta.T @ tacts[l]
        hb[l] = tdelta.sum(axis=0)
        if l > 0:
            g = delta @ params.weights[l]
            tg = tdelta @ params.weights[l] + delta @ direction.weights[l]
            delta = g * masks[l - 1]
            tdelta = tg * masks[l - 1]
    return NetParams(hw, hb)
