"""Minimal feed-forward networks with reverse-mode gradients.

Layers: Linear, Bias, Conv (zero-padded, stride 1, odd kernels), ReLU and
Flatten. `loss_and_backward` returns mean softmax cross-entropy gradients
plus a LayerTape: the per-layer inputs and *per-example* incoming gradients
(scaled by the batch size, so each tape row is the true gradient of that
example's own loss) that the alignment kernels consume later without ever
re-running a forward pass.

No batch statistics anywhere, so per-example gradients are well defined.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor
from .errors import DimensionError, KernelError, LabelError

Array = np.ndarray


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Linear:
    """x (n, d1) @ w (d1, d2)."""

    kind = "linear"

    def __init__(self, w: Array):
        if w.ndim != 2:
            raise DimensionError(f"Linear weight must be 2-D, got {w.shape}")
        self.param = np.asarray(w, dtype=np.float64)

    def forward(self, x: Array) -> Array:
        if x.ndim != 2 or x.shape[1] != self.param.shape[0]:
            raise DimensionError(
                f"Linear: input {x.shape} does not match weight {self.param.shape}"
            )
        return x @ self.param

    def backward(self, x: Array, grad_out: Array) -> tuple[Array, Array]:
        grad_x = grad_out @ self.param.T
        grad_w = x.T @ grad_out
        return grad_x, grad_w

    def per_example_param_grads(self, x: Array, incoming: Array) -> Array:
        # (n, d1, d2) outer products; deliberately materialized (this is the
        # expensive direct route the alignment kernels exist to avoid).
        return np.einsum("ni,nj->nij", x, incoming)


class Bias:
    """x + b, broadcast over the batch axis."""

    kind = "bias"

    def __init__(self, b: Array):
        self.param = np.asarray(b, dtype=np.float64)

    def forward(self, x: Array) -> Array:
        if x.shape[1:] != self.param.shape:
            raise DimensionError(
                f"Bias: input {x.shape} does not match bias {self.param.shape}"
            )
        return x + self.param

    def backward(self, x: Array, grad_out: Array) -> tuple[Array, Array]:
        return grad_out, grad_out.sum(axis=0)

    def per_example_param_grads(self, x: Array, incoming: Array) -> Array:
        return incoming.copy()


class Conv:
    """Multi-channel convolution as a sum of single-channel zero-padded
    convolutions, one (out, in) kernel pair each. Kernels (O, C, c1, c2),
    input (n, C, H, W), output (n, O, H, W)."""

    kind = "conv"

    def __init__(self, kernels: Array):
        kernels = np.asarray(kernels, dtype=np.float64)
        if kernels.ndim != 4:
            raise DimensionError(f"Conv kernels must be (O, C, c1, c2), got {kernels.shape}")
        c1, c2 = kernels.shape[2:]
        if c1 % 2 == 0 or c2 % 2 == 0:
            raise KernelError(f"kernel height and width must be odd, got {(c1, c2)}")
        self.param = kernels

    def _windows(self, x: Array) -> Array:
        c1, c2 = self.param.shape[2:]
        xp = np.pad(x, ((0, 0), (0, 0), (c1 // 2, c1 // 2), (c2 // 2, c2 // 2)))
        return sliding_window_view(xp, (c1, c2), axis=(2, 3))

    def forward(self, x: Array) -> Array:
        if x.ndim != 4 or x.shape[1] != self.param.shape[1]:
            raise DimensionError(
                f"Conv: input {x.shape} does not match kernels {self.param.shape}"
            )
        return np.einsum("nchwij,ocij->nohw", self._windows(x), self.param)

    def backward(self, x: Array, grad_out: Array) -> tuple[Array, Array]:
        windows = self._windows(x)
        grad_k = np.einsum("nohw,nchwij->ocij", grad_out, windows)
        # grad wrt input: correlate grad_out with the flipped kernel at full
        # padding, then crop back to the original (zero-padded) extent.
        c1, c2 = self.param.shape[2:]
        gp = np.pad(grad_out, ((0, 0), (0, 0), (c1 - 1, c1 - 1), (c2 - 1, c2 - 1)))
        gwin = sliding_window_view(gp, (c1, c2), axis=(2, 3))
        flipped = self.param[:, :, ::-1, ::-1]
        grad_xp = np.einsum("nohwij,ocij->nchw", gwin, flipped)
        p1, p2 = c1 // 2, c2 // 2
        h, w = x.shape[2], x.shape[3]
        return grad_xp[:, :, p1 : p1 + h, p2 : p2 + w], grad_k

    def per_example_param_grads(self, x: Array, incoming: Array) -> Array:
        # (n, O, C, c1, c2), again materialized on purpose.
        return np.einsum("nohw,nchwij->nocij", incoming, self._windows(x))


class ReLU:
    kind = "relu"
    param = None

    def forward(self, x: Array) -> Array:
        return np.maximum(x, 0.0)

    def backward(self, x: Array, grad_out: Array) -> tuple[Array, None]:
        return grad_out * (x > 0.0), None


class Flatten:
    kind = "flatten"
    param = None

    def forward(self, x: Array) -> Array:
        return x.reshape(x.shape[0], -1)

    def backward(self, x: Array, grad_out: Array) -> tuple[Array, None]:
        return grad_out.reshape(x.shape), None


Layer = Linear | Bias | Conv | ReLU | Flatten

PARAM_KINDS = ("linear", "bias", "conv")


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

class Network:
    """Ordered layer stack. Parameters live in the layers' .param arrays."""

    def __init__(self, layers: list[Layer]):
        self.layers = list(layers)

    def parameters(self) -> list[Array]:
        return [layer.param for layer in self.layers if layer.param is not None]

    def set_parameters(self, params: list[Array]) -> None:
        idx = 0
        for layer in self.layers:
            if layer.param is not None:
                if layer.param.shape != params[idx].shape:
                    raise DimensionError(
                        f"parameter {idx} shape {params[idx].shape} != {layer.param.shape}"
                    )
                layer.param = np.array(params[idx], dtype=np.float64)
                idx += 1
        if idx != len(params):
            raise DimensionError(f"expected {idx} parameter arrays, got {len(params)}")

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def copy(self) -> "Network":
        layers: list[Layer] = []
        for layer in self.layers:
            if layer.param is not None:
                layers.append(type(layer)(layer.param.copy()))
            else:
                layers.append(type(layer)())
        return Network(layers)


def build_network(spec: list, rng: tensor.Rng) -> Network:
    """Build a network from compact descriptors, e.g.

        [["flatten"], ["linear", 16, 200], ["bias", 200], ["relu"],
         ["linear", 200, 10], ["bias", 10]]
        [["conv", 1, 4, 3, 3], ["bias", 4, 8, 8], ...]

    Weights use He-style init drawn from rng; biases start at zero.
    """
    layers: list[Layer] = []
    for item in spec:
        kind, args = item[0], item[1:]
        if kind == "linear":
            d1, d2 = args
            layers.append(Linear(rng.normal((d1, d2)) * np.sqrt(2.0 / d1)))
        elif kind == "bias":
            layers.append(Bias(np.zeros(tuple(args))))
        elif kind == "conv":
            cin, cout, c1, c2 = args
            w = rng.normal((cout, cin, c1, c2)) * np.sqrt(2.0 / (cin * c1 * c2))
            layers.append(Conv(w))
        elif kind == "relu":
            layers.append(ReLU())
        elif kind == "flatten":
            layers.append(Flatten())
        else:
            raise DimensionError(f"unknown layer kind {kind!r}")
    return Network(layers)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

@dataclass
class TapeEntry:
    layer_index: int
    kind: str
    x: Array          # layer input, batch-first
    incoming: Array   # d(example loss_i)/d(layer output), batch-first


@dataclass
class LayerTape:
    """Inputs and per-example incoming gradients captured at step t for the
    parameterized layers, in layer order."""

    step: int
    n_layers: int
    entries: list[TapeEntry] = field(default_factory=list)


def forward(net: Network, batch: Array) -> Array:
    """Logits for a batch; pure function of (net, batch)."""
    x = batch
    for layer in net.layers:
        x = layer.forward(x)
    return x


def _softmax_rows(z: Array) -> Array:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(labels: Array, classes: int) -> Array:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise LabelError(f"labels must be 1-D, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise LabelError(f"labels must lie in [0, {classes}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    return labels.astype(np.intp)


def loss_and_backward(
    net: Network, batch: Array, labels: Array, want_tape: bool = True
) -> tuple[float, list[Array], LayerTape | None]:
    """Mean softmax cross-entropy, its parameter gradients, and the tape.

    Tape rows are scaled by n so each row equals the gradient of that
    example's own loss (not the 1/n share of the batch loss).
    """
    n = batch.shape[0]
    inputs: list[Array] = []
    x = batch
    for layer in net.layers:
        inputs.append(x)
        x = layer.forward(x)
    logits = x
    labels = _check_labels(labels, logits.shape[1])

    probs = _softmax_rows(logits)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-log_probs[np.arange(n), labels].mean())

    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    grad /= n

    grads: list[Array] = []
    tape = LayerTape(step=0, n_layers=len(net.layers)) if want_tape else None
    for idx in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[idx]
        if layer.param is not None and tape is not None:
            tape.entries.append(
                TapeEntry(layer_index=idx, kind=layer.kind, x=inputs[idx], incoming=grad * n)
            )
        grad, grad_param = layer.backward(inputs[idx], grad)
        if layer.param is not None:
            grads.append(grad_param)
    grads.reverse()
    if tape is not None:
        tape.entries.reverse()
    return loss, grads, tape


def per_example_grads(net: Network, batch: Array, labels: Array) -> list[list[Array]]:
    """Gradient of each example's own loss, materialized per example.

    Returns one list of per-parameter arrays per example. Entry i equals
    loss_and_backward on the singleton batch {example i}. This is the
    memory-hungry direct route; the alignment kernels replace it.
    """
    n = batch.shape[0]
    inputs: list[Array] = []
    x = batch
    for layer in net.layers:
        inputs.append(x)
        x = layer.forward(x)
    labels = _check_labels(labels, x.shape[1])

    grad = _softmax_rows(x)
    grad[np.arange(n), labels] -= 1.0

    stacked: list[Array] = []
    for idx in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[idx]
        if layer.param is not None:
            stacked.append(layer.per_example_param_grads(inputs[idx], grad))
        grad, _ = layer.backward(inputs[idx], grad)
    stacked.reverse()
    return [[arr[i] for arr in stacked] for i in range(n)]


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

@dataclass
class SgdConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9        # Nesterov
    l2: float = 5e-4

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


@dataclass
class AdamConfig:
    learning_rate: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class SgdState:
    velocities: list[Array] | None = None


def sgd_step(net: Network, grads: list[Array], cfg: SgdConfig, state: SgdState) -> SgdState:
    """In-place Nesterov momentum update with L2 added to the raw gradient.

    v <- mu*v + g_reg;  theta <- theta - alpha * (g_reg + mu*v)
    (the lookahead folded into the update). With momentum 0 and l2 0 this is
    exactly theta - alpha*g.
    """
    params = [layer for layer in net.layers if layer.param is not None]
    if len(grads) != len(params):
        raise DimensionError(f"expected {len(params)} gradients, got {len(grads)}")
    if state.velocities is None:
        state.velocities = [np.zeros_like(layer.param) for layer in params]
    mu, alpha = cfg.momentum, cfg.learning_rate
    for layer, g, v in zip(params, grads, state.velocities):
        g_reg = g + cfg.l2 * layer.param
        v *= mu
        v += g_reg
        layer.param = layer.param - alpha * (g_reg + mu * v)
    return state


@dataclass
class AdamState:
    t: int = 0
    m: list[Array] | None = None
    v: list[Array] | None = None


def adam_step(params: list[Array], grads: list[Array], cfg: AdamConfig,
              state: AdamState) -> tuple[list[Array], AdamState]:
    """Standard bias-corrected Adam over a list of arrays; returns new params."""
    if len(params) != len(grads):
        raise DimensionError(f"expected {len(params)} gradients, got {len(grads)}")
    if state.m is None:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    out: list[Array] = []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** state.t)
        v_hat = v / (1 - b2 ** state.t)
        out.append(p - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps))
    return out, state
