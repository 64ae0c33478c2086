"""Per-example gradient-alignment kernels.

Computes, for every example i in a batch, the dot product between example
i's own parameter gradient and a reference gradient g, using only the layer
inputs and incoming gradients already cached during backprop:

  bias    r_i  = <incoming_i, g>
  linear  r_i  = <incoming_i, x_i^T g>          (row-wise, batched as (x g))
  conv    r_i  = sum_pixels incoming_i * conv2d(x_i, g)

summed over layers. Per-example full gradients are never materialized; the
largest intermediate is activation-sized. `naive_alignment_oracle` is the
independent cross-check that does materialize them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import nn
from .errors import ArchitectureError, DimensionError

Array = np.ndarray


@dataclass
class AlignmentResult:
    rewards: Array                         # (n,)
    per_layer_contributions: Array | None  # (n, n_layers) when requested


def bias_alignment(incoming: Array, g_bias: Array) -> Array:
    """result[i] = dot(incoming[i], g_bias)."""
    if incoming.shape[1:] != g_bias.shape:
        raise DimensionError(
            f"bias_alignment: incoming {incoming.shape} vs gradient {g_bias.shape}"
        )
    n = incoming.shape[0]
    return incoming.reshape(n, -1) @ g_bias.ravel()


def linear_alignment(x: Array, incoming: Array, g: Array) -> Array:
    """result[i] = <x_i incoming_i^T, g>, computed as rowwise dot of (x g)
    with incoming. No (n, d1, d2) buffer is ever built."""
    if x.ndim != 2 or incoming.ndim != 2 or g.ndim != 2:
        raise DimensionError("linear_alignment expects 2-D x, incoming and g")
    if g.shape != (x.shape[1], incoming.shape[1]) or x.shape[0] != incoming.shape[0]:
        raise DimensionError(
            f"linear_alignment: x {x.shape}, incoming {incoming.shape}, g {g.shape}"
        )
    return np.einsum("nj,nj->n", x @ g, incoming)


def conv_alignment(x: Array, incoming: Array, g: Array) -> Array:
    """Single-channel case: result[i] = sum(incoming[i] * conv2d(x[i], g))."""
    if x.shape != incoming.shape or x.ndim != 3:
        raise DimensionError(
            f"conv_alignment: x {x.shape} vs incoming {incoming.shape}, expected (n, H, W)"
        )
    from .tensor import conv2d_batch

    return np.einsum("nhw,nhw->n", conv2d_batch(x, g), incoming)


def conv_alignment_multichannel(x: Array, incoming: Array, g: Array) -> Array:
    """Sum of the single-channel kernel over (out, in) channel pairs.

    x (n, C, H, W), incoming (n, O, H, W), g (O, C, c1, c2).
    """
    if x.ndim != 4 or incoming.ndim != 4 or g.ndim != 4:
        raise DimensionError("conv_alignment_multichannel expects 4-D operands")
    if g.shape[0] != incoming.shape[1] or g.shape[1] != x.shape[1]:
        raise DimensionError(
            f"conv_alignment_multichannel: x {x.shape}, incoming {incoming.shape}, g {g.shape}"
        )
    c1, c2 = g.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (c1 // 2, c1 // 2), (c2 // 2, c2 // 2)))
    windows = sliding_window_view(xp, (c1, c2), axis=(2, 3))  # view, no copy
    n = x.shape[0]
    rewards = np.zeros(n)
    for o in range(g.shape[0]):
        for c in range(g.shape[1]):
            conv = np.einsum("nhwij,ij->nhw", windows[:, c], g[o, c])
            rewards += np.einsum("nhw,nhw->n", conv, incoming[:, o])
    return rewards


def assemble_alignment(
    tape: nn.LayerTape, reference_grads: list[Array], with_contributions: bool = False
) -> AlignmentResult:
    """Sum the per-layer kernels across a whole network.

    reference_grads must match the tape's parameterized layers in order and
    shape; parameter-free layers contribute zero (still listed in the
    diagnostics matrix when requested).
    """
    if len(reference_grads) != len(tape.entries):
        raise ArchitectureError(
            f"tape has {len(tape.entries)} parameterized layers, "
            f"got {len(reference_grads)} reference gradients"
        )
    n = tape.entries[0].incoming.shape[0] if tape.entries else 0
    rewards = np.zeros(n)
    contributions = np.zeros((n, tape.n_layers)) if with_contributions else None
    for entry, g in zip(tape.entries, reference_grads):
        if entry.kind == "bias":
            if g.shape != entry.incoming.shape[1:]:
                raise ArchitectureError(
                    f"layer {entry.layer_index}: bias gradient {g.shape} "
                    f"vs incoming {entry.incoming.shape}"
                )
            part = bias_alignment(entry.incoming, g)
        elif entry.kind == "linear":
            part = linear_alignment(entry.x, entry.incoming, g)
        elif entry.kind == "conv":
            part = conv_alignment_multichannel(entry.x, entry.incoming, g)
        else:
            raise ArchitectureError(f"unexpected tape entry kind {entry.kind!r}")
        rewards += part
        if contributions is not None:
            contributions[:, entry.layer_index] = part
    return AlignmentResult(rewards=rewards, per_layer_contributions=contributions)


def naive_alignment_oracle(
    net: nn.Network, batch: Array, labels: Array, reference_grads: list[Array]
) -> Array:
    """Materialize every per-example gradient and take full flattened dot
    products. Test-scale only; the independent oracle for the kernels above."""
    per_ex = nn.per_example_grads(net, batch, labels)
    ref_flat = np.concatenate([g.ravel() for g in reference_grads])
    out = np.empty(len(per_ex))
    for i, grads in enumerate(per_ex):
        out[i] = np.concatenate([g.ravel() for g in grads]) @ ref_flat
    return out
