"""Learnable sampling distributions over non-differentiable meta-actions.

Three samplers with exact analytic log-probability gradients:

* SplitPolicy  -- the "inverted" softmax over dataset splits,
                  p_i = (1 - softmax(s)_i) / (N - 1), which biases toward a
                  single loser instead of a single winner.
* OlaPolicy    -- augmentation-count, keep and strength logits for the
                  online-learned augmentation sampler.
* ua_sample    -- the fixed uniform-augmentation baseline (no parameters).

All gradients are of log p wrt the raw logits, suitable for REINFORCE
accumulation; the uniform without-replacement subset choice in the
augmentation samplers carries no learnable parameter and contributes zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ActionError, ConfigError
from .tensor import Rng

Array = np.ndarray

STRENGTH_BINS = 31     # integer strengths {0, ..., 30}
MAX_AUG_COUNT = 4      # augmentation count r is drawn from {1, ..., 4}


def softmax(z: Array) -> Array:
    e = np.exp(z - z.max())
    return e / e.sum()


def sigmoid(x: Array) -> Array:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ez = np.exp(x[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# action records
# ---------------------------------------------------------------------------

@dataclass
class SplitAction:
    split: int


@dataclass
class AugChoice:
    op_index: int
    keep: bool
    strength: int | None   # present iff keep

    def __post_init__(self):
        if self.keep != (self.strength is not None):
            raise ActionError("strength must be present exactly when keep is true")


@dataclass
class AugmentAction:
    choices: list[AugChoice]   # in application order, ops distinct

    @property
    def count(self) -> int:
        return len(self.choices)


ActionRecord = SplitAction | AugmentAction


# ---------------------------------------------------------------------------
# split policy
# ---------------------------------------------------------------------------

class SplitPolicy:
    """Learned logits s over N >= 2 splits, initialized to zero."""

    def __init__(self, n_splits: int):
        if n_splits < 2:
            raise ConfigError(f"need at least 2 splits, got {n_splits}")
        self.s = np.zeros(n_splits)

    def param_arrays(self) -> list[Array]:
        return [self.s]

    def set_param_arrays(self, params: list[Array]) -> None:
        self.s = np.array(params[0], dtype=np.float64)

    def prob_column_names(self) -> list[str]:
        return [f"p_split_{i}" for i in range(self.s.size)]

    def prob_columns(self) -> Array:
        return split_probs(self)

    def to_json(self) -> str:
        return json.dumps({"s": self.s.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "SplitPolicy":
        doc = json.loads(text)
        policy = cls(len(doc["s"]))
        policy.s = np.asarray(doc["s"], dtype=np.float64)
        return policy


def split_probs(policy: SplitPolicy) -> Array:
    """p_i = (1 - softmax(s)_i) / (N - 1); sums to 1, each p_i <= 1/(N-1)."""
    sm = softmax(policy.s)
    return (1.0 - sm) / (policy.s.size - 1)


def split_log_prob_grad(policy: SplitPolicy, split_index: int) -> Array:
    """d log p(split_index) / d s, exactly.

    With sm = softmax(s): d log p_a / d s_j = -sm_a (delta_aj - sm_j) / (1 - sm_a).
    """
    n = policy.s.size
    if not 0 <= split_index < n:
        raise ActionError(f"split index {split_index} out of range for {n} splits")
    sm = softmax(policy.s)
    a = split_index
    grad = sm[a] * sm / (1.0 - sm[a])
    grad[a] -= sm[a] / (1.0 - sm[a])
    return grad


def split_log_prob_grad_table(policy: SplitPolicy) -> Array:
    """Row a = split_log_prob_grad(policy, a); one (N, N) table per step lets
    per-example gradients be gathered without a Python loop."""
    sm = softmax(policy.s)
    table = (sm / (1.0 - sm))[:, None] * sm[None, :]
    table[np.arange(sm.size), np.arange(sm.size)] -= sm / (1.0 - sm)
    return table


# ---------------------------------------------------------------------------
# OLA policy
# ---------------------------------------------------------------------------

class OlaPolicy:
    """Zero-initialized logits for the learned augmentation sampler.

    l_r (4,)                count logits, p(r) = softmax over {1, ..., 4}
    l_d (n_ops,)            keep logits, p(keep) = sigmoid
    l_a (n_ops, 31)         strength logits, p(k) = softmax per op
    """

    def __init__(self, n_ops: int):
        if n_ops < MAX_AUG_COUNT:
            raise ConfigError(
                f"need at least {MAX_AUG_COUNT} augmentation ops, got {n_ops}"
            )
        self.n_ops = n_ops
        self.l_r = np.zeros(MAX_AUG_COUNT)
        self.l_d = np.zeros(n_ops)
        self.l_a = np.zeros((n_ops, STRENGTH_BINS))

    def param_arrays(self) -> list[Array]:
        return [self.l_r, self.l_d, self.l_a]

    def set_param_arrays(self, params: list[Array]) -> None:
        self.l_r = np.array(params[0], dtype=np.float64)
        self.l_d = np.array(params[1], dtype=np.float64)
        self.l_a = np.array(params[2], dtype=np.float64)

    def keep_probs(self) -> Array:
        return sigmoid(self.l_d)

    def count_probs(self) -> Array:
        return softmax(self.l_r)

    def strength_probs(self, op_index: int) -> Array:
        return softmax(self.l_a[op_index])

    def prob_column_names(self) -> list[str]:
        return [f"p_r_{r}" for r in range(1, MAX_AUG_COUNT + 1)] + [
            f"keep_{i}" for i in range(self.n_ops)
        ]

    def prob_columns(self) -> Array:
        return np.concatenate([self.count_probs(), self.keep_probs()])

    def to_json(self) -> str:
        return json.dumps(
            {"l_r": self.l_r.tolist(), "l_d": self.l_d.tolist(), "l_a": self.l_a.tolist()}
        )

    @classmethod
    def from_json(cls, text: str) -> "OlaPolicy":
        doc = json.loads(text)
        policy = cls(len(doc["l_d"]))
        policy.l_r = np.asarray(doc["l_r"], dtype=np.float64)
        policy.l_d = np.asarray(doc["l_d"], dtype=np.float64)
        policy.l_a = np.asarray(doc["l_a"], dtype=np.float64)
        return policy


def ola_sample(policy: OlaPolicy, rng: Rng) -> AugmentAction:
    """One pass of the learned sampling procedure.

    r ~ softmax(l_r) over {1..4}; r distinct ops uniformly without
    replacement; per op in draw order a keep flag ~ sigmoid(l_d[op]), and a
    strength ~ softmax(l_a[op]) only when kept.
    """
    r = int(rng.categorical(policy.count_probs())) + 1
    ops = rng.choice_without_replacement(policy.n_ops, r)
    keep_p = policy.keep_probs()
    choices: list[AugChoice] = []
    for op in ops:
        op = int(op)
        keep = bool(rng.uniform() < keep_p[op])
        strength = int(rng.categorical(policy.strength_probs(op))) if keep else None
        choices.append(AugChoice(op_index=op, keep=keep, strength=strength))
    return AugmentAction(choices=choices)


def ola_log_prob_grad(policy: OlaPolicy, action: AugmentAction) -> tuple[Array, Array, Array]:
    """Gradients of log p(action) wrt (l_r, l_d, l_a).

    log p = log p(r) + sum_j log p(d_j) + sum_{j kept} log p(k_j); the
    uniform subset choice is constant in the logits and drops out.
    """
    if not 1 <= action.count <= MAX_AUG_COUNT:
        raise ActionError(f"augmentation count {action.count} outside 1..{MAX_AUG_COUNT}")
    seen = set()
    for choice in action.choices:
        if not 0 <= choice.op_index < policy.n_ops or choice.op_index in seen:
            raise ActionError(f"invalid or repeated op index {choice.op_index}")
        seen.add(choice.op_index)

    g_r = -policy.count_probs()
    g_r[action.count - 1] += 1.0

    g_d = np.zeros(policy.n_ops)
    g_a = np.zeros((policy.n_ops, STRENGTH_BINS))
    keep_p = policy.keep_probs()
    for choice in action.choices:
        g_d[choice.op_index] = (1.0 if choice.keep else 0.0) - keep_p[choice.op_index]
        if choice.keep:
            row = -policy.strength_probs(choice.op_index)
            row[choice.strength] += 1.0
            g_a[choice.op_index] = row
    return g_r, g_d, g_a


def ua_sample(rng: Rng, n_ops: int) -> AugmentAction:
    """Fixed uniform baseline: 2 distinct ops, keep ~ Bern(0.5) each, kept
    strengths uniform over the integer grid. No learnable parameters."""
    if n_ops < 2:
        raise ConfigError(f"need at least 2 augmentation ops, got {n_ops}")
    ops = rng.choice_without_replacement(n_ops, 2)
    choices: list[AugChoice] = []
    for op in ops:
        keep = bool(rng.uniform() < 0.5)
        strength = int(rng.integers(0, STRENGTH_BINS)) if keep else None
        choices.append(AugChoice(op_index=int(op), keep=keep, strength=strength))
    return AugmentAction(choices=choices)
