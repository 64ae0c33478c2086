"""The in-loop meta-learning engine.

One SGD loop trains the network while REINFORCE adapts the sampling policy
from rewards computed one step later: each step's batch gradient resolves
the *previous* step's pending rewards before being applied as a normal
update. Two reward pipelines are supported:

* gar  -- per-example gradient-alignment rewards from the cached layer tape
          against the next step's batch gradient;
* nslr -- one scalar per step, the negated next-step batch loss.

The policy only influences its own reward through the sampled actions
(never through a differentiable path), which realizes the stop-gradient of
the update rule structurally. `verify_unbiasedness` checks the claim that
the expected GAR-REINFORCE update converges to the true meta-gradient as
the batch grows, by exact action enumeration against finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from . import galign, nn
from .augment import AugmentationOp, apply_action
from .data import Dataset, SplitDataset, sample_batch
from .errors import RewardError, VerifierError
from .nn import AdamConfig, AdamState, LayerTape, Network, SgdConfig, SgdState
from .policies import (
    OlaPolicy,
    SplitPolicy,
    ola_log_prob_grad,
    ola_sample,
    split_log_prob_grad_table,
    split_probs,
    ua_sample,
)
from .tensor import Rng

Array = np.ndarray

MODE_GAR = "gar"
MODE_NSLR = "nslr"
MODE_FIXED = "fixed"
MODES = (MODE_GAR, MODE_NSLR, MODE_FIXED)


# ---------------------------------------------------------------------------
# rewards
# ---------------------------------------------------------------------------

@dataclass
class RewardBatch:
    step: int
    raw: Array | float            # per-example vector (gar) or scalar (nslr)
    normalized: Array | None      # filled per step for gar; at flush for nslr


def normalize_rewards(raw: Array) -> Array:
    """(r - mean) / (population std + 1e-8); all zeros when the spread is
    degenerate (< 1e-12) so constant rewards cause no update."""
    raw = np.asarray(raw, dtype=np.float64)
    std = float(raw.std())
    if std < 1e-12:
        return np.zeros_like(raw)
    return (raw - raw.mean()) / (std + 1e-8)


def gar_rewards(pending: "PendingStep", next_batch_grads: list[Array]) -> RewardBatch:
    """Eq.-style alignment of step t's per-example gradients with the batch
    gradient just computed at theta_{t+1}."""
    raw = galign.assemble_alignment(pending.tape, next_batch_grads).rewards
    return RewardBatch(step=pending.step, raw=raw, normalized=normalize_rewards(raw))


def nslr_reward(next_batch_loss: float) -> float:
    return -float(next_batch_loss)


# ---------------------------------------------------------------------------
# REINFORCE accumulation
# ---------------------------------------------------------------------------

@dataclass
class PendingStep:
    """What step t leaves behind until step t+1's gradient arrives."""

    step: int
    tape: LayerTape | None           # None in nslr mode
    score_grads: list[Array]         # stacked per-param, leading axis = batch


class MetaAccumulator:
    """Accumulates -sum_i r_i * dlog p(a_i) per policy parameter and applies
    one Adam update each time `window` reward steps have been absorbed.

    nslr rewards are held back and normalized across the window's scalars at
    flush time, mirroring the per-step normalization of the gar vector."""

    def __init__(self, policy, adam_cfg: AdamConfig, window: int):
        if window < 1:
            raise RewardError(f"aggregation window must be >= 1, got {window}")
        self.policy = policy
        self.adam_cfg = adam_cfg
        self.adam_state = AdamState()
        self.window = window
        self.steps_accumulated = 0
        self.grads = [np.zeros_like(p) for p in policy.param_arrays()]
        self._nslr_pending: list[tuple[float, list[Array]]] = []

    def _flush(self) -> None:
        if self._nslr_pending:
            scalars = normalize_rewards(np.array([r for r, _ in self._nslr_pending]))
            for weight, sums in zip(scalars, (s for _, s in self._nslr_pending)):
                for acc, g in zip(self.grads, sums):
                    acc -= weight * g
            self._nslr_pending.clear()
        new_params, self.adam_state = nn.adam_step(
            self.policy.param_arrays(), self.grads, self.adam_cfg, self.adam_state
        )
        self.policy.set_param_arrays(new_params)
        self.grads = [np.zeros_like(p) for p in self.policy.param_arrays()]
        self.steps_accumulated = 0


def reinforce_accumulate(
    acc: MetaAccumulator, rewards: RewardBatch, score_grads: list[Array]
) -> bool:
    """Absorb one reward step; returns True when this call flushed an update.

    Adam minimizes, so the accumulated gradient is the negated score sum."""
    if np.isscalar(rewards.raw):
        acc._nslr_pending.append(
            (float(rewards.raw), [g.sum(axis=0) for g in score_grads])
        )
    else:
        weights = rewards.normalized
        n = weights.shape[0]
        for g in score_grads:
            if g.shape[0] != n:
                raise RewardError(
                    f"{n} rewards but {g.shape[0]} log-prob gradients"
                )
        for slot, g in zip(acc.grads, score_grads):
            slot -= np.einsum("n,n...->...", weights, g)
    acc.steps_accumulated += 1
    if acc.steps_accumulated >= acc.window:
        acc._flush()
        return True
    return False


# ---------------------------------------------------------------------------
# batch sources
# ---------------------------------------------------------------------------

@dataclass
class StepBatch:
    images: Array
    labels: Array
    score_grads: list[Array] | None   # None on steps the policy did not drive


class BatchSource(Protocol):
    def next_batch(self, policy, rng: Rng, step: int, want_scores: bool) -> StepBatch: ...


class SplitBatchSource:
    """Every step samples each example's split from the policy, then a
    uniform element within it (the split-sampling experiment)."""

    def __init__(self, sds: SplitDataset, batch_size: int):
        self.sds = sds
        self.batch_size = batch_size

    def next_batch(self, policy: SplitPolicy, rng: Rng, step: int,
                   want_scores: bool) -> StepBatch:
        probs = split_probs(policy)
        images, labels, choices = sample_batch(self.sds, probs, self.batch_size, rng)
        scores = None
        if want_scores:
            scores = [split_log_prob_grad_table(policy)[choices]]
        return StepBatch(images=images, labels=labels, score_grads=scores)


class InterleavedAugmentSource:
    """Even steps draw a plain batch (their gradient doubles as the GAR
    reference for the preceding augmented step and as a normal update); odd
    steps augment each example with actions sampled from the policy.

    sampler="ola" draws from the learned policy; sampler="ua" runs the fixed
    uniform baseline (no score gradients, so the policy never updates)."""

    def __init__(self, ds: Dataset, batch_size: int, ops: list[AugmentationOp],
                 sampler: str = "ola"):
        if sampler not in ("ola", "ua"):
            raise ValueError(f"unknown sampler {sampler!r}")
        self.ds = ds
        self.batch_size = batch_size
        self.ops = ops
        self.sampler = sampler

    def next_batch(self, policy: OlaPolicy, rng: Rng, step: int,
                   want_scores: bool) -> StepBatch:
        idx = rng.integers(0, len(self.ds), size=self.batch_size)
        images = self.ds.images[idx]
        labels = self.ds.labels[idx]
        if step % 2 == 0:
            return StepBatch(images=images, labels=labels, score_grads=None)
        augmented = np.empty_like(images)
        actions = []
        for i in range(self.batch_size):
            if self.sampler == "ola":
                action = ola_sample(policy, rng)
            else:
                action = ua_sample(rng, len(self.ops))
            actions.append(action)
            augmented[i] = apply_action(images[i], action, self.ops, rng)
        scores = None
        if want_scores and self.sampler == "ola":
            per_example = [ola_log_prob_grad(policy, a) for a in actions]
            scores = [np.stack([g[j] for g in per_example]) for j in range(3)]
        return StepBatch(images=augmented, labels=labels, score_grads=scores)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int
    mode: str = MODE_GAR
    sgd: SgdConfig = field(default_factory=SgdConfig)
    meta_adam: AdamConfig = field(default_factory=AdamConfig)
    window: int = 10

    def __post_init__(self):
        if self.steps < 2:
            raise ValueError("need at least 2 steps")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass
class TraceRow:
    step: int
    batch_loss: float
    probs: Array
    reward_mean: float | None
    reward_std: float | None
    meta_update_applied: bool


@dataclass
class TrainResult:
    net: Network
    policy: object
    rows: list[TraceRow]
    reward_batches: list[RewardBatch]


def train_loop(net: Network, source: BatchSource, policy, cfg: TrainConfig,
               rng: Rng) -> TrainResult:
    """Run cfg.steps SGD steps, resolving each pending meta step against the
    following step's gradient. In fixed mode the policy is bystander state
    and the loop is exactly plain SGD."""
    meta_on = cfg.mode != MODE_FIXED
    sgd_state = SgdState()
    acc = MetaAccumulator(policy, cfg.meta_adam, cfg.window) if meta_on else None
    pending: PendingStep | None = None
    rows: list[TraceRow] = []
    reward_batches: list[RewardBatch] = []

    for t in range(cfg.steps):
        probs_snapshot = policy.prob_columns()
        plan = source.next_batch(policy, rng, t, want_scores=meta_on)
        will_pend = meta_on and plan.score_grads is not None and t < cfg.steps - 1
        loss, grads, tape = nn.loss_and_backward(
            net, plan.images, plan.labels,
            want_tape=will_pend and cfg.mode == MODE_GAR,
        )

        reward_mean = reward_std = None
        applied = False
        if pending is not None:
            if cfg.mode == MODE_GAR:
                batch = gar_rewards(pending, grads)
                reward_mean = float(np.mean(batch.raw))
                reward_std = float(np.std(batch.raw))
            else:
                batch = RewardBatch(step=pending.step, raw=nslr_reward(loss),
                                    normalized=None)
                reward_mean = float(batch.raw)
                reward_std = 0.0
            applied = reinforce_accumulate(acc, batch, pending.score_grads)
            reward_batches.append(batch)
            pending = None

        nn.sgd_step(net, grads, cfg.sgd, sgd_state)

        if will_pend:
            if tape is not None:
                tape.step = t
            pending = PendingStep(step=t, tape=tape, score_grads=plan.score_grads)

        rows.append(TraceRow(step=t, batch_loss=loss, probs=probs_snapshot,
                             reward_mean=reward_mean, reward_std=reward_std,
                             meta_update_applied=applied))
    return TrainResult(net=net, policy=policy, rows=rows, reward_batches=reward_batches)


def write_trace_csv(rows: list[TraceRow], prob_names: list[str], path) -> None:
    """Trace schema: step, batch_loss, one column per policy probability,
    reward_mean, reward_std, meta_update_applied. Reruns are byte-identical."""
    lines = ["step,batch_loss," + ",".join(prob_names) + ",reward_mean,reward_std,meta_update_applied"]
    for row in rows:
        probs = ",".join(repr(float(p)) for p in row.probs)
        mean = "" if row.reward_mean is None else repr(row.reward_mean)
        std = "" if row.reward_std is None else repr(row.reward_std)
        lines.append(
            f"{row.step},{row.batch_loss!r},{probs},{mean},{std},{int(row.meta_update_applied)}"
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# unbiasedness verifier
# ---------------------------------------------------------------------------

@dataclass
class TinyProblem:
    """An exactly enumerable two-step pipeline.

    Each action is a training example candidate; a batch of size n draws n
    actions i.i.d. from the policy, takes one SGD step of size alpha on
    their mean gradient, and is scored by the loss of a fixed reference
    batch at the updated parameters."""

    net: Network
    actions: list[tuple[Array, int]]       # (input row, label) per action
    policy: SplitPolicy
    ref_images: Array
    ref_labels: Array
    alpha: float
    batch_sizes: tuple[int, ...] = (4, 16, 64, 256)

    def __post_init__(self):
        if len(self.actions) > 8:
            raise VerifierError(
                f"action space of {len(self.actions)} is too large to enumerate"
            )
        if self.net.param_count() > 50:
            raise VerifierError(
                f"verifier nets are capped at 50 parameters, got {self.net.param_count()}"
            )


def _flat(arrays: list[Array]) -> Array:
    return np.concatenate([a.ravel() for a in arrays])


def _compositions(total: int, parts: int):
    """All count vectors of `parts` non-negative ints summing to `total`."""
    if parts == 1:
        yield (total,)
        return
    for head in range(total + 1):
        for rest in _compositions(total - head, parts - 1):
            yield (head, *rest)


def _log_multinomial(counts: Array, log_p: Array) -> float:
    n = int(counts.sum())
    out = math.lgamma(n + 1) + float(counts @ log_p)
    for c in counts:
        out -= math.lgamma(int(c) + 1)
    return out


def verify_unbiasedness(problem: TinyProblem) -> dict:
    """Compare the exact expected GAR-REINFORCE update, -(alpha/n) *
    E[sum_i r_i dlog p(a_i)] enumerated over all action assignments, with
    the meta-gradient of the expected pipeline obtained by central finite
    differences over the policy logits."""
    k = len(problem.actions)
    theta = [p.copy() for p in problem.net.parameters()]
    work = problem.net.copy()

    action_grads = []
    for x, y in problem.actions:
        work.set_parameters(theta)
        _, grads, _ = nn.loss_and_backward(
            work, x[None, :], np.array([y]), want_tape=False
        )
        action_grads.append(grads)
    grad_stack = [np.stack([g[j] for g in action_grads])
                  for j in range(len(action_grads[0]))]
    grad_flat = np.stack([_flat(g) for g in action_grads])          # (K, P)

    def ref_loss_and_grad(params: list[Array]) -> tuple[float, Array]:
        work.set_parameters(params)
        loss, grads, _ = nn.loss_and_backward(
            work, problem.ref_images, problem.ref_labels, want_tape=False
        )
        return loss, _flat(grads)

    # True meta-gradient of the expected pipeline via central differences.
    def expected_pipeline(logits: Array) -> float:
        probe = SplitPolicy(k)
        probe.s = logits
        p = split_probs(probe)
        stepped = [
            th - problem.alpha * np.einsum("a,a...->...", p, gs)
            for th, gs in zip(theta, grad_stack)
        ]
        loss, _ = ref_loss_and_grad(stepped)
        return loss

    h = 1e-5
    meta_grad = np.zeros(k)
    base_logits = problem.policy.s.copy()
    for j in range(k):
        up, down = base_logits.copy(), base_logits.copy()
        up[j] += h
        down[j] -= h
        meta_grad[j] = (expected_pipeline(up) - expected_pipeline(down)) / (2 * h)

    probs = split_probs(problem.policy)
    log_p = np.log(probs)
    score_table = split_log_prob_grad_table(problem.policy)          # (K, K)

    exact_updates = []
    cosines = []
    rel_errors = []
    truth_norm = float(np.linalg.norm(meta_grad))
    for n in problem.batch_sizes:
        update = np.zeros(k)
        for counts in _compositions(n, k):
            counts = np.asarray(counts, dtype=np.float64)
            weight = math.exp(_log_multinomial(counts, log_p))
            stepped = [
                th - (problem.alpha / n) * np.einsum("a,a...->...", counts, gs)
                for th, gs in zip(theta, grad_stack)
            ]
            _, ref_grad = ref_loss_and_grad(stepped)
            rewards = grad_flat @ ref_grad                           # r_a given counts
            update += weight * ((counts * rewards) @ score_table)
        update *= -problem.alpha / n
        exact_updates.append(update)
        denom = truth_norm * float(np.linalg.norm(update))
        cosines.append(float(update @ meta_grad) / denom if denom > 1e-300 else 0.0)
        rel_errors.append(float(np.linalg.norm(update - meta_grad)) / (truth_norm + 1e-12))

    return {
        "batch_sizes": list(problem.batch_sizes),
        "cosine": cosines,
        "rel_error": rel_errors,
        "exact_updates": [u.tolist() for u in exact_updates],
        "meta_gradient": meta_grad.tolist(),
    }
