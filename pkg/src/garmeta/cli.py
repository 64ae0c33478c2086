"""Experiment runner and benchmark harness.

Subcommands:

  noisy-splits   split-sampling experiment: can the policy learn to avoid a
                 label-noised dataset split?
  ola            online-learned augmentation with an interleaved plain
                 stream and a uniform-augmentation baseline arm
  verify         exact-enumeration check of the unbiasedness claim
  overhead       step-time / allocation comparison of plain SGD, the
                 alignment kernels and naive per-example gradients

Configuration is a flat JSON document; unknown keys are rejected. Flags
--seed/--out/--dataset/--mode override the file. Exit codes: 0 ok,
2 config error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
import tracemalloc
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import augment, galign, meta, nn
from .data import (
    Dataset,
    load_cifar10_binary,
    make_noisy_splits,
    synth_blobs,
    synth_images,
)
from .errors import ConfigError
from .meta import (
    InterleavedAugmentSource,
    SplitBatchSource,
    TinyProblem,
    TrainConfig,
    train_loop,
    verify_unbiasedness,
    write_trace_csv,
)
from .nn import AdamConfig, SgdConfig, SgdState, build_network
from .policies import OlaPolicy, SplitPolicy
from .tensor import Rng

Array = np.ndarray

DEFAULT_AUGMENTATIONS = [
    "identity",
    "flip_lr",
    "translate_x",
    "brightness",
    "gaussian_noise_canary",
]


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    experiment: str = ""
    seed: int = 0
    seeds: list[int] | None = None
    runs: int | None = None
    steps: int | None = None
    batch_size: int | None = None
    learning_rate: float = 0.1
    momentum: float = 0.9
    l2: float = 5e-4
    meta_learning_rate: float = 0.1
    window: int | None = None
    mode: str = meta.MODE_GAR
    dataset: str = "synth"
    out_dir: str = "out"
    network: list | None = None
    augmentations: list[str] | None = None
    classes: int | None = None
    per_class: int | None = None
    dims: int = 16
    splits: int = 10
    noisy_split: int = 0
    image_side: int = 8
    subset_size: int = 10000
    warmup_iters: int = 10
    measure_iters: int = 50
    alpha: float = 1.0

    _POSITIVE = ("steps", "batch_size", "learning_rate", "meta_learning_rate",
                 "window", "classes", "per_class", "dims", "splits", "image_side",
                 "runs", "subset_size", "warmup_iters", "measure_iters", "alpha")

    @classmethod
    def load(cls, config_path: str | None, overrides: dict) -> "ExperimentConfig":
        doc: dict = {}
        if config_path is not None:
            try:
                doc = json.loads(Path(config_path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
            if not isinstance(doc, dict):
                raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls) if not f.name.startswith("_")}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        doc.update({k: v for k, v in overrides.items() if v is not None})
        cfg = cls(**doc)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.mode not in meta.MODES:
            raise ConfigError(f"mode must be one of {meta.MODES}, got {self.mode!r}")
        for name in self._POSITIVE:
            value = getattr(self, name)
            if value is not None and value <= 0:
                raise ConfigError(f"{name} must be positive, got {value}")
        if self.splits < 2:
            raise ConfigError("need at least 2 splits")
        if not 0 <= self.noisy_split < self.splits:
            raise ConfigError(f"noisy_split {self.noisy_split} out of range")
        if not self.dataset.startswith(("synth", "cifar10:")):
            raise ConfigError(f"dataset must be 'synth' or 'cifar10:<path>', got {self.dataset!r}")
        for name in self.augmentations or []:
            augment.get_op(name)

    def seed_list(self, default_runs: int) -> list[int]:
        if self.seeds is not None:
            return [int(s) for s in self.seeds]
        return [self.seed + i for i in range(self.runs or default_runs)]


def _load_dataset_for_splits(cfg: ExperimentConfig, seed: int) -> Dataset:
    if cfg.dataset == "synth":
        return synth_blobs(cfg.classes or 10, cfg.per_class or 1000, cfg.dims, seed)
    path = Path(cfg.dataset.split(":", 1)[1])
    files = sorted(path.glob("*.bin")) if path.is_dir() else [path]
    ds = load_cifar10_binary(files)
    if len(ds) > cfg.subset_size:
        ds = Dataset(images=ds.images[: cfg.subset_size],
                     labels=ds.labels[: cfg.subset_size],
                     class_count=ds.class_count)
    return ds


def _feature_count(ds: Dataset) -> int:
    return int(np.prod(ds.images.shape[1:]))


def _ci95(values: Array) -> float:
    if values.size < 2:
        return 0.0
    return float(1.96 * values.std(ddof=1) / np.sqrt(values.size))


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# noisy-splits experiment
# ---------------------------------------------------------------------------

@dataclass
class UsageReport:
    """Per-split usage: AUC_i is the time-mean of (S-1) * p_i, which the
    inverted softmax bounds to [0, 1]; a uniform policy sits at (S-1)/S."""

    auc: Array
    mean_probs: Array
    series: Array            # (steps, S)

    def to_dict(self) -> dict:
        return {
            "auc": self.auc.tolist(),
            "mean_probs": self.mean_probs.tolist(),
            "series": self.series.tolist(),
        }


def usage_from_rows(rows: list[meta.TraceRow], n_splits: int) -> UsageReport:
    series = np.stack([row.probs for row in rows])
    mean_probs = series.mean(axis=0)
    return UsageReport(auc=(n_splits - 1) * mean_probs, mean_probs=mean_probs,
                       series=series)


def run_noisy_splits(cfg: ExperimentConfig) -> dict:
    """Train with split sampling over every seed; write one trace per seed
    plus usage.json with mean AUC and 95% CIs."""
    steps = cfg.steps or 1500
    batch_size = cfg.batch_size or 256
    window = cfg.window or 10
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    per_seed = []
    for seed in cfg.seed_list(default_runs=5):
        rng = Rng(seed)
        ds = _load_dataset_for_splits(cfg, seed)
        sds = make_noisy_splits(ds, cfg.splits, cfg.noisy_split, rng)
        net_spec = cfg.network or [
            ["flatten"],
            ["linear", _feature_count(ds), 200], ["bias", 200], ["relu"],
            ["linear", 200, ds.class_count], ["bias", ds.class_count],
        ]
        net = build_network(net_spec, rng)
        policy = SplitPolicy(cfg.splits)
        source = SplitBatchSource(sds, batch_size)
        train_cfg = TrainConfig(
            steps=steps, mode=cfg.mode,
            sgd=SgdConfig(cfg.learning_rate, cfg.momentum, cfg.l2),
            meta_adam=AdamConfig(cfg.meta_learning_rate), window=window,
        )
        result = train_loop(net, source, policy, train_cfg, rng)
        usage = usage_from_rows(result.rows, cfg.splits)
        write_trace_csv(result.rows, policy.prob_column_names(),
                        out / f"trace_seed{seed}.csv")
        (out / f"policy_seed{seed}.json").write_text(policy.to_json() + "\n")
        per_seed.append((seed, usage))

    auc = np.stack([u.auc for _, u in per_seed])
    noisy = cfg.noisy_split
    others = [s for s in range(cfg.splits) if s != noisy]
    report = {
        "experiment": "noisy-splits",
        "mode": cfg.mode,
        "splits": cfg.splits,
        "noisy_split": noisy,
        "seeds": [s for s, _ in per_seed],
        "auc_mean": auc.mean(axis=0).tolist(),
        "auc_ci95": [_ci95(auc[:, s]) for s in range(cfg.splits)],
        "noisy_auc_mean": float(auc[:, noisy].mean()),
        "other_auc_mean": float(auc[:, others].mean()),
        "auc_sum_per_seed": auc.sum(axis=1).tolist(),
        "per_seed": {str(s): u.to_dict() for s, u in per_seed},
    }
    _write_json(out / "usage.json", report)
    return report


# ---------------------------------------------------------------------------
# OLA experiment
# ---------------------------------------------------------------------------

def _accuracy(net: nn.Network, ds: Dataset) -> float:
    logits = nn.forward(net, ds.images)
    return float((logits.argmax(axis=1) == ds.labels).mean())


def run_ola(cfg: ExperimentConfig) -> dict:
    """Learned-augmentation arm plus a uniform-augmentation baseline arm per
    seed; write traces and report.json with policy evolution and accuracy."""
    op_names = cfg.augmentations or DEFAULT_AUGMENTATIONS
    if len(op_names) < 4 or "gaussian_noise_canary" not in op_names:
        raise ConfigError(
            "ola needs at least 4 augmentation ops including gaussian_noise_canary"
        )
    ops = augment.resolve_ops(op_names)
    steps = cfg.steps or 2000
    batch_size = cfg.batch_size or 64
    window = cfg.window or 1
    classes = cfg.classes or 10
    per_class = cfg.per_class or 300
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    net_spec = cfg.network or [
        ["conv", 1, 4, 3, 3], ["bias", 4, cfg.image_side, cfg.image_side], ["relu"],
        ["flatten"],
        ["linear", 4 * cfg.image_side * cfg.image_side, classes], ["bias", classes],
    ]

    arms: dict[str, list[dict]] = {"ola": [], "ua": []}
    for seed in cfg.seed_list(default_runs=3):
        train_ds = synth_images(classes, per_class, cfg.image_side, seed)
        test_ds = synth_images(classes, max(per_class // 5, 20), cfg.image_side,
                               seed + 7919)
        for arm in ("ola", "ua"):
            rng = Rng(seed)
            net = build_network(net_spec, rng)
            policy = OlaPolicy(len(ops))
            source = InterleavedAugmentSource(train_ds, batch_size, ops, sampler=arm)
            train_cfg = TrainConfig(
                steps=steps,
                mode=cfg.mode if arm == "ola" else meta.MODE_FIXED,
                sgd=SgdConfig(cfg.learning_rate, cfg.momentum, cfg.l2),
                meta_adam=AdamConfig(cfg.meta_learning_rate), window=window,
            )
            result = train_loop(net, source, policy, train_cfg, rng)
            write_trace_csv(result.rows, policy.prob_column_names(),
                            out / f"trace_{arm}_seed{seed}.csv")
            arms[arm].append({
                "seed": seed,
                "keep_probs": dict(zip(op_names, policy.keep_probs().tolist())),
                "count_probs": policy.count_probs().tolist(),
                "strength_probs": {
                    name: policy.strength_probs(i).tolist()
                    for i, name in enumerate(op_names)
                },
                "test_accuracy": _accuracy(net, test_ds),
            })
            (out / f"policy_{arm}_seed{seed}.json").write_text(policy.to_json() + "\n")

    report = {
        "experiment": "ola",
        "mode": cfg.mode,
        "ops": op_names,
        "steps": steps,
        "ola": arms["ola"],
        "ua": arms["ua"],
        "ola_accuracy_mean": float(np.mean([r["test_accuracy"] for r in arms["ola"]])),
        "ua_accuracy_mean": float(np.mean([r["test_accuracy"] for r in arms["ua"]])),
    }
    _write_json(out / "report.json", report)
    return report


# ---------------------------------------------------------------------------
# unbiasedness verification
# ---------------------------------------------------------------------------

def default_tiny_problem(seed: int, alpha: float = 1.0) -> TinyProblem:
    """Three candidate training points, a 2x3 linear classifier with bias,
    and a fixed 6-example reference batch."""
    rng = Rng(seed)
    net = build_network([["linear", 2, 3], ["bias", 3]], rng)
    actions = [
        (np.array([1.5, 0.3]), 0),
        (np.array([-0.4, 1.2]), 1),
        (np.array([-1.0, -1.1]), 2),
    ]
    ref_images = np.array([
        [1.2, 0.1], [0.9, -0.3],
        [-0.2, 1.4], [0.1, 0.8],
        [-1.3, -0.9], [-0.7, -1.2],
    ])
    ref_labels = np.array([0, 0, 1, 1, 2, 2])
    policy = SplitPolicy(len(actions))
    policy.s = np.array([0.4, -0.2, 0.1])
    return TinyProblem(net=net, actions=actions, policy=policy,
                       ref_images=ref_images, ref_labels=ref_labels, alpha=alpha)


def run_verify(cfg: ExperimentConfig) -> dict:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = verify_unbiasedness(default_tiny_problem(cfg.seed, cfg.alpha))
    errors = report["rel_error"]
    report["monotone_error_trend"] = all(
        errors[i + 1] <= errors[i] * 1.05 for i in range(len(errors) - 1)
    )
    _write_json(out / "report.json", report)
    return report


# ---------------------------------------------------------------------------
# overhead benchmark
# ---------------------------------------------------------------------------

def _bench_net_and_batch(cfg: ExperimentConfig, rng: Rng):
    side = 16
    classes = 10
    spec = [
        ["conv", 1, 4, 3, 3], ["bias", 4, side, side], ["relu"],
        ["flatten"],
        ["linear", 4 * side * side, 128], ["bias", 128], ["relu"],
        ["linear", 128, classes], ["bias", classes],
    ]
    net = build_network(spec, rng)
    n = cfg.batch_size or 128
    batch = rng.uniform((n, 1, side, side))
    labels = np.asarray(rng.integers(0, classes, size=n))
    return net, batch, labels


def _run_mode_steps(mode: str, net: nn.Network, batch: Array, labels: Array,
                    sgd_cfg: SgdConfig, iters: int, timed: bool) -> list[float]:
    """One warm state per call; returns per-step seconds when timed."""
    state = SgdState()
    prev_tape = None
    prev_grads = None
    times: list[float] = []
    for _ in range(iters):
        start = time.perf_counter() if timed else 0.0
        loss, grads, tape = nn.loss_and_backward(
            net, batch, labels, want_tape=(mode == "gar")
        )
        if mode == "gar":
            if prev_tape is not None:
                galign.assemble_alignment(prev_tape, grads)
            prev_tape = tape
        elif mode == "naive":
            if prev_grads is not None:
                galign.naive_alignment_oracle(net, batch, labels, prev_grads)
            prev_grads = grads
        nn.sgd_step(net, grads, sgd_cfg, state)
        if timed:
            times.append(time.perf_counter() - start)
    return times


def run_overhead(cfg: ExperimentConfig) -> dict:
    """Median step times and peak allocations for plain SGD, the alignment
    kernels, and naive per-example gradients, on a shared net/batch spec."""
    warmup = max(cfg.warmup_iters, 10)
    measure = max(cfg.measure_iters, 50)
    sgd_cfg = SgdConfig(cfg.learning_rate, cfg.momentum, cfg.l2)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    report: dict = {"experiment": "overhead", "warmup_iters": warmup,
                    "measure_iters": measure}
    step_ms: dict[str, float] = {}
    for mode in ("baseline", "gar", "naive"):
        rng = Rng(cfg.seed)
        net, batch, labels = _bench_net_and_batch(cfg, rng)
        _run_mode_steps(mode, net, batch, labels, sgd_cfg, warmup, timed=False)
        times = _run_mode_steps(mode, net, batch, labels, sgd_cfg, measure, timed=True)
        step_ms[mode] = float(np.median(times) * 1000.0)

        tracemalloc.start()
        _run_mode_steps(mode, net, batch, labels, sgd_cfg, 3, timed=False)
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        report[f"{mode}_step_ms"] = step_ms[mode]
        report[f"{mode}_peak_alloc_bytes"] = int(peak)

    # allocation accounting for the alignment kernels alone
    rng = Rng(cfg.seed)
    net, batch, labels = _bench_net_and_batch(cfg, rng)
    _, grads, tape = nn.loss_and_backward(net, batch, labels, want_tape=True)
    tracemalloc.start()
    galign.assemble_alignment(tape, grads)
    _, assemble_peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    n_times_params = batch.shape[0] * net.param_count() * 8

    report["assemble_peak_alloc_bytes"] = int(assemble_peak)
    report["n_times_params_bytes"] = int(n_times_params)
    report["gar_overhead_ratio"] = (step_ms["gar"] - step_ms["baseline"]) / step_ms["baseline"]
    report["naive_overhead_ratio"] = (step_ms["naive"] - step_ms["baseline"]) / step_ms["baseline"]
    _write_json(out / "report.json", report)
    return report


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

RUNNERS = {
    "noisy-splits": run_noisy_splits,
    "ola": run_ola,
    "verify": run_verify,
    "overhead": run_overhead,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="garmeta",
                                     description="in-loop meta-learning experiments")
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name in RUNNERS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", default=None, help="flat JSON config file")
        cmd.add_argument("--seed", type=int, default=None)
        cmd.add_argument("--out", default=None, help="output directory")
        cmd.add_argument("--dataset", default=None,
                         help="synth or cifar10:<path>")
        cmd.add_argument("--mode", choices=list(meta.MODES), default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {
        "experiment": args.experiment,
        "seed": args.seed,
        "out_dir": args.out,
        "dataset": args.dataset,
        "mode": args.mode,
    }
    try:
        cfg = ExperimentConfig.load(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        report = RUNNERS[args.experiment](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit 3
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3
    summary = {k: v for k, v in report.items()
               if isinstance(v, (int, float, str, bool))}
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
