"""Joint training of the shared trunk and all task heads as one multi-output
problem, with each task's loss weighted by its activation probability.

Weights are treated as constants per sample: no gradient flows through a
weight into the parent heads that produced it. A task whose weight is zero
(e.g. off the sample's routing path under teacher forcing) contributes
nothing and its head receives an exactly-zero gradient on that sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .errors import DataFormatError, NumericError, SchemaError
from .hierarchy import (
    ModelBundle,
    TaskGraph,
    compute_activation_weights,
    infer_hierarchical,
    require_valid,
)
from .tensor_nn import (
    SgdState,
    cross_entropy,
    sgd_step,
    softmax_cross_entropy_grad,
)


class _OffPath:
    """Sentinel marking a task not on a sample's root-to-terminal path."""

    def __repr__(self) -> str:
        return "OFF_PATH"


OFF_PATH = _OffPath()

AlphaMode = Literal["predicted", "teacher_forced"]

# Off-path tasks still need a class index to evaluate a loss against. Their
# label sets never route toward the sample's path, so no informative choice
# exists; class 0 is used and the activation weight suppresses the term.
OFF_PATH_SURROGATE = 0


@dataclass
class MultiLabelSample:
    """One window with a class index (or OFF_PATH) for every task."""

    window: np.ndarray
    labels: dict[int, object]  # task id -> class index | OFF_PATH
    terminal_label: str


@dataclass
class TrainConfig:
    epochs: int = 20
    learning_rate: float = 0.05
    rng_seed: int = 0
    alpha_mode: AlphaMode = "predicted"
    shuffle: bool = True
    freeze_feature_extractor: bool = False

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.alpha_mode not in ("predicted", "teacher_forced"):
            raise ValueError(f"unknown alpha_mode {self.alpha_mode!r}")


@dataclass
class TrainReport:
    """Per-epoch losses plus optional held-out accuracy."""

    epoch_losses: list[float] = field(default_factory=list)
    per_task_losses: list[dict[int, float]] = field(default_factory=list)
    holdout_per_class: dict[str, float] | None = None
    holdout_accuracy: float | None = None


def derive_task_labels(graph: TaskGraph, terminal_label: str) -> dict[int, object]:
    """Per-task class indices for a sample whose final label is terminal_label.

    Walks the unique root-to-terminal chain; each task on it gets the class
    index that routes toward the terminal, every other task gets OFF_PATH.
    """
    owners = graph.terminal_owner()
    if terminal_label not in owners:
        raise SchemaError(f"terminal label {terminal_label!r} unreachable")
    owner, class_idx = owners[terminal_label]
    paths = graph.root_paths(owner)
    if len(paths) != 1:
        raise SchemaError(
            f"terminal label {terminal_label!r} reachable via {len(paths)} paths; "
            f"per-task labels are only defined on a tree"
        )
    path = paths[0]
    labels: dict[int, object] = {tid: OFF_PATH for tid in graph.task_ids}
    for pos, tid in enumerate(path):
        if tid == owner:
            labels[tid] = class_idx
        else:
            routing_label = graph.deps[path[pos + 1]][tid]
            labels[tid] = graph.label_sets[tid].index(routing_label)
    return labels


def make_samples(
    graph: TaskGraph, windows: list[tuple[np.ndarray, str]]
) -> list[MultiLabelSample]:
    """Expand (window, terminal label) pairs into fully labeled samples."""
    return [
        MultiLabelSample(
            window=window,
            labels=derive_task_labels(graph, terminal),
            terminal_label=terminal,
        )
        for window, terminal in windows
    ]


def _loss_labels(sample: MultiLabelSample) -> dict[int, int]:
    return {
        tid: (OFF_PATH_SURROGATE if label is OFF_PATH else int(label))
        for tid, label in sample.labels.items()
    }


def _true_labels(sample: MultiLabelSample) -> dict[int, int]:
    return {
        tid: int(label)
        for tid, label in sample.labels.items()
        if label is not OFF_PATH
    }


def joint_loss(
    bundle: ModelBundle, sample: MultiLabelSample, alpha_mode: AlphaMode = "predicted"
) -> tuple[float, dict[int, tuple[float, float]]]:
    """Total weighted loss and, per task, its (weight, unweighted loss)."""
    loss, per_task, _ = _joint_loss_and_grads(
        bundle, sample, alpha_mode, want_grads=False
    )
    return loss, per_task


def joint_loss_and_grads(
    bundle: ModelBundle, sample: MultiLabelSample, alpha_mode: AlphaMode = "predicted"
) -> tuple[float, dict[int, tuple[float, float]], dict[str, np.ndarray]]:
    """Loss plus gradients for every parameter, keyed by parameter name."""
    return _joint_loss_and_grads(bundle, sample, alpha_mode, want_grads=True)


def _joint_loss_and_grads(
    bundle: ModelBundle,
    sample: MultiLabelSample,
    alpha_mode: AlphaMode,
    want_grads: bool,
):
    graph = bundle.graph
    feature, fe_caches = bundle.fe.forward_with_cache(sample.window)

    outputs: dict[int, np.ndarray] = {}
    head_caches = {}
    for tid in graph.task_ids:
        outputs[tid], head_caches[tid] = bundle.heads[tid].forward_with_cache(feature)

    true_labels = _true_labels(sample) if alpha_mode == "teacher_forced" else None
    weights = compute_activation_weights(graph, outputs, true_labels)

    loss_labels = _loss_labels(sample)
    total = 0.0
    per_task: dict[int, tuple[float, float]] = {}
    for tid in graph.task_ids:
        task_loss = cross_entropy(outputs[tid], loss_labels[tid])
        per_task[tid] = (weights[tid], task_loss)
        total += weights[tid] * task_loss

    if not want_grads:
        return total, per_task, None

    grads: dict[str, np.ndarray] = {}
    dfeature = np.zeros_like(feature)
    for tid in graph.task_ids:
        head = bundle.heads[tid]
        if weights[tid] == 0.0:
            layer_grads = head.zero_grads()
        else:
            dlogits = weights[tid] * softmax_cross_entropy_grad(
                outputs[tid], loss_labels[tid]
            )
            layer_grads, dfeat = head.backward_from_logits(head_caches[tid], dlogits)
            dfeature += dfeat
        for u, (dw, db) in enumerate(layer_grads):
            grads[f"head{tid}.layer{u}.weight"] = dw
            grads[f"head{tid}.layer{u}.bias"] = db

    fe_grads, _ = bundle.fe.backward(fe_caches, dfeature)
    for w, (dw, db) in enumerate(fe_grads):
        grads[f"fe.block{w}.weight"] = dw
        grads[f"fe.block{w}.bias"] = db

    return total, per_task, grads


def train_joint(
    bundle: ModelBundle,
    dataset: list[MultiLabelSample],
    config: TrainConfig,
    holdout: list[MultiLabelSample] | None = None,
) -> tuple[ModelBundle, TrainReport]:
    """Sample-at-a-time SGD over the trunk and all heads. Mutates bundle."""
    require_valid(bundle.graph)
    if not dataset:
        raise DataFormatError("training dataset is empty")

    state = SgdState(learning_rate=config.learning_rate, rng_seed=config.rng_seed)
    shuffle_rng = np.random.default_rng(config.rng_seed)

    if config.freeze_feature_extractor:
        named_params = []
        for tid in bundle.graph.task_ids:
            named_params.extend(bundle.heads[tid].named_params(f"head{tid}"))
    else:
        named_params = bundle.named_params()

    report = TrainReport()
    for epoch in range(config.epochs):
        order = (
            shuffle_rng.permutation(len(dataset))
            if config.shuffle
            else np.arange(len(dataset))
        )
        epoch_loss = 0.0
        task_losses = {tid: 0.0 for tid in bundle.graph.task_ids}
        for position, sample_idx in enumerate(order):
            sample = dataset[int(sample_idx)]
            loss, per_task, grads = joint_loss_and_grads(
                bundle, sample, config.alpha_mode
            )
            if not np.isfinite(loss):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, sample {int(sample_idx)} "
                    f"(position {position})"
                )
            named_grads = [(name, grads[name]) for name, _ in named_params]
            sgd_step(named_params, named_grads, state)
            epoch_loss += loss
            for tid, (_, task_loss) in per_task.items():
                task_losses[tid] += task_loss
        report.epoch_losses.append(epoch_loss / len(dataset))
        report.per_task_losses.append(
            {tid: value / len(dataset) for tid, value in task_losses.items()}
        )

    if holdout is not None:
        per_class, overall, _ = evaluate_bundle(bundle, holdout)
        report.holdout_per_class = per_class
        report.holdout_accuracy = overall

    return bundle, report


def evaluate_bundle(
    bundle: ModelBundle, samples: list[MultiLabelSample]
) -> tuple[dict[str, float], float, dict[tuple[str, str], int]]:
    """Per-class accuracy, overall accuracy, and the terminal confusion counts."""
    totals: dict[str, int] = {}
    correct: dict[str, int] = {}
    confusion: dict[tuple[str, str], int] = {}
    hits = 0
    for sample in samples:
        predicted = infer_hierarchical(bundle, sample.window).final_label
        truth = sample.terminal_label
        totals[truth] = totals.get(truth, 0) + 1
        confusion[(truth, predicted)] = confusion.get((truth, predicted), 0) + 1
        if predicted == truth:
            correct[truth] = correct.get(truth, 0) + 1
            hits += 1
    per_class = {
        label: correct.get(label, 0) / count for label, count in sorted(totals.items())
    }
    overall = hits / len(samples) if samples else 0.0
    return per_class, overall, confusion
