"""Adding a task after deployment: decide where it attaches in the schema by
counting what the existing hierarchy predicts for the acquired data, then
train only the new head against cached trunk features. The trunk is never
touched, so the extra training memory is bounded by the new head plus the
feature cache.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataFormatError, NumericError, SchemaError, ShapeError
from .hierarchy import ModelBundle, TaskGraph, infer_hierarchical, require_valid
from .tensor_nn import (
    DEFAULT_DTYPE,
    Head,
    HeadSpec,
    SgdState,
    cross_entropy,
    sgd_step,
    softmax_cross_entropy_grad,
)
from .training import TrainConfig

BYTES_PER_VALUE = 4


@dataclass
class AcquiredDataset:
    """Labeled windows collected for the new task."""

    windows: list[np.ndarray]
    class_indices: list[int]
    num_classes: int

    def __post_init__(self) -> None:
        if not self.windows:
            raise DataFormatError("acquired dataset is empty")
        if len(self.windows) != len(self.class_indices):
            raise DataFormatError(
                f"{len(self.windows)} windows vs {len(self.class_indices)} labels"
            )
        bad = [c for c in self.class_indices if not 0 <= c < self.num_classes]
        if bad:
            raise DataFormatError(
                f"class indices {sorted(set(bad))} out of range for "
                f"{self.num_classes} classes"
            )

    def __len__(self) -> int:
        return len(self.windows)


@dataclass
class FeatureCache:
    """Trunk outputs for every acquired sample, paired with its class index."""

    features: list[np.ndarray]
    class_indices: list[int]

    def __len__(self) -> int:
        return len(self.features)

    @property
    def value_count(self) -> int:
        return sum(f.shape[0] for f in self.features)

    @property
    def nbytes(self) -> int:
        """On-device footprint estimate at 4 bytes per stored value."""
        return self.value_count * BYTES_PER_VALUE


@dataclass
class PlacementDecision:
    """Outcome of counting hierarchy predictions over the acquired data."""

    counts: dict[str, int]
    sample_count: int
    top_label: str
    top_frequency: float
    second_label: str | None
    second_frequency: float
    delta: float | None = None
    attach_to: tuple[str, ...] | None = None


@dataclass
class HeadTrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    cache_bytes: int = 0


def collect_placement_counts(
    bundle: ModelBundle, data: AcquiredDataset
) -> PlacementDecision:
    """Predict every acquired window and tally terminal-label frequencies."""
    require_valid(bundle.graph)
    terminals = bundle.graph.terminal_labels()
    counts = {label: 0 for label in terminals}
    for window in data.windows:
        counts[infer_hierarchical(bundle, window).final_label] += 1
    return decision_from_counts(counts, terminals)


def decision_from_counts(
    counts: dict[str, int], terminals: tuple[str, ...]
) -> PlacementDecision:
    """Rank terminals by count (descending, label order breaking ties)."""
    full = {label: counts.get(label, 0) for label in terminals}
    total = sum(full.values())
    if total == 0:
        raise DataFormatError("placement counts are all zero")
    ranked = sorted(terminals, key=lambda lab: (-full[lab], terminals.index(lab)))
    top = ranked[0]
    second = ranked[1] if len(ranked) > 1 else None
    return PlacementDecision(
        counts=full,
        sample_count=total,
        top_label=top,
        top_frequency=full[top] / total,
        second_label=second,
        second_frequency=(full[second] / total) if second is not None else 0.0,
    )


def select_node(decision: PlacementDecision, delta: float) -> PlacementDecision:
    """Attach to the top label alone only when its lead exceeds delta.

    Otherwise attach to the top two (an exact frequency tie also lands here;
    the ranking already lists the lower label index first). A hierarchy with
    a single terminal can only ever yield one attachment point.
    """
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"delta must be in [0, 1], got {delta}")
    if decision.second_label is None:
        attach: tuple[str, ...] = (decision.top_label,)
    elif decision.top_frequency - decision.second_frequency > delta:
        attach = (decision.top_label,)
    else:
        attach = (decision.top_label, decision.second_label)
    return replace(decision, delta=delta, attach_to=attach)


def attach_task(
    graph: TaskGraph, new_labels: tuple[str, ...], attach_to: tuple[str, ...]
) -> TaskGraph:
    """Hang a new task off one or two terminal labels; returns the new graph.

    The attachment labels stop being terminal and the new task's labels take
    their place in the composite label set.
    """
    owners = graph.terminal_owner()
    for label in attach_to:
        if label not in owners:
            raise SchemaError(f"attach label {label!r} is not a terminal label")
    if len(attach_to) not in (1, 2):
        raise SchemaError(f"can attach under 1 or 2 labels, got {len(attach_to)}")
    if len(set(attach_to)) != len(attach_to):
        raise SchemaError(f"attach labels must be distinct, got {attach_to}")

    new_id = graph.n + 1
    row = {owners[label][0]: label for label in attach_to}
    if len(row) != len(attach_to):
        raise SchemaError(
            f"attach labels {attach_to} share a parent task; pick distinct parents"
        )
    updated = graph.copy_with(
        label_sets={new_id: tuple(new_labels)},
        deps={new_id: row},
    )
    require_valid(updated)
    return updated


def detach_task(graph: TaskGraph, task_id: int) -> TaskGraph:
    """Inverse of attach_task for the most recently added task."""
    if task_id != graph.n:
        raise SchemaError(f"can only detach the highest task id {graph.n}")
    if any(task_id in row for row in graph.deps.values()):
        raise SchemaError(f"task {task_id} has dependents; detach those first")
    label_sets = {
        tid: ls.labels for tid, ls in graph.label_sets.items() if tid != task_id
    }
    deps = {tid: row for tid, row in graph.deps.items() if tid != task_id}
    updated = TaskGraph(label_sets, deps)
    require_valid(updated)
    return updated


def add_task_to_bundle(
    bundle: ModelBundle,
    new_labels: tuple[str, ...],
    head_spec: HeadSpec,
    attach_to: tuple[str, ...],
    seed: int,
    dtype=DEFAULT_DTYPE,
) -> tuple[ModelBundle, int]:
    """Attach a task and give it a freshly seeded head sharing the trunk."""
    graph = attach_task(bundle.graph, new_labels, attach_to)
    new_id = graph.n
    rng = np.random.default_rng(seed)
    head = Head.from_seed(head_spec, bundle.fe.feature_dim, rng, dtype)
    heads = dict(bundle.heads)
    heads[new_id] = head
    return ModelBundle(graph, bundle.fe, heads), new_id


def build_feature_cache(bundle: ModelBundle, data: AcquiredDataset) -> FeatureCache:
    """One trunk pass per sample; features are reused for every epoch."""
    features = [bundle.fe.forward(window) for window in data.windows]
    return FeatureCache(features=features, class_indices=list(data.class_indices))


def train_new_head(
    bundle: ModelBundle,
    task_id: int,
    data: AcquiredDataset,
    config: TrainConfig,
    use_cache: bool = True,
) -> HeadTrainReport:
    """Gradient descent on one head with the trunk frozen. Mutates the head.

    With use_cache the trunk runs once per sample up front; without it the
    trunk is re-run on demand. Both paths produce bit-identical heads for the
    same seed because the trunk is deterministic.
    """
    head = bundle.heads[task_id]
    if head.num_classes != data.num_classes:
        raise ShapeError(
            f"head {task_id} has {head.num_classes} classes, dataset has "
            f"{data.num_classes}"
        )

    cache = build_feature_cache(bundle, data) if use_cache else None
    report = HeadTrainReport(cache_bytes=cache.nbytes if cache else 0)

    named_params = head.named_params(f"head{task_id}")
    state = SgdState(learning_rate=config.learning_rate, rng_seed=config.rng_seed)
    shuffle_rng = np.random.default_rng(config.rng_seed)

    for _epoch in range(config.epochs):
        order = (
            shuffle_rng.permutation(len(data))
            if config.shuffle
            else np.arange(len(data))
        )
        epoch_loss = 0.0
        for sample_idx in order:
            i = int(sample_idx)
            feature = (
                cache.features[i] if cache else bundle.fe.forward(data.windows[i])
            )
            label = data.class_indices[i]
            probs, head_cache = head.forward_with_cache(feature)
            loss = cross_entropy(probs, label)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {_epoch}, sample {i}")
            dlogits = softmax_cross_entropy_grad(probs, label)
            layer_grads, _ = head.backward_from_logits(head_cache, dlogits)
            named_grads = []
            for u, (dw, db) in enumerate(layer_grads):
                named_grads.append((f"head{task_id}.layer{u}.weight", dw))
                named_grads.append((f"head{task_id}.layer{u}.bias", db))
            sgd_step(named_params, named_grads, state)
            epoch_loss += loss
        report.epoch_losses.append(epoch_loss / len(data))

    return report


def head_weight_memory(head_spec: HeadSpec, feature_dim: int) -> int:
    """Weight count of a head: sum over layers of width_u * width_{u-1},
    where width_0 is the trunk feature dimension. Biases counted separately.
    """
    if feature_dim < 1:
        raise ShapeError(f"feature_dim must be >= 1, got {feature_dim}")
    total = 0
    previous = feature_dim
    for width in head_spec.layer_widths:
        total += width * previous
        previous = width
    return total


@dataclass(frozen=True)
class HeadBudget:
    """What adding one head costs on-device: weights plus activation peak."""

    weight_count: int
    activation_bytes: int

    @property
    def weight_bytes(self) -> int:
        return self.weight_count * BYTES_PER_VALUE


def head_budget(head_spec: HeadSpec, feature_dim: int) -> HeadBudget:
    """Weight count via the memory formula, activation bytes via the
    two-consecutive-layers rule over [feature, layer widths...]."""
    widths = [feature_dim, *head_spec.layer_widths]
    peak = max(widths[i] + widths[i + 1] for i in range(len(widths) - 1))
    return HeadBudget(
        weight_count=head_weight_memory(head_spec, feature_dim),
        activation_bytes=peak * BYTES_PER_VALUE,
    )
