"""Task-graph machinery: label sets, the dependency matrix, schema validation
and its text format, the shared-trunk model bundle, and hierarchical inference.

A graph has tasks 1..n. Entry d[i][j] of the dependency matrix names the label
of task j that activates task i; an absent entry means no dependency. Exactly
one task (the root) has an all-empty row. Labels that no task hangs off are
the terminal labels: hierarchical inference stops when it predicts one.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError, SchemaError, ShapeError
from .tensor_nn import (
    DEFAULT_DTYPE,
    FeatureExtractor,
    FeatureExtractorSpec,
    Head,
    HeadSpec,
    MaccCounter,
)

_LABEL_RE = re.compile(r"^[A-Za-z0-9_.\-]+$")

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class LabelSet:
    """Ordered, distinct labels of one task; class index = position."""

    task: int
    labels: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "labels", tuple(self.labels))

    @property
    def k(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        return self.labels.index(label)


class TaskGraph:
    """Tasks, their label sets, and the dependency matrix.

    Treated as immutable: operations that change the graph return a new one,
    so derived views (terminals, children) never go stale.
    """

    def __init__(
        self,
        label_sets: dict[int, tuple[str, ...]],
        deps: dict[int, dict[int, str]],
    ) -> None:
        self.label_sets = {
            tid: LabelSet(tid, tuple(labels)) for tid, labels in label_sets.items()
        }
        self.deps = {
            tid: dict(row) for tid, row in deps.items() if row
        }

    @property
    def n(self) -> int:
        return len(self.label_sets)

    @property
    def task_ids(self) -> list[int]:
        return sorted(self.label_sets)

    def labels_of(self, task: int) -> tuple[str, ...]:
        return self.label_sets[task].labels

    def dependency_row(self, task: int) -> dict[int, str]:
        return dict(self.deps.get(task, {}))

    def dependency_matrix(self) -> list[list[str | None]]:
        """Full n x n matrix; None marks an absent dependency."""
        ids = self.task_ids
        return [
            [self.deps.get(i, {}).get(j) for j in ids]
            for i in ids
        ]

    def parents_of(self, task: int) -> list[tuple[int, str]]:
        return sorted(self.deps.get(task, {}).items())

    def children_map(self) -> dict[tuple[int, str], int]:
        """(parent task, parent label) -> dependent task."""
        children: dict[tuple[int, str], int] = {}
        for child, row in self.deps.items():
            for parent, label in row.items():
                children[(parent, label)] = child
        return children

    def terminal_labels(self) -> tuple[str, ...]:
        """Derived composite label set, in task-id-major, label-position order."""
        used = {(p, lab) for row in self.deps.values() for p, lab in row.items()}
        out = []
        for tid in self.task_ids:
            for label in self.labels_of(tid):
                if (tid, label) not in used:
                    out.append(label)
        return tuple(out)

    def terminal_owner(self) -> dict[str, tuple[int, int]]:
        """terminal label -> (owning task, class index within that task)."""
        used = {(p, lab) for row in self.deps.values() for p, lab in row.items()}
        owners: dict[str, tuple[int, int]] = {}
        for tid in self.task_ids:
            for idx, label in enumerate(self.labels_of(tid)):
                if (tid, label) not in used:
                    owners[label] = (tid, idx)
        return owners

    def topological_order(self) -> list[int]:
        """Tasks ordered so every parent precedes its dependents."""
        indegree = {tid: len(self.deps.get(tid, {})) for tid in self.task_ids}
        ready = sorted(tid for tid, deg in indegree.items() if deg == 0)
        children: dict[int, list[int]] = {tid: [] for tid in self.task_ids}
        for child, row in self.deps.items():
            for parent in row:
                children[parent].append(child)
        order = []
        while ready:
            tid = ready.pop(0)
            order.append(tid)
            for child in sorted(set(children[tid])):
                indegree[child] -= len(
                    [1 for p in self.deps[child] if p == tid]
                )
                if indegree[child] == 0:
                    ready.append(child)
            ready.sort()
        if len(order) != self.n:
            raise SchemaError("dependency matrix contains a cycle")
        return order

    def root_paths(self, task: int) -> list[list[int]]:
        """All root-to-task chains (more than one only after dual attachment)."""
        parents = self.parents_of(task)
        if not parents:
            return [[task]]
        paths = []
        for parent, _label in parents:
            for prefix in self.root_paths(parent):
                paths.append(prefix + [task])
        return paths

    def copy_with(
        self,
        label_sets: dict[int, tuple[str, ...]] | None = None,
        deps: dict[int, dict[int, str]] | None = None,
    ) -> "TaskGraph":
        new_sets = {tid: ls.labels for tid, ls in self.label_sets.items()}
        if label_sets:
            new_sets.update(label_sets)
        new_deps = {tid: dict(row) for tid, row in self.deps.items()}
        if deps is not None:
            for tid, row in deps.items():
                new_deps[tid] = dict(row)
        return TaskGraph(new_sets, new_deps)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TaskGraph):
            return NotImplemented
        return (
            {t: ls.labels for t, ls in self.label_sets.items()}
            == {t: ls.labels for t, ls in other.label_sets.items()}
            and self.deps == other.deps
        )

    def __repr__(self) -> str:
        return f"TaskGraph(n={self.n}, terminals={self.terminal_labels()})"


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def validate_graph(graph: TaskGraph, require_tree: bool = False) -> list[str]:
    """Check every structural invariant; returns violations, empty if ok.

    With require_tree=True a task with more than one parent entry is also
    flagged; incremental task attachment may legitimately create one such
    task, so the default accepts it.
    """
    violations: list[str] = []
    ids = graph.task_ids
    if ids != list(range(1, len(ids) + 1)):
        violations.append(f"task ids must be 1..n, got {ids}")

    for tid in ids:
        labels = graph.labels_of(tid)
        if len(labels) < 2:
            violations.append(f"task {tid}: needs at least 2 labels, has {len(labels)}")
        if len(set(labels)) != len(labels):
            violations.append(f"task {tid}: duplicate labels {labels}")
        for label in labels:
            if not _LABEL_RE.match(label):
                violations.append(f"task {tid}: label {label!r} has invalid characters")

    for child, row in graph.deps.items():
        if child not in graph.label_sets:
            violations.append(f"dependency row for unknown task {child}")
            continue
        for parent, label in row.items():
            if parent not in graph.label_sets:
                violations.append(f"task {child}: depends on unknown task {parent}")
            elif label not in graph.labels_of(parent):
                violations.append(
                    f"task {child}: label {label!r} not in task {parent} label set"
                )
            if parent == child:
                violations.append(f"task {child}: depends on itself")

    roots = [tid for tid in ids if not graph.deps.get(tid)]
    if len(roots) != 1:
        violations.append(
            f"exactly one task must have an all-empty dependency row, found {roots}"
        )

    seen_pairs: dict[tuple[int, str], int] = {}
    for child in sorted(graph.deps):
        for parent, label in sorted(graph.deps[child].items()):
            pair = (parent, label)
            if pair in seen_pairs:
                violations.append(
                    f"tasks {seen_pairs[pair]} and {child} both depend on "
                    f"task {parent} label {label!r}"
                )
            else:
                seen_pairs[pair] = child

    if require_tree:
        for tid in ids:
            if len(graph.deps.get(tid, {})) > 1:
                violations.append(
                    f"task {tid}: has multiple parents (not a tree)"
                )

    # Cycle / reachability checks only make sense on structurally sound input.
    if not violations:
        try:
            graph.topological_order()
        except SchemaError:
            violations.append("dependency matrix contains a cycle")
        else:
            root = roots[0]
            reached = {root}
            frontier = [root]
            children = graph.children_map()
            while frontier:
                tid = frontier.pop()
                for (parent, _label), child in children.items():
                    if parent == tid and child not in reached:
                        reached.add(child)
                        frontier.append(child)
            unreachable = [tid for tid in ids if tid not in reached]
            if unreachable:
                violations.append(f"tasks unreachable from root: {unreachable}")

        terminals = graph.terminal_labels()
        if len(set(terminals)) != len(terminals):
            dupes = sorted({t for t in terminals if terminals.count(t) > 1})
            violations.append(f"terminal labels not globally distinct: {dupes}")

    return violations


def require_valid(graph: TaskGraph, require_tree: bool = False) -> None:
    violations = validate_graph(graph, require_tree=require_tree)
    if violations:
        raise SchemaError("; ".join(violations))


def root_task(graph: TaskGraph) -> int:
    """The unique task with an all-empty dependency row."""
    require_valid(graph)
    return next(tid for tid in graph.task_ids if not graph.deps.get(tid))


# ---------------------------------------------------------------------------
# Schema text format
# ---------------------------------------------------------------------------

def format_schema(graph: TaskGraph) -> str:
    """Canonical text serialization; parse_schema(format_schema(g)) == g."""
    lines = [f"schema-version {SCHEMA_VERSION}"]
    for tid in graph.task_ids:
        lines.append("task " + str(tid) + " " + " ".join(graph.labels_of(tid)))
    for child in sorted(graph.deps):
        for parent, label in sorted(graph.deps[child].items()):
            lines.append(f"dep {child} {parent} {label}")
    lines.append("terminal " + " ".join(graph.terminal_labels()))
    return "\n".join(lines) + "\n"


def parse_schema(text: str) -> TaskGraph:
    """Parse the schema text format and validate the result."""
    label_sets: dict[int, tuple[str, ...]] = {}
    deps: dict[int, dict[int, str]] = {}
    declared_terminals: list[str] | None = None
    version_seen = False

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        kind = parts[0]
        try:
            if kind == "schema-version":
                if int(parts[1]) != SCHEMA_VERSION:
                    raise DataFormatError(
                        f"line {lineno}: unsupported schema version {parts[1]}"
                    )
                version_seen = True
            elif kind == "task":
                tid = int(parts[1])
                if tid in label_sets:
                    raise DataFormatError(f"line {lineno}: duplicate task {tid}")
                label_sets[tid] = tuple(parts[2:])
            elif kind == "dep":
                child, parent = int(parts[1]), int(parts[2])
                row = deps.setdefault(child, {})
                if parent in row:
                    raise DataFormatError(
                        f"line {lineno}: duplicate dep ({child}, {parent})"
                    )
                row[parent] = parts[3]
            elif kind == "terminal":
                declared_terminals = parts[1:]
            else:
                raise DataFormatError(f"line {lineno}: unknown directive {kind!r}")
        except (IndexError, ValueError) as exc:
            raise DataFormatError(f"line {lineno}: malformed {kind!r} line") from exc

    if not version_seen:
        raise DataFormatError("missing schema-version line")
    if not label_sets:
        raise DataFormatError("schema declares no tasks")
    if declared_terminals is None:
        raise DataFormatError("missing terminal declaration line")

    graph = TaskGraph(label_sets, deps)
    require_valid(graph)
    derived = graph.terminal_labels()
    if sorted(declared_terminals) != sorted(derived):
        raise SchemaError(
            f"declared terminals {sorted(declared_terminals)} != "
            f"derived {sorted(derived)}"
        )
    return graph


# ---------------------------------------------------------------------------
# Model bundle
# ---------------------------------------------------------------------------

class ModelBundle:
    """Shared feature extractor plus one classifier head per task."""

    def __init__(
        self, graph: TaskGraph, fe: FeatureExtractor, heads: dict[int, Head]
    ) -> None:
        if set(heads) != set(graph.task_ids):
            raise SchemaError(
                f"head tasks {sorted(heads)} != graph tasks {graph.task_ids}"
            )
        for tid, head in heads.items():
            if head.input_dim != fe.feature_dim:
                raise ShapeError(
                    f"head {tid} input dim {head.input_dim} != "
                    f"feature dim {fe.feature_dim}"
                )
            if head.num_classes != graph.label_sets[tid].k:
                raise ShapeError(
                    f"head {tid} has {head.num_classes} classes, task has "
                    f"{graph.label_sets[tid].k} labels"
                )
        self.graph = graph
        self.fe = fe
        self.heads = heads

    @classmethod
    def from_seed(
        cls,
        graph: TaskGraph,
        fe_spec: FeatureExtractorSpec,
        head_specs: dict[int, HeadSpec] | None = None,
        seed: int = 0,
        dtype=DEFAULT_DTYPE,
    ) -> "ModelBundle":
        """Seeded initialization; FE first, then heads in task-id order."""
        require_valid(graph)
        rng = np.random.default_rng(seed)
        fe = FeatureExtractor.from_seed(fe_spec, rng, dtype)
        heads = {}
        for tid in graph.task_ids:
            spec = (head_specs or {}).get(
                tid, HeadSpec.single(graph.label_sets[tid].k)
            )
            heads[tid] = Head.from_seed(spec, fe.feature_dim, rng, dtype)
        return cls(graph, fe, heads)

    def named_params(self) -> list[tuple[str, np.ndarray]]:
        out = self.fe.named_params("fe")
        for tid in self.graph.task_ids:
            out.extend(self.heads[tid].named_params(f"head{tid}"))
        return out

    def copy(self) -> "ModelBundle":
        return ModelBundle(
            self.graph,
            self.fe.copy(),
            {tid: head.copy() for tid, head in self.heads.items()},
        )


@dataclass
class TraceStep:
    task: int
    predicted_label: str
    probabilities: np.ndarray


@dataclass
class InferenceTrace:
    """The sequence of task decisions that produced a terminal prediction."""

    steps: list[TraceStep]
    final_label: str

    @property
    def task_path(self) -> list[int]:
        return [step.task for step in self.steps]


def infer_hierarchical(
    bundle: ModelBundle,
    window: np.ndarray,
    counter: MaccCounter | None = None,
) -> InferenceTrace:
    """Run the trunk once, then route through heads until a terminal label.

    At every visited task the head's argmax label either triggers a dependent
    task (continue there) or is terminal (stop). Argmax ties break toward the
    lowest class index.
    """
    graph = bundle.graph
    feature = bundle.fe.forward(window, counter)
    children = graph.children_map()
    terminals = set(graph.terminal_labels())

    task = root_task(graph)
    steps: list[TraceStep] = []
    for _ in range(graph.n):
        probs = bundle.heads[task].forward(feature, counter)
        label = graph.labels_of(task)[int(np.argmax(probs))]
        steps.append(TraceStep(task=task, predicted_label=label, probabilities=probs))
        if (task, label) in children:
            task = children[(task, label)]
        elif label in terminals:
            return InferenceTrace(steps=steps, final_label=label)
        else:
            raise SchemaError(
                f"task {task} predicted {label!r}, which neither triggers a "
                f"task nor is terminal"
            )
    raise SchemaError("inference exceeded task count without reaching a terminal")


def forward_all_heads(
    bundle: ModelBundle,
    window: np.ndarray,
    counter: MaccCounter | None = None,
) -> dict[int, np.ndarray]:
    """One trunk pass, every head evaluated. Used by joint training."""
    feature = bundle.fe.forward(window, counter)
    return {
        tid: bundle.heads[tid].forward(feature, counter)
        for tid in bundle.graph.task_ids
    }


def compute_activation_weights(
    graph: TaskGraph,
    head_outputs: dict[int, np.ndarray],
    true_labels: dict[int, int] | None = None,
) -> dict[int, float]:
    """Per-task activation probability under the routing schema.

    The root gets weight 1. Every other task accumulates, over its parents,
    the parent's weight times the confidence that the parent predicts the
    activating label. Confidence is the parent head's softmax score for that
    label, or, when true_labels is given (teacher forcing), an exact 0/1
    indicator against the parent's ground-truth class. Tasks absent from
    true_labels count as indicator 0.
    """
    require_valid(graph)
    weights: dict[int, float] = {}
    for tid in graph.topological_order():
        row = graph.deps.get(tid)
        if not row:
            weights[tid] = 1.0
            continue
        total = 0.0
        for parent, label in row.items():
            label_idx = graph.label_sets[parent].index(label)
            if true_labels is not None:
                conf = 1.0 if true_labels.get(parent) == label_idx else 0.0
            else:
                conf = float(head_outputs[parent][label_idx])
            total += conf * weights[parent]
        weights[tid] = total
    return weights
