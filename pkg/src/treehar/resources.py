"""Exact parameter, activation-memory, and MACC accounting for three ways of
deploying the same task hierarchy:

  single_model   one trunk plus one flat head over all terminal labels
  multi_model    an independent trunk+head copy per task
  shared_trunk   one trunk shared by every per-task head (this package)

Counts are exact integers from the layer shapes; an instrumented forward pass
must reproduce the same numbers. Byte figures assume 4 bytes per stored value.
Biases are counted and reported, but separately: the new-head memory formula
in online_learning is weights-only.
"""

from __future__ import annotations

from dataclasses import dataclass

from .hierarchy import ModelBundle, TaskGraph, root_task
from .tensor_nn import FeatureExtractorSpec, HeadSpec

BYTES_PER_VALUE = 4


@dataclass(frozen=True)
class ComponentResource:
    """Weights, biases, and forward MACC of one network component."""

    name: str
    weight_count: int
    bias_count: int
    macc: int

    @property
    def param_count(self) -> int:
        return self.weight_count + self.bias_count

    @property
    def nbytes(self) -> int:
        return self.param_count * BYTES_PER_VALUE


@dataclass(frozen=True)
class DeploymentResource:
    """Totals for one deployment style."""

    name: str
    weight_count: int
    bias_count: int
    macc_worst: int
    macc_best: int
    macc_expected: float
    worst_path: tuple[int, ...]

    @property
    def param_count(self) -> int:
        return self.weight_count + self.bias_count

    @property
    def nbytes(self) -> int:
        return self.param_count * BYTES_PER_VALUE


@dataclass
class ResourceReport:
    components: list[ComponentResource]
    deployments: dict[str, DeploymentResource]
    activation_peak_bytes: int
    paths: list[tuple[int, ...]]

    def to_rows(self) -> list[tuple[str, str, int, int, int, int, int]]:
        """Machine rows: (kind, name, params, weights, biases, bytes, macc).

        params is the stored-value count (weights plus biases); weights and
        biases are also listed separately because the new-head memory formula
        is weights-only.
        """
        rows = [
            ("component", c.name, c.param_count, c.weight_count, c.bias_count,
             c.nbytes, c.macc)
            for c in self.components
        ]
        for key in ("single_model", "multi_model", "shared_trunk"):
            d = self.deployments[key]
            rows.append(
                ("deployment", d.name, d.param_count, d.weight_count,
                 d.bias_count, d.nbytes, d.macc_worst)
            )
        return rows

    def to_table(self) -> str:
        lines = [
            f"{'component':<22}{'weights':>10}{'biases':>8}{'bytes':>10}{'macc':>12}"
        ]
        for c in self.components:
            lines.append(
                f"{c.name:<22}{c.weight_count:>10}{c.bias_count:>8}"
                f"{c.nbytes:>10}{c.macc:>12}"
            )
        lines.append("")
        lines.append(
            f"{'deployment':<22}{'weights':>10}{'biases':>8}{'bytes':>10}"
            f"{'macc worst':>12}{'macc best':>12}{'macc expected':>15}"
        )
        for key in ("single_model", "multi_model", "shared_trunk"):
            d = self.deployments[key]
            lines.append(
                f"{d.name:<22}{d.weight_count:>10}{d.bias_count:>8}{d.nbytes:>10}"
                f"{d.macc_worst:>12}{d.macc_best:>12}{d.macc_expected:>15.1f}"
            )
        lines.append("")
        lines.append(
            f"activation peak (shared trunk, worst path): "
            f"{self.activation_peak_bytes} bytes"
        )
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# Per-component counts
# ---------------------------------------------------------------------------

def fe_macc(spec: FeatureExtractorSpec) -> int:
    """Conv MACC: out_len * filters * kernel * in_channels, summed over blocks."""
    total = 0
    shapes = spec.layer_shapes()
    for w, block in enumerate(spec.blocks):
        in_channels, in_len = shapes[w]
        conv_len = in_len - block.kernel_size + 1
        total += conv_len * block.num_filters * block.kernel_size * in_channels
    return total


def head_macc(spec: HeadSpec, feature_dim: int) -> int:
    """Dense MACC: in * out per layer."""
    total = 0
    previous = feature_dim
    for width in spec.layer_widths:
        total += previous * width
        previous = width
    return total


def count_macc(bundle: ModelBundle) -> tuple[int, dict[int, int]]:
    """Trunk MACC and per-task head MACC from the layer shapes."""
    trunk = fe_macc(bundle.fe.spec)
    heads = {
        tid: head_macc(head.spec, bundle.fe.feature_dim)
        for tid, head in bundle.heads.items()
    }
    return trunk, heads


def fe_param_counts(spec: FeatureExtractorSpec) -> tuple[int, int]:
    """(weight count, bias count) of the trunk."""
    weights = biases = 0
    shapes = spec.layer_shapes()
    for w, block in enumerate(spec.blocks):
        in_channels = shapes[w][0]
        weights += block.num_filters * in_channels * block.kernel_size
        biases += block.num_filters
    return weights, biases


def head_param_counts(spec: HeadSpec, feature_dim: int) -> tuple[int, int]:
    """(weight count, bias count) of one head."""
    weights = biases = 0
    previous = feature_dim
    for width in spec.layer_widths:
        weights += width * previous
        biases += width
        previous = width
    return weights, biases


# ---------------------------------------------------------------------------
# Activation memory
# ---------------------------------------------------------------------------

def fe_activation_sizes(spec: FeatureExtractorSpec) -> list[int]:
    """Value counts of the input and of every conv/pool output in order.

    Flattening is a view, so the flat feature is the last pool output and is
    not listed twice.
    """
    shapes = spec.layer_shapes()
    sizes = [shapes[0][0] * shapes[0][1]]
    channels, length = shapes[0]
    for w, block in enumerate(spec.blocks):
        conv_len = length - block.kernel_size + 1
        sizes.append(block.num_filters * conv_len)
        length = conv_len // block.pool_size
        channels = block.num_filters
        sizes.append(channels * length)
    return sizes


def activation_peak(bundle: ModelBundle, path: list[int]) -> int:
    """Peak bytes to hold two consecutive activations along trunk + heads.

    The trunk output feeds every head on the path, so each head contributes
    the pairs of the sequence [feature_dim, its layer widths...]. A network
    with a single activation (no blocks, impossible with a head attached)
    would peak at that activation alone.
    """
    sizes = fe_activation_sizes(bundle.fe.spec)
    pair_sums = [sizes[i] + sizes[i + 1] for i in range(len(sizes) - 1)]
    peak_values = max(pair_sums) if pair_sums else sizes[0]
    feature_dim = bundle.fe.feature_dim
    for tid in path:
        widths = [feature_dim, *bundle.heads[tid].spec.layer_widths]
        for i in range(len(widths) - 1):
            peak_values = max(peak_values, widths[i] + widths[i + 1])
    return peak_values * BYTES_PER_VALUE


# ---------------------------------------------------------------------------
# Deployment comparison
# ---------------------------------------------------------------------------

def enumerate_paths(graph: TaskGraph) -> list[tuple[int, ...]]:
    """All distinct root-to-terminal task chains."""
    owners = graph.terminal_owner()
    seen: list[tuple[int, ...]] = []
    for label in graph.terminal_labels():
        owner, _ = owners[label]
        for path in graph.root_paths(owner):
            chain = tuple(path)
            if chain not in seen:
                seen.append(chain)
    return seen


def visit_probabilities(graph: TaskGraph) -> dict[int, float]:
    """Probability each task runs when every label is equally likely."""
    probs = {tid: 0.0 for tid in graph.task_ids}
    probs[root_task(graph)] = 1.0
    for tid in graph.topological_order():
        row = graph.deps.get(tid)
        if not row:
            continue
        probs[tid] = sum(
            probs[parent] / graph.label_sets[parent].k for parent in row
        )
    return probs


def compare_deployments(bundle: ModelBundle) -> ResourceReport:
    """Fill the three deployment totals plus per-component rows."""
    graph = bundle.graph
    trunk_macc, heads_macc = count_macc(bundle)
    trunk_w, trunk_b = fe_param_counts(bundle.fe.spec)
    feature_dim = bundle.fe.feature_dim

    components = [
        ComponentResource("trunk", trunk_w, trunk_b, trunk_macc)
    ]
    head_counts: dict[int, tuple[int, int]] = {}
    for tid in graph.task_ids:
        hw, hb = head_param_counts(bundle.heads[tid].spec, feature_dim)
        head_counts[tid] = (hw, hb)
        components.append(
            ComponentResource(f"head{tid}", hw, hb, heads_macc[tid])
        )

    flat_spec = HeadSpec.single(len(graph.terminal_labels()))
    flat_w, flat_b = head_param_counts(flat_spec, feature_dim)
    flat_macc = head_macc(flat_spec, feature_dim)
    components.append(
        ComponentResource("single_model_head", flat_w, flat_b, flat_macc)
    )

    paths = enumerate_paths(graph)
    probs = visit_probabilities(graph)

    def path_heads_macc(path: tuple[int, ...]) -> int:
        return sum(heads_macc[tid] for tid in path)

    # single model: no routing, one fixed cost
    single = DeploymentResource(
        name="single_model",
        weight_count=trunk_w + flat_w,
        bias_count=trunk_b + flat_b,
        macc_worst=trunk_macc + flat_macc,
        macc_best=trunk_macc + flat_macc,
        macc_expected=float(trunk_macc + flat_macc),
        worst_path=(),
    )

    # multi model: a trunk copy per visited task
    multi_costs = {p: sum(trunk_macc + heads_macc[t] for t in p) for p in paths}
    multi_worst = max(paths, key=lambda p: (multi_costs[p], p))
    multi = DeploymentResource(
        name="multi_model",
        weight_count=sum(trunk_w + head_counts[t][0] for t in graph.task_ids),
        bias_count=sum(trunk_b + head_counts[t][1] for t in graph.task_ids),
        macc_worst=multi_costs[multi_worst],
        macc_best=min(multi_costs.values()),
        macc_expected=sum(
            probs[t] * (trunk_macc + heads_macc[t]) for t in graph.task_ids
        ),
        worst_path=multi_worst,
    )

    # shared trunk: one trunk pass plus the visited heads
    shared_costs = {p: trunk_macc + path_heads_macc(p) for p in paths}
    shared_worst = max(paths, key=lambda p: (shared_costs[p], p))
    shared = DeploymentResource(
        name="shared_trunk",
        weight_count=trunk_w + sum(head_counts[t][0] for t in graph.task_ids),
        bias_count=trunk_b + sum(head_counts[t][1] for t in graph.task_ids),
        macc_worst=shared_costs[shared_worst],
        macc_best=min(shared_costs.values()),
        macc_expected=trunk_macc
        + sum(probs[t] * heads_macc[t] for t in graph.task_ids),
        worst_path=shared_worst,
    )

    return ResourceReport(
        components=components,
        deployments={
            "single_model": single,
            "multi_model": multi,
            "shared_trunk": shared,
        },
        activation_peak_bytes=activation_peak(bundle, list(shared_worst)),
        paths=paths,
    )
