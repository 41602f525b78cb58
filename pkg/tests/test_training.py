from __future__ import annotations

import numpy as np
import pytest

from treehar.errors import DataFormatError, SchemaError
from treehar.hierarchy import ModelBundle, TaskGraph
from treehar.online_learning import AcquiredDataset, train_new_head
from treehar.tensor_nn import ConvBlockSpec, FeatureExtractorSpec, HeadSpec
from treehar.training import (
    OFF_PATH,
    MultiLabelSample,
    TrainConfig,
    derive_task_labels,
    evaluate_bundle,
    joint_loss,
    joint_loss_and_grads,
    train_joint,
)

from conftest import TINY_FE, make_bundle, random_window, single_task_graph, six_task_graph


def sample_for(graph, terminal, window):
    return MultiLabelSample(window, derive_task_labels(graph, terminal), terminal)


# ---------------------------------------------------------------------------
# label derivation
# ---------------------------------------------------------------------------

def test_derive_labels_for_upstairs():
    graph = six_task_graph()
    labels = derive_task_labels(graph, "upstairs")
    assert labels[1] == graph.label_sets[1].index("moving")
    assert labels[3] == graph.label_sets[3].index("walk_stairs")
    assert labels[5] == graph.label_sets[5].index("stairs")
    assert labels[6] == graph.label_sets[6].index("upstairs")
    assert labels[2] is OFF_PATH and labels[4] is OFF_PATH


def test_derive_labels_single_task():
    graph = single_task_graph(("up", "down"))
    assert derive_task_labels(graph, "down") == {1: 1}


def test_derive_labels_unreachable_terminal():
    with pytest.raises(SchemaError):
        derive_task_labels(six_task_graph(), "flying")


def test_derive_labels_every_terminal_routes_back():
    # path oracle: replaying the derived labels through the dependency matrix
    # must reach exactly the requested terminal
    graph = six_task_graph()
    children = graph.children_map()
    for terminal in graph.terminal_labels():
        labels = derive_task_labels(graph, terminal)
        task = 1
        while True:
            assert labels[task] is not OFF_PATH
            label = graph.labels_of(task)[labels[task]]
            if (task, label) in children:
                task = children[(task, label)]
            else:
                assert label == terminal
                break
        on_path = [tid for tid, lab in labels.items() if lab is not OFF_PATH]
        assert len(on_path) == len(graph.root_paths(graph.terminal_owner()[terminal][0])[0])


# ---------------------------------------------------------------------------
# joint loss
# ---------------------------------------------------------------------------

def test_joint_loss_single_task_is_plain_cross_entropy(rng):
    from treehar.tensor_nn import cross_entropy

    bundle = make_bundle(single_task_graph())
    window = random_window(rng, TINY_FE)
    sample = sample_for(bundle.graph, "left", window)
    total, per_task = joint_loss(bundle, sample)
    weight, task_loss = per_task[1]
    assert weight == 1.0
    probs = bundle.heads[1].forward(bundle.fe.forward(window))
    assert total == pytest.approx(cross_entropy(probs, 0))


def test_teacher_forced_off_path_weights_are_exactly_zero(rng):
    bundle = make_bundle(six_task_graph())
    sample = sample_for(bundle.graph, "running", random_window(rng, TINY_FE))
    total, per_task = joint_loss(bundle, sample, "teacher_forced")
    # path is 1 -> 3; the still side and the stair tasks carry zero weight
    for tid in (2, 4, 5, 6):
        assert per_task[tid][0] == 0.0
    expected = sum(w * l for w, l in (per_task[1], per_task[3]))
    assert total == pytest.approx(expected)


def test_predicted_loss_matches_path_enumeration_oracle(rng):
    from treehar.hierarchy import forward_all_heads

    bundle = make_bundle(six_task_graph(), seed=2)
    graph = bundle.graph
    window = random_window(rng, TINY_FE)
    sample = sample_for(graph, "walking", window)
    total, per_task = joint_loss(bundle, sample, "predicted")

    # oracle: task weight = sum over root-to-task paths of routing products
    outputs = forward_all_heads(bundle, window)
    oracle_weights = {}
    for tid in graph.task_ids:
        acc = 0.0
        for path in graph.root_paths(tid):
            product = 1.0
            for parent, child in zip(path, path[1:]):
                routing = graph.deps[child][parent]
                product *= float(
                    outputs[parent][graph.label_sets[parent].index(routing)]
                )
            acc += product
        oracle_weights[tid] = acc
    oracle_total = sum(
        oracle_weights[tid] * per_task[tid][1] for tid in graph.task_ids
    )
    assert total == pytest.approx(oracle_total, abs=1e-6)
    for tid in graph.task_ids:
        assert per_task[tid][0] == pytest.approx(oracle_weights[tid], abs=1e-9)


def test_zero_weight_tasks_get_bitwise_zero_gradients(rng):
    bundle = make_bundle(six_task_graph())
    sample = sample_for(bundle.graph, "lying", random_window(rng, TINY_FE))
    _, per_task, grads = joint_loss_and_grads(bundle, sample, "teacher_forced")
    for tid in (3, 4, 5, 6):
        assert per_task[tid][0] == 0.0
        for u in range(len(bundle.heads[tid].weights)):
            dw = grads[f"head{tid}.layer{u}.weight"]
            db = grads[f"head{tid}.layer{u}.bias"]
            zero_w = np.zeros_like(dw)
            assert dw.tobytes() == zero_w.tobytes()
            assert db.tobytes() == np.zeros_like(db).tobytes()


def test_joint_gradients_match_finite_differences_teacher_forced():
    # teacher-forced weights are genuine constants, so every parameter's
    # analytic gradient must match central differences; in predicted mode the
    # weights are deliberately held constant during backprop, so parameters
    # that influence a parent's softmax score would show the missing d(alpha)
    # term against a full finite difference.
    rng = np.random.default_rng(3)
    graph = TaskGraph(
        label_sets={1: ("a", "b"), 2: ("x", "y", "z")},
        deps={2: {1: "b"}},
    )
    fe_spec = FeatureExtractorSpec(2, 12, (ConvBlockSpec(3, 4, 2),))
    bundle = ModelBundle.from_seed(
        graph, fe_spec, {1: HeadSpec((5, 2), 2), 2: HeadSpec((3,), 3)},
        seed=7, dtype=np.float64,
    )
    window = rng.standard_normal((2, 12))
    sample = sample_for(graph, "y", window)
    _, _, grads = joint_loss_and_grads(bundle, sample, "teacher_forced")

    eps = 1e-3
    for name, param in bundle.named_params():
        grad = grads[name]
        for idx in np.ndindex(param.shape):
            old = param[idx]
            param[idx] = old + eps
            up, _ = joint_loss(bundle, sample, "teacher_forced")
            param[idx] = old - eps
            down, _ = joint_loss(bundle, sample, "teacher_forced")
            param[idx] = old
            fd = (up - down) / (2 * eps)
            denom = max(abs(fd), abs(grad[idx]), 1e-6)
            assert abs(fd - grad[idx]) / denom < 1e-4, f"{name}[{idx}]"


def test_predicted_gradients_match_fd_for_leaf_head():
    # a leaf head feeds no activation weight, so its gradients are exact even
    # in predicted mode
    rng = np.random.default_rng(4)
    graph = TaskGraph(
        label_sets={1: ("a", "b"), 2: ("x", "y")}, deps={2: {1: "a"}}
    )
    fe_spec = FeatureExtractorSpec(1, 10, (ConvBlockSpec(3, 3, 1),))
    bundle = ModelBundle.from_seed(graph, fe_spec, seed=5, dtype=np.float64)
    window = rng.standard_normal((1, 10))
    sample = sample_for(graph, "x", window)
    _, _, grads = joint_loss_and_grads(bundle, sample, "predicted")
    eps = 1e-3
    for name, param in bundle.heads[2].named_params("head2"):
        grad = grads[name]
        for idx in np.ndindex(param.shape):
            old = param[idx]
            param[idx] = old + eps
            up, _ = joint_loss(bundle, sample, "predicted")
            param[idx] = old - eps
            down, _ = joint_loss(bundle, sample, "predicted")
            param[idx] = old
            fd = (up - down) / (2 * eps)
            denom = max(abs(fd), abs(grad[idx]), 1e-6)
            assert abs(fd - grad[idx]) / denom < 1e-4, f"{name}[{idx}]"


# ---------------------------------------------------------------------------
# train_joint
# ---------------------------------------------------------------------------

def _tiny_dataset(graph, rng, count=8):
    terminals = graph.terminal_labels()
    return [
        sample_for(graph, terminals[i % len(terminals)], random_window(rng, TINY_FE))
        for i in range(count)
    ]


def test_zero_learning_rate_leaves_parameters_identical(rng):
    bundle = make_bundle(six_task_graph(), seed=1)
    before = {name: p.copy() for name, p in bundle.named_params()}
    train_joint(
        bundle, _tiny_dataset(bundle.graph, rng),
        TrainConfig(epochs=3, learning_rate=0.0, rng_seed=0),
    )
    for name, param in bundle.named_params():
        assert param.tobytes() == before[name].tobytes(), name


def test_empty_dataset_rejected():
    bundle = make_bundle(single_task_graph())
    with pytest.raises(DataFormatError):
        train_joint(bundle, [], TrainConfig(epochs=1))


def test_training_is_deterministic(rng):
    dataset = _tiny_dataset(six_task_graph(), rng, count=10)

    def run():
        bundle = make_bundle(six_task_graph(), seed=6)
        _, report = train_joint(
            bundle, dataset,
            TrainConfig(epochs=4, learning_rate=0.05, rng_seed=42),
        )
        digest = b"".join(p.tobytes() for _, p in bundle.named_params())
        return report.epoch_losses, digest

    losses_a, digest_a = run()
    losses_b, digest_b = run()
    assert losses_a == losses_b
    assert digest_a == digest_b


def test_memorization_loss_near_monotone(rng):
    dataset = _tiny_dataset(six_task_graph(), rng, count=10)
    for mode in ("predicted", "teacher_forced"):
        bundle = make_bundle(six_task_graph(), seed=5)
        _, report = train_joint(
            bundle, dataset,
            TrainConfig(epochs=25, learning_rate=0.05, rng_seed=1, alpha_mode=mode),
        )
        increases = [
            report.epoch_losses[i + 1] - report.epoch_losses[i]
            for i in range(len(report.epoch_losses) - 1)
        ]
        assert max(increases) < 1e-3
        assert report.epoch_losses[-1] < report.epoch_losses[0]


def test_frozen_trunk_joint_training_equals_standalone_head(rng):
    # same seed, single task, weight 1: the joint trainer with the trunk
    # frozen must produce the same head updates as the standalone head path
    graph = single_task_graph(("p", "q"))
    windows = [random_window(rng, TINY_FE) for _ in range(6)]
    labels = [i % 2 for i in range(6)]

    joint_bundle = make_bundle(graph, seed=8)
    standalone_bundle = joint_bundle.copy()

    dataset = [
        MultiLabelSample(w, {1: y}, graph.labels_of(1)[y])
        for w, y in zip(windows, labels)
    ]
    train_joint(
        joint_bundle, dataset,
        TrainConfig(epochs=5, learning_rate=0.1, rng_seed=3,
                    freeze_feature_extractor=True),
    )

    data = AcquiredDataset(windows, labels, 2)
    train_new_head(
        standalone_bundle, 1, data,
        TrainConfig(epochs=5, learning_rate=0.1, rng_seed=3),
    )

    for (name_a, a), (name_b, b) in zip(
        joint_bundle.heads[1].named_params("h"),
        standalone_bundle.heads[1].named_params("h"),
    ):
        assert a.tobytes() == b.tobytes(), name_a


def test_evaluate_bundle_counts(rng):
    bundle = make_bundle(single_task_graph(("l", "r")), seed=2)
    samples = [
        MultiLabelSample(random_window(rng, TINY_FE), {1: i % 2},
                         bundle.graph.labels_of(1)[i % 2])
        for i in range(10)
    ]
    per_class, overall, confusion = evaluate_bundle(bundle, samples)
    assert set(per_class) == {"l", "r"}
    assert sum(confusion.values()) == 10
    assert 0.0 <= overall <= 1.0
