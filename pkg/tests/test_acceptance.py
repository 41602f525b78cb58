"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the per-criterion
lines as they complete.
"""

from __future__ import annotations

import json
import struct
import time

import numpy as np

from treehar.data_io import (
    DEFAULT_FE_SPEC,
    WindowingConfig,
    fe_digest,
    fine_split_recording,
    load_model,
    save_model,
    segment_windows,
    two_level_graph,
    two_level_recording,
)
from treehar.hierarchy import ModelBundle, TaskGraph
from treehar.online_learning import (
    AcquiredDataset,
    add_task_to_bundle,
    decision_from_counts,
    head_weight_memory,
    select_node,
    train_new_head,
)
from treehar.resources import compare_deployments
from treehar.tensor_nn import HeadSpec, MaccCounter
from treehar.training import MultiLabelSample, TrainConfig, make_samples, train_joint

from conftest import random_bundle, six_task_graph, well_conditioned_case
from test_hierarchy import random_softmax_outputs, terminal_path_products
from test_tensor_nn import check_gradients


def _report(num: int, name: str, ok: bool, detail: str = "") -> None:
    print(f"ACCEPTANCE {num:02d} {name}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, f"criterion {num} ({name}): {detail}"


def test_criterion_01_gradient_suite():
    rng = np.random.default_rng(2024)
    start = time.time()
    worst = 0.0
    for _ in range(25):
        fe, head, x = well_conditioned_case(rng)
        label = int(rng.integers(0, head.num_classes))
        worst = max(worst, check_gradients(fe, head, x, label,
                                           eps=1e-3, rel_tol=1e-4))
    elapsed = time.time() - start
    ok = worst < 1e-4 and elapsed < 60.0
    _report(1, "gradient-suite", ok,
            f"(25 networks, worst rel err {worst:.2e}, {elapsed:.1f}s)")


def test_criterion_02_weight_normalization():
    rng = np.random.default_rng(7)
    graph = six_task_graph()
    worst = 0.0
    for _ in range(1000):
        outputs = random_softmax_outputs(graph, rng)
        total = sum(terminal_path_products(graph, outputs).values())
        worst = max(worst, abs(total - 1.0))
    ok = worst <= 1e-6
    _report(2, "terminal-coverage", ok,
            f"(1000 assignments, worst |sum-1| {worst:.2e})")


def test_criterion_03_node_selection_worked_example():
    terminals = six_task_graph().terminal_labels()
    counts = {"walking": 959, "running": 247, "standing": 3}
    tight = select_node(decision_from_counts(counts, terminals), delta=0.5)
    loose = select_node(decision_from_counts(counts, terminals), delta=0.6)
    ok = tight.attach_to == ("walking",) and loose.attach_to == ("walking", "running")
    _report(3, "node-selection", ok,
            f"(delta=0.5 -> {tight.attach_to}, delta=0.6 -> {loose.attach_to})")


def _pretrained_base() -> ModelBundle:
    graph = two_level_graph()
    windows = segment_windows(two_level_recording(11, 60.0), WindowingConfig())
    samples = make_samples(graph, windows)
    bundle = ModelBundle.from_seed(graph, DEFAULT_FE_SPEC, seed=11)
    bundle, _ = train_joint(
        bundle, samples, TrainConfig(epochs=30, learning_rate=0.05, rng_seed=11)
    )
    return bundle


def _fine_windows(seed: int, duration: float):
    order = {"walk_a": 0, "walk_b": 1}
    windows = segment_windows(fine_split_recording(seed, duration),
                              WindowingConfig())
    return [(w, order[label]) for w, label in windows]


def test_criterion_04_trunk_immutability():
    bundle = _pretrained_base()
    pairs = _fine_windows(100, 30.0)
    data = AcquiredDataset([w for w, _ in pairs], [y for _, y in pairs], 2)
    bundle, new_id = add_task_to_bundle(
        bundle, ("walk_a", "walk_b"), HeadSpec.single(2), ("walk_like",), seed=0
    )
    before = fe_digest(bundle)
    train_new_head(bundle, new_id, data,
                   TrainConfig(epochs=20, learning_rate=0.05, rng_seed=0))
    after = fe_digest(bundle)
    ok = before == after
    _report(4, "trunk-immutability", ok, f"(digest {before[:12]}...)")


def test_criterion_05_resource_decomposition():
    rng = np.random.default_rng(55)
    ok = True
    detail = ""
    for i in range(100):
        bundle = random_bundle(rng)
        report = compare_deployments(bundle)
        trunk_w = sum(w.size for w in bundle.fe.weights)
        heads_w = {t: sum(w.size for w in h.weights)
                   for t, h in bundle.heads.items()}
        shared = report.deployments["shared_trunk"]
        multi = report.deployments["multi_model"]
        if shared.weight_count != trunk_w + sum(heads_w.values()):
            ok, detail = False, f"shared weights mismatch at bundle {i}"
            break
        if multi.weight_count != sum(trunk_w + heads_w[t]
                                     for t in bundle.graph.task_ids):
            ok, detail = False, f"multi weights mismatch at bundle {i}"
            break
        counter = MaccCounter()
        window = np.random.default_rng(i).standard_normal(
            (bundle.fe.spec.input_channels, bundle.fe.spec.window_len)
        ).astype(np.float32)
        feature = bundle.fe.forward(window, counter)
        for tid in shared.worst_path:
            bundle.heads[tid].forward(feature, counter)
        if counter.total != shared.macc_worst:
            ok, detail = False, f"instrumented MACC mismatch at bundle {i}"
            break
    _report(5, "resource-decomposition", ok,
            detail or "(100 random bundles, exact)")


def test_criterion_06_head_weight_memory_formula(tmp_path):
    rng = np.random.default_rng(66)
    ok = True
    detail = ""
    for i in range(50):
        k = int(rng.integers(2, 6))
        hidden = [int(rng.integers(2, 40)) for _ in range(int(rng.integers(0, 3)))]
        spec = HeadSpec((*hidden, k), k)
        graph = TaskGraph({1: tuple(f"c{j}" for j in range(k))}, {})
        fe_spec = DEFAULT_FE_SPEC
        bundle = ModelBundle.from_seed(graph, fe_spec, {1: spec}, seed=i)
        path = tmp_path / f"m{i}.bin"
        save_model(bundle, path)
        blob = path.read_bytes()
        (header_len,) = struct.unpack("<I", blob[12:16])
        header = json.loads(blob[16:16 + header_len])
        serialized = sum(
            int(np.prod(entry["shape"]))
            for entry in header["tensors"]
            if entry["name"].startswith("head1.") and entry["name"].endswith(".weight")
        )
        formula = head_weight_memory(spec, fe_spec.feature_dim)
        if formula != serialized:
            ok, detail = False, f"spec {spec.layer_widths}: {formula} != {serialized}"
            break
    _report(6, "weight-memory-formula", ok, detail or "(50 random heads, exact)")


def test_criterion_07_synthetic_end_to_end():
    start = time.time()
    graph = two_level_graph()
    config = WindowingConfig()
    train = make_samples(graph, segment_windows(two_level_recording(11, 60.0),
                                                config))
    holdout = make_samples(graph, segment_windows(
        two_level_recording(1011, 30.0), config))
    bundle = ModelBundle.from_seed(graph, DEFAULT_FE_SPEC, seed=11)
    _, report = train_joint(
        bundle, train,
        TrainConfig(epochs=50, learning_rate=0.05, rng_seed=11),
        holdout=holdout,
    )
    elapsed = time.time() - start
    ok = report.holdout_accuracy >= 0.95 and elapsed < 300.0
    _report(7, "synthetic-end-to-end", ok,
            f"(holdout accuracy {report.holdout_accuracy:.4f} in 50 epochs, "
            f"{elapsed:.1f}s)")


def test_criterion_08_data_scarcity_direction():
    base = _pretrained_base()
    test_pairs = _fine_windows(999, 40.0)

    def head_accuracy(bundle, task_id):
        hits = 0
        for window, label in test_pairs:
            probs = bundle.heads[task_id].forward(bundle.fe.forward(window))
            hits += int(np.argmax(probs)) == label
        return hits / len(test_pairs)

    head_accs, scratch_accs, wins = [], [], 0
    for seed in range(5):
        pairs = _fine_windows(100 + seed, 120.0)
        rng = np.random.default_rng(seed)
        take = max(2, int(0.10 * len(pairs)))
        subset = [pairs[i] for i in rng.permutation(len(pairs))[:take]]
        data = AcquiredDataset([w for w, _ in subset], [y for _, y in subset], 2)

        grown, new_id = add_task_to_bundle(
            base, ("walk_a", "walk_b"), HeadSpec.single(2), ("walk_like",),
            seed=seed,
        )
        grown.heads[new_id] = grown.heads[new_id].copy()
        train_new_head(grown, new_id, data,
                       TrainConfig(epochs=80, learning_rate=0.05, rng_seed=seed))
        acc_head = head_accuracy(grown, new_id)

        scratch_graph = TaskGraph({1: ("walk_a", "walk_b")}, {})
        scratch = ModelBundle.from_seed(scratch_graph, DEFAULT_FE_SPEC,
                                        seed=1000 + seed)
        samples = [
            MultiLabelSample(w, {1: y}, ("walk_a", "walk_b")[y])
            for w, y in subset
        ]
        train_joint(scratch, samples,
                    TrainConfig(epochs=80, learning_rate=0.05,
                                rng_seed=1000 + seed))
        acc_scratch = head_accuracy(scratch, 1)

        head_accs.append(acc_head)
        scratch_accs.append(acc_scratch)
        wins += acc_head > acc_scratch

    mean_head = float(np.mean(head_accs))
    mean_scratch = float(np.mean(scratch_accs))
    ok = mean_head > mean_scratch and wins >= 4
    _report(8, "data-scarcity-direction", ok,
            f"(10% data, 5 seeds: head-only {mean_head:.3f} vs scratch "
            f"{mean_scratch:.3f}, wins {wins}/5)")


def test_criterion_09_cache_equivalence():
    base = _pretrained_base()
    pairs = _fine_windows(123, 30.0)
    data = AcquiredDataset([w for w, _ in pairs], [y for _, y in pairs], 2)
    grown_a, new_id = add_task_to_bundle(
        base, ("walk_a", "walk_b"), HeadSpec.single(2), ("walk_like",), seed=3
    )
    grown_b = grown_a.copy()
    config = TrainConfig(epochs=15, learning_rate=0.05, rng_seed=3)
    train_new_head(grown_a, new_id, data, config, use_cache=True)
    train_new_head(grown_b, new_id, data, config, use_cache=False)
    same = all(
        a.tobytes() == b.tobytes()
        for (_, a), (_, b) in zip(
            grown_a.heads[new_id].named_params("h"),
            grown_b.heads[new_id].named_params("h"),
        )
    )
    _report(9, "cache-equivalence", same, "(cached vs uncached, bit-identical)")


def _struct_read(blob: bytes):
    """Independent model reader: pure struct, explicit little-endian."""
    assert blob[:8] == b"TREEHAR\x00"
    (version,) = struct.unpack("<I", blob[8:12])
    (header_len,) = struct.unpack("<I", blob[12:16])
    header = json.loads(blob[16:16 + header_len].decode("utf-8"))
    offset = 16 + header_len
    (schema_len,) = struct.unpack("<I", blob[offset:offset + 4])
    offset += 4
    schema = blob[offset:offset + schema_len].decode("utf-8")
    offset += schema_len
    tensors = []
    for entry in header["tensors"]:
        count = 1
        for d in entry["shape"]:
            count *= d
        values = struct.unpack("<" + "f" * count, blob[offset:offset + 4 * count])
        offset += 4 * count
        tensors.append((entry["name"], tuple(entry["shape"]), values))
    assert offset == len(blob)
    return version, header, schema, tensors


def _struct_write(version, header, schema, tensors) -> bytes:
    """Independent model writer: pure struct, explicit little-endian."""
    header_bytes = json.dumps(header, sort_keys=True,
                              separators=(",", ":")).encode("utf-8")
    schema_bytes = schema.encode("utf-8")
    out = [b"TREEHAR\x00", struct.pack("<I", version),
           struct.pack("<I", len(header_bytes)), header_bytes,
           struct.pack("<I", len(schema_bytes)), schema_bytes]
    for _name, _shape, values in tensors:
        out.append(struct.pack("<" + "f" * len(values), *values))
    return b"".join(out)


def test_criterion_10_serialization_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    ok = True
    detail = ""
    for i in range(10):
        bundle = random_bundle(rng)
        first = tmp_path / f"a{i}.bin"
        second = tmp_path / f"b{i}.bin"
        save_model(bundle, first)
        save_model(load_model(first), second)
        if first.read_bytes() != second.read_bytes():
            ok, detail = False, f"numpy round trip differs at bundle {i}"
            break
        # second path: byte-order-explicit struct reader/writer
        rewritten = _struct_write(*_struct_read(first.read_bytes()))
        if rewritten != first.read_bytes():
            ok, detail = False, f"struct path differs at bundle {i}"
            break
    _report(10, "serialization-round-trip", ok,
            detail or "(numpy and struct paths byte-identical)")
