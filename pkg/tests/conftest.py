from __future__ import annotations

import numpy as np
import pytest

from treehar.hierarchy import ModelBundle, TaskGraph
from treehar.tensor_nn import (
    ConvBlockSpec,
    FeatureExtractor,
    FeatureExtractorSpec,
    Head,
    HeadSpec,
)


def six_task_graph() -> TaskGraph:
    """Six tasks routing seven terminal activities.

    1 static|moving -> 2 sit_stand|lying -> 4 sitting|standing
                    -> 3 running|walk_stairs -> 5 walking|stairs
                                             -> 6 upstairs|downstairs
    """
    return TaskGraph(
        label_sets={
            1: ("static", "moving"),
            2: ("sit_stand", "lying"),
            3: ("running", "walk_stairs"),
            4: ("sitting", "standing"),
            5: ("walking", "stairs"),
            6: ("upstairs", "downstairs"),
        },
        deps={
            2: {1: "static"},
            3: {1: "moving"},
            4: {2: "sit_stand"},
            5: {3: "walk_stairs"},
            6: {5: "stairs"},
        },
    )


def single_task_graph(labels=("left", "right")) -> TaskGraph:
    return TaskGraph(label_sets={1: tuple(labels)}, deps={})


TINY_FE = FeatureExtractorSpec(
    input_channels=2,
    window_len=16,
    blocks=(ConvBlockSpec(kernel_size=3, num_filters=4, pool_size=2),),
)


def make_bundle(graph, fe_spec=TINY_FE, seed=0, dtype=np.float32, head_specs=None):
    return ModelBundle.from_seed(graph, fe_spec, head_specs, seed=seed, dtype=dtype)


def rig_head(head: Head, class_idx: int) -> None:
    """Force a head to predict class_idx regardless of the feature."""
    for w in head.weights:
        w[:] = 0
    for b in head.biases:
        b[:] = 0
    head.biases[-1][class_idx] = 10.0


def random_window(rng: np.random.Generator, fe_spec, dtype=np.float32):
    return rng.standard_normal(
        (fe_spec.input_channels, fe_spec.window_len)
    ).astype(dtype)


def random_small_net(rng: np.random.Generator, dtype=np.float64):
    """A random small trunk+head pair for gradient checking."""
    channels = int(rng.integers(1, 4))
    length = int(rng.integers(8, 24))
    blocks = []
    cur = length
    for _ in range(int(rng.integers(1, 3))):
        k = int(rng.integers(1, min(5, cur) + 1))
        conv_len = cur - k + 1
        p = int(rng.integers(1, min(3, conv_len) + 1))
        if conv_len // p < 1:
            break
        blocks.append(
            ConvBlockSpec(kernel_size=k, num_filters=int(rng.integers(1, 5)),
                          pool_size=p)
        )
        cur = conv_len // p
    fe_spec = FeatureExtractorSpec(channels, length, tuple(blocks))
    num_classes = int(rng.integers(2, 5))
    if rng.random() < 0.5:
        widths = (int(rng.integers(2, 7)), num_classes)
    else:
        widths = (num_classes,)
    head_spec = HeadSpec(widths, num_classes)
    fe = FeatureExtractor.from_seed(fe_spec, rng, dtype)
    head = Head.from_seed(head_spec, fe_spec.feature_dim, rng, dtype)
    return fe, head


def kink_margin(fe: FeatureExtractor, head: Head, x: np.ndarray) -> float:
    """Distance of the forward pass from the nearest relu/pool kink.

    Central finite differences are only a valid gradient oracle where the
    network is locally smooth; inputs whose pre-activations sit within the
    probe step of zero (or whose pool windows have near-tied positive values)
    must be resampled.
    """
    margin = np.inf
    feature, fe_caches = fe.forward_with_cache(x)
    for cache, block in zip(fe_caches, fe.spec.blocks):
        margin = min(margin, float(np.abs(cache.pre).min()))
        if block.pool_size >= 2:
            act = np.maximum(cache.pre, 0)
            out_len = act.shape[1] // block.pool_size
            grouped = act[:, : out_len * block.pool_size].reshape(
                act.shape[0], out_len, block.pool_size
            )
            top2 = np.sort(grouped, axis=2)[:, :, -2:]
            gaps = top2[:, :, 1] - top2[:, :, 0]
            positive_top = top2[:, :, 1] > 0
            if positive_top.any():
                margin = min(margin, float(gaps[positive_top].min()))
    _, head_cache = head.forward_with_cache(feature)
    for pre in head_cache.pres[:-1]:
        margin = min(margin, float(np.abs(pre).min()))
    return margin


def well_conditioned_input(
    fe: FeatureExtractor,
    head: Head,
    rng: np.random.Generator,
    margin: float = 0.03,
    tries: int = 500,
) -> np.ndarray:
    dtype = fe.weights[0].dtype if fe.weights else np.float64
    for _ in range(tries):
        x = rng.standard_normal(
            (fe.spec.input_channels, fe.spec.window_len)
        ).astype(dtype)
        if kink_margin(fe, head, x) > margin:
            return x
    raise RuntimeError("no kink-free input found; resample the network")


def well_conditioned_case(rng: np.random.Generator, dtype=np.float64):
    """A random net plus an input at which finite differences are valid."""
    while True:
        fe, head = random_small_net(rng, dtype=dtype)
        try:
            return fe, head, well_conditioned_input(fe, head, rng, tries=200)
        except RuntimeError:
            continue


def random_fe_spec(rng: np.random.Generator) -> FeatureExtractorSpec:
    channels = int(rng.integers(1, 5))
    length = int(rng.integers(8, 48))
    blocks = []
    cur = length
    for _ in range(int(rng.integers(0, 4))):
        k = int(rng.integers(1, 6))
        if k > cur:
            break
        conv_len = cur - k + 1
        p = int(rng.integers(1, 4))
        if conv_len // p < 1:
            break
        blocks.append(ConvBlockSpec(k, int(rng.integers(1, 8)), p))
        cur = conv_len // p
    return FeatureExtractorSpec(channels, length, tuple(blocks))


def random_bundle(rng: np.random.Generator):
    """A random graph shape with random trunk and head architectures."""
    graph = [six_task_graph(), single_task_graph(("a", "b", "c")),
             TaskGraph(label_sets={1: ("l", "r"), 2: ("x", "y")},
                       deps={2: {1: "r"}})][int(rng.integers(0, 3))]
    fe_spec = random_fe_spec(rng)
    head_specs = {}
    for tid in graph.task_ids:
        k = graph.label_sets[tid].k
        hidden = [int(rng.integers(2, 10)) for _ in range(int(rng.integers(0, 3)))]
        head_specs[tid] = HeadSpec((*hidden, k), k)
    return ModelBundle.from_seed(graph, fe_spec, head_specs,
                                 seed=int(rng.integers(0, 2**31)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
