"""Deterministic neural-network kernel: 1-D conv blocks, dense layers, softmax,
cross-entropy, explicit backward passes, and plain gradient-descent updates.

Everything here is seeded, single-threaded numpy. Fixed seed plus fixed data
gives bit-identical forward, backward, and update results, which the rest of
the package relies on (reproducible runs, cached-vs-uncached equivalence,
parameter digests). Convolutions are valid (no padding), stride 1, over all
input channels; pooling is non-overlapping max with floor division.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError

DEFAULT_DTYPE = np.float32

# -log(p) floor: keeps cross-entropy finite when a class probability underflows.
PROB_FLOOR = 1e-12


class MaccCounter:
    """Accumulates multiply-accumulate counts across instrumented forwards."""

    def __init__(self) -> None:
        self.total = 0

    def add(self, n: int) -> None:
        self.total += int(n)


# ---------------------------------------------------------------------------
# Specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvBlockSpec:
    """One conv block: valid 1-D convolution, ReLU, non-overlapping max pool."""

    kernel_size: int
    num_filters: int
    pool_size: int = 1

    def __post_init__(self) -> None:
        if self.kernel_size < 1:
            raise ShapeError(f"kernel_size must be >= 1, got {self.kernel_size}")
        if self.num_filters < 1:
            raise ShapeError(f"num_filters must be >= 1, got {self.num_filters}")
        if self.pool_size < 1:
            raise ShapeError(f"pool_size must be >= 1, got {self.pool_size}")


@dataclass(frozen=True)
class FeatureExtractorSpec:
    """Stack of conv blocks mapping a channels-by-time window to a flat feature."""

    input_channels: int
    window_len: int
    blocks: tuple[ConvBlockSpec, ...] = ()

    def __post_init__(self) -> None:
        if self.input_channels < 1 or self.window_len < 1:
            raise ShapeError(
                f"window shape {self.input_channels}x{self.window_len} invalid"
            )
        object.__setattr__(self, "blocks", tuple(self.blocks))
        self.layer_shapes()  # fail fast on impossible shape algebra

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(channels, length) before the first block and after every block."""
        shapes = [(self.input_channels, self.window_len)]
        channels, length = shapes[0]
        for w, block in enumerate(self.blocks):
            if block.kernel_size > length:
                raise ShapeError(
                    f"block {w}: kernel_size {block.kernel_size} exceeds "
                    f"signal length {length}"
                )
            conv_len = length - block.kernel_size + 1
            pooled = conv_len // block.pool_size
            if pooled < 1:
                raise ShapeError(
                    f"block {w}: pool_size {block.pool_size} leaves no output "
                    f"(conv length {conv_len})"
                )
            channels, length = block.num_filters, pooled
            shapes.append((channels, length))
        return shapes

    @property
    def feature_dim(self) -> int:
        channels, length = self.layer_shapes()[-1]
        return channels * length


@dataclass(frozen=True)
class HeadSpec:
    """Dense classifier spec: hidden widths then a softmax output layer."""

    layer_widths: tuple[int, ...]
    num_classes: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "layer_widths", tuple(self.layer_widths))
        if not self.layer_widths:
            raise ShapeError("head needs at least one dense layer")
        if any(w < 1 for w in self.layer_widths):
            raise ShapeError(f"layer widths must be positive, got {self.layer_widths}")
        if self.layer_widths[-1] != self.num_classes:
            raise ShapeError(
                f"last layer width {self.layer_widths[-1]} != "
                f"num_classes {self.num_classes}"
            )

    @classmethod
    def single(cls, num_classes: int) -> "HeadSpec":
        """A head with one dense layer straight to the class logits."""
        return cls(layer_widths=(num_classes,), num_classes=num_classes)


@dataclass
class SgdState:
    """Plain gradient-descent state. One step per call to sgd_step."""

    learning_rate: float
    rng_seed: int = 0
    step_count: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------

@dataclass
class ConvBlockCache:
    """Forward-pass record a conv block backward needs."""

    x: np.ndarray            # block input (C, L)
    pre: np.ndarray          # conv pre-activations (F, conv_len)
    pool_index: np.ndarray   # argmax offset within each pool window (F, out_len)


def conv_block_forward(
    x: np.ndarray,
    spec: ConvBlockSpec,
    weights: np.ndarray,
    bias: np.ndarray,
    counter: MaccCounter | None = None,
) -> tuple[np.ndarray, ConvBlockCache]:
    """max_pool(relu(valid_conv1d(x))) with a cache for the backward pass.

    x is (channels, length); weights are (filters, channels, kernel);
    output is (filters, floor((length - kernel + 1) / pool)).
    """
    if x.ndim != 2:
        raise ShapeError(f"conv input must be 2-D (channels, length), got {x.shape}")
    channels, length = x.shape
    expected = (spec.num_filters, channels, spec.kernel_size)
    if weights.shape != expected:
        raise ShapeError(f"conv weights shape {weights.shape} != expected {expected}")
    if bias.shape != (spec.num_filters,):
        raise ShapeError(f"conv bias shape {bias.shape} != ({spec.num_filters},)")
    if spec.kernel_size > length:
        raise ShapeError(
            f"kernel_size {spec.kernel_size} exceeds signal length {length}"
        )

    windows = np.lib.stride_tricks.sliding_window_view(x, spec.kernel_size, axis=1)
    pre = np.einsum("fck,cok->fo", weights, windows) + bias[:, None]
    conv_len = pre.shape[1]
    if counter is not None:
        counter.add(conv_len * spec.num_filters * spec.kernel_size * channels)

    act = np.maximum(pre, 0)
    out_len = conv_len // spec.pool_size
    if out_len < 1:
        raise ShapeError(
            f"pool_size {spec.pool_size} leaves no output (conv length {conv_len})"
        )
    trimmed = act[:, : out_len * spec.pool_size]
    grouped = trimmed.reshape(spec.num_filters, out_len, spec.pool_size)
    pooled = grouped.max(axis=2)
    pool_index = grouped.argmax(axis=2)  # first max wins: deterministic routing
    return pooled, ConvBlockCache(x=x, pre=pre, pool_index=pool_index)


def conv_block_backward(
    cache: ConvBlockCache,
    spec: ConvBlockSpec,
    weights: np.ndarray,
    dout: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dweights, dbias, dx) from the pooled-output gradient."""
    num_filters, conv_len = cache.pre.shape
    out_len = dout.shape[1]

    dact = np.zeros_like(cache.pre)
    rows = np.arange(num_filters)[:, None]
    cols = np.arange(out_len)[None, :] * spec.pool_size + cache.pool_index
    dact[rows, cols] = dout  # positions are unique per pool window

    dpre = dact * (cache.pre > 0)

    windows = np.lib.stride_tricks.sliding_window_view(
        cache.x, spec.kernel_size, axis=1
    )
    dweights = np.einsum("fo,cok->fck", dpre, windows)
    dbias = dpre.sum(axis=1)

    dx = np.zeros_like(cache.x)
    for dt in range(spec.kernel_size):
        dx[:, dt : dt + conv_len] += weights[:, :, dt].T @ dpre
    return dweights, dbias, dx


def dense_forward(
    x: np.ndarray,
    weights: np.ndarray,
    bias: np.ndarray,
    counter: MaccCounter | None = None,
) -> np.ndarray:
    """out[j] = sum_i weights[j, i] * x[i] + bias[j]."""
    if x.ndim != 1:
        raise ShapeError(f"dense input must be 1-D, got shape {x.shape}")
    if weights.ndim != 2 or weights.shape[1] != x.shape[0]:
        raise ShapeError(
            f"dense weights {weights.shape} incompatible with input ({x.shape[0]},)"
        )
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"dense bias shape {bias.shape} != ({weights.shape[0]},)")
    if counter is not None:
        counter.add(weights.shape[0] * weights.shape[1])
    return weights @ x + bias


def dense_backward(
    x: np.ndarray, weights: np.ndarray, dout: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dweights, dbias, dx) for a dense layer."""
    dweights = np.outer(dout, x)
    dbias = dout.copy()
    dx = weights.T @ dout
    return dweights, dbias, dx


def softmax(logits: np.ndarray) -> np.ndarray:
    """Max-stabilized softmax. Rejects non-finite logits."""
    if logits.ndim != 1 or logits.shape[0] < 1:
        raise ShapeError(f"softmax expects a non-empty vector, got {logits.shape}")
    if not np.isfinite(logits).all():
        raise NumericError("softmax received non-finite logits")
    shifted = logits - logits.max()
    exps = np.exp(shifted)
    return exps / exps.sum()


def cross_entropy(probs: np.ndarray, label: int) -> float:
    """-log(probs[label]), floored at PROB_FLOOR so it stays finite."""
    k = probs.shape[0]
    if not 0 <= label < k:
        raise ShapeError(f"label {label} out of range for {k} classes")
    return -math.log(max(float(probs[label]), PROB_FLOOR))


def softmax_cross_entropy_grad(probs: np.ndarray, label: int) -> np.ndarray:
    """Gradient of cross_entropy(softmax(logits), label) w.r.t. the logits."""
    if not 0 <= label < probs.shape[0]:
        raise ShapeError(f"label {label} out of range for {probs.shape[0]} classes")
    grad = probs.copy()
    grad[label] -= 1
    return grad


def sgd_step(
    named_params: list[tuple[str, np.ndarray]],
    named_grads: list[tuple[str, np.ndarray]],
    state: SgdState,
) -> None:
    """In-place p <- p - lr * g over parallel (name, array) lists."""
    if len(named_params) != len(named_grads):
        raise ShapeError(
            f"{len(named_params)} params vs {len(named_grads)} grads"
        )
    for (pname, param), (gname, grad) in zip(named_params, named_grads):
        if param.shape != grad.shape:
            raise ShapeError(
                f"gradient shape {grad.shape} != param shape {param.shape} "
                f"for {pname}"
            )
        if not np.isfinite(grad).all():
            raise NumericError(f"non-finite gradient for {gname}")
        param -= state.learning_rate * grad
    state.step_count += 1


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------

def glorot_uniform(
    rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int, dtype
) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class FeatureExtractor:
    """The shared convolutional trunk g: window (C, T) -> flat feature vector."""

    def __init__(
        self,
        spec: FeatureExtractorSpec,
        weights: list[np.ndarray],
        biases: list[np.ndarray],
    ) -> None:
        self.spec = spec
        self.weights = weights
        self.biases = biases

    @classmethod
    def from_seed(
        cls, spec: FeatureExtractorSpec, rng: np.random.Generator, dtype=DEFAULT_DTYPE
    ) -> "FeatureExtractor":
        weights, biases = [], []
        shapes = spec.layer_shapes()
        for w, block in enumerate(spec.blocks):
            in_channels = shapes[w][0]
            shape = (block.num_filters, in_channels, block.kernel_size)
            fan_in = in_channels * block.kernel_size
            fan_out = block.num_filters * block.kernel_size
            weights.append(glorot_uniform(rng, shape, fan_in, fan_out, dtype))
            biases.append(np.zeros(block.num_filters, dtype=dtype))
        return cls(spec, weights, biases)

    @property
    def feature_dim(self) -> int:
        return self.spec.feature_dim

    def forward(
        self, window: np.ndarray, counter: MaccCounter | None = None
    ) -> np.ndarray:
        feature, _ = self.forward_with_cache(window, counter)
        return feature

    def forward_with_cache(
        self, window: np.ndarray, counter: MaccCounter | None = None
    ) -> tuple[np.ndarray, list[ConvBlockCache]]:
        expected = (self.spec.input_channels, self.spec.window_len)
        if window.shape != expected:
            raise ShapeError(f"window shape {window.shape} != expected {expected}")
        x = window
        caches = []
        for block, weights, bias in zip(self.spec.blocks, self.weights, self.biases):
            x, cache = conv_block_forward(x, block, weights, bias, counter)
            caches.append(cache)
        return x.ravel(), caches

    def backward(
        self, caches: list[ConvBlockCache], dfeature: np.ndarray
    ) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
        """Returns per-block (dweights, dbias) and the window gradient."""
        if len(caches) != len(self.spec.blocks):
            raise ShapeError(
                f"{len(caches)} caches for {len(self.spec.blocks)} blocks"
            )
        channels, length = self.spec.layer_shapes()[-1]
        dx = dfeature.reshape(channels, length)
        grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(self.spec.blocks)
        for w in reversed(range(len(self.spec.blocks))):
            dw, db, dx = conv_block_backward(
                caches[w], self.spec.blocks[w], self.weights[w], dx
            )
            grads[w] = (dw, db)
        return grads, dx

    def zero_grads(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(np.zeros_like(w), np.zeros_like(b))
                for w, b in zip(self.weights, self.biases)]

    def named_params(self, prefix: str = "fe") -> list[tuple[str, np.ndarray]]:
        out = []
        for w in range(len(self.weights)):
            out.append((f"{prefix}.block{w}.weight", self.weights[w]))
            out.append((f"{prefix}.block{w}.bias", self.biases[w]))
        return out

    def copy(self) -> "FeatureExtractor":
        return FeatureExtractor(
            self.spec,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )


@dataclass
class HeadCache:
    """Per-layer inputs and pre-activations recorded during a head forward."""

    inputs: list[np.ndarray]
    pres: list[np.ndarray]


class Head:
    """A per-task dense classifier h: feature vector -> softmax probabilities.

    Hidden layers use ReLU; the final layer feeds softmax.
    """

    def __init__(
        self,
        spec: HeadSpec,
        input_dim: int,
        weights: list[np.ndarray],
        biases: list[np.ndarray],
    ) -> None:
        self.spec = spec
        self.input_dim = input_dim
        self.weights = weights
        self.biases = biases

    @classmethod
    def from_seed(
        cls,
        spec: HeadSpec,
        input_dim: int,
        rng: np.random.Generator,
        dtype=DEFAULT_DTYPE,
    ) -> "Head":
        weights, biases = [], []
        fan_in = input_dim
        for width in spec.layer_widths:
            weights.append(glorot_uniform(rng, (width, fan_in), fan_in, width, dtype))
            biases.append(np.zeros(width, dtype=dtype))
            fan_in = width
        return cls(spec, input_dim, weights, biases)

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def forward(
        self, feature: np.ndarray, counter: MaccCounter | None = None
    ) -> np.ndarray:
        probs, _ = self.forward_with_cache(feature, counter)
        return probs

    def forward_with_cache(
        self, feature: np.ndarray, counter: MaccCounter | None = None
    ) -> tuple[np.ndarray, HeadCache]:
        if feature.shape != (self.input_dim,):
            raise ShapeError(
                f"feature shape {feature.shape} != ({self.input_dim},)"
            )
        x = feature
        inputs, pres = [], []
        last = len(self.weights) - 1
        for u, (weights, bias) in enumerate(zip(self.weights, self.biases)):
            inputs.append(x)
            pre = dense_forward(x, weights, bias, counter)
            pres.append(pre)
            x = pre if u == last else np.maximum(pre, 0)
        return softmax(x), HeadCache(inputs=inputs, pres=pres)

    def backward_from_logits(
        self, cache: HeadCache, dlogits: np.ndarray
    ) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
        """Backprop from a logits gradient; returns layer grads and dfeature."""
        grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(self.weights)
        d = dlogits
        for u in reversed(range(len(self.weights))):
            dw, db, d = dense_backward(cache.inputs[u], self.weights[u], d)
            grads[u] = (dw, db)
            if u > 0:
                d = d * (cache.pres[u - 1] > 0)
        return grads, d

    def zero_grads(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(np.zeros_like(w), np.zeros_like(b))
                for w, b in zip(self.weights, self.biases)]

    def named_params(self, prefix: str) -> list[tuple[str, np.ndarray]]:
        out = []
        for u in range(len(self.weights)):
            out.append((f"{prefix}.layer{u}.weight", self.weights[u]))
            out.append((f"{prefix}.layer{u}.bias", self.biases[u]))
        return out

    def copy(self) -> "Head":
        return Head(
            self.spec,
            self.input_dim,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )
