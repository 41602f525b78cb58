"""Dataset ingestion, synthetic signal generation, and serialization.

File formats owned here, all byte-exact:

* recording CSV: a ``# sample_rate_hz=...`` sidecar line, then a header naming
  the channel columns plus a final ``label`` column, then one row per sample;
* model file: magic + version, a canonical JSON header (specs and tensor
  manifest), the schema text, then raw little-endian float32 tensor payload;
* run config: ``key = value`` lines with ``#`` comments.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import DataFormatError, ModelFormatError, ShapeError
from .hierarchy import ModelBundle, TaskGraph, format_schema, parse_schema
from .tensor_nn import (
    ConvBlockSpec,
    FeatureExtractor,
    FeatureExtractorSpec,
    Head,
    HeadSpec,
)

MODEL_MAGIC = b"TREEHAR\x00"
MODEL_VERSION = 1
TENSOR_DTYPE = "<f4"  # little-endian float32, pinned for cross-platform files


# ---------------------------------------------------------------------------
# Recordings and windowing
# ---------------------------------------------------------------------------

@dataclass
class RawRecording:
    """A multichannel stream with one label per sample row."""

    sample_rate_hz: float
    channel_names: tuple[str, ...]
    samples: np.ndarray  # (rows, channels) float32
    labels: list[str]

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 2:
            raise DataFormatError(
                f"samples must be 2-D (rows, channels), got {self.samples.shape}"
            )
        if self.samples.shape[1] != len(self.channel_names):
            raise DataFormatError(
                f"{self.samples.shape[1]} sample columns vs "
                f"{len(self.channel_names)} channel names"
            )
        if len(self.labels) != self.samples.shape[0]:
            raise DataFormatError(
                f"{len(self.labels)} labels vs {self.samples.shape[0]} rows"
            )
        if self.sample_rate_hz <= 0:
            raise DataFormatError(f"sample rate {self.sample_rate_hz} must be > 0")

    def __len__(self) -> int:
        return self.samples.shape[0]


@dataclass(frozen=True)
class WindowingConfig:
    window_seconds: float = 2.0
    overlap_fraction: float = 0.5
    label_rule: str = "majority"  # or "strict-uniform"

    def __post_init__(self) -> None:
        if not 0.0 <= self.overlap_fraction < 1.0:
            raise DataFormatError(
                f"overlap_fraction must be in [0, 1), got {self.overlap_fraction}"
            )
        if self.label_rule not in ("majority", "strict-uniform"):
            raise DataFormatError(f"unknown label_rule {self.label_rule!r}")

    def window_len(self, sample_rate_hz: float) -> int:
        n = round(self.window_seconds * sample_rate_hz)
        if n < 1:
            raise DataFormatError(
                f"window of {self.window_seconds}s is empty at "
                f"{sample_rate_hz} Hz"
            )
        return n

    def stride(self, sample_rate_hz: float) -> int:
        return max(1, int(self.window_len(sample_rate_hz)
                          * (1.0 - self.overlap_fraction)))


def _window_label(labels: list[str], rule: str) -> str | None:
    first = labels[0]
    if all(label == first for label in labels):
        return first
    if rule == "strict-uniform":
        return None
    counts: dict[str, int] = {}
    for label in labels:
        counts[label] = counts.get(label, 0) + 1
    # majority; ties go to the label seen earliest in the window
    return max(counts, key=lambda lab: (counts[lab], -labels.index(lab)))


def segment_windows(
    recording: RawRecording, config: WindowingConfig
) -> list[tuple[np.ndarray, str]]:
    """Slice into overlapping (channels, window_len) tensors with one label."""
    window_len = config.window_len(recording.sample_rate_hz)
    if window_len > len(recording):
        raise DataFormatError(
            f"window of {window_len} samples exceeds recording of "
            f"{len(recording)}"
        )
    stride = config.stride(recording.sample_rate_hz)
    out = []
    for start in range(0, len(recording) - window_len + 1, stride):
        stop = start + window_len
        label = _window_label(recording.labels[start:stop], config.label_rule)
        if label is None:
            continue
        out.append((recording.samples[start:stop].T.copy(), label))
    return out


# ---------------------------------------------------------------------------
# Recording CSV
# ---------------------------------------------------------------------------

def write_recording_csv(recording: RawRecording, path) -> None:
    with open(path, "w", newline="") as handle:
        handle.write(f"# sample_rate_hz={recording.sample_rate_hz!r}\n")
        writer = csv.writer(handle)
        writer.writerow([*recording.channel_names, "label"])
        for row, label in zip(recording.samples, recording.labels):
            writer.writerow([repr(float(v)) for v in row] + [label])


def read_recording_csv(path) -> RawRecording:
    with open(path, newline="") as handle:
        first = handle.readline().strip()
        if not first.startswith("# sample_rate_hz="):
            raise DataFormatError(
                f"{path}: first line must declare '# sample_rate_hz=...'"
            )
        try:
            rate = float(first.split("=", 1)[1])
        except ValueError as exc:
            raise DataFormatError(f"{path}: bad sample rate in {first!r}") from exc
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration as exc:
            raise DataFormatError(f"{path}: missing header row") from exc
        if not header or header[-1] != "label":
            raise DataFormatError(f"{path}: last column must be 'label'")
        channels = tuple(header[:-1])
        if not channels:
            raise DataFormatError(f"{path}: no channel columns")
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=3):
            if not row:
                continue
            if len(row) != len(header):
                raise DataFormatError(
                    f"{path}: line {lineno}: expected {len(header)} columns, "
                    f"got {len(row)}"
                )
            try:
                rows.append([float(v) for v in row[:-1]])
            except ValueError as exc:
                raise DataFormatError(
                    f"{path}: line {lineno}: non-numeric channel value"
                ) from exc
            labels.append(row[-1])
        if not rows:
            raise DataFormatError(f"{path}: no data rows")
    return RawRecording(
        sample_rate_hz=rate,
        channel_names=channels,
        samples=np.array(rows, dtype=np.float32),
        labels=labels,
    )


# ---------------------------------------------------------------------------
# Synthetic signals
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthClassSpec:
    """Waveform family for one synthetic activity class.

    Channels get deterministic frequency/amplitude offsets from each other so
    the six streams are correlated but not identical.
    """

    name: str
    base_freq_hz: float
    amplitude: float
    mean: float = 0.0
    noise: float = 0.05
    harmonic: float = 0.0
    phase: float = 0.0


def _class_segment(
    spec: SynthClassSpec,
    rows: int,
    num_channels: int,
    sample_rate_hz: float,
    rng: np.random.Generator,
) -> np.ndarray:
    t = np.arange(rows) / sample_rate_hz
    data = np.empty((rows, num_channels), dtype=np.float64)
    for c in range(num_channels):
        freq = spec.base_freq_hz * (1.0 + 0.07 * c)
        amp = spec.amplitude * (1.0 - 0.06 * c)
        mean = spec.mean * (1.0 - 0.1 * c)
        phase = spec.phase + 0.4 * c + rng.uniform(0.0, 2.0 * math.pi)
        wave = np.sin(2.0 * math.pi * freq * t + phase)
        if spec.harmonic:
            wave = wave + spec.harmonic * np.sin(
                4.0 * math.pi * freq * t + 2.0 * phase
            )
        data[:, c] = mean + amp * wave + spec.noise * rng.standard_normal(rows)
    return data.astype(np.float32)


def _recording_from_blocks(
    blocks: list[tuple[SynthClassSpec, float]],
    seed: int,
    sample_rate_hz: float = 26.0,
    num_channels: int = 6,
    segment_seconds: float = 6.0,
    channel_names: tuple[str, ...] | None = None,
) -> RawRecording:
    if channel_names is None:
        channel_names = tuple(f"ch{c}" for c in range(num_channels))
    rng = np.random.default_rng(seed)
    segment_rows = max(1, round(segment_seconds * sample_rate_hz))

    chunks, labels = [], []
    for spec, duration_s in blocks:
        block_rows = round(duration_s * sample_rate_hz)
        produced = 0
        while produced < block_rows:
            rows = min(segment_rows, block_rows - produced)
            chunks.append(
                _class_segment(spec, rows, num_channels, sample_rate_hz, rng)
            )
            produced += rows
        labels.extend([spec.name] * block_rows)
    return RawRecording(
        sample_rate_hz=sample_rate_hz,
        channel_names=channel_names,
        samples=np.vstack(chunks),
        labels=labels,
    )


def synth_generate(
    classes: list[SynthClassSpec],
    seed: int,
    duration_s: float,
    sample_rate_hz: float = 26.0,
    num_channels: int = 6,
    segment_seconds: float = 6.0,
    channel_names: tuple[str, ...] | None = None,
) -> RawRecording:
    """One contiguous block of duration_s per class, deterministic per seed.

    Each block is built from shorter segments with independently drawn phase
    offsets, so windows cut from different parts of a class block are not
    phase-locked copies of each other.
    """
    if len(classes) < 2:
        raise DataFormatError(f"need at least 2 classes, got {len(classes)}")
    return _recording_from_blocks(
        [(spec, duration_s) for spec in classes],
        seed,
        sample_rate_hz=sample_rate_hz,
        num_channels=num_channels,
        segment_seconds=segment_seconds,
        channel_names=channel_names,
    )


# --- desk-scale benchmarks -------------------------------------------------

STILL_SIT = SynthClassSpec("sit_like", base_freq_hz=0.25, amplitude=0.10,
                           mean=0.6, noise=0.06)
STILL_LIE = SynthClassSpec("lie_like", base_freq_hz=0.25, amplitude=0.10,
                           mean=-0.6, noise=0.06)
WALK_A = SynthClassSpec("walk_a", base_freq_hz=1.5, amplitude=0.90,
                        noise=0.40, harmonic=0.55)
WALK_B = SynthClassSpec("walk_b", base_freq_hz=2.2, amplitude=0.90,
                        noise=0.40, harmonic=0.00)
RUN_SPEC = SynthClassSpec("run_like", base_freq_hz=3.6, amplitude=1.5,
                          noise=0.15, harmonic=0.25)


def two_level_graph() -> TaskGraph:
    """still/active root, then a fine split on each side (4 terminals)."""
    return TaskGraph(
        label_sets={
            1: ("still", "active"),
            2: ("sit_like", "lie_like"),
            3: ("walk_like", "run_like"),
        },
        deps={2: {1: "still"}, 3: {1: "active"}},
    )


def two_level_recording(seed: int, duration_s: float = 60.0) -> RawRecording:
    """4-class benchmark; the walk_like block mixes both stride patterns so a
    trunk trained on it has seen the variation a later fine split needs."""
    half = duration_s / 2.0
    return _recording_from_blocks(
        [
            (STILL_SIT, duration_s),
            (STILL_LIE, duration_s),
            (replace(WALK_A, name="walk_like"), half),
            (replace(WALK_B, name="walk_like"), half),
            (RUN_SPEC, duration_s),
        ],
        seed,
    )


def fine_split_recording(seed: int, duration_s: float = 30.0) -> RawRecording:
    """Two sub-patterns of the walk_like class, for new-task experiments."""
    return synth_generate([WALK_A, WALK_B], seed, duration_s)


DEFAULT_FE_SPEC = FeatureExtractorSpec(
    input_channels=6,
    window_len=52,  # 2 s at 26 Hz
    blocks=(
        ConvBlockSpec(kernel_size=5, num_filters=8, pool_size=2),
        ConvBlockSpec(kernel_size=3, num_filters=16, pool_size=2),
        ConvBlockSpec(kernel_size=3, num_filters=16, pool_size=3),
    ),
)


# ---------------------------------------------------------------------------
# Model file
# ---------------------------------------------------------------------------

def _expected_tensor_names(
    fe_spec: FeatureExtractorSpec, head_specs: dict[int, HeadSpec]
) -> list[tuple[str, tuple[int, ...]]]:
    names: list[tuple[str, tuple[int, ...]]] = []
    shapes = fe_spec.layer_shapes()
    for w, block in enumerate(fe_spec.blocks):
        in_channels = shapes[w][0]
        names.append(
            (f"fe.block{w}.weight",
             (block.num_filters, in_channels, block.kernel_size))
        )
        names.append((f"fe.block{w}.bias", (block.num_filters,)))
    feature_dim = fe_spec.feature_dim
    for tid in sorted(head_specs):
        previous = feature_dim
        for u, width in enumerate(head_specs[tid].layer_widths):
            names.append((f"head{tid}.layer{u}.weight", (width, previous)))
            names.append((f"head{tid}.layer{u}.bias", (width,)))
            previous = width
    return names


def save_model(bundle: ModelBundle, path) -> None:
    """Write the bundle; save -> load -> save is byte-identical."""
    fe_spec = bundle.fe.spec
    head_specs = {tid: head.spec for tid, head in bundle.heads.items()}
    named = bundle.named_params()

    header = {
        "dtype": TENSOR_DTYPE,
        "fe": {
            "input_channels": fe_spec.input_channels,
            "window_len": fe_spec.window_len,
            "blocks": [
                [b.kernel_size, b.num_filters, b.pool_size]
                for b in fe_spec.blocks
            ],
        },
        "heads": {
            str(tid): {
                "layer_widths": list(spec.layer_widths),
                "num_classes": spec.num_classes,
            }
            for tid, spec in head_specs.items()
        },
        "tensors": [
            {"name": name, "shape": list(array.shape)} for name, array in named
        ],
    }
    header_bytes = json.dumps(header, sort_keys=True,
                              separators=(",", ":")).encode("utf-8")
    schema_bytes = format_schema(bundle.graph).encode("utf-8")

    with open(path, "wb") as handle:
        handle.write(MODEL_MAGIC)
        handle.write(struct.pack("<I", MODEL_VERSION))
        handle.write(struct.pack("<I", len(header_bytes)))
        handle.write(header_bytes)
        handle.write(struct.pack("<I", len(schema_bytes)))
        handle.write(schema_bytes)
        for _name, array in named:
            handle.write(np.ascontiguousarray(array, dtype=TENSOR_DTYPE).tobytes())


def load_model(path) -> ModelBundle:
    """Read a model file; any corruption fails before a bundle is built."""
    with open(path, "rb") as handle:
        blob = handle.read()
    view = io.BytesIO(blob)

    def take(n: int, what: str) -> bytes:
        chunk = view.read(n)
        if len(chunk) != n:
            raise ModelFormatError(f"truncated model file while reading {what}")
        return chunk

    if take(len(MODEL_MAGIC), "magic") != MODEL_MAGIC:
        raise ModelFormatError("bad magic: not a model file")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {version}")

    (header_len,) = struct.unpack("<I", take(4, "header length"))
    try:
        header = json.loads(take(header_len, "header").decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ModelFormatError(f"unreadable model header: {exc}") from exc
    if header.get("dtype") != TENSOR_DTYPE:
        raise ModelFormatError(f"unsupported tensor dtype {header.get('dtype')!r}")

    (schema_len,) = struct.unpack("<I", take(4, "schema length"))
    schema_text = take(schema_len, "schema").decode("utf-8")
    graph = parse_schema(schema_text)

    try:
        fe_spec = FeatureExtractorSpec(
            input_channels=int(header["fe"]["input_channels"]),
            window_len=int(header["fe"]["window_len"]),
            blocks=tuple(
                ConvBlockSpec(kernel_size=k, num_filters=f, pool_size=p)
                for k, f, p in header["fe"]["blocks"]
            ),
        )
        head_specs = {
            int(tid): HeadSpec(
                layer_widths=tuple(entry["layer_widths"]),
                num_classes=int(entry["num_classes"]),
            )
            for tid, entry in header["heads"].items()
        }
        manifest = [
            (entry["name"], tuple(int(d) for d in entry["shape"]))
            for entry in header["tensors"]
        ]
    except (KeyError, TypeError, ValueError, ShapeError) as exc:
        raise ModelFormatError(f"malformed model header: {exc}") from exc

    expected = _expected_tensor_names(fe_spec, head_specs)
    if manifest != expected:
        raise ModelFormatError(
            "tensor manifest does not match the declared specs"
        )

    arrays: dict[str, np.ndarray] = {}
    for name, shape in manifest:
        count = int(np.prod(shape)) if shape else 1
        raw = take(count * 4, f"tensor {name}")
        arrays[name] = (
            np.frombuffer(raw, dtype=TENSOR_DTYPE)
            .reshape(shape)
            .astype(np.float32)
        )
    trailing = view.read()
    if trailing:
        raise ModelFormatError(f"{len(trailing)} unexpected trailing bytes")

    fe = FeatureExtractor(
        fe_spec,
        weights=[arrays[f"fe.block{w}.weight"] for w in range(len(fe_spec.blocks))],
        biases=[arrays[f"fe.block{w}.bias"] for w in range(len(fe_spec.blocks))],
    )
    heads = {}
    for tid, spec in head_specs.items():
        heads[tid] = Head(
            spec,
            fe_spec.feature_dim,
            weights=[arrays[f"head{tid}.layer{u}.weight"]
                     for u in range(len(spec.layer_widths))],
            biases=[arrays[f"head{tid}.layer{u}.bias"]
                    for u in range(len(spec.layer_widths))],
        )
    try:
        return ModelBundle(graph, fe, heads)
    except (ShapeError, ValueError) as exc:
        raise ModelFormatError(f"inconsistent model contents: {exc}") from exc


def param_digest(named_params: list[tuple[str, np.ndarray]]) -> str:
    """sha256 over names, shapes, and serialized float32 parameter bytes."""
    digest = hashlib.sha256()
    for name, array in named_params:
        digest.update(name.encode("utf-8"))
        digest.update(str(array.shape).encode("utf-8"))
        digest.update(np.ascontiguousarray(array, dtype=TENSOR_DTYPE).tobytes())
    return digest.hexdigest()


def fe_digest(bundle: ModelBundle) -> str:
    """Digest of the trunk parameters only, for immutability checks."""
    return param_digest(bundle.fe.named_params("fe"))


# ---------------------------------------------------------------------------
# Run-config files
# ---------------------------------------------------------------------------

def parse_config_text(text: str) -> dict[str, str]:
    """key = value lines; '#' starts a comment; later keys win."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataFormatError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def read_config_file(path) -> dict[str, str]:
    with open(path) as handle:
        return parse_config_text(handle.read())
