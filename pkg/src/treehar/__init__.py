"""Tree-routed activity recognition with a shared convolutional trunk.

One feature extractor feeds a classifier head per sub-task; a dependency
matrix routes inference from a root task down to a terminal label. Training
is joint with per-task losses weighted by activation probability; new tasks
are added after deployment by training only a fresh head against cached
trunk features.
"""

from .errors import (
    DataFormatError,
    ModelFormatError,
    NumericError,
    SchemaError,
    ShapeError,
    TreeharError,
)
from .hierarchy import (
    InferenceTrace,
    LabelSet,
    ModelBundle,
    TaskGraph,
    compute_activation_weights,
    format_schema,
    forward_all_heads,
    infer_hierarchical,
    parse_schema,
    root_task,
    validate_graph,
)
from .tensor_nn import (
    ConvBlockSpec,
    FeatureExtractor,
    FeatureExtractorSpec,
    Head,
    HeadSpec,
    MaccCounter,
    SgdState,
)
from .training import (
    OFF_PATH,
    MultiLabelSample,
    TrainConfig,
    TrainReport,
    derive_task_labels,
    evaluate_bundle,
    joint_loss,
    make_samples,
    train_joint,
)
from .online_learning import (
    AcquiredDataset,
    FeatureCache,
    HeadBudget,
    PlacementDecision,
    add_task_to_bundle,
    attach_task,
    collect_placement_counts,
    detach_task,
    head_budget,
    head_weight_memory,
    select_node,
    train_new_head,
)
from .resources import ResourceReport, activation_peak, compare_deployments, count_macc
from .data_io import (
    RawRecording,
    SynthClassSpec,
    WindowingConfig,
    fe_digest,
    load_model,
    param_digest,
    read_recording_csv,
    save_model,
    segment_windows,
    synth_generate,
    write_recording_csv,
)

__version__ = "0.1.0"
