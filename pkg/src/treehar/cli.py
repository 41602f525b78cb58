"""Command-line surface for reproducible runs.

Commands: synth, train, infer, add-task, resources, eval. Every run prints
its fully resolved configuration (including the seed) before doing work, so
a run can be reproduced from its log. The DENDRON_SEED environment variable
overrides the configured seed and is announced when active.

Exit codes: 0 success, 2 usage, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import re
import sys
from pathlib import Path

import numpy as np

from . import data_io, reporting
from .errors import DataFormatError, ModelFormatError, NumericError, SchemaError
from .hierarchy import ModelBundle, infer_hierarchical, parse_schema, require_valid
from .online_learning import (
    AcquiredDataset,
    add_task_to_bundle,
    collect_placement_counts,
    select_node,
    train_new_head,
)
from .resources import compare_deployments
from .tensor_nn import ConvBlockSpec, FeatureExtractorSpec, HeadSpec
from .training import TrainConfig, evaluate_bundle, make_samples, train_joint

SEED_ENV_VAR = "DENDRON_SEED"

_BLOCK_RE = re.compile(r"^k(\d+)f(\d+)p(\d+)$")

TRAIN_DEFAULTS = {
    "epochs": "20",
    "learning_rate": "0.05",
    "seed": "0",
    "alpha_mode": "predicted",
    "shuffle": "true",
    "window_seconds": "2.0",
    "overlap": "0.5",
    "label_rule": "majority",
    "blocks": "k5f8p2,k3f16p2,k3f16p3",
    "head_widths": "",
}


def _parse_bool(value: str) -> bool:
    if value.lower() in ("1", "true", "yes", "on"):
        return True
    if value.lower() in ("0", "false", "no", "off"):
        return False
    raise DataFormatError(f"expected a boolean, got {value!r}")


def _parse_blocks(value: str) -> tuple[ConvBlockSpec, ...]:
    blocks = []
    if not value.strip():
        return ()
    for token in value.split(","):
        match = _BLOCK_RE.match(token.strip())
        if not match:
            raise DataFormatError(
                f"bad block spec {token!r}; expected e.g. k5f8p2"
            )
        k, f, p = (int(g) for g in match.groups())
        blocks.append(ConvBlockSpec(kernel_size=k, num_filters=f, pool_size=p))
    return tuple(blocks)


def _parse_head_widths(value: str) -> tuple[int, ...]:
    if not value.strip():
        return ()
    try:
        return tuple(int(tok) for tok in value.split(",") if tok.strip())
    except ValueError as exc:
        raise DataFormatError(f"bad head widths {value!r}") from exc


def _resolve_seed(config: dict[str, str]) -> tuple[int, bool]:
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        try:
            return int(env), True
        except ValueError as exc:
            raise DataFormatError(f"{SEED_ENV_VAR}={env!r} is not an integer") from exc
    return int(config["seed"]), False


def _print_config(command: str, config: dict[str, str], env_seed: bool) -> None:
    print(f"run: {command}")
    for key in sorted(config):
        print(f"config {key} = {config[key]}")
    if env_seed:
        print(f"config note: seed overridden by {SEED_ENV_VAR}")


def _load_run_config(args, defaults: dict[str, str]) -> dict[str, str]:
    config = dict(defaults)
    if getattr(args, "config", None):
        config.update(data_io.read_config_file(args.config))
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            config[key] = str(value)
    return config


def _windows_for_model(
    bundle: ModelBundle, recording: data_io.RawRecording, overlap: float,
    label_rule: str,
) -> list[tuple[np.ndarray, str]]:
    spec = bundle.fe.spec
    if len(recording.channel_names) != spec.input_channels:
        raise DataFormatError(
            f"data has {len(recording.channel_names)} channels, model expects "
            f"{spec.input_channels}"
        )
    window_seconds = spec.window_len / recording.sample_rate_hz
    config = data_io.WindowingConfig(
        window_seconds=window_seconds,
        overlap_fraction=overlap,
        label_rule=label_rule,
    )
    if config.window_len(recording.sample_rate_hz) != spec.window_len:
        raise DataFormatError(
            f"sample rate {recording.sample_rate_hz} cannot produce windows of "
            f"{spec.window_len} samples"
        )
    return data_io.segment_windows(recording, config)


def _report_dir(args, fallback: Path | None) -> Path | None:
    if getattr(args, "report_dir", None):
        path = Path(args.report_dir)
    elif fallback is not None:
        path = fallback
    else:
        return None
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    config = {
        "benchmark": args.benchmark,
        "seed": str(args.seed),
        "train_seconds": str(args.train_seconds),
        "test_seconds": str(args.test_seconds),
        "out_dir": str(args.out_dir),
    }
    seed, env_seed = _resolve_seed(config)
    config["seed"] = str(seed)
    _print_config("synth", config, env_seed)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.benchmark == "two-level":
        train = data_io.two_level_recording(seed, args.train_seconds)
        test = data_io.two_level_recording(seed + 1000, args.test_seconds)
        data_io.write_recording_csv(train, out / "train.csv")
        data_io.write_recording_csv(test, out / "test.csv")
        with open(out / "schema.txt", "w") as handle:
            handle.write(data_io.format_schema(data_io.two_level_graph()))
        print(f"wrote {out / 'train.csv'}")
        print(f"wrote {out / 'test.csv'}")
        print(f"wrote {out / 'schema.txt'}")
    else:  # fine-split
        train = data_io.fine_split_recording(seed, args.train_seconds)
        test = data_io.fine_split_recording(seed + 1000, args.test_seconds)
        data_io.write_recording_csv(train, out / "newtask_train.csv")
        data_io.write_recording_csv(test, out / "newtask_test.csv")
        print(f"wrote {out / 'newtask_train.csv'}")
        print(f"wrote {out / 'newtask_test.csv'}")
    return 0


def cmd_train(args) -> int:
    config = _load_run_config(args, TRAIN_DEFAULTS)
    if args.data:
        config["data"] = args.data
    if args.holdout:
        config["holdout"] = args.holdout
    if "data" not in config:
        raise DataFormatError("no dataset: pass --data or a 'data' config key")
    seed, env_seed = _resolve_seed(config)
    config["seed"] = str(seed)
    config["schema"] = args.schema
    config["out"] = args.out
    _print_config("train", config, env_seed)

    with open(args.schema) as handle:
        graph = parse_schema(handle.read())
    require_valid(graph, require_tree=True)

    recording = data_io.read_recording_csv(config["data"])
    window_config = data_io.WindowingConfig(
        window_seconds=float(config["window_seconds"]),
        overlap_fraction=float(config["overlap"]),
        label_rule=config["label_rule"],
    )
    windows = data_io.segment_windows(recording, window_config)
    if not windows:
        raise DataFormatError("dataset produced no windows")

    samples = make_samples(graph, windows)
    holdout_samples = None
    if config.get("holdout"):
        holdout_rec = data_io.read_recording_csv(config["holdout"])
        holdout_samples = make_samples(
            graph, data_io.segment_windows(holdout_rec, window_config)
        )

    blocks = _parse_blocks(config["blocks"])
    fe_spec = FeatureExtractorSpec(
        input_channels=len(recording.channel_names),
        window_len=window_config.window_len(recording.sample_rate_hz),
        blocks=blocks,
    )
    widths = _parse_head_widths(config["head_widths"])
    head_specs = {
        tid: HeadSpec(
            layer_widths=(*widths, graph.label_sets[tid].k),
            num_classes=graph.label_sets[tid].k,
        )
        for tid in graph.task_ids
    }
    bundle = ModelBundle.from_seed(graph, fe_spec, head_specs, seed=seed)

    train_config = TrainConfig(
        epochs=int(config["epochs"]),
        learning_rate=float(config["learning_rate"]),
        rng_seed=seed,
        alpha_mode=config["alpha_mode"],
        shuffle=_parse_bool(config["shuffle"]),
    )
    bundle, report = train_joint(bundle, samples, train_config, holdout_samples)
    Path(args.out).resolve().parent.mkdir(parents=True, exist_ok=True)
    data_io.save_model(bundle, args.out)
    print(f"wrote model {args.out} ({len(samples)} training windows)")

    task_ids = bundle.graph.task_ids
    if report.epoch_losses:
        header = f"{'epoch':>6}{'total_loss':>14}" + "".join(
            f"{f'task{tid}':>12}" for tid in task_ids
        )
        print(header)
        for epoch, loss in enumerate(report.epoch_losses):
            per_task = report.per_task_losses[epoch]
            print(f"{epoch + 1:>6}{loss:>14.6f}" + "".join(
                f"{per_task[tid]:>12.6f}" for tid in task_ids
            ))

    report_dir = _report_dir(args, Path(args.out).resolve().parent)
    if report_dir is not None:
        rows = [
            (epoch + 1, f"{loss:.6f}",
             *(f"{report.per_task_losses[epoch][tid]:.6f}" for tid in task_ids))
            for epoch, loss in enumerate(report.epoch_losses)
        ]
        reporting.write_rows(
            report_dir / "train_report.csv",
            ["epoch", "total_loss", *(f"task{tid}_loss" for tid in task_ids)],
            rows,
        )
        if report.epoch_losses:
            reporting.save_loss_curve(
                report.epoch_losses, report_dir / "loss_curve.png"
            )
        print(f"wrote report {report_dir / 'train_report.csv'}")
    if report.epoch_losses:
        print(f"final mean loss: {report.epoch_losses[-1]:.6f}")
    if report.holdout_accuracy is not None:
        print(f"holdout accuracy: {report.holdout_accuracy:.4f}")
        for label, acc in (report.holdout_per_class or {}).items():
            print(f"holdout class {label}: {acc:.4f}")
    return 0


def cmd_infer(args) -> int:
    config = {
        "model": args.model,
        "data": args.data,
        "overlap": str(args.overlap),
        "label_rule": args.label_rule,
    }
    _print_config("infer", config, env_seed=False)
    bundle = data_io.load_model(args.model)
    recording = data_io.read_recording_csv(args.data)
    windows = _windows_for_model(bundle, recording, args.overlap, args.label_rule)
    if not windows:
        raise DataFormatError("dataset produced no windows")

    terminals = list(bundle.graph.terminal_labels())
    confusion: dict[tuple[str, str], int] = {}
    trace_rows = []
    for idx, (window, truth) in enumerate(windows):
        trace = infer_hierarchical(bundle, window)
        steps = " -> ".join(
            f"task{s.task}={s.predicted_label}"
            f"({float(s.probabilities.max()):.3f})"
            for s in trace.steps
        )
        print(f"window {idx}: {steps} => {trace.final_label} (true: {truth})")
        trace_rows.append((idx, truth, trace.final_label,
                           " ".join(str(t) for t in trace.task_path)))
        confusion[(truth, trace.final_label)] = (
            confusion.get((truth, trace.final_label), 0) + 1
        )

    labeled = all(truth in terminals for _, truth in windows)
    if labeled:
        print("confusion matrix (rows true, cols predicted):")
        width = max(len(t) for t in terminals) + 2
        print(" " * width + "".join(f"{t:>{width}}" for t in terminals))
        for truth in terminals:
            row = "".join(
                f"{confusion.get((truth, pred), 0):>{width}}" for pred in terminals
            )
            print(f"{truth:>{width}}" + row)

    report_dir = _report_dir(args, None)
    if report_dir is not None:
        reporting.write_rows(
            report_dir / "traces.csv",
            ["window", "true_label", "predicted_label", "task_path"],
            trace_rows,
        )
        if labeled:
            reporting.write_rows(
                report_dir / "confusion.csv",
                ["true_label", *terminals],
                [
                    (truth, *(confusion.get((truth, p), 0) for p in terminals))
                    for truth in terminals
                ],
            )
            reporting.save_confusion_matrix(
                terminals, confusion, report_dir / "confusion.png"
            )
        print(f"wrote report {report_dir / 'traces.csv'}")
    return 0


def cmd_add_task(args) -> int:
    defaults = {
        "epochs": "40",
        "learning_rate": "0.05",
        "seed": "0",
        "shuffle": "true",
        "overlap": "0.5",
        "head_widths": "",
    }
    config = _load_run_config(args, defaults)
    seed, env_seed = _resolve_seed(config)
    config["seed"] = str(seed)
    config.update(
        model=args.model, data=args.data, out=args.out,
        delta=str(args.delta), classes=args.classes,
    )
    _print_config("add-task", config, env_seed)

    new_labels = tuple(tok.strip() for tok in args.classes.split(",") if tok.strip())
    if len(new_labels) < 2:
        raise DataFormatError(f"--classes needs at least 2 labels, got {new_labels}")

    bundle = data_io.load_model(args.model)
    recording = data_io.read_recording_csv(args.data)
    windows = _windows_for_model(
        bundle, recording, float(config["overlap"]), "majority"
    )
    class_index = {label: i for i, label in enumerate(new_labels)}
    unknown = sorted({lab for _, lab in windows if lab not in class_index})
    if unknown:
        raise DataFormatError(
            f"data labels {unknown} not in --classes {list(new_labels)}"
        )
    data = AcquiredDataset(
        windows=[w for w, _ in windows],
        class_indices=[class_index[lab] for _, lab in windows],
        num_classes=len(new_labels),
    )

    decision = collect_placement_counts(bundle, data)
    decision = select_node(decision, args.delta)
    print(f"placement counts over {decision.sample_count} windows:")
    for label, count in decision.counts.items():
        print(f"  {label}: {count}")
    print(f"top frequency: {decision.top_label} {decision.top_frequency:.4f}")
    print(
        f"second frequency: {decision.second_label} "
        f"{decision.second_frequency:.4f}"
    )
    print(f"attach: {', '.join(decision.attach_to)}")

    digest_before = data_io.fe_digest(bundle)
    print(f"trunk digest before: {digest_before}")

    widths = _parse_head_widths(config["head_widths"])
    head_spec = HeadSpec(
        layer_widths=(*widths, len(new_labels)), num_classes=len(new_labels)
    )
    bundle, new_id = add_task_to_bundle(
        bundle, new_labels, head_spec, decision.attach_to, seed=seed
    )
    train_config = TrainConfig(
        epochs=int(config["epochs"]),
        learning_rate=float(config["learning_rate"]),
        rng_seed=seed,
        shuffle=_parse_bool(config["shuffle"]),
    )
    report = train_new_head(bundle, new_id, data, train_config)
    digest_after = data_io.fe_digest(bundle)
    print(f"trunk digest after:  {digest_after}")
    if digest_after != digest_before:
        raise NumericError("trunk parameters changed during head training")
    print(f"feature cache: {report.cache_bytes} bytes "
          f"({len(data)} windows x {bundle.fe.feature_dim} values x 4)")

    Path(args.out).resolve().parent.mkdir(parents=True, exist_ok=True)
    data_io.save_model(bundle, args.out)
    print(f"wrote model {args.out} (new task {new_id}: {', '.join(new_labels)})")

    report_dir = _report_dir(args, Path(args.out).resolve().parent)
    if report_dir is not None:
        reporting.write_rows(
            report_dir / "placement.csv",
            ["terminal_label", "count", "frequency"],
            [
                (label, count, f"{count / decision.sample_count:.6f}")
                for label, count in decision.counts.items()
            ],
        )
        reporting.save_placement_frequencies(
            decision, report_dir / "placement.png"
        )
        if report.epoch_losses:
            reporting.save_loss_curve(
                report.epoch_losses, report_dir / "new_head_loss.png",
                title="new head training loss",
            )
        print(f"wrote report {report_dir / 'placement.csv'}")
    return 0


def cmd_resources(args) -> int:
    _print_config("resources", {"model": args.model}, env_seed=False)
    bundle = data_io.load_model(args.model)
    report = compare_deployments(bundle)
    print(report.to_table())
    print("machine rows (kind,name,params,weights,biases,bytes,macc):")
    for row in report.to_rows():
        print(",".join(str(v) for v in row))

    report_dir = _report_dir(args, None)
    if report_dir is not None:
        reporting.write_rows(
            report_dir / "resources.csv",
            ["kind", "name", "params", "weights", "biases", "bytes", "macc"],
            report.to_rows(),
        )
        reporting.save_resource_comparison(report, report_dir / "resources.png")
        print(f"wrote report {report_dir / 'resources.csv'}")
    return 0


def cmd_eval(args) -> int:
    config = {
        "model": args.model,
        "data": args.data,
        "overlap": str(args.overlap),
        "label_rule": args.label_rule,
    }
    _print_config("eval", config, env_seed=False)
    bundle = data_io.load_model(args.model)
    recording = data_io.read_recording_csv(args.data)
    windows = _windows_for_model(bundle, recording, args.overlap, args.label_rule)
    if not windows:
        raise DataFormatError("dataset produced no windows")
    terminals = set(bundle.graph.terminal_labels())
    unknown = sorted({lab for _, lab in windows if lab not in terminals})
    if unknown:
        raise DataFormatError(f"data labels {unknown} are not terminal labels")

    samples = make_samples(bundle.graph, windows)
    per_class, overall, confusion = evaluate_bundle(bundle, samples)
    print(f"windows: {len(samples)}")
    print(f"accuracy: {overall:.4f}")
    for label, acc in per_class.items():
        print(f"class {label}: {acc:.4f}")

    report_dir = _report_dir(args, None)
    if report_dir is not None:
        reporting.write_rows(
            report_dir / "eval.csv",
            ["class", "accuracy"],
            [(label, f"{acc:.6f}") for label, acc in per_class.items()]
            + [("overall", f"{overall:.6f}")],
        )
        labels = list(bundle.graph.terminal_labels())
        reporting.save_confusion_matrix(
            labels, confusion, report_dir / "confusion.png"
        )
        print(f"wrote report {report_dir / 'eval.csv'}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="treehar",
        description="Tree-routed activity recognition with a shared trunk.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic benchmark dataset")
    p.add_argument("--benchmark", choices=["two-level", "fine-split"],
                   default="two-level")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-seconds", type=float, default=60.0)
    p.add_argument("--test-seconds", type=float, default=30.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="jointly train trunk and heads")
    p.add_argument("--schema", required=True)
    p.add_argument("--data")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--holdout")
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--alpha-mode", dest="alpha_mode",
                   choices=["predicted", "teacher_forced"])
    p.add_argument("--report-dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="hierarchical inference with traces")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--overlap", type=float, default=0.5)
    p.add_argument("--label-rule", dest="label_rule", default="majority",
                   choices=["majority", "strict-uniform"])
    p.add_argument("--report-dir")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("add-task", help="attach and train a new task head")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--classes", required=True,
                   help="comma-separated labels of the new task")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--report-dir")
    p.set_defaults(func=cmd_add_task)

    p = sub.add_parser("resources", help="parameter / MACC / activation report")
    p.add_argument("--model", required=True)
    p.add_argument("--report-dir")
    p.set_defaults(func=cmd_resources)

    p = sub.add_parser("eval", help="accuracy of a model on labeled data")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--overlap", type=float, default=0.5)
    p.add_argument("--label-rule", dest="label_rule", default="majority",
                   choices=["majority", "strict-uniform"])
    p.add_argument("--report-dir")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except (DataFormatError, ModelFormatError, SchemaError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
