"""Command-line entry points and full-pipeline orchestration.

Subcommands mirror the pipeline stages (quantize, learn, label, predict,
justify, evaluate) plus ``run``, which chains them over a config file,
and ``report``, which formats the headline metrics row. Exit codes:
0 success, 1 usage error, 2 data/format error, 3 internal failure.

Every stage is deterministic: rerunning the same config reproduces every
artifact byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import dataclass, replace
from pathlib import Path

from . import inference, labeller, quantize
from .errors import ConfigError, FormatError, IoError, KernelRulesError
from .induction import FoldParams, learn_ruleset
from .interchange import (
    KernelImageEntry,
    Manifest,
    load_bits,
    load_feature_map,
    load_manifest,
    load_mask,
    load_norms,
    save_manifest,
    validate_hyperparameters,
    write_table,
)
from .rules import (
    LabelMap,
    apply_labels,
    load_labelmap,
    parse_ruleset,
    print_ruleset,
    resolve_labels,
    stats,
    write_labelmap,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    """All inputs and hyperparameters of one pipeline run."""

    norms_train: str
    out_dir: str
    norms_test: str | None = None
    masks_dir: str | None = None
    featmaps_dir: str | None = None
    alpha: float = quantize.DEFAULT_ALPHA
    gamma: float = quantize.DEFAULT_GAMMA
    ratio: float = 0.8
    tail: float = 5e-3
    margin: float = labeller.DEFAULT_MARGIN
    m: int = labeller.DEFAULT_TOP_M
    tau: float = labeller.DEFAULT_TAU
    softmax_fraction: float | None = None
    max_exception_depth: int = 3

    def validate(self):
        validate_hyperparameters({
            "alpha": self.alpha, "gamma": self.gamma, "ratio": self.ratio,
            "tail": self.tail, "margin": self.margin, "m": self.m,
            "tau": self.tau, "softmax_fraction": self.softmax_fraction,
        })
        if self.max_exception_depth < 0:
            raise ConfigError("max_exception_depth must be >= 0")


_CONFIG_FIELDS = {
    "norms_train": str, "norms_test": str, "masks_dir": str,
    "featmaps_dir": str, "out_dir": str,
    "alpha": float, "gamma": float, "ratio": float, "tail": float,
    "margin": float, "m": int, "tau": float, "softmax_fraction": float,
    "max_exception_depth": int,
}


def load_config(path) -> RunConfig:
    """Parse a flat ``key=value`` config file (``#`` starts a comment)."""
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _CONFIG_FIELDS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _CONFIG_FIELDS[key](value)
        except ValueError:
            raise ConfigError(
                f"{path}:{lineno}: bad value for {key}: {value!r}"
            ) from None
    missing = {"norms_train", "out_dir"} - set(values)
    if missing:
        raise ConfigError(f"{path}: missing required keys {sorted(missing)}")
    config = RunConfig(**values)
    config.validate()
    return config


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

class _Stage:
    """Context manager that prefixes escaping errors with the stage name."""

    def __init__(self, name):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and isinstance(exc, KernelRulesError):
            exc.args = (f"stage {self.name}: {exc}",)
        return False


def _rank_top_images(norms, kernel_id, m):
    """Image ids with the m highest norms for *kernel_id* (ties: row order)."""
    col = norms.kernel_ids.index(kernel_id)
    order = sorted(
        range(norms.n_images),
        key=lambda i: (-norms.values[i, col], i),
    )
    return [norms.image_ids[i] for i in order[:m]]


def build_label_manifest(config: RunConfig, norms, rs, out_dir: Path) -> Manifest:
    """Collect, per significant kernel, the top-m (featmap, mask) paths.

    Images missing either file are skipped with a warning so exporters
    that dump fewer maps than ``m`` stay usable.
    """
    featmaps_dir = Path(config.featmaps_dir)
    masks_dir = Path(config.masks_dir)
    kernels = {}
    for kid in rs.kernel_universe:
        entries = []
        kdir = featmaps_dir / f"k_{kid}"
        for image_id in _rank_top_images(norms, kid, norms.n_images):
            featmap = kdir / f"{image_id}.nsyf"
            grid = masks_dir / f"{image_id}.csv"
            names = masks_dir / f"{image_id}.names.csv"
            if featmap.exists() and grid.exists() and names.exists():
                entries.append(KernelImageEntry(
                    featmap=str(featmap.resolve()),
                    mask_grid=str(grid.resolve()),
                    mask_names=str(names.resolve()),
                ))
            if len(entries) == config.m:
                break
        if not entries:
            print(f"warning: kernel {kid} has no usable feature-map/mask pairs",
                  file=sys.stderr)
        kernels[kid] = entries
    return Manifest(
        hyperparameters={
            "alpha": config.alpha, "gamma": config.gamma,
            "ratio": config.ratio, "tail": config.tail,
            "margin": config.margin, "m": config.m, "tau": config.tau,
        },
        norms={"train": str(Path(config.norms_train).resolve())},
        bits={"train": str((out_dir / "bits_train.csv").resolve())},
        ruleset=str((out_dir / "ruleset.lp").resolve()),
        kernels=kernels,
        base_dir=out_dir,
    )


def _load_manifest_data(manifest: Manifest):
    data = {}
    for kid, entries in manifest.kernels.items():
        pairs = []
        for entry in entries:
            featmap = load_feature_map(manifest.resolve(entry.featmap))
            mask = load_mask(manifest.resolve(entry.mask_grid),
                             manifest.resolve(entry.mask_names))
            pairs.append((featmap, mask))
        data[kid] = pairs
    return data


def report(metrics: inference.Metrics, rule_stats) -> str:
    """One-line summary row: fidelity, accuracy, predicate count, size."""
    fid = "n/a" if metrics.fidelity is None else f"{metrics.fidelity:.2f}"
    return (f"Fid {fid}  Acc {metrics.accuracy:.2f}  "
            f"Pred {rule_stats.unique_predicates}  Size {rule_stats.size}")


def _write_metrics(metrics: inference.Metrics, path):
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["metric", "value"])
        writer.writerow(["accuracy", repr(metrics.accuracy)])
        writer.writerow(["fidelity",
                         "" if metrics.fidelity is None else repr(metrics.fidelity)])
        writer.writerow(["coverage_rate", repr(metrics.coverage_rate)])
        for cls, acc in metrics.per_class_accuracy.items():
            writer.writerow([f"accuracy_{cls}", repr(acc)])


def _read_metrics(path) -> inference.Metrics:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["metric", "value"]:
        raise FormatError(f"{path}: header must be 'metric,value'")
    table = {row[0]: row[1] for row in rows[1:] if row}
    per_class = {
        key[len("accuracy_"):]: float(value)
        for key, value in table.items()
        if key.startswith("accuracy_")
    }
    return inference.Metrics(
        accuracy=float(table["accuracy"]),
        fidelity=float(table["fidelity"]) if table.get("fidelity") else None,
        coverage_rate=float(table.get("coverage_rate", "0") or 0),
        per_class_accuracy=per_class,
    )


def _write_predictions(image_ids, predictions, path):
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image_id", "prediction"])
        for image_id, pred in zip(image_ids, predictions):
            writer.writerow([image_id, pred])


def run_pipeline(config: RunConfig) -> str:
    """Execute quantize -> learn -> label -> evaluate and write all artifacts.

    Returns the text report. The label stage is skipped with a warning
    when mask or feature-map directories are not configured.
    """
    config.validate()
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    with _Stage("quantize"):
        norms_train = load_norms(config.norms_train)
        thresholds = quantize.compute_thresholds(
            norms_train, config.alpha, config.gamma
        )
        quantize.write_thresholds(thresholds, out_dir / "thresholds.csv")
        bits_train = quantize.binarize(norms_train, thresholds)
        write_table(bits_train, out_dir / "bits_train.csv")
        bits_eval = bits_train
        if config.norms_test:
            norms_test = load_norms(config.norms_test)
            bits_test = quantize.binarize(norms_test, thresholds)
            write_table(bits_test, out_dir / "bits_test.csv")
            bits_eval = bits_test

    with _Stage("learn"):
        bits_learn = bits_train
        if config.softmax_fraction is not None:
            bits_learn = quantize.filter_top_softmax(
                bits_train, config.softmax_fraction
            )
        params = FoldParams(
            ratio=config.ratio, tail=config.tail,
            max_exception_depth=config.max_exception_depth,
        )
        rs = learn_ruleset(bits_learn, params)
        (out_dir / "ruleset.lp").write_text(print_ruleset(rs), encoding="utf-8")
        rule_stats = stats(rs)

    labelled = None
    if config.masks_dir and config.featmaps_dir:
        with _Stage("label"):
            manifest = build_label_manifest(config, norms_train, rs, out_dir)
            save_manifest(manifest, out_dir / "manifest.json")
            data = _load_manifest_data(manifest)
            label_map = labeller.label_ruleset(
                rs, data, m=config.m, margin=config.margin, tau=config.tau
            )
            write_labelmap(label_map, out_dir / "labels.csv")
            labelled = apply_labels(rs, label_map)
            (out_dir / "ruleset_labeled.lp").write_text(
                print_ruleset(labelled), encoding="utf-8"
            )
    else:
        print("warning: stage label skipped (masks_dir/featmaps_dir not set)",
              file=sys.stderr)

    with _Stage("evaluate"):
        predictions = inference.predict_table(rs, bits_eval)
        _write_predictions(bits_eval.image_ids, predictions,
                           out_dir / "predictions.csv")
        metrics = inference.evaluate(rs, bits_eval)
        _write_metrics(metrics, out_dir / "metrics.csv")
        fid_text = "n/a" if metrics.fidelity is None else repr(metrics.fidelity)
        lines = [
            f"rules {rule_stats.rule_count}",
            f"unique_predicates {rule_stats.unique_predicates}",
            f"size {rule_stats.size}",
            f"accuracy {metrics.accuracy!r}",
            f"fidelity {fid_text}",
            f"coverage_rate {metrics.coverage_rate!r}",
            report(metrics, rule_stats),
        ]
        report_text = "\n".join(lines) + "\n"
        (out_dir / "report.txt").write_text(report_text, encoding="utf-8")
    return report_text


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------

def _load_ruleset_arg(path, labels_path=None):
    rs = parse_ruleset(Path(path).read_text(encoding="utf-8"))
    if labels_path:
        rs = resolve_labels(rs, load_labelmap(labels_path))
    return rs


def _cmd_quantize(args):
    norms = load_norms(args.norms)
    if args.thresholds:
        thresholds = quantize.load_thresholds(args.thresholds)
    else:
        thresholds = quantize.compute_thresholds(norms, args.alpha, args.gamma)
    bits = quantize.binarize(norms, thresholds)
    write_table(bits, args.out)
    if args.thresholds_out:
        quantize.write_thresholds(thresholds, args.thresholds_out)
    return EXIT_OK


def _cmd_learn(args):
    bits = load_bits(args.bits)
    if args.top_softmax is not None:
        bits = quantize.filter_top_softmax(bits, args.top_softmax)
    params = FoldParams(ratio=args.ratio, tail=args.tail,
                        max_exception_depth=args.max_exception_depth)
    rs = learn_ruleset(bits, params)
    Path(args.out).write_text(print_ruleset(rs), encoding="utf-8")
    return EXIT_OK


def _cmd_label(args):
    rs = _load_ruleset_arg(args.ruleset)
    manifest = load_manifest(args.manifest)
    data = _load_manifest_data(manifest)
    label_map = labeller.label_ruleset(
        rs, data, m=args.m, margin=args.margin, tau=args.tau
    )
    write_labelmap(label_map, args.out)
    if args.labeled_out:
        Path(args.labeled_out).write_text(
            print_ruleset(apply_labels(rs, label_map)), encoding="utf-8"
        )
    return EXIT_OK


def _cmd_predict(args):
    rs = _load_ruleset_arg(args.ruleset, args.labels)
    bits = load_bits(args.bits)
    predictions = inference.predict_table(rs, bits)
    _write_predictions(bits.image_ids, predictions, args.out)
    return EXIT_OK


def _cmd_justify(args):
    rs = _load_ruleset_arg(args.ruleset, args.labels)
    bits = load_bits(args.bits)
    if args.image not in bits.image_ids:
        raise FormatError(f"image {args.image!r} not present in {args.bits}")
    row = bits.image_ids.index(args.image)
    instance = bits.row_bits(row)
    justification = inference.justify(rs, instance)
    print(f"image: {args.image}")
    print(justification.render())
    return EXIT_OK


def _cmd_evaluate(args):
    rs = _load_ruleset_arg(args.ruleset, args.labels)
    bits = load_bits(args.bits)
    metrics = inference.evaluate(rs, bits)
    _write_metrics(metrics, args.out)
    return EXIT_OK


def _cmd_run(args):
    config = load_config(args.config)
    overrides = {
        key: getattr(args, key)
        for key in ("alpha", "gamma", "ratio", "tail", "margin", "m", "tau",
                    "softmax_fraction", "out_dir")
        if getattr(args, key, None) is not None
    }
    if overrides:
        config = replace(config, **overrides)
    print(run_pipeline(config), end="")
    return EXIT_OK


def _cmd_report(args):
    metrics = _read_metrics(args.metrics)
    rs = _load_ruleset_arg(args.ruleset)
    print(report(metrics, stats(rs)))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(
        prog="kernelrules",
        description="Rule-program extraction and evaluation over binarized "
                    "CNN kernel activations.",
    )
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("quantize", help="binarize a norms table")
    p.add_argument("--norms", required=True)
    p.add_argument("--alpha", type=float, default=quantize.DEFAULT_ALPHA)
    p.add_argument("--gamma", type=float, default=quantize.DEFAULT_GAMMA)
    p.add_argument("--out", required=True)
    p.add_argument("--thresholds", help="reuse thresholds from this CSV")
    p.add_argument("--thresholds-out", dest="thresholds_out")
    p.set_defaults(func=_cmd_quantize)

    p = sub.add_parser("learn", help="induce a rule set from a bits table")
    p.add_argument("--bits", required=True)
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--tail", type=float, required=True)
    p.add_argument("--max-exception-depth", dest="max_exception_depth",
                   type=int, default=3)
    p.add_argument("--top-softmax", dest="top_softmax", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_learn)

    p = sub.add_parser("label", help="attach semantic labels to kernels")
    p.add_argument("--ruleset", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--m", type=int, default=labeller.DEFAULT_TOP_M)
    p.add_argument("--margin", type=float, default=labeller.DEFAULT_MARGIN)
    p.add_argument("--tau", type=float, default=labeller.DEFAULT_TAU)
    p.add_argument("--out", required=True)
    p.add_argument("--labeled-out", dest="labeled_out")
    p.set_defaults(func=_cmd_label)

    p = sub.add_parser("predict", help="classify every row of a bits table")
    p.add_argument("--ruleset", required=True)
    p.add_argument("--bits", required=True)
    p.add_argument("--labels", help="label map for a labelled rule set")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("justify", help="print the proof tree for one image")
    p.add_argument("--ruleset", required=True)
    p.add_argument("--bits", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--labels")
    p.set_defaults(func=_cmd_justify)

    p = sub.add_parser("evaluate", help="accuracy/fidelity of a rule set")
    p.add_argument("--ruleset", required=True)
    p.add_argument("--bits", required=True)
    p.add_argument("--labels")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("run", help="run the full pipeline from a config file")
    p.add_argument("--config", required=True)
    for key in ("alpha", "gamma", "ratio", "tail", "margin", "tau",
                "softmax_fraction"):
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=float)
    p.add_argument("--m", type=int)
    p.add_argument("--out-dir", dest="out_dir")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("report", help="format the headline metrics row")
    p.add_argument("--metrics", required=True)
    p.add_argument("--ruleset", required=True)
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (KernelRulesError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
