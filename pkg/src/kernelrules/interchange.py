"""On-disk formats exchanged between the CNN exporter, the pipeline stages,
and users.

Tabular data (per-image kernel norms, binarizations, thresholds, label maps)
travels as UTF-8 CSV with a mandatory header row; feature maps use a compact
binary format because they are large and purely numeric; segmentation masks
are an integer CSV grid plus a ``concept_id,name`` sidecar. Every writer is
the exact inverse of its loader: ``load(write(x)) == x``.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    AlignmentError,
    ConfigError,
    EmptyInputError,
    FormatError,
    IoError,
)

FEATMAP_MAGIC = b"NSYF"
FEATMAP_VERSION = 1

_META_COLUMNS = ("image_id", "true_class", "cnn_pred", "cnn_conf")


def _require(cond, err_cls, message):
    if not cond:
        raise err_cls(message)


@dataclass(frozen=True)
class _KernelTable:
    """Shared shape of the norms and binarization tables.

    Rows are images, columns are kernels of the last convolutional layer.
    Column order is significant and preserved end-to-end: column ``j``
    always refers to ``kernel_ids[j]``.
    """

    image_ids: tuple[str, ...]
    kernel_ids: tuple[int, ...]
    values: np.ndarray
    true_class: tuple[str, ...]
    cnn_pred: tuple[str, ...] | None = None
    cnn_conf: tuple[float, ...] | None = None

    def __post_init__(self):
        n, k = len(self.image_ids), len(self.kernel_ids)
        if self.values.shape != (n, k):
            raise ValueError(
                f"matrix shape {self.values.shape} does not match "
                f"{n} images x {k} kernels"
            )
        if len(set(self.image_ids)) != n:
            raise ValueError("duplicate image_ids")
        if len(set(self.kernel_ids)) != k:
            raise ValueError("duplicate kernel_ids")
        if len(self.true_class) != n:
            raise ValueError("true_class length mismatch")
        if self.cnn_pred is not None and len(self.cnn_pred) != n:
            raise ValueError("cnn_pred length mismatch")
        if self.cnn_conf is not None:
            if len(self.cnn_conf) != n:
                raise ValueError("cnn_conf length mismatch")
            for c in self.cnn_conf:
                if not (0.0 <= c <= 1.0):
                    raise ValueError(f"cnn_conf {c} outside [0, 1]")

    @property
    def n_images(self):
        return len(self.image_ids)

    @property
    def n_kernels(self):
        return len(self.kernel_ids)

    def __eq__(self, other):
        if type(self) is not type(other):
            return NotImplemented
        return (
            self.image_ids == other.image_ids
            and self.kernel_ids == other.kernel_ids
            and self.true_class == other.true_class
            and self.cnn_pred == other.cnn_pred
            and self.cnn_conf == other.cnn_conf
            and np.array_equal(self.values, other.values)
        )

    def row_bits(self, i):
        """Mapping kernel_id -> value for row *i*."""
        return dict(zip(self.kernel_ids, self.values[i]))

    def take_rows(self, indices):
        """New table restricted to *indices*, original order preserved."""
        idx = list(indices)
        return type(self)(
            image_ids=tuple(self.image_ids[i] for i in idx),
            kernel_ids=self.kernel_ids,
            values=self.values[idx].copy() if idx else self.values[:0].copy(),
            true_class=tuple(self.true_class[i] for i in idx),
            cnn_pred=None if self.cnn_pred is None
            else tuple(self.cnn_pred[i] for i in idx),
            cnn_conf=None if self.cnn_conf is None
            else tuple(self.cnn_conf[i] for i in idx),
        )


@dataclass(frozen=True, eq=False)
class NormsTable(_KernelTable):
    """Per-image, per-kernel real-valued feature-map norms."""

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        super().__post_init__()
        if not np.all(np.isfinite(self.values)):
            raise ValueError("norms must be finite")
        if np.any(self.values < 0):
            raise ValueError("norms must be >= 0")


@dataclass(frozen=True, eq=False)
class BinarizationTable(_KernelTable):
    """Per-image bit vector over kernels: 1 = kernel active for the image."""

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.uint8))
        super().__post_init__()
        if not np.all((self.values == 0) | (self.values == 1)):
            raise ValueError("binarization cells must be 0 or 1")

    @property
    def bits(self):
        return self.values


@dataclass(frozen=True)
class FeatureMap:
    """The 2D output of one kernel for one image."""

    kernel_id: int
    image_id: str
    values: np.ndarray  # shape (height, width), float32

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float32))
        if self.values.ndim != 2 or self.values.size == 0:
            raise ValueError("feature map must be a non-empty 2D array")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature map values must be finite")
        if self.kernel_id < 0:
            raise ValueError("kernel_id must be >= 0")

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    def __eq__(self, other):
        if not isinstance(other, FeatureMap):
            return NotImplemented
        return (
            self.kernel_id == other.kernel_id
            and self.image_id == other.image_id
            and self.values.shape == other.values.shape
            and np.array_equal(
                self.values.view(np.uint32), other.values.view(np.uint32)
            )
        )


@dataclass(frozen=True)
class SegmentationMask:
    """Pixel-level concept annotation for one image."""

    image_id: str
    concept_ids: np.ndarray  # shape (height, width), int
    concept_names: dict[int, str]

    def __post_init__(self):
        object.__setattr__(
            self, "concept_ids", np.asarray(self.concept_ids, dtype=np.int64)
        )
        if self.concept_ids.ndim != 2 or self.concept_ids.size == 0:
            raise ValueError("mask grid must be a non-empty 2D array")
        if np.any(self.concept_ids < 0):
            raise ValueError("concept ids must be >= 0")
        present = set(np.unique(self.concept_ids).tolist())
        missing = present - set(self.concept_names)
        if missing:
            raise ValueError(f"concept ids {sorted(missing)} have no name entry")

    @property
    def height(self):
        return self.concept_ids.shape[0]

    @property
    def width(self):
        return self.concept_ids.shape[1]

    def __eq__(self, other):
        if not isinstance(other, SegmentationMask):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and np.array_equal(self.concept_ids, other.concept_ids)
            and self.concept_names == other.concept_names
        )


# ---------------------------------------------------------------------------
# CSV tables
# ---------------------------------------------------------------------------

def _read_csv_rows(path):
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            return list(csv.reader(fh))
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


def _split_header(header, path):
    """Validate the table header and return (has_pred, has_conf, kernel_ids)."""
    if not header or header[0] != "image_id":
        raise FormatError(f"{path}: first column must be 'image_id'")
    if len(header) < 2 or header[1] != "true_class":
        raise FormatError(f"{path}: second column must be 'true_class'")
    pos = 2
    has_pred = pos < len(header) and header[pos] == "cnn_pred"
    if has_pred:
        pos += 1
    has_conf = pos < len(header) and header[pos] == "cnn_conf"
    if has_conf:
        pos += 1
    kernel_ids = []
    for col in header[pos:]:
        if not col.startswith("k_"):
            raise FormatError(f"{path}: unexpected column {col!r}")
        try:
            kernel_ids.append(int(col[2:]))
        except ValueError:
            raise FormatError(f"{path}: malformed kernel column {col!r}") from None
        if kernel_ids[-1] < 0:
            raise FormatError(f"{path}: negative kernel id in column {col!r}")
    if len(set(kernel_ids)) != len(kernel_ids):
        raise FormatError(f"{path}: duplicate kernel columns")
    if not kernel_ids:
        raise FormatError(f"{path}: no kernel columns (k_<id>) found")
    return has_pred, has_conf, kernel_ids


def _load_table(path, cell_parser, table_cls):
    rows = _read_csv_rows(path)
    if not rows:
        raise FormatError(f"{path}: missing header row")
    has_pred, has_conf, kernel_ids = _split_header(rows[0], path)
    body = [r for r in rows[1:] if r]
    if not body:
        raise EmptyInputError(f"{path}: no data rows")
    meta_width = 2 + has_pred + has_conf
    image_ids, true_class, preds, confs = [], [], [], []
    matrix = np.empty((len(body), len(kernel_ids)), dtype=np.float64)
    for r, row in enumerate(body):
        if len(row) != meta_width + len(kernel_ids):
            raise FormatError(
                f"{path}: row {r + 2} has {len(row)} fields, "
                f"expected {meta_width + len(kernel_ids)}"
            )
        image_ids.append(row[0])
        true_class.append(row[1])
        pos = 2
        if has_pred:
            preds.append(row[pos])
            pos += 1
        if has_conf:
            try:
                conf = float(row[pos])
            except ValueError:
                raise FormatError(
                    f"{path}: row {r + 2}, column cnn_conf: "
                    f"not a number: {row[pos]!r}"
                ) from None
            confs.append(conf)
            pos += 1
        for c, cell in enumerate(row[pos:]):
            matrix[r, c] = cell_parser(cell, r + 2, f"k_{kernel_ids[c]}", path)
    if len(set(image_ids)) != len(image_ids):
        raise FormatError(f"{path}: duplicate image_id values")
    try:
        return table_cls(
            image_ids=tuple(image_ids),
            kernel_ids=tuple(kernel_ids),
            values=matrix,
            true_class=tuple(true_class),
            cnn_pred=tuple(preds) if has_pred else None,
            cnn_conf=tuple(confs) if has_conf else None,
        )
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def _parse_norm_cell(cell, row, col, path):
    try:
        value = float(cell)
    except ValueError:
        raise FormatError(
            f"{path}: row {row}, column {col}: not a number: {cell!r}"
        ) from None
    if not math.isfinite(value):
        raise FormatError(f"{path}: row {row}, column {col}: non-finite norm {cell!r}")
    if value < 0:
        raise FormatError(f"{path}: row {row}, column {col}: negative norm {cell!r}")
    return value


def _parse_bit_cell(cell, row, col, path):
    if cell == "0":
        return 0.0
    if cell == "1":
        return 1.0
    raise FormatError(f"{path}: row {row}, column {col}: bit must be 0 or 1, got {cell!r}")


def load_norms(path) -> NormsTable:
    """Load a per-image kernel-norm table from CSV."""
    return _load_table(path, _parse_norm_cell, NormsTable)


def load_bits(path) -> BinarizationTable:
    """Load a binarization table from CSV."""
    return _load_table(path, _parse_bit_cell, BinarizationTable)


def _format_float(x):
    # repr round-trips doubles exactly; integers stay compact.
    return repr(float(x))


def write_table(table, path) -> None:
    """Write a norms or binarization table as CSV (inverse of the loaders)."""
    path = Path(path)
    header = ["image_id", "true_class"]
    if table.cnn_pred is not None:
        header.append("cnn_pred")
    if table.cnn_conf is not None:
        header.append("cnn_conf")
    header.extend(f"k_{k}" for k in table.kernel_ids)
    is_bits = isinstance(table, BinarizationTable)
    try:
        with open(path, "w", newline="\n", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for i in range(table.n_images):
                row = [table.image_ids[i], table.true_class[i]]
                if table.cnn_pred is not None:
                    row.append(table.cnn_pred[i])
                if table.cnn_conf is not None:
                    row.append(_format_float(table.cnn_conf[i]))
                if is_bits:
                    row.extend(str(int(v)) for v in table.values[i])
                else:
                    row.extend(_format_float(v) for v in table.values[i])
                writer.writerow(row)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Feature-map binaries
# ---------------------------------------------------------------------------

def save_feature_map(featmap: FeatureMap, path) -> None:
    """Write a feature map in the NSYF binary format.

    Layout: magic ``NSYF``, then u32 version, kernel_id, height, width,
    then ``height * width`` little-endian float32 values in row-major order.
    The image id is carried by the filename stem, not the payload.
    """
    path = Path(path)
    h, w = featmap.values.shape
    header = struct.pack(
        "<4sIIII", FEATMAP_MAGIC, FEATMAP_VERSION, featmap.kernel_id, h, w
    )
    payload = featmap.values.astype("<f4", copy=False).tobytes(order="C")
    try:
        path.write_bytes(header + payload)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_feature_map(path) -> FeatureMap:
    """Load a feature map written by :func:`save_feature_map`."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    head_size = struct.calcsize("<4sIIII")
    if len(blob) < head_size:
        raise FormatError(f"{path}: truncated header")
    magic, version, kernel_id, h, w = struct.unpack("<4sIIII", blob[:head_size])
    if magic != FEATMAP_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FEATMAP_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if h == 0 or w == 0:
        raise FormatError(f"{path}: zero dimension {h}x{w}")
    expected = head_size + 4 * h * w
    if len(blob) != expected:
        raise FormatError(
            f"{path}: payload is {len(blob) - head_size} bytes, "
            f"expected {4 * h * w}"
        )
    values = np.frombuffer(blob, dtype="<f4", offset=head_size).reshape(h, w)
    if not np.all(np.isfinite(values)):
        raise FormatError(f"{path}: non-finite values in payload")
    return FeatureMap(kernel_id=kernel_id, image_id=path.stem, values=values.copy())


# ---------------------------------------------------------------------------
# Segmentation masks
# ---------------------------------------------------------------------------

def _names_path_for(grid_path):
    grid_path = Path(grid_path)
    return grid_path.with_name(grid_path.stem + ".names.csv")


def load_mask(grid_path, names_path=None) -> SegmentationMask:
    """Load a segmentation mask from a grid CSV plus its name sidecar.

    When *names_path* is omitted it defaults to ``<stem>.names.csv`` next
    to the grid file.
    """
    grid_path = Path(grid_path)
    names_path = _names_path_for(grid_path) if names_path is None else Path(names_path)

    rows = _read_csv_rows(grid_path)
    rows = [r for r in rows if r]
    if not rows:
        raise EmptyInputError(f"{grid_path}: empty mask grid")
    width = len(rows[0])
    grid = np.empty((len(rows), width), dtype=np.int64)
    for r, row in enumerate(rows):
        if len(row) != width:
            raise FormatError(
                f"{grid_path}: row {r + 1} has {len(row)} cells, expected {width}"
            )
        for c, cell in enumerate(row):
            try:
                grid[r, c] = int(cell)
            except ValueError:
                raise FormatError(
                    f"{grid_path}: row {r + 1}, column {c + 1}: "
                    f"not an integer: {cell!r}"
                ) from None
            if grid[r, c] < 0:
                raise FormatError(
                    f"{grid_path}: row {r + 1}, column {c + 1}: negative concept id"
                )

    name_rows = _read_csv_rows(names_path)
    if not name_rows or name_rows[0] != ["concept_id", "name"]:
        raise FormatError(f"{names_path}: header must be 'concept_id,name'")
    names = {}
    for r, row in enumerate(name_rows[1:], start=2):
        if not row:
            continue
        if len(row) != 2:
            raise FormatError(f"{names_path}: row {r} must have 2 fields")
        try:
            cid = int(row[0])
        except ValueError:
            raise FormatError(f"{names_path}: row {r}: bad concept_id {row[0]!r}") from None
        if cid in names:
            raise FormatError(f"{names_path}: duplicate concept_id {cid}")
        names[cid] = row[1]

    present = set(np.unique(grid).tolist())
    missing = sorted(present - set(names))
    if missing:
        raise FormatError(
            f"{grid_path}: concept ids {missing} missing from {names_path.name}"
        )
    try:
        return SegmentationMask(
            image_id=grid_path.stem, concept_ids=grid, concept_names=names
        )
    except ValueError as exc:
        raise FormatError(f"{grid_path}: {exc}") from exc


def save_mask(mask: SegmentationMask, grid_path, names_path=None) -> None:
    """Write a mask as a grid CSV plus name sidecar (inverse of load_mask)."""
    grid_path = Path(grid_path)
    names_path = _names_path_for(grid_path) if names_path is None else Path(names_path)
    try:
        with open(grid_path, "w", newline="\n", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            for row in mask.concept_ids:
                writer.writerow([str(int(v)) for v in row])
        with open(names_path, "w", newline="\n", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["concept_id", "name"])
            for cid in sorted(mask.concept_names):
                writer.writerow([str(cid), mask.concept_names[cid]])
    except OSError as exc:
        raise IoError(f"cannot write mask: {exc}") from exc


# ---------------------------------------------------------------------------
# Run manifest
# ---------------------------------------------------------------------------

_HYPERPARAM_RANGES = {
    "alpha": lambda v: math.isfinite(v),
    "gamma": lambda v: math.isfinite(v),
    "ratio": lambda v: v >= 0,
    "tail": lambda v: 0 < v <= 1,
    "margin": lambda v: v >= 0,
    "m": lambda v: v >= 1 and float(v).is_integer(),
    "tau": lambda v: 0 < v <= 1,
    "softmax_fraction": lambda v: 0 < v <= 1,
}


def validate_hyperparameters(params: dict) -> None:
    """Check every known hyperparameter against its documented range."""
    for key, check in _HYPERPARAM_RANGES.items():
        if key in params and params[key] is not None:
            value = params[key]
            try:
                ok = check(float(value))
            except (TypeError, ValueError):
                ok = False
            if not ok:
                raise ConfigError(f"hyperparameter {key}={value!r} out of range")


@dataclass(frozen=True)
class KernelImageEntry:
    """Paths backing one (kernel, image) pair used for labelling."""

    featmap: str
    mask_grid: str
    mask_names: str


@dataclass(frozen=True)
class Manifest:
    """Paths and roles of every artifact of one run, plus its hyperparameters.

    Relative paths are resolved against the manifest's own directory.
    """

    hyperparameters: dict
    norms: dict = field(default_factory=dict)       # split -> path
    bits: dict = field(default_factory=dict)        # split -> path
    ruleset: str | None = None
    labels: str | None = None
    kernels: dict = field(default_factory=dict)     # kernel_id -> [KernelImageEntry]
    base_dir: Path = field(default_factory=Path, compare=False)

    def resolve(self, rel) -> Path:
        return (Path(self.base_dir) / rel).resolve()

    def to_json(self) -> str:
        doc = {
            "hyperparameters": self.hyperparameters,
            "norms": self.norms,
            "bits": self.bits,
            "ruleset": self.ruleset,
            "labels": self.labels,
            "kernels": {
                str(k): [
                    {"featmap": e.featmap, "mask_grid": e.mask_grid,
                     "mask_names": e.mask_names}
                    for e in entries
                ]
                for k, entries in self.kernels.items()
            },
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def save_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    try:
        path.write_text(manifest.to_json(), encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_manifest(path) -> Manifest:
    """Load a manifest and verify that every referenced path exists."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: manifest must be a JSON object")
    params = doc.get("hyperparameters", {})
    if not isinstance(params, dict):
        raise FormatError(f"{path}: hyperparameters must be an object")
    validate_hyperparameters(params)
    kernels = {}
    for key, entries in doc.get("kernels", {}).items():
        try:
            kid = int(key)
        except ValueError:
            raise FormatError(f"{path}: kernel key {key!r} is not an integer") from None
        kernels[kid] = [
            KernelImageEntry(
                featmap=e["featmap"], mask_grid=e["mask_grid"],
                mask_names=e["mask_names"],
            )
            for e in entries
        ]
    manifest = Manifest(
        hyperparameters=params,
        norms=doc.get("norms", {}),
        bits=doc.get("bits", {}),
        ruleset=doc.get("ruleset"),
        labels=doc.get("labels"),
        kernels=kernels,
        base_dir=path.parent,
    )
    referenced = list(manifest.norms.values()) + list(manifest.bits.values())
    if manifest.ruleset:
        referenced.append(manifest.ruleset)
    if manifest.labels:
        referenced.append(manifest.labels)
    for entries in manifest.kernels.values():
        for e in entries:
            referenced.extend([e.featmap, e.mask_grid, e.mask_names])
    for rel in referenced:
        if not manifest.resolve(rel).exists():
            raise FormatError(f"{path}: referenced path {rel!r} does not exist")
    return manifest
