"""Binarization of kernel activations.

A kernel's 2D feature map is collapsed to its L2 norm; a per-kernel
threshold is a weighted sum of the mean and the population standard
deviation of those norms over the training images,

    theta_k = alpha * mean_i(a_ik) + gamma * sqrt(mean_i((a_ik - mean)^2)),

and a kernel counts as active for an image exactly when its norm strictly
exceeds the threshold. Thresholds are computed once on the training split
and reused unchanged for every later split.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    AlignmentError,
    EmptyInputError,
    FormatError,
    IoError,
    MissingColumnError,
)
from .interchange import BinarizationTable, FeatureMap, NormsTable

DEFAULT_ALPHA = 0.6
DEFAULT_GAMMA = 0.7


@dataclass(frozen=True)
class ThresholdVector:
    """Per-kernel binarization thresholds plus the weights that built them."""

    kernel_ids: tuple[int, ...]
    theta: tuple[float, ...]
    alpha: float
    gamma: float

    def __post_init__(self):
        if len(self.kernel_ids) != len(self.theta):
            raise ValueError("kernel_ids and theta length mismatch")
        if not all(math.isfinite(t) for t in self.theta):
            raise ValueError("thresholds must be finite")


def compute_norm(featmap: FeatureMap) -> float:
    """L2 norm of the flattened feature map."""
    flat = featmap.values.astype(np.float64).ravel()
    return float(np.sqrt(np.dot(flat, flat)))


def compute_thresholds(norms: NormsTable, alpha: float, gamma: float) -> ThresholdVector:
    """Per-kernel threshold: alpha * mean + gamma * population std of the norms.

    The standard deviation divides by n (no Bessel correction). A single
    image therefore gives theta = alpha * norm exactly.
    """
    if norms.n_images == 0:
        raise EmptyInputError("cannot compute thresholds from an empty table")
    if not (math.isfinite(alpha) and math.isfinite(gamma)):
        raise ValueError("alpha and gamma must be finite")
    mean = norms.values.mean(axis=0)
    std = np.sqrt(np.mean((norms.values - mean) ** 2, axis=0))
    theta = alpha * mean + gamma * std
    return ThresholdVector(
        kernel_ids=norms.kernel_ids,
        theta=tuple(float(t) for t in theta),
        alpha=float(alpha),
        gamma=float(gamma),
    )


def binarize(norms: NormsTable, thresholds: ThresholdVector) -> BinarizationTable:
    """Apply the quantization step: bit = 1 iff norm > theta (strict).

    A norm exactly equal to its threshold maps to 0.
    """
    if norms.kernel_ids != thresholds.kernel_ids:
        raise AlignmentError(
            "kernel ids of norms table and thresholds differ or are reordered"
        )
    theta = np.asarray(thresholds.theta, dtype=np.float64)
    bits = (norms.values > theta[np.newaxis, :]).astype(np.uint8)
    return BinarizationTable(
        image_ids=norms.image_ids,
        kernel_ids=norms.kernel_ids,
        values=bits,
        true_class=norms.true_class,
        cnn_pred=norms.cnn_pred,
        cnn_conf=norms.cnn_conf,
    )


def filter_top_softmax(table, fraction: float):
    """Keep, per true class, the ceil(fraction * group_size) most confident rows.

    Row order is otherwise preserved; confidence ties are broken in favour
    of earlier rows. Works on both norms and binarization tables.
    """
    if table.cnn_conf is None:
        raise MissingColumnError("filter_top_softmax requires the cnn_conf column")
    if not (0 < fraction <= 1):
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    by_class: dict[str, list[int]] = {}
    for i, cls in enumerate(table.true_class):
        by_class.setdefault(cls, []).append(i)
    keep: list[int] = []
    for cls, indices in by_class.items():
        count = math.ceil(fraction * len(indices))
        ranked = sorted(indices, key=lambda i: (-table.cnn_conf[i], i))
        keep.extend(ranked[:count])
    keep.sort()
    return table.take_rows(keep)


def write_thresholds(thresholds: ThresholdVector, path) -> None:
    """Write thresholds as a two-column CSV: kernel_id,theta."""
    path = Path(path)
    try:
        with open(path, "w", newline="\n", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["kernel_id", "theta"])
            for kid, t in zip(thresholds.kernel_ids, thresholds.theta):
                writer.writerow([str(kid), repr(t)])
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_thresholds(path, alpha=math.nan, gamma=math.nan) -> ThresholdVector:
    """Load a thresholds CSV. The file does not carry alpha/gamma; callers
    that know them may pass them through."""
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if not rows or rows[0] != ["kernel_id", "theta"]:
        raise FormatError(f"{path}: header must be 'kernel_id,theta'")
    kernel_ids, theta = [], []
    for r, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 2:
            raise FormatError(f"{path}: row {r} must have 2 fields")
        try:
            kernel_ids.append(int(row[0]))
            theta.append(float(row[1]))
        except ValueError:
            raise FormatError(f"{path}: row {r}: malformed values {row!r}") from None
    if not kernel_ids:
        raise EmptyInputError(f"{path}: no thresholds")
    return ThresholdVector(
        kernel_ids=tuple(kernel_ids), theta=tuple(theta),
        alpha=alpha, gamma=gamma,
    )
