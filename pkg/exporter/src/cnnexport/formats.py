"""Writers for the interchange file formats consumed by the rule pipeline.

This package deliberately re-implements the formats instead of importing
the pipeline package: the file layout is the contract between the two
components. All writes are atomic (temp file in the target directory,
then rename).
"""

from __future__ import annotations

import csv
import io
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

FEATMAP_MAGIC = b"NSYF"
FEATMAP_VERSION = 1


def _atomic_write_bytes(path: Path, blob: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_write_text(path: Path, text: str) -> None:
    _atomic_write_bytes(path, text.encode("utf-8"))


def write_norms_csv(path, image_ids, true_class, cnn_pred, cnn_conf,
                    kernel_ids, norms) -> None:
    """Norms table CSV: image_id,true_class,cnn_pred,cnn_conf,k_<id>,..."""
    norms = np.asarray(norms, dtype=np.float64)
    rows = [["image_id", "true_class", "cnn_pred", "cnn_conf"]
            + [f"k_{k}" for k in kernel_ids]]
    for i, image_id in enumerate(image_ids):
        rows.append(
            [image_id, true_class[i], cnn_pred[i], repr(float(cnn_conf[i]))]
            + [repr(float(v)) for v in norms[i]]
        )
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerows(rows)
    _atomic_write_text(Path(path), buffer.getvalue())


def write_feature_map(path, kernel_id: int, values) -> None:
    """NSYF binary: magic, u32 version/kernel/height/width, f32 LE payload."""
    values = np.asarray(values, dtype="<f4")
    h, w = values.shape
    header = struct.pack("<4sIIII", FEATMAP_MAGIC, FEATMAP_VERSION,
                         int(kernel_id), h, w)
    _atomic_write_bytes(Path(path), header + values.tobytes(order="C"))


def write_mask_csv(grid_path, concept_ids, concept_names,
                   names_path=None) -> None:
    """Mask grid CSV plus `concept_id,name` sidecar."""
    grid_path = Path(grid_path)
    if names_path is None:
        names_path = grid_path.with_name(grid_path.stem + ".names.csv")
    grid = np.asarray(concept_ids, dtype=np.int64)
    lines = "\n".join(",".join(str(int(v)) for v in row) for row in grid)
    _atomic_write_text(grid_path, lines + "\n")
    rows = ["concept_id,name"] + [
        f"{cid},{concept_names[cid]}" for cid in sorted(concept_names)
    ]
    _atomic_write_text(Path(names_path), "\n".join(rows) + "\n")
