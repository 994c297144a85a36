"""Activation export: norms tables, softmax metadata, and feature maps.

The export walks an image-folder dataset (``<split>/<class>/<image>``),
runs the model once per batch, captures the named layer's output with a
forward hook, and writes one norms CSV per split plus the top-m feature
maps per kernel as NSYF binaries (``featmaps/k_<id>/<image_id>.nsyf``).
Kernel columns follow the layer's channel order on every split.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ConfigError
from .formats import write_feature_map, write_norms_csv

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp"}


@dataclass(frozen=True)
class ExportSpec:
    """One export job: which model, which data, which layer, where to."""

    model_path: str
    data_dir: str
    layer: str
    out_dir: str
    splits: tuple[str, ...] = ("train",)
    top_m: int = 10
    image_size: int | None = None
    batch_size: int = 32

    def __post_init__(self):
        if self.top_m < 1:
            raise ConfigError(f"top_m must be >= 1, got {self.top_m}")
        if not self.splits:
            raise ConfigError("at least one split is required")


def load_model(path) -> torch.nn.Module:
    model = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(model, torch.nn.Module):
        raise ConfigError(f"{path} does not contain a torch module")
    model.eval()
    return model


def find_layer(model: torch.nn.Module, name: str) -> torch.nn.Module:
    layers = dict(model.named_modules())
    if name not in layers:
        known = ", ".join(sorted(k for k in layers if k))
        raise ConfigError(f"layer {name!r} not found; model has: {known}")
    return layers[name]


def iter_image_folder(split_dir: Path):
    """Yield (image_id, class_name, path) over a class-per-directory tree."""
    classes = sorted(p.name for p in split_dir.iterdir() if p.is_dir())
    if not classes:
        raise ConfigError(f"{split_dir} has no class directories")
    for cls in classes:
        for path in sorted((split_dir / cls).iterdir()):
            if path.suffix.lower() in IMAGE_EXTENSIONS:
                yield path.stem, cls, path


def load_image(path, image_size=None) -> torch.Tensor:
    with Image.open(path) as img:
        img = img.convert("RGB")
        if image_size is not None:
            img = img.resize((image_size, image_size), Image.BILINEAR)
        array = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy(array).permute(2, 0, 1)


class ActivationTap:
    """Forward hook capturing one layer's output for the current batch.

    With ``detach=False`` the captured tensor stays on the autograd graph
    so losses built from it can backpropagate (the sparsity penalty needs
    this); export paths keep the default and detach.
    """

    def __init__(self, layer: torch.nn.Module, detach: bool = True):
        self.value: torch.Tensor | None = None
        self._detach = detach
        self._handle = layer.register_forward_hook(self._hook)

    def _hook(self, module, inputs, output):
        self.value = output.detach() if self._detach else output

    def remove(self):
        self._handle.remove()


def _class_names(model, data_root, splits):
    """Class-index mapping: sorted union of class directories over splits."""
    names = set()
    for split in splits:
        split_dir = Path(data_root) / split
        if split_dir.is_dir():
            names.update(p.name for p in split_dir.iterdir() if p.is_dir())
    return sorted(names)


def export_split(model, layer_name, data_root, split, out_dir, top_m,
                 image_size=None, batch_size=32, dump_featmaps=True):
    """Export one split; returns the norms CSV path."""
    split_dir = Path(data_root) / split
    if not split_dir.is_dir():
        raise ConfigError(f"split directory {split_dir} does not exist")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    entries = []
    tensors = []
    for image_id, cls, path in iter_image_folder(split_dir):
        try:
            tensors.append(load_image(path, image_size))
        except Exception as exc:
            print(f"warning: skipping {path}: {exc}", file=sys.stderr)
            continue
        entries.append((image_id, cls))
    if not entries:
        raise ConfigError(f"{split_dir}: no readable images")

    tap = ActivationTap(find_layer(model, layer_name))
    class_names = _class_names(model, data_root, [split])
    image_ids, true_class, preds, confs = [], [], [], []
    all_norms = []
    featmaps = []  # (image_id, activation tensor) kept for top-m dumping
    try:
        with torch.no_grad():
            for start in range(0, len(entries), batch_size):
                batch = torch.stack(tensors[start:start + batch_size])
                logits = model(batch)
                acts = tap.value
                if acts is None or acts.dim() != 4:
                    raise ConfigError(
                        f"layer {layer_name!r} did not produce 4D activations"
                    )
                probs = torch.softmax(logits, dim=1)
                conf, pred_idx = probs.max(dim=1)
                norms = torch.sqrt((acts.double() ** 2).sum(dim=(2, 3)))
                for j in range(len(batch)):
                    image_id, cls = entries[start + j]
                    image_ids.append(image_id)
                    true_class.append(cls)
                    idx = int(pred_idx[j])
                    preds.append(class_names[idx] if idx < len(class_names)
                                 else str(idx))
                    confs.append(float(conf[j]))
                    all_norms.append(norms[j].numpy())
                    if dump_featmaps:
                        featmaps.append((image_id, acts[j].float()))
    finally:
        tap.remove()

    all_norms = np.stack(all_norms)
    n_kernels = all_norms.shape[1]
    norms_path = out_dir / f"norms_{split}.csv"
    write_norms_csv(norms_path, image_ids, true_class, preds, confs,
                    list(range(n_kernels)), all_norms)

    if dump_featmaps:
        featmap_root = out_dir / "featmaps"
        for k in range(n_kernels):
            kdir = featmap_root / f"k_{k}"
            kdir.mkdir(parents=True, exist_ok=True)
            ranked = sorted(
                range(len(image_ids)),
                key=lambda i: (-all_norms[i, k], i),
            )
            for i in ranked[:top_m]:
                image_id, acts = featmaps[i]
                write_feature_map(kdir / f"{image_id}.nsyf", k,
                                  acts[k].numpy())
    return norms_path


def export_activations(spec: ExportSpec) -> dict:
    """Run the full export job; feature maps are dumped for the first split
    (the training split drives labelling)."""
    model = load_model(spec.model_path)
    written = {}
    for i, split in enumerate(spec.splits):
        written[split] = export_split(
            model, spec.layer, spec.data_dir, split, spec.out_dir,
            top_m=spec.top_m, image_size=spec.image_size,
            batch_size=spec.batch_size, dump_featmaps=i == 0,
        )
    return written
