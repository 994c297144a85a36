"""Sparsity fine-tuning with class-elite kernels.

Each class keeps its K most active kernels (by mean activation of the
named layer over that class's training images, measured once before
fine-tuning); every other kernel's activation is added to the task loss
with weight ``lam`` on batches of that class. With ``lam == 0`` the loop
is plain fine-tuning. The intended effect is that few kernels stay
responsive per class, which shrinks the rule sets extracted downstream.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ConfigError
from .export import ActivationTap, find_layer


@dataclass(frozen=True)
class EbpParams:
    k: int
    lam: float
    epochs: int
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.lam < 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")


def mean_class_activations(model, layer_name, images, class_indices,
                           n_classes, batch_size=64):
    """Per-class mean spatial activation of every kernel: tensor (C, K)."""
    tap = ActivationTap(find_layer(model, layer_name))
    sums, counts = None, torch.zeros(n_classes, dtype=torch.float64)
    try:
        with torch.no_grad():
            for start in range(0, len(images), batch_size):
                batch = images[start:start + batch_size]
                model(batch)
                acts = tap.value.double().mean(dim=(2, 3))  # (B, K)
                if sums is None:
                    sums = torch.zeros(n_classes, acts.shape[1],
                                       dtype=torch.float64)
                for j in range(len(batch)):
                    c = int(class_indices[start + j])
                    sums[c] += acts[j]
                    counts[c] += 1
    finally:
        tap.remove()
    counts = counts.clamp(min=1)
    return sums / counts[:, None]


def elite_kernels(model, layer_name, images, class_indices, n_classes,
                  k) -> torch.Tensor:
    """Boolean (C, K) mask of the K most active kernels per class."""
    means = mean_class_activations(model, layer_name, images, class_indices,
                                   n_classes)
    n_kernels = means.shape[1]
    if k > n_kernels:
        raise ConfigError(f"k={k} exceeds the layer's {n_kernels} kernels")
    mask = torch.zeros_like(means, dtype=torch.bool)
    top = means.topk(k, dim=1).indices
    mask.scatter_(1, top, True)
    return mask


def selective_kernel_count(model, layer_name, images, class_indices,
                           n_classes) -> int:
    """Kernels whose mean activation for some class strictly exceeds their
    global mean; the sparsity objective should not increase this."""
    means = mean_class_activations(model, layer_name, images, class_indices,
                                   n_classes)
    weights = torch.bincount(
        torch.as_tensor(class_indices, dtype=torch.long),
        minlength=n_classes,
    ).double()
    global_mean = (means * weights[:, None]).sum(dim=0) / weights.sum()
    return int((means > global_mean[None, :]).any(dim=0).sum())


def ebp_finetune(model, layer_name, images, class_indices, n_classes,
                 params: EbpParams):
    """Fine-tune in place with the elite-exempt activation penalty.

    Returns the model. Batched in a fixed shuffled order derived from
    ``params.seed``, so runs are reproducible and ``lam=0`` matches a
    plain fine-tuning loop step for step.
    """
    class_indices = torch.as_tensor(class_indices, dtype=torch.long)
    elites = elite_kernels(model, layer_name, images, class_indices,
                           n_classes, params.k)
    penalized = ~elites  # (C, K)
    tap = ActivationTap(find_layer(model, layer_name), detach=False)
    optimizer = torch.optim.SGD(model.parameters(), lr=params.lr)
    loss_fn = torch.nn.CrossEntropyLoss()
    generator = torch.Generator().manual_seed(params.seed)
    model.train()
    try:
        for _ in range(params.epochs):
            order = torch.randperm(len(images), generator=generator)
            for start in range(0, len(order), params.batch_size):
                idx = order[start:start + params.batch_size]
                batch, target = images[idx], class_indices[idx]
                optimizer.zero_grad()
                logits = model(batch)
                loss = loss_fn(logits, target)
                if params.lam > 0:
                    acts = tap.value.mean(dim=(2, 3))  # (B, K)
                    mask = penalized[target].to(acts.dtype)  # (B, K)
                    penalty = (acts * mask).sum(dim=1) / mask.sum(dim=1).clamp(min=1)
                    loss = loss + params.lam * penalty.mean()
                loss.backward()
                optimizer.step()
    finally:
        tap.remove()
    model.eval()
    return model
