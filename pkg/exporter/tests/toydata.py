"""Toy CNN and synthetic two-class image set used across the exporter tests.

Class ``bands`` has horizontal brightness stripes, class ``pillars``
vertical ones, plus seeded noise; a two-conv network separates them in a
few epochs on the CPU. The module lives importably next to the tests so
pickled models load back in any test process.
"""

from __future__ import annotations

import math
import random
from pathlib import Path

import numpy as np
import torch
from PIL import Image

IMAGE_SIZE = 32
CLASSES = ("bands", "pillars")
LAYER = "relu2"  # last convolutional activation


class ToyCNN(torch.nn.Module):
    def __init__(self, n_classes=2):
        super().__init__()
        self.conv1 = torch.nn.Conv2d(3, 8, 3, padding=1)
        self.relu1 = torch.nn.ReLU()
        self.pool1 = torch.nn.MaxPool2d(2)
        self.conv2 = torch.nn.Conv2d(8, 16, 3, padding=1)
        self.relu2 = torch.nn.ReLU()
        self.pool2 = torch.nn.MaxPool2d(2)
        self.fc = torch.nn.Linear(16 * 8 * 8, n_classes)

    def forward(self, x):
        x = self.pool1(self.relu1(self.conv1(x)))
        x = self.pool2(self.relu2(self.conv2(x)))
        return self.fc(x.flatten(1))


def _stripe_image(rng: random.Random, vertical: bool) -> np.ndarray:
    phase = rng.uniform(0, 2 * math.pi)
    period = rng.choice([6, 8, 10])
    axis = np.arange(IMAGE_SIZE)
    wave = 0.5 + 0.45 * np.sin(2 * math.pi * axis / period + phase)
    plane = np.tile(wave[None, :] if vertical else wave[:, None],
                    (IMAGE_SIZE, 1) if vertical else (1, IMAGE_SIZE))
    noise = np.array(
        [[rng.gauss(0, 0.06) for _ in range(IMAGE_SIZE)]
         for _ in range(IMAGE_SIZE)]
    )
    gray = np.clip(plane + noise, 0, 1)
    return np.stack([gray, gray, gray], axis=2)


def write_image_tree(root, n_per_class_train=70, n_per_class_test=30,
                     seed=99) -> Path:
    """Write <root>/{train,test}/<class>/<id>.png; returns root."""
    rng = random.Random(seed)
    root = Path(root)
    for split, count in (("train", n_per_class_train),
                         ("test", n_per_class_test)):
        for cls in CLASSES:
            out = root / split / cls
            out.mkdir(parents=True, exist_ok=True)
            for i in range(count):
                array = _stripe_image(rng, vertical=cls == "pillars")
                img = Image.fromarray((array * 255).astype(np.uint8))
                img.save(out / f"{split}_{cls}{i:03d}.png")
    return root


def load_split_tensors(root, split):
    from cnnexport.export import iter_image_folder, load_image

    images, class_indices = [], []
    classes = sorted(
        p.name for p in (Path(root) / split).iterdir() if p.is_dir()
    )
    index_of = {cls: i for i, cls in enumerate(classes)}
    for _, cls, path in iter_image_folder(Path(root) / split):
        images.append(load_image(path))
        class_indices.append(index_of[cls])
    return torch.stack(images), class_indices, classes


def train_toy_model(root, epochs=25, lr=2e-3, seed=7) -> ToyCNN:
    torch.manual_seed(seed)
    model = ToyCNN(n_classes=len(CLASSES))
    images, class_indices, _ = load_split_tensors(root, "train")
    targets = torch.as_tensor(class_indices)
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    loss_fn = torch.nn.CrossEntropyLoss()
    generator = torch.Generator().manual_seed(seed)
    model.train()
    for _ in range(epochs):
        order = torch.randperm(len(images), generator=generator)
        for start in range(0, len(order), 32):
            idx = order[start:start + 32]
            optimizer.zero_grad()
            loss = loss_fn(model(images[idx]), targets[idx])
            loss.backward()
            optimizer.step()
    model.eval()
    return model
