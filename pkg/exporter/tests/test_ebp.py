"""Elite-kernel fine-tuning: zero-penalty identity, saturation, suppression."""

import copy

import pytest
import torch

import toydata
from cnnexport.ebp import (
    EbpParams,
    ebp_finetune,
    elite_kernels,
    mean_class_activations,
    selective_kernel_count,
)
from cnnexport.errors import ConfigError


@pytest.fixture(scope="module")
def tensors(image_tree):
    images, class_indices, classes = toydata.load_split_tensors(
        image_tree, "train"
    )
    held_images, held_indices, _ = toydata.load_split_tensors(
        image_tree, "test"
    )
    return images, class_indices, classes, held_images, held_indices


def plain_finetune(model, images, targets, epochs, lr, batch_size, seed):
    """Reference loop mirroring ebp_finetune's batching, without a penalty."""
    targets = torch.as_tensor(targets)
    optimizer = torch.optim.SGD(model.parameters(), lr=lr)
    loss_fn = torch.nn.CrossEntropyLoss()
    generator = torch.Generator().manual_seed(seed)
    model.train()
    for _ in range(epochs):
        order = torch.randperm(len(images), generator=generator)
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            optimizer.zero_grad()
            loss = loss_fn(model(images[idx]), targets[idx])
            loss.backward()
            optimizer.step()
    model.eval()
    return model


def params_equal(a, b):
    return all(
        torch.equal(pa, pb)
        for pa, pb in zip(a.state_dict().values(), b.state_dict().values())
    )


def test_lambda_zero_equals_plain_finetuning(trained_model, tensors):
    images, class_indices, classes, _, _ = tensors
    ebp_model = copy.deepcopy(trained_model)
    plain_model = copy.deepcopy(trained_model)
    params = EbpParams(k=3, lam=0.0, epochs=2, lr=1e-3, seed=5)
    ebp_finetune(ebp_model, toydata.LAYER, images, class_indices,
                 len(classes), params)
    plain_finetune(plain_model, images, class_indices, epochs=2, lr=1e-3,
                   batch_size=32, seed=5)
    assert params_equal(ebp_model, plain_model)


def test_k_saturation_equals_lambda_zero(trained_model, tensors):
    images, class_indices, classes, _, _ = tensors
    saturated = copy.deepcopy(trained_model)
    zeroed = copy.deepcopy(trained_model)
    ebp_finetune(saturated, toydata.LAYER, images, class_indices,
                 len(classes), EbpParams(k=16, lam=0.01, epochs=1, seed=3))
    ebp_finetune(zeroed, toydata.LAYER, images, class_indices,
                 len(classes), EbpParams(k=16, lam=0.0, epochs=1, seed=3))
    assert params_equal(saturated, zeroed)


def test_k_above_kernel_count_rejected(trained_model, tensors):
    images, class_indices, classes, _, _ = tensors
    with pytest.raises(ConfigError):
        ebp_finetune(copy.deepcopy(trained_model), toydata.LAYER, images,
                     class_indices, len(classes),
                     EbpParams(k=17, lam=0.01, epochs=1))


def test_elite_mask_shape_and_count(trained_model, tensors):
    images, class_indices, classes, _, _ = tensors
    mask = elite_kernels(trained_model, toydata.LAYER, images, class_indices,
                         len(classes), k=5)
    assert mask.shape == (len(classes), 16)
    assert (mask.sum(dim=1) == 5).all()


def test_nonelite_activations_decrease(trained_model, tensors):
    images, class_indices, classes, held_images, held_indices = tensors
    n_classes = len(classes)
    model = copy.deepcopy(trained_model)
    elites = elite_kernels(model, toydata.LAYER, images, class_indices,
                           n_classes, k=5)

    def nonelite_mass(m):
        means = mean_class_activations(m, toydata.LAYER, held_images,
                                       held_indices, n_classes)
        return float(means[~elites].mean())

    before = nonelite_mass(model)
    count_before = selective_kernel_count(model, toydata.LAYER, held_images,
                                          held_indices, n_classes)
    ebp_finetune(model, toydata.LAYER, images, class_indices, n_classes,
                 EbpParams(k=5, lam=0.005, epochs=20, lr=5e-3, seed=11))
    after = nonelite_mass(model)
    count_after = selective_kernel_count(model, toydata.LAYER, held_images,
                                         held_indices, n_classes)
    assert after < before
    assert count_after <= count_before
