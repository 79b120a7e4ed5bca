"""Input-output Jacobian probe: closed forms and finite differences."""

import numpy as np
import pytest
import torch

from selekt import ImageBatch, build_model, input_output_jacobian, jacobian_magnitude

from conftest import MICRO_ARCH, random_batch


def linear_model(weight, in_channels=1, image_size=2):
    num_classes = weight.shape[0]
    model = build_model({"family": "linear", "num_classes": num_classes,
                         "in_channels": in_channels, "image_size": image_size}, seed=0)
    with torch.no_grad():
        model.module.head.weight.copy_(torch.tensor(weight, dtype=torch.float32))
        model.module.head.bias.zero_()
    return model


def test_linear_model_jacobian_equals_weight_matrix():
    rng = np.random.default_rng(23)
    weight = rng.normal(size=(4, 4)).astype(np.float32)
    model = linear_model(weight)
    sample = rng.uniform(0, 1, size=(1, 1, 2, 2)).astype(np.float32)
    jac = input_output_jacobian(model, sample)
    assert np.array_equal(jac, weight)


def test_identity_map_norm_is_sqrt_d():
    model = linear_model(np.eye(4, dtype=np.float32))
    batch = ImageBatch(np.random.default_rng(1).uniform(0, 1, (6, 1, 2, 2)).astype(np.float32),
                       np.zeros(6, dtype=np.int64), 4)
    report = jacobian_magnitude(model, batch)
    assert np.allclose(report.per_sample, np.sqrt(4.0), atol=0)
    assert report.mean == pytest.approx(2.0, abs=1e-12)


def test_constant_model_has_zero_jacobian():
    model = build_model(MICRO_ARCH, seed=0)
    with torch.no_grad():
        for p in model.module.parameters():
            p.zero_()
    report = jacobian_magnitude(model, random_batch(n=4))
    assert np.all(report.per_sample == 0.0)


def test_doubling_head_weights_doubles_jacobian(micro_model):
    sample = np.random.default_rng(2).uniform(0, 1, (1, 1, 8, 8)).astype(np.float32)
    before = input_output_jacobian(micro_model, sample)
    with torch.no_grad():
        micro_model.module.head.weight.mul_(2.0)
        micro_model.module.head.bias.mul_(2.0)
    after = input_output_jacobian(micro_model, sample)
    assert np.array_equal(after, 2.0 * before)


def fd_jacobian(model, sample, step=1e-4):
    flat = sample.reshape(-1).astype(np.float64)
    num_classes = model.arch.num_classes
    jac = np.zeros((num_classes, flat.size))
    for i in range(flat.size):
        outs = []
        for sign in (1.0, -1.0):
            probe = flat.copy()
            probe[i] += sign * step
            batch = ImageBatch(np.zeros(sample.shape, dtype=np.float32),
                               np.zeros(1, dtype=np.int64), num_classes)
            batch.pixels = probe.reshape(sample.shape)
            outs.append(model.logits(batch)[0])
        jac[:, i] = (outs[0] - outs[1]) / (2 * step)
    return jac


def preactivation_margin(model, sample):
    """Distance of every ReLU pre-activation from its kink."""
    x = model._to_tensor(sample[None] if sample.ndim == 3 else sample)
    margins = []
    t = x
    for conv in model.module.convs:
        t = conv(2.0 * t - 1.0) if conv is model.module.convs[0] else conv(t)
        margins.append(float(t.abs().min().item()))
        t = torch.relu(t)
    return min(margins)


def test_jacobian_matches_central_differences(micro_model):
    rng = np.random.default_rng(24)
    checked = 0
    trial = 0
    while checked < 20:
        trial += 1
        assert trial < 500, "could not find enough kink-free samples"
        sample = rng.uniform(0.05, 0.95, size=(1, 1, 8, 8))
        if preactivation_margin(micro_model, sample.astype(np.float64)) < 2e-3:
            continue  # a +-1e-4 pixel step must not flip any ReLU
        jac = input_output_jacobian(micro_model, sample)
        fd = fd_jacobian(micro_model, sample)
        np.testing.assert_allclose(jac, fd, rtol=1e-4, atol=1e-8)
        checked += 1


def test_batch_mean_equals_mean_of_per_sample_norms(micro_model):
    batch = random_batch(n=10, seed=7)
    report = jacobian_magnitude(micro_model, batch)
    assert report.mean == pytest.approx(report.per_sample.mean(), abs=1e-12)
    assert report.sample_count == 10
    assert report.ci_lower <= report.mean <= report.ci_upper


def test_max_samples_cap(micro_model):
    batch = random_batch(n=12, seed=8)
    report = jacobian_magnitude(micro_model, batch, max_samples=5)
    assert report.sample_count == 5


def test_deterministic(micro_model):
    batch = random_batch(n=5, seed=9)
    a = jacobian_magnitude(micro_model, batch)
    b = jacobian_magnitude(micro_model, batch)
    assert np.array_equal(a.per_sample, b.per_sample)


def test_spectral_norm_variant(micro_model):
    batch = random_batch(n=4, seed=10)
    fro = jacobian_magnitude(micro_model, batch, norm_kind="fro")
    spec = jacobian_magnitude(micro_model, batch, norm_kind="spectral")
    assert np.all(spec.per_sample <= fro.per_sample + 1e-12)
    with pytest.raises(ValueError, match="norm_kind"):
        jacobian_magnitude(micro_model, batch, norm_kind="nuclear")


def test_single_sample_shape_contract(micro_model):
    sample = np.random.default_rng(3).uniform(0, 1, (1, 8, 8)).astype(np.float32)
    jac = input_output_jacobian(micro_model, sample)
    assert jac.shape == (3, 64)
    with pytest.raises(ValueError, match="one image"):
        input_output_jacobian(micro_model, np.zeros((2, 1, 8, 8), dtype=np.float32))
