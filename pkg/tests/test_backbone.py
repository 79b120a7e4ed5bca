"""Model adapter contracts: determinism, activation capture, gradients, checkpoints."""

import numpy as np
import pytest
import torch

from selekt import ArchConfig, ImageBatch, build_model, load_checkpoint
from selekt.exceptions import ConfigError
from selekt.selectivity import LossSpec, RegularizerConfig

from conftest import MICRO_ARCH, random_batch


def test_identical_seed_gives_bit_identical_parameters():
    a = build_model({"family": "small_cnn", "num_classes": 10}, seed=0)
    b = build_model({"family": "small_cnn", "num_classes": 10}, seed=0)
    assert np.array_equal(a.get_flat_params(), b.get_flat_params())


def test_different_seed_gives_different_parameters():
    a = build_model({"family": "small_cnn", "num_classes": 10}, seed=0)
    b = build_model({"family": "small_cnn", "num_classes": 10}, seed=1)
    assert not np.array_equal(a.get_flat_params(), b.get_flat_params())


def test_unknown_family_rejected():
    with pytest.raises(ConfigError, match="unknown architecture family"):
        build_model({"family": "vit_enormous", "num_classes": 10}, seed=0)


def test_degenerate_class_count_rejected():
    with pytest.raises(ConfigError, match="class count"):
        build_model({"family": "small_cnn", "num_classes": 1}, seed=0)


def test_forward_shapes_and_layer_set():
    model = build_model({"family": "small_cnn", "num_classes": 10}, seed=0)
    batch = random_batch(n=5, channels=3, size=32, classes=10)
    logits, acts = model.forward_with_activations(batch)
    assert logits.shape == (5, 10)
    assert acts.layer_ids == ["relu1", "relu2", "relu3", "relu4"]
    for mat in acts.layers.values():
        assert mat.shape[0] == 5
        assert mat.min() >= 0.0


def test_forward_deterministic_across_calls():
    model = build_model(MICRO_ARCH, seed=2)
    batch = random_batch(seed=5)
    first, _ = model.forward_with_activations(batch)
    second, _ = model.forward_with_activations(batch)
    assert np.array_equal(first, second)


def test_constant_feature_map_unit_value():
    # zero conv weights + bias 2.0 make every map constant 2.0; the unit value
    # is the spatial mean, so exactly 2.0
    arch = ArchConfig(family="micro_cnn", num_classes=3, in_channels=1,
                      image_size=4, conv_widths=(2,))
    model = build_model(arch, seed=0)
    with torch.no_grad():
        model.module.convs[0].weight.zero_()
        model.module.convs[0].bias.fill_(2.0)
    batch = random_batch(n=3, channels=1, size=4)
    _, acts = model.forward_with_activations(batch)
    assert np.array_equal(acts.layers["relu1"], np.full((3, 2), 2.0, dtype=np.float32))


def _hand_conv_spatial_means(pixels, weight, bias):
    """Loop-based oracle: ReLU(conv3x3(2x-1, pad 1)) spatial mean per map."""
    n, cin, h, w = pixels.shape
    cout = weight.shape[0]
    scaled = 2.0 * pixels.astype(np.float64) - 1.0
    out = np.zeros((n, cout))
    for s in range(n):
        for o in range(cout):
            acc = np.zeros((h, w))
            for i in range(h):
                for j in range(w):
                    val = bias[o]
                    for ci in range(cin):
                        for di in (-1, 0, 1):
                            for dj in (-1, 0, 1):
                                ii, jj = i + di, j + dj
                                if 0 <= ii < h and 0 <= jj < w:
                                    val += weight[o, ci, di + 1, dj + 1] * scaled[s, ci, ii, jj]
                    acc[i, j] = max(val, 0.0)
            out[s, o] = acc.mean()
    return out


def test_unit_activation_matches_hand_convolution():
    arch = ArchConfig(family="micro_cnn", num_classes=2, in_channels=1,
                      image_size=2, conv_widths=(3,))
    model = build_model(arch, seed=4, dtype=torch.float64)
    batch = random_batch(n=2, channels=1, size=2, classes=2, seed=9)
    _, acts = model.forward_with_activations(batch)
    weight = model.module.convs[0].weight.detach().numpy()
    bias = model.module.convs[0].bias.detach().numpy()
    expected = _hand_conv_spatial_means(batch.pixels, weight, bias)
    np.testing.assert_allclose(acts.layers["relu1"], expected, rtol=0, atol=1e-12)


def test_uniform_logits_cross_entropy_is_log_c(micro_model, micro_batch):
    with torch.no_grad():
        micro_model.module.head.weight.zero_()
        micro_model.module.head.bias.zero_()
    loss, _, _ = micro_model.loss_and_grads(micro_batch)
    assert loss == pytest.approx(np.log(3.0), abs=1e-12)


def fd_gradient(model, batch, loss_spec, step=1e-4):
    """Central finite differences of eval_loss over every parameter."""
    base = model.get_flat_params()
    grad = np.zeros_like(base)
    for i in range(base.size):
        for sign in (1.0, -1.0):
            probe = base.copy()
            probe[i] += sign * step
            model.set_flat_params(probe)
            grad[i] += sign * model.eval_loss(batch, loss_spec)
    model.set_flat_params(base)
    return grad / (2 * step)


def fd_input_gradient(model, batch, loss_spec, step=1e-4):
    base = batch.pixels.astype(np.float64)
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    for i in range(flat.size):
        vals = []
        for sign in (1.0, -1.0):
            probe = base.reshape(-1).copy()
            probe[i] += sign * step
            probe_batch = ImageBatch(
                probe.reshape(base.shape).astype(np.float64), batch.labels, batch.num_classes
            )
            probe_batch.pixels = probe.reshape(base.shape)  # keep float64, skip [0,1] re-cast
            vals.append(model.eval_loss(probe_batch, loss_spec))
        flat[i] = (vals[0] - vals[1]) / (2 * step)
    return grad


def assert_close_rel(actual, expected, rtol=1e-4, atol=1e-8):
    np.testing.assert_allclose(actual, expected, rtol=rtol, atol=atol)


def test_param_gradients_match_central_differences(micro_model, micro_batch):
    assert micro_model.num_params <= 1000
    _, param_grads, _ = micro_model.loss_and_grads(micro_batch)
    flat = np.concatenate([g.reshape(-1) for g in param_grads.values()])
    fd = fd_gradient(micro_model, micro_batch, None)
    assert_close_rel(flat, fd)


def test_input_gradients_match_central_differences(micro_model, micro_batch):
    _, _, input_grads = micro_model.loss_and_grads(micro_batch)
    fd = fd_input_gradient(micro_model, micro_batch, None)
    assert_close_rel(input_grads, fd)


def test_regularized_loss_gradients_match_central_differences(micro_model, micro_batch):
    spec = LossSpec("regularized", RegularizerConfig(alpha=0.7))
    _, param_grads, _ = micro_model.loss_and_grads(micro_batch, spec)
    flat = np.concatenate([g.reshape(-1) for g in param_grads.values()])
    fd = fd_gradient(micro_model, micro_batch, spec)
    assert_close_rel(flat, fd)


def test_duplicate_samples_get_identical_input_gradients(micro_model):
    rng = np.random.default_rng(3)
    one = rng.uniform(0, 1, size=(1, 1, 8, 8)).astype(np.float32)
    batch = ImageBatch(np.concatenate([one, one]), np.array([1, 1]), 3)
    _, _, input_grads = micro_model.loss_and_grads(batch)
    assert np.array_equal(input_grads[0], input_grads[1])


def test_loss_and_grads_raises_on_nonfinite(micro_model, micro_batch):
    with torch.no_grad():
        micro_model.module.head.weight.fill_(float("inf"))
    with pytest.raises(FloatingPointError):
        micro_model.loss_and_grads(micro_batch)


def test_shape_mismatch_rejected(micro_model):
    with pytest.raises(ValueError, match="does not match architecture"):
        micro_model.forward_with_activations(random_batch(size=16))


def test_checkpoint_round_trip(tmp_path):
    model = build_model({"family": "small_cnn", "num_classes": 10}, seed=7)
    path = tmp_path / "ckpt.bin"
    model.save_checkpoint(path)
    loaded = load_checkpoint(path)
    assert loaded.arch.to_dict() == model.arch.to_dict()
    assert np.array_equal(loaded.get_flat_params(), model.get_flat_params())
    batch = random_batch(n=3, channels=3, size=32, classes=10)
    assert np.array_equal(loaded.logits(batch), model.logits(batch))


def test_checkpoint_bad_magic_rejected(tmp_path):
    path = tmp_path / "ckpt.bin"
    path.write_bytes(b"NOPE!" + b"\x00" * 32)
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_truncation_rejected(tmp_path):
    model = build_model(MICRO_ARCH, seed=0)
    path = tmp_path / "ckpt.bin"
    model.save_checkpoint(path)
    data = path.read_bytes()
    path.write_bytes(data[:-8])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(path)


def test_resnet20_family_builds_and_captures(tmp_path):
    model = build_model({"family": "resnet20", "num_classes": 10}, seed=0)
    batch = random_batch(n=3, channels=3, size=32, classes=10)
    logits, acts = model.forward_with_activations(batch)
    assert logits.shape == (3, 10)
    assert len(acts.layers) == 19  # stem ReLU + 2 per basic block, head excluded
    assert all(mat.min() >= 0 for mat in acts.layers.values())
    path = tmp_path / "r20.bin"
    model.save_checkpoint(path)
    reloaded = load_checkpoint(path)
    assert np.array_equal(reloaded.logits(batch), model.logits(batch))


def test_arch_config_round_trips():
    arch = ArchConfig(family="micro_cnn", num_classes=4, in_channels=1,
                      image_size=8, conv_widths=(2, 3), conv_strides=(1, 2))
    assert ArchConfig.from_dict(arch.to_dict()) == arch


def test_image_batch_invariants():
    with pytest.raises(ValueError, match="outside"):
        ImageBatch(np.full((1, 1, 4, 4), 1.5, dtype=np.float32), np.array([0]), 2).validate()
    with pytest.raises(ValueError, match="labels"):
        ImageBatch(np.zeros((2, 1, 4, 4), dtype=np.float32), np.array([0]), 2).validate()
