"""Differentiable-model adapter for small convolutional classifiers.

Builds the supported architecture families, exposes forward passes that
capture per-ReLU unit activations (spatial mean of each feature map), and
exposes gradients with respect to parameters and inputs. The classifier head
is never part of the captured activations.

Architecture families:

* ``small_cnn``  -- 4 conv layers (16/32/32/64, 3x3, stride 2 on layers 2 and
  4), ReLU after each, global average pool, linear head. The reference
  desk-scale model.
* ``micro_cnn``  -- same pattern with configurable conv widths/strides; used
  for sub-1k-parameter gradient-check models and hand-computable toys.
* ``resnet20``   -- CIFAR-style 3-stage residual network (option-A identity
  shortcuts). Config-gated extra; not exercised by the acceptance suite.
* ``linear``     -- flatten + single linear layer, no ReLU layers. Useful for
  attacks/stability tests where the Jacobian is known in closed form.

Batchnorm (resnet20 only) runs in eval mode during activation capture and all
analysis passes; training steps drive the module directly in train mode.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import ConfigError

CHECKPOINT_MAGIC = b"SLKT1"

KNOWN_FAMILIES = ("small_cnn", "micro_cnn", "resnet20", "linear")

SMALL_CNN_WIDTHS = (16, 32, 32, 64)
SMALL_CNN_STRIDES = (1, 2, 1, 2)


@dataclass
class ImageBatch:
    """A batch of images with labels.

    pixels: (N, C, H, W) float32 in [0, 1].
    labels: (N,) integer class indices in [0, num_classes).
    """

    pixels: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.dtype != np.float64:  # keep f64 for numeric probes
            self.pixels = self.pixels.astype(np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)

    def validate(self) -> "ImageBatch":
        if self.pixels.ndim != 4:
            raise ValueError(f"pixels must be 4-axis (N,C,H,W), got shape {self.pixels.shape}")
        if self.labels.ndim != 1 or len(self.labels) != len(self.pixels):
            raise ValueError(
                f"labels length {self.labels.shape} does not match {len(self.pixels)} samples"
            )
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise ValueError("pixel values outside [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels outside [0, num_classes)")
        return self

    def __len__(self) -> int:
        return len(self.pixels)

    def subset(self, indices) -> "ImageBatch":
        return ImageBatch(self.pixels[indices], self.labels[indices], self.num_classes)


@dataclass
class LayerActivations:
    """Ordered map layer_id -> (samples x units) post-ReLU activation matrix.

    Unit value = spatial mean of one feature map for one sample. Layer order
    follows network depth; the output (classifier) layer is never present.
    """

    layers: "OrderedDict[str, np.ndarray]"

    @property
    def layer_ids(self) -> list:
        return list(self.layers.keys())

    @property
    def num_samples(self) -> int:
        first = next(iter(self.layers.values()))
        return first.shape[0]

    def validate(self) -> "LayerActivations":
        for lid, mat in self.layers.items():
            if mat.ndim != 2:
                raise ValueError(f"layer {lid}: activation matrix must be 2-D")
            if mat.size and mat.min() < 0:
                raise ValueError(f"layer {lid}: negative post-ReLU activation")
        return self


@dataclass
class ArchConfig:
    """Architecture descriptor. Round-trips through to_dict/from_dict."""

    family: str
    num_classes: int
    in_channels: int = 3
    image_size: int = 32
    conv_widths: Optional[tuple] = None   # micro_cnn only
    conv_strides: Optional[tuple] = None  # micro_cnn only

    def validate(self) -> "ArchConfig":
        if self.family not in KNOWN_FAMILIES:
            raise ConfigError(f"unknown architecture family: {self.family!r}")
        if self.num_classes < 2:
            raise ConfigError(f"class count must be >= 2, got {self.num_classes}")
        if self.in_channels < 1 or self.image_size < 1:
            raise ConfigError("in_channels and image_size must be positive")
        if self.family == "micro_cnn":
            if not self.conv_widths:
                raise ConfigError("micro_cnn requires conv_widths")
            if self.conv_strides is not None and len(self.conv_strides) != len(self.conv_widths):
                raise ConfigError("conv_strides length must match conv_widths")
        return self

    def to_dict(self) -> dict:
        d = {
            "family": self.family,
            "num_classes": self.num_classes,
            "in_channels": self.in_channels,
            "image_size": self.image_size,
        }
        if self.conv_widths is not None:
            d["conv_widths"] = list(self.conv_widths)
        if self.conv_strides is not None:
            d["conv_strides"] = list(self.conv_strides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(
            family=d["family"],
            num_classes=int(d["num_classes"]),
            in_channels=int(d.get("in_channels", 3)),
            image_size=int(d.get("image_size", 32)),
            conv_widths=tuple(d["conv_widths"]) if d.get("conv_widths") else None,
            conv_strides=tuple(d["conv_strides"]) if d.get("conv_strides") else None,
        ).validate()


class _ConvStack(nn.Module):
    """Conv/ReLU stack with global average pool and linear head.

    Inputs arrive on the [0, 1] pixel scale and are mapped to [-1, 1] before
    the first conv. small_cnn uses batchnorm between conv and ReLU (it pins
    the activation scale, which both stabilizes training under the
    selectivity term and keeps Jacobian magnitudes comparable across runs);
    micro_cnn stays normalization-free so finite-difference oracles see a
    pure piecewise-linear function with no buffers.
    """

    def __init__(self, widths, strides, in_channels, num_classes, batchnorm=False):
        super().__init__()
        convs, norms = [], []
        prev = in_channels
        for w, s in zip(widths, strides):
            convs.append(nn.Conv2d(prev, w, kernel_size=3, stride=s, padding=1,
                                   bias=not batchnorm))
            norms.append(nn.BatchNorm2d(w) if batchnorm else nn.Identity())
            prev = w
        self.convs = nn.ModuleList(convs)
        self.norms = nn.ModuleList(norms)
        self.head = nn.Linear(prev, num_classes)

    def forward(self, x):
        x = 2.0 * x - 1.0
        acts = OrderedDict()
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            x = F.relu(norm(conv(x)))
            acts[f"relu{i + 1}"] = x.mean(dim=(2, 3))
        logits = self.head(x.mean(dim=(2, 3)))
        return logits, acts


class _LinearNet(nn.Module):
    """Flatten -> single linear map. No ReLU layers, so no captured units."""

    def __init__(self, in_channels, image_size, num_classes):
        super().__init__()
        self.head = nn.Linear(in_channels * image_size * image_size, num_classes)

    def forward(self, x):
        logits = self.head(x.reshape(x.shape[0], -1))
        return logits, OrderedDict()


class _BasicBlock(nn.Module):
    """ResNet basic block with option-A (zero-pad) downsampling shortcut."""

    def __init__(self, in_planes, planes, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.stride = stride
        self.pad_channels = planes - in_planes

    def forward(self, x, acts, idx):
        out = F.relu(self.bn1(self.conv1(x)))
        acts[f"relu{idx}"] = out.mean(dim=(2, 3))
        out = self.bn2(self.conv2(out))
        shortcut = x
        if self.stride != 1 or self.pad_channels > 0:
            shortcut = x[:, :, :: self.stride, :: self.stride]
            if self.pad_channels > 0:
                pad = (0, 0, 0, 0, self.pad_channels // 2, self.pad_channels - self.pad_channels // 2)
                shortcut = F.pad(shortcut, pad)
        out = F.relu(out + shortcut)
        acts[f"relu{idx + 1}"] = out.mean(dim=(2, 3))
        return out


class _ResNet20(nn.Module):
    def __init__(self, in_channels, num_classes):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, 16, 3, stride=1, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(16)
        blocks = []
        in_planes = 16
        for planes, stage_stride in ((16, 1), (32, 2), (64, 2)):
            for b in range(3):
                blocks.append(_BasicBlock(in_planes, planes, stage_stride if b == 0 else 1))
                in_planes = planes
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Linear(64, num_classes)

    def forward(self, x):
        acts = OrderedDict()
        out = F.relu(self.bn1(self.conv1(2.0 * x - 1.0)))
        acts["relu1"] = out.mean(dim=(2, 3))
        idx = 2
        for block in self.blocks:
            out = block(out, acts, idx)
            idx += 2
        logits = self.head(out.mean(dim=(2, 3)))
        return logits, acts


def _make_module(arch: ArchConfig) -> nn.Module:
    if arch.family == "small_cnn":
        return _ConvStack(SMALL_CNN_WIDTHS, SMALL_CNN_STRIDES, arch.in_channels,
                          arch.num_classes, batchnorm=True)
    if arch.family == "micro_cnn":
        strides = arch.conv_strides or tuple(1 for _ in arch.conv_widths)
        return _ConvStack(arch.conv_widths, strides, arch.in_channels, arch.num_classes)
    if arch.family == "resnet20":
        return _ResNet20(arch.in_channels, arch.num_classes)
    if arch.family == "linear":
        return _LinearNet(arch.in_channels, arch.image_size, arch.num_classes)
    raise ConfigError(f"unknown architecture family: {arch.family!r}")


def _init_params(module: nn.Module, seed: int) -> None:
    """Fan-in-scaled uniform init (U(+-sqrt(6/fan_in)), zero biases), drawn
    from a dedicated generator.

    The sqrt(6/fan_in) bound keeps signal variance roughly constant through
    ReLU stacks, which plain (normalization-free) conv stacks need to train.
    Identical (architecture, seed) pairs yield bit-identical parameters; the
    global torch RNG is untouched.
    """
    gen = torch.Generator().manual_seed(int(seed))
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            bound = float(np.sqrt(6.0 / fan_in))
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.fill_(0.0)


class ModelAdapter:
    """Wraps a torch module behind a numpy-facing, deterministic contract.

    Forward/gradient calls on one instance are not thread-safe; distinct
    instances share no state.
    """

    def __init__(self, arch: ArchConfig, module: nn.Module, seed: Optional[int],
                 dtype: torch.dtype = torch.float32):
        self.arch = arch
        self.module = module
        self.seed = seed
        self.dtype = dtype
        if dtype == torch.float64:
            self.module.double()

    # ------------------------------------------------------------------ core

    def _to_tensor(self, pixels: np.ndarray, requires_grad: bool = False) -> torch.Tensor:
        t = torch.from_numpy(np.ascontiguousarray(pixels)).to(self.dtype)
        if requires_grad:
            t.requires_grad_(True)
        return t

    def forward_tensors(self, x: torch.Tensor):
        """Low-level forward: (logits, ordered dict of in-graph unit activations)."""
        return self.module(x)

    # -------------------------------------------------------------- analysis

    def forward_with_activations(self, batch: ImageBatch):
        """Eval-mode forward over a batch; returns (logits, LayerActivations)."""
        if len(batch) == 0:
            raise ValueError("empty batch")
        self._check_input_shape(batch)
        was_training = self.module.training
        self.module.eval()
        try:
            with torch.no_grad():
                logits_t, acts_t = self.forward_tensors(self._to_tensor(batch.pixels))
        finally:
            self.module.train(was_training)
        acts = OrderedDict((k, v.numpy().copy()) for k, v in acts_t.items())
        return logits_t.numpy().copy(), LayerActivations(acts)

    def logits(self, batch: ImageBatch, batch_size: int = 256) -> np.ndarray:
        """Eval-mode logits, computed in chunks."""
        out = []
        for start in range(0, len(batch), batch_size):
            chunk = batch.subset(slice(start, start + batch_size))
            logits, _ = self.forward_with_activations(chunk)
            out.append(logits)
        return np.concatenate(out, axis=0)

    def accuracy(self, batch: ImageBatch, batch_size: int = 256) -> float:
        preds = np.argmax(self.logits(batch, batch_size=batch_size), axis=1)
        return float(np.mean(preds == batch.labels))

    def activations(self, batch: ImageBatch, batch_size: int = 256) -> LayerActivations:
        """Chunked eval-mode activation capture over a full set."""
        parts = None
        for start in range(0, len(batch), batch_size):
            chunk = batch.subset(slice(start, start + batch_size))
            _, acts = self.forward_with_activations(chunk)
            if parts is None:
                parts = OrderedDict((k, [v]) for k, v in acts.layers.items())
            else:
                for k, v in acts.layers.items():
                    parts[k].append(v)
        if parts is None:
            raise ValueError("empty batch")
        return LayerActivations(OrderedDict((k, np.concatenate(v, axis=0)) for k, v in parts.items()))

    # -------------------------------------------------------------- gradients

    def loss_and_grads(self, batch: ImageBatch, loss_spec=None):
        """Loss plus gradients w.r.t. parameters and input pixels.

        Returns (loss value, OrderedDict name -> param grad array, input grad
        array shaped like batch.pixels). Raises on a non-finite loss, which
        signals divergence to the caller.
        """
        from .selectivity import build_loss

        self._check_input_shape(batch)
        was_training = self.module.training
        self.module.eval()
        try:
            x = self._to_tensor(batch.pixels, requires_grad=True)
            labels = torch.from_numpy(batch.labels)
            logits, acts = self.forward_tensors(x)
            loss = build_loss(logits, labels, acts, loss_spec, num_classes=batch.num_classes)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite loss: {loss.item()!r}")
            params = OrderedDict(self.module.named_parameters())
            grads = torch.autograd.grad(loss, [x] + list(params.values()), allow_unused=True)
        finally:
            self.module.train(was_training)
        input_grads = grads[0].numpy().copy()
        param_grads = OrderedDict()
        for (name, p), g in zip(params.items(), grads[1:]):
            param_grads[name] = np.zeros(p.shape, dtype=np.float64) if g is None else g.numpy().copy()
        return float(loss.item()), param_grads, input_grads

    def eval_loss(self, batch: ImageBatch, loss_spec=None) -> float:
        """Pure loss evaluation (no autograd); the finite-difference oracle's hook."""
        from .selectivity import build_loss

        was_training = self.module.training
        self.module.eval()
        try:
            with torch.no_grad():
                logits, acts = self.forward_tensors(self._to_tensor(batch.pixels))
                loss = build_loss(logits, torch.from_numpy(batch.labels), acts, loss_spec,
                                  num_classes=batch.num_classes)
        finally:
            self.module.train(was_training)
        return float(loss.item())

    def input_gradient(self, batch: ImageBatch) -> np.ndarray:
        """Gradient of cross-entropy w.r.t. the input pixels (eval mode)."""
        self._check_input_shape(batch)
        was_training = self.module.training
        self.module.eval()
        try:
            with torch.enable_grad():
                x = self._to_tensor(batch.pixels, requires_grad=True)
                logits, _ = self.forward_tensors(x)
                loss = F.cross_entropy(logits, torch.from_numpy(batch.labels))
                (grad,) = torch.autograd.grad(loss, x)
        finally:
            self.module.train(was_training)
        return grad.numpy().copy()

    # -------------------------------------------------------------- parameters

    def _state_tensors(self):
        """Trainable parameters followed by float buffers (batchnorm stats)."""
        tensors = list(self.module.parameters())
        tensors += [b for _, b in self.module.named_buffers() if b.dtype.is_floating_point]
        return tensors

    @property
    def num_params(self) -> int:
        return sum(t.numel() for t in self._state_tensors())

    def get_flat_params(self) -> np.ndarray:
        with torch.no_grad():
            return np.concatenate([t.reshape(-1).numpy().copy() for t in self._state_tensors()])

    def set_flat_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat)
        if flat.size != self.num_params:
            raise ValueError(f"expected {self.num_params} parameter values, got {flat.size}")
        offset = 0
        with torch.no_grad():
            for t in self._state_tensors():
                n = t.numel()
                t.copy_(torch.from_numpy(np.ascontiguousarray(flat[offset:offset + n])
                                         .reshape(t.shape)).to(t.dtype))
                offset += n

    def _check_input_shape(self, batch: ImageBatch) -> None:
        n, c, h, w = batch.pixels.shape
        if c != self.arch.in_channels or h != self.arch.image_size or w != self.arch.image_size:
            raise ValueError(
                f"input shape {(c, h, w)} does not match architecture "
                f"({self.arch.in_channels}, {self.arch.image_size}, {self.arch.image_size})"
            )

    # -------------------------------------------------------------- checkpoints

    def save_checkpoint(self, path) -> None:
        """Binary checkpoint: magic, length-prefixed arch JSON, u64 count, f32 params.

        Layout: b"SLKT1" | u32 LE descriptor byte length | descriptor UTF-8
        JSON | u64 LE parameter count | row-major float32 LE values. The
        count covers trainable parameters plus float buffers (batchnorm
        running statistics), in that order.
        """
        desc = json.dumps(self.arch.to_dict(), sort_keys=True).encode("utf-8")
        flat = self.get_flat_params().astype("<f4")
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", len(desc)))
            fh.write(desc)
            fh.write(struct.pack("<Q", flat.size))
            fh.write(flat.tobytes())


def load_checkpoint(path, dtype: torch.dtype = torch.float32) -> ModelAdapter:
    """Rebuild a ModelAdapter from a checkpoint written by save_checkpoint."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r} in {path}")
        (desc_len,) = struct.unpack("<I", fh.read(4))
        arch = ArchConfig.from_dict(json.loads(fh.read(desc_len).decode("utf-8")))
        (count,) = struct.unpack("<Q", fh.read(8))
        payload = fh.read(count * 4)
        if len(payload) != count * 4:
            raise ValueError(f"truncated checkpoint: expected {count} float32 values")
    flat = np.frombuffer(payload, dtype="<f4").copy()
    model = build_model(arch, seed=0, dtype=dtype)
    model.set_flat_params(flat)
    model.seed = None  # parameters come from the file, not the init seed
    return model


def build_model(arch_config, seed: int, dtype: torch.dtype = torch.float32) -> ModelAdapter:
    """Build and deterministically initialize a model.

    Identical (arch_config, seed) pairs yield bit-identical parameters.
    Parameters are always drawn in float32 and cast afterwards, so the same
    seed produces the same values regardless of the requested dtype.
    """
    if isinstance(arch_config, dict):
        arch = ArchConfig.from_dict(arch_config)
    else:
        arch = arch_config.validate()
    module = _make_module(arch)
    _init_params(module, seed)
    module.eval()
    return ModelAdapter(arch, module, seed=seed, dtype=dtype)
