"""Scaled-down 2D U-Net, soft Dice loss and the pooled bottleneck embedding."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import BatchNorm, Conv1x1, Conv2d, Linear, Module
from .tensor import Tensor

N_CLASSES = 4  # background, healthy lung, GGO, other pathologies
LEAKY_SLOPE = 0.01
DICE_EPS = 1e-6


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SegNetConfig:
    base_filters: int = 8
    depth: int = 3
    n_classes: int = N_CLASSES
    input_size: tuple = (32, 32)

    def __post_init__(self):
        h, w = self.input_size
        if self.base_filters < 1 or self.depth < 1:
            raise ConfigError("base_filters and depth must be positive")
        if h % 2 ** self.depth or w % 2 ** self.depth:
            raise ConfigError(
                f"input size {h}x{w} is not divisible by 2^depth = {2 ** self.depth}"
            )

    @property
    def bottleneck_channels(self) -> int:
        return self.base_filters * 2 ** self.depth

    @property
    def bottleneck_size(self) -> tuple:
        h, w = self.input_size
        return h // 2 ** self.depth, w // 2 ** self.depth


class DoubleConv(Module):
    """(conv3x3 -> leaky-ReLU -> batchnorm) twice."""

    def __init__(self, c_in, c_out, rng, dtype):
        super().__init__()
        self.conv1 = Conv2d(c_in, c_out, rng, dtype)
        self.bn1 = BatchNorm(c_out, dtype)
        self.conv2 = Conv2d(c_out, c_out, rng, dtype)
        self.bn2 = BatchNorm(c_out, dtype)

    def forward(self, x):
        x = self.bn1(T.leaky_relu(self.conv1(x), LEAKY_SLOPE))
        return self.bn2(T.leaky_relu(self.conv2(x), LEAKY_SLOPE))


class SegNet(Module):
    """Encoder-decoder with skip connections.

    ``forward`` takes slices as (N, 1, H, W) and returns the per-pixel class
    probabilities (N, n_classes, H, W) together with the bottleneck maps
    (N, base*2^depth, H/2^depth, W/2^depth).
    """

    def __init__(self, cfg: SegNetConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        f = cfg.base_filters
        widths = [f * 2 ** i for i in range(cfg.depth + 1)]
        self.down = [DoubleConv(1 if i == 0 else widths[i - 1], widths[i], rng, dtype) for i in range(cfg.depth)]
        self.bottom = DoubleConv(widths[cfg.depth - 1], widths[cfg.depth], rng, dtype)
        self.up = [
            DoubleConv(widths[i + 1] + widths[i], widths[i], rng, dtype) for i in reversed(range(cfg.depth))
        ]
        self.head = Conv1x1(widths[0], cfg.n_classes, rng, dtype)

    def forward(self, x: Tensor):
        h, w = x.shape[-2:]
        if (h, w) != tuple(self.cfg.input_size):
            if h % 2 ** self.cfg.depth or w % 2 ** self.cfg.depth:
                raise ConfigError(f"slice size {h}x{w} not divisible by 2^{self.cfg.depth}")
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = T.maxpool2d(x)
        bottleneck = self.bottom(x)
        x = bottleneck
        for block, skip in zip(self.up, reversed(skips)):
            x = block(T.concat([T.upsample2x(x), skip], axis=1))
        probs = T.softmax(self.head(x), axis=1)
        return probs, bottleneck


class ConvEncoder(Module):
    """Plain convolutional encoder used as the image-only baseline backbone.

    Produces bottleneck-shaped maps with the same channel count as
    :class:`SegNet` so the same embedding head applies.
    """

    def __init__(self, cfg: SegNetConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        f = cfg.base_filters
        widths = [f * 2 ** i for i in range(cfg.depth + 1)]
        self.blocks = [DoubleConv(1 if i == 0 else widths[i - 1], widths[i], rng, dtype) for i in range(cfg.depth)]
        self.last = DoubleConv(widths[cfg.depth - 1], widths[cfg.depth], rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = T.maxpool2d(block(x))
        return self.last(x)


def pool_slices(bottleneck: Tensor, n_patients: int) -> Tensor:
    """Global-average-pool each slice, then take the element-wise max over slices.

    ``bottleneck`` holds ``n_patients * S`` slices in patient-major order;
    the result is (n_patients, C).
    """
    pooled = T.global_avg_pool(bottleneck)
    s = pooled.shape[0] // n_patients
    return T.reduce_max(T.reshape(pooled, (n_patients, s, pooled.shape[1])), axis=1)


class BottleneckEmbed(Module):
    """Linear projection + leaky-ReLU of the slice-pooled bottleneck vector."""

    def __init__(self, channels: int, n_out: int, rng, dtype=np.float32):
        super().__init__()
        self.proj = Linear(channels, n_out, rng, dtype)

    def forward(self, pooled: Tensor) -> Tensor:
        return T.leaky_relu(self.proj(pooled), LEAKY_SLOPE)

    def embed(self, bottleneck: Tensor, n_patients: int = 1) -> Tensor:
        return self(pool_slices(bottleneck, n_patients))


def one_hot(labels: np.ndarray, n_classes: int = N_CLASSES, dtype=np.float32) -> np.ndarray:
    """(N, H, W) integer labels -> (N, K, H, W) one-hot."""
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], n_classes) + labels.shape[1:], dtype=dtype)
    np.put_along_axis(out, labels[:, None].astype(np.intp), 1, axis=1)
    return out


def lung_only(probs: Tensor, truth: np.ndarray) -> tuple:
    """Collapse the three lung classes into one: returns 2-class (prob, truth)."""
    bg = T.slice_axis(probs, 0, 1, axis=1)
    lung = T.reduce_sum(T.slice_axis(probs, 1, probs.shape[1], axis=1), axis=1, keepdims=True)
    t = np.concatenate([truth[:, :1], truth[:, 1:].sum(axis=1, keepdims=True)], axis=1)
    return T.concat([bg, lung], axis=1), t


def dice_loss(probs: Tensor, truth: np.ndarray, eps: float = DICE_EPS) -> Tensor:
    """Soft Dice loss, ``1 - mean_c (2 sum p g + eps) / (sum p^2 + sum g^2 + eps)``.

    Sums run over every axis except the class axis 1; the background class
    is included in the mean.
    """
    truth = np.asarray(truth, dtype=probs.dtype)
    if truth.shape != probs.shape:
        raise T.DimensionError(f"dice_loss: probabilities {probs.shape} vs truth {truth.shape}")
    axes = (0,) + tuple(range(2, probs.ndim))
    g = Tensor(truth)
    inter = T.reduce_sum(T.mul(probs, g), axis=axes)
    denom = T.add(T.reduce_sum(T.square(probs), axis=axes), truth.sum(axis=axes) + eps)
    dice = T.div(T.add(T.scale(inter, 2.0), eps), denom)
    return T.sub(1.0, T.reduce_mean(dice))
