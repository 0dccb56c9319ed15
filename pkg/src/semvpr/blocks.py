"""Architectural units: toy encoder, multi-scale attention, (ms-)GeM pooling,
guided segmentation decoder and the domain discriminator.

Every block works on a single ``C x H x W`` map or an ``N x C x H x W`` batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterator, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor


def xavier_uniform(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def normal_init(rng: np.random.Generator, shape: Tuple[int, ...], std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


class Block:
    """A named bag of trainable tensors."""

    def __init__(self) -> None:
        self.params: Dict[str, Tensor] = {}

    def _param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name in sorted(self.params):
            yield prefix + name, self.params[name]


# -- encoder -----------------------------------------------------------------------

@dataclass
class EncoderConfig:
    """Toy stand-in for the conv4/conv5 blocks of a ResNet.

    ``widths`` are the channel counts of the stages before f4; the last f4
    stage emits ``c4`` channels. ``strides`` has one entry per f4 stage.
    """

    c4: int = 32
    c5: int = 64
    widths: Tuple[int, ...] = (16, 16, 32)
    strides: Tuple[int, ...] = (2, 2, 2, 2)
    kernel: int = 3
    in_channels: int = 3

    def __post_init__(self) -> None:
        self.widths = tuple(int(w) for w in self.widths)
        self.strides = tuple(int(s) for s in self.strides)
        if self.c4 < 1 or self.c5 < 1:
            raise ValueError("c4 and c5 must be >= 1")
        if len(self.widths) != len(self.strides) - 1:
            raise ValueError("need exactly len(strides) - 1 intermediate widths")

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.strides))


class Encoder(Block):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        chans = (cfg.in_channels,) + cfg.widths + (cfg.c4,)
        k = cfg.kernel
        for i in range(len(cfg.strides)):
            self._param(f"stage{i + 1}.weight", xavier_uniform(rng, (chans[i + 1], chans[i], k, k)))
            self._param(f"stage{i + 1}.bias", np.zeros(chans[i + 1]))
        # kernel 4 / stride 2 / pad 1 halves with floor for any extent
        self._param("stage5.weight", xavier_uniform(rng, (cfg.c5, cfg.c4, 4, 4)))
        self._param("stage5.bias", np.zeros(cfg.c5))

    def __call__(self, image: Tensor) -> Tuple[Tensor, Tensor]:
        cfg = self.cfg
        h, w = image.shape[-2:]
        if image.shape[-3] != cfg.in_channels:
            raise DimensionError(f"encoder expects {cfg.in_channels} channels, got {image.shape}")
        if h < max(32, cfg.total_stride) or w < max(32, cfg.total_stride):
            raise DimensionError(f"image {h}x{w} too small for total stride {cfg.total_stride} (min 32)")
        x = image
        pad = cfg.kernel // 2
        for i, s in enumerate(cfg.strides):
            p = self.params
            x = T.relu(T.conv2d(x, p[f"stage{i + 1}.weight"], p[f"stage{i + 1}.bias"], stride=s, padding=pad))
        f4 = x
        if min(f4.shape[-2:]) < 2:
            raise DimensionError(f"f4 extents {f4.shape[-2:]} cannot be halved for f5")
        f5 = T.relu(T.conv2d(f4, self.params["stage5.weight"], self.params["stage5.bias"], stride=2, padding=1))
        return f4, f5


def encode(image: Tensor, encoder: Encoder) -> Tuple[Tensor, Tensor]:
    return encoder(T.as_tensor(image))


# -- attention -------------------------------------------------------------------------

class AttentionModule(Block):
    """Three same-padded filter banks (3, 5, 7), concatenated, fused 1x1, softplus."""

    def __init__(self, c4: int, rng: np.random.Generator, bank_channels: int = 64,
                 kernels: Sequence[int] = (3, 5, 7)):
        super().__init__()
        self.c4 = c4
        self.kernels = tuple(kernels)
        self.bank_channels = bank_channels
        for k in self.kernels:
            self._param(f"bank{k}.weight", xavier_uniform(rng, (bank_channels, c4, k, k)))
            self._param(f"bank{k}.bias", np.zeros(bank_channels))
        fused = bank_channels * len(self.kernels)
        self._param("fuse.weight", xavier_uniform(rng, (1, fused, 1, 1)))
        self._param("fuse.bias", np.zeros(1))

    def __call__(self, f4: Tensor) -> Tensor:
        if f4.shape[-3] != self.c4:
            raise DimensionError(f"attention built for {self.c4} channels, got {f4.shape}")
        size = f4.shape[-2:]
        outs = []
        for k in self.kernels:
            y = T.relu(T.conv2d(f4, self.params[f"bank{k}.weight"], self.params[f"bank{k}.bias"],
                                stride=1, padding=k // 2))
            outs.append(T.upsample_nearest(y, size))
        z = T.concat(outs, axis=-3)
        return T.softplus(T.conv2d(z, self.params["fuse.weight"], self.params["fuse.bias"]))


def attention_forward(f4: Tensor, att: AttentionModule) -> Tensor:
    return att(T.as_tensor(f4))


# -- pooling ---------------------------------------------------------------------------------

def gem(x: Tensor, p) -> Tensor:
    """Generalized mean over the two spatial axes: (mean relu(x)^p)^(1/p).

    Returns C (or N x C) values. ``p`` may be a float or a scalar tensor.
    """
    p_val = float(p.data) if isinstance(p, Tensor) else float(p)
    if p_val < 1.0:
        raise ValueError(f"GeM exponent must be >= 1, got {p_val}")
    x = T.relu(T.as_tensor(x))
    if p_val == 1.0 and not isinstance(p, Tensor):
        return T.mean(x, axis=(-2, -1))
    return T.root(T.mean(T.power(x, p), axis=(-2, -1)), p)


_NORM_AXES = {"spatial": (-2, -1), "channel": (-3,), "none": None}


def ms_gem(f4: Tensor, f5: Optional[Tensor], M: Tensor, p4=3.0, p5=3.0,
           norm: str = "spatial", normalize: bool = True, multiscale: bool = True) -> Tensor:
    """Attention-weighted multi-scale GeM descriptor.

    f5 is resampled to f4's grid, both maps are weighted by ``M``, normalized
    (``norm`` picks the axes, ``"none"`` skips it), GeM-pooled, normalized per
    scale and concatenated. With ``multiscale=False`` only the f5 branch is
    used. ``normalize=False`` disables every normalization, for testing.
    """
    if M.shape[-2:] != f4.shape[-2:]:
        raise DimensionError(f"attention map {M.shape} does not match f4 {f4.shape}")
    axes = _NORM_AXES[norm] if normalize else None
    size = f4.shape[-2:]
    branches = []
    if multiscale:
        branches.append((f4, p4))
    if f5 is not None:
        branches.append((T.upsample_nearest(f5, size), p5))
    parts = []
    for feat, p in branches:
        w = T.relu(T.broadcast_mul(feat, M))
        if axes is not None:
            w = T.l2_normalize(w, axis=axes)
        g = gem(w, p)
        parts.append(T.l2_normalize(g, axis=-1) if normalize else g)
    out = T.concat(parts, axis=-1) if len(parts) > 1 else parts[0]
    return T.l2_normalize(out, axis=-1) if normalize else out


# -- segmentation --------------------------------------------------------------------------

class SegDecoder(Block):
    """Three 3x3 conv + relu layers, then a 1x1 classifier."""

    def __init__(self, c_in: int, rng: np.random.Generator, num_classes: int = 17,
                 width: int = 32, init_std: float = 0.01):
        super().__init__()
        self.c_in = c_in
        self.num_classes = num_classes
        chans = (c_in, width, width, width)
        for i in range(3):
            self._param(f"conv{i + 1}.weight", normal_init(rng, (chans[i + 1], chans[i], 3, 3), init_std))
            self._param(f"conv{i + 1}.bias", np.zeros(chans[i + 1]))
        self._param("classifier.weight", normal_init(rng, (num_classes, width, 1, 1), init_std))
        self._param("classifier.bias", np.zeros(num_classes))

    def features(self, f4: Tensor) -> Tensor:
        if f4.shape[-3] != self.c_in:
            raise DimensionError(f"decoder built for {self.c_in} channels, got {f4.shape}")
        x = f4
        for i in range(3):
            x = T.relu(T.conv2d(x, self.params[f"conv{i + 1}.weight"], self.params[f"conv{i + 1}.bias"],
                                padding=1))
        return x

    def classify(self, fd: Tensor) -> Tensor:
        return T.conv2d(fd, self.params["classifier.weight"], self.params["classifier.bias"])


def segment(f4: Tensor, M: Optional[Tensor], dec: SegDecoder, guided: bool,
            return_features: bool = False):
    """Per-pixel class logits; when ``guided`` the penultimate features are
    multiplied by ``M`` before the classifier."""
    fd = dec.features(T.as_tensor(f4))
    x = T.broadcast_mul(fd, M) if guided and M is not None else fd
    logits = dec.classify(x)
    return (logits, fd) if return_features else logits


# -- discriminator ---------------------------------------------------------------------------

class Discriminator(Block):
    """Five 4x4/stride-2/pad-1 convs, leaky relu (0.2) after the first four, sigmoid last."""

    def __init__(self, c_in: int, rng: np.random.Generator,
                 channels: Sequence[int] = (64, 128, 256, 512, 1), slope: float = 0.2):
        super().__init__()
        channels = tuple(channels)
        if len(channels) != 5 or channels[-1] != 1:
            raise ValueError("discriminator needs 5 layers ending in 1 channel")
        self.c_in = c_in
        self.slope = slope
        chans = (c_in,) + channels
        for i in range(5):
            self._param(f"conv{i + 1}.weight", xavier_uniform(rng, (chans[i + 1], chans[i], 4, 4)))
            self._param(f"conv{i + 1}.bias", np.zeros(chans[i + 1]))

    def __call__(self, x: Tensor) -> Tensor:
        h, w = x.shape[-2:]
        if h < 32 or w < 32:
            raise DimensionError(f"discriminator input {h}x{w} too small for five halvings (min 32)")
        if x.shape[-3] != self.c_in:
            raise DimensionError(f"discriminator built for {self.c_in} channels, got {x.shape}")
        for i in range(5):
            x = T.conv2d(x, self.params[f"conv{i + 1}.weight"], self.params[f"conv{i + 1}.bias"],
                         stride=2, padding=1)
            x = T.leaky_relu(x, self.slope) if i < 4 else T.sigmoid(x)
        return x


def discriminate(features: Tensor, d: Discriminator) -> Tensor:
    return d(T.as_tensor(features))
