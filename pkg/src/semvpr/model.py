"""Full network: shared encoder, attention, ms-GeM head, guided decoder, discriminator."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .blocks import (AttentionModule, Discriminator, Encoder, EncoderConfig, SegDecoder, ms_gem,
                     segment)
from .formats import load_checkpoint, save_checkpoint
from .tensor import Tensor, no_grad


@dataclass
class Flags:
    """Ablation switches."""

    ms_gem: bool = True
    att: bool = True
    semseg: bool = True
    g_semseg: bool = True
    da: bool = True

    def __post_init__(self) -> None:
        if self.g_semseg and not (self.semseg and self.att):
            raise ValueError("g_semseg needs both semseg and att enabled")

    @classmethod
    def baseline(cls) -> "Flags":
        return cls(False, False, False, False, False)


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    bank_channels: int = 64
    bank_kernels: Tuple[int, ...] = (3, 5, 7)
    p4: float = 3.0
    p5: float = 3.0
    learn_p: bool = False
    norm: str = "spatial"
    num_classes: int = 17
    decoder_width: int = 32
    decoder_init_std: float = 0.01
    disc_channels: Tuple[int, ...] = (64, 128, 256, 512, 1)
    disc_size: int = 32
    flags: Flags = field(default_factory=Flags)

    @property
    def descriptor_dim(self) -> int:
        return self.encoder.c4 + self.encoder.c5 if self.flags.ms_gem else self.encoder.c5


@dataclass
class Forward:
    f4: Tensor
    f5: Tensor
    attention: Tensor
    descriptor: Tensor
    logits: Optional[Tensor] = None
    decoder_features: Optional[Tensor] = None


class VPRModel:
    """Holds every trainable tensor, grouped into the main model and the discriminator."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        # init order is fixed so a seed maps to one set of weights
        self.encoder = Encoder(cfg.encoder, rng)
        self.attention = AttentionModule(cfg.encoder.c4, rng, cfg.bank_channels, cfg.bank_kernels)
        self.decoder = SegDecoder(cfg.encoder.c4, rng, cfg.num_classes, cfg.decoder_width, cfg.decoder_init_std)
        self.discriminator = Discriminator(cfg.num_classes, rng, cfg.disc_channels)
        if cfg.learn_p:
            self.p4: object = Tensor(cfg.p4, requires_grad=True, name="p4")
            self.p5: object = Tensor(cfg.p5, requires_grad=True, name="p5")
        else:
            self.p4, self.p5 = float(cfg.p4), float(cfg.p5)

    @property
    def flags(self) -> Flags:
        return self.cfg.flags

    # -- parameters ------------------------------------------------------------
    def main_parameters(self) -> Dict[str, Tensor]:
        params = {}
        for prefix, block in (("encoder.", self.encoder), ("attention.", self.attention),
                              ("decoder.", self.decoder)):
            params.update(block.named_parameters(prefix))
        if self.cfg.learn_p:
            params["pooling.p4"] = self.p4
            params["pooling.p5"] = self.p5
        return params

    def discriminator_parameters(self) -> Dict[str, Tensor]:
        return dict(self.discriminator.named_parameters("discriminator."))

    def parameters(self) -> Dict[str, Tensor]:
        out = self.main_parameters()
        out.update(self.discriminator_parameters())
        return out

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in sorted(self.parameters().items())}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, t in params.items():
            if t.data.shape != state[k].shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {t.data.shape}")
            t.data = np.array(state[k], dtype=np.float64)

    def save(self, path) -> None:
        save_checkpoint(path, self.state_dict())

    def load(self, path) -> None:
        self.load_state_dict(load_checkpoint(path))

    # -- forward ------------------------------------------------------------------
    def attention_map(self, f4: Tensor) -> Tensor:
        if self.flags.att:
            return self.attention(f4)
        return Tensor(np.ones(f4.shape[:-3] + (1,) + f4.shape[-2:]))

    def describe_features(self, f4: Tensor, f5: Tensor, M: Tensor) -> Tensor:
        return ms_gem(f4, f5, M, self.p4, self.p5, norm=self.cfg.norm, multiscale=self.flags.ms_gem)

    def forward(self, images, with_segmentation: bool = False) -> Forward:
        """Run the shared encoder and heads on a C x H x W image or N x C x H x W batch."""
        f4, f5 = self.encoder(T.as_tensor(images))
        M = self.attention_map(f4)
        desc = self.describe_features(f4, f5, M)
        out = Forward(f4, f5, M, desc)
        if with_segmentation:
            out.logits, out.decoder_features = self.segment(f4, M)
        return out

    def segment(self, f4: Tensor, M: Tensor) -> Tuple[Tensor, Tensor]:
        """Decoder logits with the attention map detached, so only the
        retrieval loss trains the attention module."""
        guide = M.detach() if self.flags.g_semseg else None
        return segment(f4, guide, self.decoder, guided=self.flags.g_semseg, return_features=True)

    def domain_scores(self, logits: Tensor) -> Tensor:
        """Discriminator scores for segmentation outputs (softmax, resized to ``disc_size``)."""
        probs = T.softmax(logits, axis=-3)
        h, w = logits.shape[-2:]
        size = (max(h, self.cfg.disc_size), max(w, self.cfg.disc_size))
        return self.discriminator(T.upsample_nearest(probs, size))

    def describe(self, images: np.ndarray, batch: int = 64) -> np.ndarray:
        """Descriptors for a stack of images, without recording a graph."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        out = []
        with no_grad():
            for i in range(0, len(images), batch):
                out.append(self.forward(images[i:i + batch]).descriptor.data)
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.cfg.descriptor_dim))

    def attention_maps(self, images: np.ndarray, batch: int = 64) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        out = []
        with no_grad():
            for i in range(0, len(images), batch):
                f4, _ = self.encoder(Tensor(images[i:i + batch]))
                out.append(self.attention_map(f4).data[:, 0])
        return np.concatenate(out, axis=0)
