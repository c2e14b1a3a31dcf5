"""Convolutional Gaussian encoder and mirrored decoder."""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np
import torch
from torch import nn

__all__ = ["LatentDistribution", "EncoderDecoder", "encode", "observations_to_tensor"]


class LatentDistribution(NamedTuple):
    """Diagonal Gaussian posterior, ``means`` and ``stds`` share shape ``(..., latent_dim)``."""

    means: torch.Tensor
    stds: torch.Tensor


def observations_to_tensor(obs, dtype=torch.float32) -> torch.Tensor:
    """``(N, H, W, C)`` or ``(H, W, C)`` images to an ``(N, C, H, W)`` tensor."""
    t = torch.as_tensor(np.asarray(obs), dtype=dtype)
    if t.ndim == 3:
        t = t.unsqueeze(0)
    return t.permute(0, 3, 1, 2).contiguous()


class EncoderDecoder(nn.Module):
    """Stride-2 conv encoder to a dense Gaussian head, with a transposed-conv decoder.

    Each conv stage halves the image side, so ``image_side`` must be divisible
    by ``2 ** len(conv_channels)``.
    """

    def __init__(
        self,
        image_side: int = 64,
        in_channels: int = 1,
        latent_dim: int = 9,
        conv_channels: Sequence[int] = (32, 32, 64, 64),
        hidden_dim: int = 256,
    ):
        super().__init__()
        n = len(conv_channels)
        if n < 1 or image_side % (2 ** n) or image_side // (2 ** n) < 1:
            raise ValueError(f"image_side={image_side} incompatible with {n} stride-2 stages")
        self.image_side = image_side
        self.in_channels = in_channels
        self.latent_dim = latent_dim
        self.conv_channels = tuple(conv_channels)
        self.hidden_dim = hidden_dim
        self._feat_side = image_side // (2 ** n)
        feat = conv_channels[-1] * self._feat_side ** 2

        enc, prev = [], in_channels
        for c in conv_channels:
            enc += [nn.Conv2d(prev, c, 4, stride=2, padding=1), nn.ReLU()]
            prev = c
        self.encoder_conv = nn.Sequential(*enc, nn.Flatten(), nn.Linear(feat, hidden_dim), nn.ReLU())
        self.mean_head = nn.Linear(hidden_dim, latent_dim)
        self.log_std_head = nn.Linear(hidden_dim, latent_dim)
        nn.init.zeros_(self.log_std_head.weight)
        nn.init.zeros_(self.log_std_head.bias)

        self.decoder_dense = nn.Sequential(
            nn.Linear(latent_dim, hidden_dim), nn.ReLU(), nn.Linear(hidden_dim, feat), nn.ReLU()
        )
        dec = []
        rev = list(conv_channels[::-1]) + [in_channels]
        for i, (a, b) in enumerate(zip(rev[:-1], rev[1:])):
            dec.append(nn.ConvTranspose2d(a, b, 4, stride=2, padding=1))
            if i < len(rev) - 2:
                dec.append(nn.ReLU())
        self.decoder_conv = nn.Sequential(*dec)

    @property
    def obs_shape(self) -> tuple[int, int, int]:
        return (self.image_side, self.image_side, self.in_channels)

    def hparams(self) -> dict:
        return {
            "image_side": self.image_side,
            "in_channels": self.in_channels,
            "latent_dim": self.latent_dim,
            "conv_channels": list(self.conv_channels),
            "hidden_dim": self.hidden_dim,
        }

    def encode(self, x: torch.Tensor) -> LatentDistribution:
        """``x`` is ``(N, C, H, W)``."""
        expected = (self.in_channels, self.image_side, self.image_side)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ValueError(f"expected input of shape (N, {expected}), got {tuple(x.shape)}")
        h = self.encoder_conv(x)
        return LatentDistribution(self.mean_head(h), torch.exp(self.log_std_head(h)))

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        h = self.decoder_dense(z)
        h = h.view(-1, self.conv_channels[-1], self._feat_side, self._feat_side)
        return torch.sigmoid(self.decoder_conv(h))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(x).means)


@torch.no_grad()
def encode(model: EncoderDecoder, observation) -> LatentDistribution:
    """Encode ``(H, W, C)`` or ``(N, H, W, C)`` numpy images without tracking gradients."""
    obs = np.asarray(observation)
    single = obs.ndim == 3
    if tuple(obs.shape[-3:]) != model.obs_shape:
        raise ValueError(f"observation shape {obs.shape} does not match model {model.obs_shape}")
    dtype = next(model.parameters()).dtype
    dist = model.encode(observations_to_tensor(obs, dtype=dtype))
    if single:
        return LatentDistribution(dist.means[0], dist.stds[0])
    return dist
