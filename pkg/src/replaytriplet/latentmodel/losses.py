"""Objectives for the VAE family and its triplet-augmented variants.

All functions take torch tensors with a trailing latent (or image) axis and
broadcast over any leading batch axes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from enum import Enum

import torch
import torch.nn.functional as F

from .networks import EncoderDecoder, LatentDistribution

__all__ = [
    "ModelKind",
    "LatentDistance",
    "LossConfig",
    "reparameterise",
    "kl_regulariser",
    "kl_between",
    "reconstruction_loss",
    "latent_distance",
    "ada_shared_mask",
    "ada_gvae_average",
    "triplet_loss",
    "ada_triplet_loss",
    "beta_vae_loss",
    "ada_gvae_loss",
    "total_loss",
    "compute_loss",
]


class ModelKind(str, Enum):
    VAE = "VAE"
    BETA_VAE = "BetaVAE"
    ADA_GVAE = "AdaGVAE"
    BETA_TVAE = "BetaTVAE"
    ADA_TVAE = "AdaTVAE"

    @property
    def batch_arity(self) -> int:
        """Observations per training example: singles, pairs or triplets."""
        return {"VAE": 1, "BetaVAE": 1, "AdaGVAE": 2, "BetaTVAE": 3, "AdaTVAE": 3}[self.value]


class LatentDistance(str, Enum):
    L1 = "L1"
    L2 = "L2"


@dataclass
class LossConfig:
    model_kind: ModelKind = ModelKind.BETA_VAE
    beta: float = 4.0
    alpha: float = 1.0
    latent_dim: int = 9
    shared_weight: float = 0.5
    latent_distance: LatentDistance = LatentDistance.L1

    def __post_init__(self):
        self.model_kind = ModelKind(self.model_kind)
        self.latent_distance = LatentDistance(self.latent_distance)
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.latent_dim < 1:
            raise ValueError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if not 0.0 <= self.shared_weight <= 1.0:
            raise ValueError(f"shared_weight must lie in [0, 1], got {self.shared_weight}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model_kind"] = self.model_kind.value
        d["latent_distance"] = self.latent_distance.value
        return d


def reparameterise(dist: LatentDistribution, noise: torch.Tensor) -> torch.Tensor:
    """``z = mu + sigma * eps``."""
    if noise.shape[-1] != dist.means.shape[-1]:
        raise ValueError(f"noise length {noise.shape[-1]} != latent_dim {dist.means.shape[-1]}")
    return dist.means + dist.stds * noise


def kl_regulariser(dist: LatentDistribution) -> torch.Tensor:
    """Closed-form KL to the standard normal prior, summed over latent dims."""
    mu, std = dist
    return 0.5 * (mu.pow(2) + std.pow(2) - 1.0 - torch.log(std.pow(2))).sum(-1)


def kl_between(p: LatentDistribution, q: LatentDistribution) -> torch.Tensor:
    """Per-dimension ``KL(p || q)`` between diagonal Gaussians (not summed)."""
    var_p, var_q = p.stds.pow(2), q.stds.pow(2)
    return 0.5 * (var_p / var_q + (q.means - p.means).pow(2) / var_q - 1.0 + torch.log(var_q / var_p))


def reconstruction_loss(reconstruction: torch.Tensor, observation: torch.Tensor) -> torch.Tensor:
    """Squared error summed over the trailing three (image) axes."""
    if reconstruction.shape != observation.shape:
        raise ValueError(f"shape mismatch {tuple(reconstruction.shape)} vs {tuple(observation.shape)}")
    return (reconstruction - observation).pow(2).sum(dim=(-3, -2, -1))


def latent_distance(a: torch.Tensor, b: torch.Tensor, kind=LatentDistance.L1) -> torch.Tensor:
    diff = a - b
    if LatentDistance(kind) is LatentDistance.L1:
        return diff.abs().sum(-1)
    return diff.pow(2).sum(-1).sqrt()


def ada_shared_mask(delta: torch.Tensor) -> torch.Tensor:
    """True where ``delta`` is strictly below the midpoint of its min and max.

    An all-equal ``delta`` gives an all-False mask.
    """
    if delta.shape[-1] < 2:
        raise ValueError("need at least two latent dimensions")
    lo = delta.min(-1, keepdim=True).values
    hi = delta.max(-1, keepdim=True).values
    return delta < 0.5 * (lo + hi)


def ada_gvae_average(
    dist_a: LatentDistribution, dist_b: LatentDistribution, mask: torch.Tensor
) -> tuple[LatentDistribution, LatentDistribution]:
    """Replace shared dims of both posteriors by their averaged Gaussian."""
    if dist_a.means.shape != dist_b.means.shape:
        raise ValueError("posteriors have different shapes")
    mu = 0.5 * (dist_a.means + dist_b.means)
    std = torch.sqrt(0.5 * (dist_a.stds.pow(2) + dist_b.stds.pow(2)))
    out_a = LatentDistribution(torch.where(mask, mu, dist_a.means), torch.where(mask, std, dist_a.stds))
    out_b = LatentDistribution(torch.where(mask, mu, dist_b.means), torch.where(mask, std, dist_b.stds))
    return out_a, out_b


def triplet_loss(z_a, z_p, z_n, cfg: LossConfig) -> torch.Tensor:
    """Soft-margin triplet loss ``ln(1 + exp(d(a, p) - d(a, n)))``."""
    d_ap = latent_distance(z_a, z_p, cfg.latent_distance)
    d_an = latent_distance(z_a, z_n, cfg.latent_distance)
    return F.softplus(d_ap - d_an)


def ada_triplet_loss(z_a, z_p, z_n, cfg: LossConfig) -> torch.Tensor:
    """Triplet loss with shared anchor-negative units down-weighted.

    Units whose anchor-negative gap falls under the min/max midpoint get weight
    ``cfg.shared_weight`` inside the anchor-negative distance only.
    """
    with torch.no_grad():
        mask = ada_shared_mask((z_a - z_n).abs())
    w = torch.where(mask, torch.full_like(z_a, cfg.shared_weight), torch.ones_like(z_a))
    d_ap = latent_distance(z_a, z_p, cfg.latent_distance)
    d_an = latent_distance(w * z_a, w * z_n, cfg.latent_distance)
    return F.softplus(d_ap - d_an)


def _sample(dist: LatentDistribution, generator: torch.Generator | None) -> torch.Tensor:
    eps = torch.randn(dist.means.shape, generator=generator, dtype=dist.means.dtype)
    return reparameterise(dist, eps)


def _vae_terms(model, x, dist, beta, generator):
    recon = model.decode(_sample(dist, generator))
    rec = reconstruction_loss(recon, x)
    kl = kl_regulariser(dist)
    return rec + beta * kl, rec, kl


def beta_vae_loss(
    model: EncoderDecoder, batch: torch.Tensor, cfg: LossConfig, generator: torch.Generator | None = None
) -> tuple[torch.Tensor, dict]:
    """Batch mean of ``reconstruction + beta * KL`` for ``(N, C, H, W)`` inputs.

    ``ModelKind.VAE`` always uses ``beta = 1``.
    """
    beta = 1.0 if cfg.model_kind is ModelKind.VAE else cfg.beta
    dist = model.encode(batch)
    per, rec, kl = _vae_terms(model, batch, dist, beta, generator)
    return per.mean(), {"loss": per.mean().item(), "recon": rec.mean().item(), "kl": kl.mean().item()}


def ada_gvae_loss(
    model: EncoderDecoder,
    batch_a: torch.Tensor,
    batch_b: torch.Tensor,
    cfg: LossConfig,
    generator: torch.Generator | None = None,
) -> tuple[torch.Tensor, dict]:
    """Pair loss: dims with small posterior KL are averaged across the pair."""
    dist_a, dist_b = model.encode(batch_a), model.encode(batch_b)
    with torch.no_grad():
        mask = ada_shared_mask(kl_between(dist_a, dist_b))
    avg_a, avg_b = ada_gvae_average(dist_a, dist_b, mask)
    per_a, rec_a, kl_a = _vae_terms(model, batch_a, avg_a, cfg.beta, generator)
    per_b, rec_b, kl_b = _vae_terms(model, batch_b, avg_b, cfg.beta, generator)
    loss = 0.5 * (per_a + per_b).mean()
    return loss, {
        "loss": loss.item(),
        "recon": 0.5 * (rec_a + rec_b).mean().item(),
        "kl": 0.5 * (kl_a + kl_b).mean().item(),
        "shared": mask.float().sum(-1).mean().item(),
    }


def total_loss(
    model: EncoderDecoder,
    triplet_batch: tuple[torch.Tensor, torch.Tensor, torch.Tensor],
    cfg: LossConfig,
    generator: torch.Generator | None = None,
) -> tuple[torch.Tensor, dict]:
    """``alpha * triplet(means) + mean of the three per-observation beta-VAE losses``."""
    if cfg.model_kind not in (ModelKind.BETA_TVAE, ModelKind.ADA_TVAE):
        raise ValueError(f"total_loss needs a triplet model kind, got {cfg.model_kind}")
    xa, xp, xn = triplet_batch
    n = xa.shape[0]
    # one forward pass over the stacked triplet keeps the three branches weight-tied
    x = torch.cat([xa, xp, xn], 0)
    dist = model.encode(x)
    per, rec, kl = _vae_terms(model, x, dist, cfg.beta, generator)
    vae = per.view(3, n).mean(0)
    mu_a, mu_p, mu_n = dist.means.split(n, 0)
    trip_fn = ada_triplet_loss if cfg.model_kind is ModelKind.ADA_TVAE else triplet_loss
    trip = trip_fn(mu_a, mu_p, mu_n, cfg)
    loss = (cfg.alpha * trip + vae).mean()
    return loss, {
        "loss": loss.item(),
        "recon": rec.mean().item(),
        "kl": kl.mean().item(),
        "triplet": trip.mean().item(),
    }


def compute_loss(model, batch, cfg: LossConfig, generator=None) -> tuple[torch.Tensor, dict]:
    """Dispatch on ``cfg.model_kind``; ``batch`` is a tuple of ``batch_arity`` tensors."""
    kind = cfg.model_kind
    if kind.batch_arity == 1:
        return beta_vae_loss(model, batch[0], cfg, generator)
    if kind is ModelKind.ADA_GVAE:
        return ada_gvae_loss(model, batch[0], batch[1], cfg, generator)
    return total_loss(model, tuple(batch), cfg, generator)
