"""Seeded optimisation loop over batches drawn from a replay buffer."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..buffer import (
    ReplayBuffer,
    SamplerConfig,
    SamplerMode,
    sample_ground_truth_triplets,
    sample_pairs,
    sample_temporal_triplets,
    sample_uniform,
)
from ..gridworld import GridSpec, enumerate_state_array, render_batch
from .losses import LossConfig, ModelKind, compute_loss
from .networks import EncoderDecoder, observations_to_tensor

log = logging.getLogger(__name__)

__all__ = [
    "ModelConfig",
    "TrainConfig",
    "TrainResult",
    "TrainingDivergedError",
    "build_model",
    "batch_sampler",
    "train",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    conv_channels: tuple[int, ...] = (32, 32, 64, 64)
    hidden_dim: int = 256

    def __post_init__(self):
        self.conv_channels = tuple(int(c) for c in self.conv_channels)

    def to_dict(self) -> dict:
        return {"conv_channels": list(self.conv_channels), "hidden_dim": self.hidden_dim}


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 64
    learning_rate: float = 1e-3
    checkpoint_interval: int = 0
    log_interval: int = 100

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: EncoderDecoder
    loss_curve: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)

    def write_curve(self, path) -> None:
        _write_curve(self.loss_curve, path)


def build_model(spec: GridSpec, latent_dim: int, model_cfg: ModelConfig | None = None, seed: int = 0):
    model_cfg = model_cfg or ModelConfig()
    torch.manual_seed(seed)
    return EncoderDecoder(
        image_side=spec.image_side_px,
        in_channels=spec.channels,
        latent_dim=latent_dim,
        conv_channels=model_cfg.conv_channels,
        hidden_dim=model_cfg.hidden_dim,
    )


class _Renderer:
    """Renders buffer indices, caching the whole image table for small state spaces."""

    def __init__(self, buffer: ReplayBuffer, cache_limit: int = 4096):
        self.buffer = buffer
        spec = buffer.spec
        self.table = None
        if spec.num_states <= cache_limit:
            self.table = render_batch(enumerate_state_array(spec), spec)
            k = spec.grid_cells_per_axis
            weights = k ** np.arange(spec.num_factors - 1, -1, -1)
            self.state_ids = buffer.factors @ weights

    def __call__(self, idx: np.ndarray) -> torch.Tensor:
        if self.table is not None:
            imgs = self.table[self.state_ids[idx]]
        else:
            imgs = render_batch(self.buffer.states[idx], self.buffer.spec)
        return observations_to_tensor(imgs)


def batch_sampler(buffer: ReplayBuffer, loss_cfg: LossConfig, sampler_cfg: SamplerConfig):
    """Return ``draw(n, rng) -> (arity, n)`` index array for the model kind."""
    kind = loss_cfg.model_kind
    mode = sampler_cfg.mode
    if kind.batch_arity == 1:
        return lambda n, rng: sample_uniform(buffer, n, rng)[None]
    if kind is ModelKind.ADA_GVAE:
        if mode is SamplerMode.GROUND_TRUTH:
            raise ValueError("ground-truth supervision is defined for triplet models only")
        return lambda n, rng: sample_pairs(buffer, sampler_cfg, n, rng).T
    if mode is SamplerMode.TEMPORAL:
        return lambda n, rng: sample_temporal_triplets(buffer, sampler_cfg, n, rng).T
    if mode is SamplerMode.GROUND_TRUTH:
        return lambda n, rng: sample_ground_truth_triplets(buffer, n, rng).T
    raise ValueError(f"sampler mode {mode.value} cannot produce triplets")


def train(
    model: EncoderDecoder,
    buffer: ReplayBuffer,
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
    sampler_cfg: SamplerConfig | None = None,
    seed: int = 0,
    checkpoint_dir=None,
    run_config: dict | None = None,
) -> TrainResult:
    """Optimise ``model`` in place with Adam.

    Raises :class:`TrainingDivergedError` on a non-finite loss.
    """
    sampler_cfg = sampler_cfg or SamplerConfig()
    draw = batch_sampler(buffer, loss_cfg, sampler_cfg)
    render = _Renderer(buffer)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.learning_rate)
    result = TrainResult(model)
    model.train()
    for it in range(1, train_cfg.steps + 1):
        idx = draw(train_cfg.batch_size, rng)
        batch = tuple(render(i) for i in idx)
        loss, diag = compute_loss(model, batch, loss_cfg, gen)
        if not math.isfinite(diag["loss"]):
            raise TrainingDivergedError(f"non-finite loss at step {it}: {diag}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        result.loss_curve.append({"step": it, **diag})
        if train_cfg.log_interval and it % train_cfg.log_interval == 0:
            log.info("step %d %s", it, " ".join(f"{k}={v:.4g}" for k, v in diag.items()))
        if checkpoint_dir is not None and train_cfg.checkpoint_interval and it % train_cfg.checkpoint_interval == 0:
            path = Path(checkpoint_dir) / f"step{it:07d}.ckpt"
            save_checkpoint(path, model, step=it, config=run_config, loss_curve=result.loss_curve)
            result.checkpoints.append(path)
    model.eval()
    return result


def _write_curve(curve: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = sorted({k for row in curve for k in row} - {"step"})
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", *keys])
        for row in curve:
            w.writerow([row["step"], *(repr(float(row[k])) if k in row else "" for k in keys)])


def save_checkpoint(path, model: EncoderDecoder, step: int, config: dict | None = None, loss_curve=None) -> Path:
    """Write a checkpoint plus a ``.loss.csv`` sidecar holding the loss curve."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "hparams": model.hparams(),
            "config": config or {},
            "step": step,
            "state_dict": model.state_dict(),
        },
        path,
    )
    if loss_curve is not None:
        _write_curve(loss_curve, path.with_suffix(".loss.csv"))
    return path


def load_checkpoint(path) -> tuple[EncoderDecoder, dict]:
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    if blob.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('format_version')}")
    model = EncoderDecoder(**blob["hparams"])
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob
