"""Deep Q-learning on frozen encoder features for the corner-reaching task."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch
from torch import nn

from .gridworld import FactorState, GridSpec, enumerate_state_array, render_batch, step_array

log = logging.getLogger(__name__)

__all__ = [
    "RlTask",
    "DqnConfig",
    "DqnResult",
    "QNetwork",
    "FeatureTable",
    "TrainingDivergedError",
    "corner_task",
    "extract_features",
    "parameter_hash",
    "dqn_train",
    "evaluate_policy",
    "random_policy",
]


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class RlTask:
    spec: GridSpec
    start: FactorState
    goal: FactorState
    step_reward: float = -1.0
    gamma: float = 0.99
    max_episode_steps: int = 100

    def __post_init__(self):
        self.start.validate(self.spec)
        self.goal.validate(self.spec)
        if self.start == self.goal:
            raise ValueError("start and goal coincide")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.max_episode_steps < 1:
            raise ValueError("max_episode_steps must be positive")


def corner_task(spec: GridSpec, gamma: float = 0.99, max_episode_steps: int = 100) -> RlTask:
    """Bottom-right to top-left for every square."""
    k = spec.grid_cells_per_axis - 1
    start = FactorState(((k, k),) * spec.num_squares)
    goal = FactorState(((0, 0),) * spec.num_squares)
    return RlTask(spec, start, goal, gamma=gamma, max_episode_steps=max_episode_steps)


@dataclass
class DqnConfig:
    episodes: int = 300
    hidden_dim: int = 64
    learning_rate: float = 1e-3
    batch_size: int = 32
    replay_size: int = 10_000
    learning_starts: int = 500
    target_sync: int = 200
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_fraction: float = 0.5
    standardise_features: bool = False
    grad_clip: float = 10.0

    def to_dict(self) -> dict:
        return asdict(self)


class QNetwork(nn.Module):
    def __init__(self, feature_dim: int, num_actions: int, hidden_dim: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(feature_dim, hidden_dim),
            nn.ReLU(),
            nn.Linear(hidden_dim, hidden_dim),
            nn.ReLU(),
            nn.Linear(hidden_dim, num_actions),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def parameter_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


Encoder = Callable[[np.ndarray], np.ndarray]


def _as_encoder(encoder) -> Encoder:
    if isinstance(encoder, nn.Module):
        from .metrics import as_representation

        return as_representation(encoder)
    return encoder


def extract_features(frozen_encoder, state: FactorState, spec: GridSpec) -> np.ndarray:
    """Posterior means of the rendered state; the encoder is only run under ``no_grad``."""
    state.validate(spec)
    enc = _as_encoder(frozen_encoder)
    return np.asarray(enc(render_batch(state.as_array()[None], spec)), dtype=np.float64)[0]


class FeatureTable:
    """Features of every state, keyed by flat state id.

    Small state spaces are encoded up front; larger ones lazily with a cache.
    """

    def __init__(self, frozen_encoder, spec: GridSpec, eager_limit: int = 4096):
        self.spec = spec
        self._enc = _as_encoder(frozen_encoder)
        k = spec.grid_cells_per_axis
        self._weights = k ** np.arange(spec.num_factors - 1, -1, -1)
        self._cache: dict[int, np.ndarray] = {}
        self.table = None
        if spec.num_states <= eager_limit:
            pos = enumerate_state_array(spec)
            self.table = np.asarray(self._enc(render_batch(pos, spec)), dtype=np.float64)
        self.mean, self.scale = 0.0, 1.0

    def ids(self, positions: np.ndarray) -> np.ndarray:
        return positions.reshape(len(positions), -1) @ self._weights

    def standardise(self) -> None:
        if self.table is None:
            return
        self.mean = self.table.mean(0)
        std = self.table.std(0)
        self.scale = np.where(std > 1e-8, std, 1.0)

    def __call__(self, positions: np.ndarray) -> np.ndarray:
        positions = np.asarray(positions, dtype=np.int64).reshape(-1, self.spec.num_squares, 2)
        if self.table is not None:
            raw = self.table[self.ids(positions)]
        else:
            ids = self.ids(positions)
            missing = [i for i in dict.fromkeys(ids.tolist()) if i not in self._cache]
            if missing:
                rows = np.flatnonzero(np.isin(ids, missing))
                _, first = np.unique(ids[rows], return_index=True)
                sel = rows[first]
                feats = np.asarray(self._enc(render_batch(positions[sel], self.spec)), dtype=np.float64)
                for i, f in zip(ids[sel].tolist(), feats):
                    self._cache[i] = f
            raw = np.stack([self._cache[i] for i in ids.tolist()])
        return (raw - self.mean) / self.scale


@dataclass
class DqnResult:
    returns: list[float]
    q_network: QNetwork
    features: FeatureTable
    losses: list[float] = field(default_factory=list)

    def policy(self) -> Callable[[FactorState], int]:
        q, feats = self.q_network, self.features

        @torch.no_grad()
        def act(state: FactorState) -> int:
            x = torch.as_tensor(feats(state.as_array()[None]), dtype=torch.float32)
            return int(q(x).argmax(1).item())

        return act


def _epsilon(cfg: DqnConfig, episode: int) -> float:
    horizon = max(cfg.eps_decay_fraction * cfg.episodes, 1.0)
    frac = min(episode / horizon, 1.0)
    return cfg.eps_start + frac * (cfg.eps_end - cfg.eps_start)


def dqn_train(task: RlTask, frozen_encoder, cfg: DqnConfig | None = None, seed: int = 0) -> DqnResult:
    """Train a Q-network on frozen features; returns per-episode training returns."""
    cfg = cfg or DqnConfig()
    spec = task.spec
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    feats = FeatureTable(frozen_encoder, spec)
    if cfg.standardise_features:
        feats.standardise()
    dim = feats(task.start.as_array()[None]).shape[1]
    q = QNetwork(dim, spec.num_actions, cfg.hidden_dim)
    target = QNetwork(dim, spec.num_actions, cfg.hidden_dim)
    target.load_state_dict(q.state_dict())
    opt = torch.optim.Adam(q.parameters(), lr=cfg.learning_rate)

    s_shape = (spec.num_squares, 2)
    mem_s = np.zeros((cfg.replay_size, *s_shape), dtype=np.int64)
    mem_a = np.zeros(cfg.replay_size, dtype=np.int64)
    mem_s2 = np.zeros_like(mem_s)
    mem_done = np.zeros(cfg.replay_size, dtype=np.float32)
    filled, ptr, total = 0, 0, 0
    goal = task.goal.as_array()
    returns, losses = [], []

    for ep in range(cfg.episodes):
        eps = _epsilon(cfg, ep)
        pos = task.start.as_array()
        ret = 0.0
        for _ in range(task.max_episode_steps):
            if rng.random() < eps:
                a = int(rng.integers(spec.num_actions))
            else:
                with torch.no_grad():
                    a = int(q(torch.as_tensor(feats(pos[None]), dtype=torch.float32)).argmax(1).item())
            nxt = step_array(pos[None], np.array([a]), spec)[0]
            done = bool(np.array_equal(nxt, goal))
            ret += task.step_reward
            mem_s[ptr], mem_a[ptr], mem_s2[ptr], mem_done[ptr] = pos, a, nxt, float(done)
            ptr = (ptr + 1) % cfg.replay_size
            filled = min(filled + 1, cfg.replay_size)
            total += 1
            pos = nxt

            if total >= cfg.learning_starts and filled >= cfg.batch_size:
                idx = rng.integers(0, filled, size=cfg.batch_size)
                x = torch.as_tensor(feats(mem_s[idx]), dtype=torch.float32)
                x2 = torch.as_tensor(feats(mem_s2[idx]), dtype=torch.float32)
                d = torch.as_tensor(mem_done[idx])
                with torch.no_grad():
                    y = task.step_reward + task.gamma * (1.0 - d) * target(x2).max(1).values
                pred = q(x).gather(1, torch.as_tensor(mem_a[idx])[:, None]).squeeze(1)
                loss = nn.functional.smooth_l1_loss(pred, y)
                if not math.isfinite(loss.item()):
                    raise TrainingDivergedError(f"non-finite TD loss at env step {total}")
                opt.zero_grad()
                loss.backward()
                nn.utils.clip_grad_norm_(q.parameters(), cfg.grad_clip)
                opt.step()
                losses.append(loss.item())
            if total % cfg.target_sync == 0:
                target.load_state_dict(q.state_dict())
            if done:
                break
        returns.append(ret)
        if (ep + 1) % 50 == 0:
            log.debug("episode %d return %.1f eps %.2f", ep + 1, ret, eps)
    q.eval()
    return DqnResult(returns, q, feats, losses)


def random_policy(spec: GridSpec, seed: int = 0) -> Callable[[FactorState], int]:
    rng = np.random.default_rng(seed)
    return lambda state: int(rng.integers(spec.num_actions))


def evaluate_policy(policy: Callable[[FactorState], int], task: RlTask, episodes: int, seed: int = 0):
    """Roll ``policy`` out from the task start; returns ``(mean, std, returns)``.

    ``seed`` only matters for stochastic policies that draw from it.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    del seed
    spec = task.spec
    goal = task.goal.as_array()
    rets = []
    for _ in range(episodes):
        pos = task.start.as_array()
        ret = 0.0
        for _ in range(task.max_episode_steps):
            a = policy(FactorState.from_array(pos))
            pos = step_array(pos[None], np.array([a]), spec)[0]
            ret += task.step_reward
            if np.array_equal(pos, goal):
                break
        rets.append(ret)
    rets = np.asarray(rets)
    return float(rets.mean()), float(rets.std()), rets
