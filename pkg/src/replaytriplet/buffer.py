"""Random-walk replay buffer and the pair/triplet samplers that feed training.

The buffer holds factor states only; pixels are rendered when a batch is built.
Temporal samplers never cross episode boundaries.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .gridworld import FactorState, GridAction, GridSpec, action_from_index, step_array

__all__ = [
    "SamplingError",
    "SamplerMode",
    "SamplerConfig",
    "Transition",
    "TripletIndices",
    "ReplayBuffer",
    "collect_random_walk",
    "sample_temporal_triplet",
    "sample_temporal_triplets",
    "sample_ground_truth_triplet",
    "sample_ground_truth_triplets",
    "sample_pair",
    "sample_pairs",
    "sample_uniform",
]

MAGIC = b"RTBUF"
FORMAT_VERSION = 1
STEP_REWARD = -1.0


class SamplingError(RuntimeError):
    pass


class SamplerMode(str, Enum):
    TEMPORAL = "temporal"
    GROUND_TRUTH = "ground_truth"
    UNIFORM_PAIR = "uniform_pair"


@dataclass
class SamplerConfig:
    max_positive_offset: int = 8
    max_negative_offset: int = 32
    mode: SamplerMode = SamplerMode.TEMPORAL

    def __post_init__(self):
        self.mode = SamplerMode(self.mode)
        if not 1 <= self.max_positive_offset < self.max_negative_offset:
            raise ValueError(
                "need 1 <= max_positive_offset < max_negative_offset, got "
                f"{self.max_positive_offset}, {self.max_negative_offset}"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d


class Transition(NamedTuple):
    state: FactorState
    action: GridAction
    reward: float
    next_state: FactorState
    episode_id: int
    step_index: int


class TripletIndices(NamedTuple):
    anchor: int
    positive: int
    negative: int


class ReplayBuffer:
    """Append-only columnar store of transitions.

    ``states`` and ``next_states`` are ``(N, num_squares, 2)`` cell arrays.
    """

    def __init__(self, spec: GridSpec, states, actions, rewards, next_states, episode_ids, step_indices):
        self.spec = spec
        self.states = np.asarray(states, dtype=np.int64)
        self.actions = np.asarray(actions, dtype=np.int64)
        self.rewards = np.asarray(rewards, dtype=np.float64)
        self.next_states = np.asarray(next_states, dtype=np.int64)
        self.episode_ids = np.asarray(episode_ids, dtype=np.int64)
        self.step_indices = np.asarray(step_indices, dtype=np.int64)
        n = len(self.actions)
        for name in ("states", "rewards", "next_states", "episode_ids", "step_indices"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name} has inconsistent length")
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("rewards must be finite")
        self._episode_end = None

    def __len__(self) -> int:
        return len(self.actions)

    def __getitem__(self, i: int) -> Transition:
        return Transition(
            FactorState.from_array(self.states[i]),
            action_from_index(self.actions[i]),
            float(self.rewards[i]),
            FactorState.from_array(self.next_states[i]),
            int(self.episode_ids[i]),
            int(self.step_indices[i]),
        )

    @property
    def factors(self) -> np.ndarray:
        """``(N, num_factors)`` ground-truth factor matrix of the stored states."""
        return self.states.reshape(len(self), -1)

    @property
    def steps_remaining(self) -> np.ndarray:
        """For each index, how many later transitions share its episode."""
        if self._episode_end is None:
            n = len(self)
            end = np.empty(n, dtype=np.int64)
            # episodes are stored contiguously
            boundaries = np.flatnonzero(np.diff(self.episode_ids)) + 1
            starts = np.concatenate([[0], boundaries])
            stops = np.concatenate([boundaries, [n]])
            for s, e in zip(starts, stops):
                end[s:e] = e - 1
            self._episode_end = end
        return self._episode_end - np.arange(len(self))

    # -- persistence -----------------------------------------------------

    def save(self, path) -> None:
        header = json.dumps({"spec": self.spec.to_dict(), "count": len(self)}).encode()
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<HI", FORMAT_VERSION, len(header)))
        buf.write(header)
        s = self.spec.num_squares
        rec = np.zeros(
            len(self),
            dtype=[
                ("state", "<i2", (s, 2)),
                ("action", "<i2"),
                ("reward", "<f8"),
                ("next_state", "<i2", (s, 2)),
                ("episode", "<i8"),
                ("step", "<i8"),
            ],
        )
        rec["state"], rec["action"], rec["reward"] = self.states, self.actions, self.rewards
        rec["next_state"], rec["episode"], rec["step"] = self.next_states, self.episode_ids, self.step_indices
        buf.write(rec.tobytes())
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path) -> "ReplayBuffer":
        raw = Path(path).read_bytes()
        if raw[: len(MAGIC)] != MAGIC:
            raise ValueError(f"{path} is not a replay buffer file")
        off = len(MAGIC)
        version, hlen = struct.unpack_from("<HI", raw, off)
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported buffer format version {version}")
        off += struct.calcsize("<HI")
        header = json.loads(raw[off:off + hlen])
        off += hlen
        spec = GridSpec.from_dict(header["spec"])
        s = spec.num_squares
        dtype = np.dtype(
            [
                ("state", "<i2", (s, 2)),
                ("action", "<i2"),
                ("reward", "<f8"),
                ("next_state", "<i2", (s, 2)),
                ("episode", "<i8"),
                ("step", "<i8"),
            ]
        )
        rec = np.frombuffer(raw, dtype=dtype, count=header["count"], offset=off)
        return cls(spec, rec["state"], rec["action"], rec["reward"], rec["next_state"], rec["episode"], rec["step"])


def collect_random_walk(
    spec: GridSpec,
    episodes: int,
    steps_per_episode: int,
    seed: int,
    start: FactorState | str = "uniform",
) -> ReplayBuffer:
    """Roll out a uniformly random policy.

    ``start="uniform"`` draws each episode's first state uniformly; since walls
    clamp moves, the walk then stays uniform over states at every step.
    """
    if episodes < 1 or steps_per_episode < 1:
        raise ValueError("episodes and steps_per_episode must be positive")
    rng = np.random.default_rng(seed)
    k, s = spec.grid_cells_per_axis, spec.num_squares
    if isinstance(start, FactorState):
        start.validate(spec)
        pos = np.broadcast_to(start.as_array(), (episodes, s, 2)).copy()
    elif start == "uniform":
        pos = rng.integers(0, k, size=(episodes, s, 2))
    else:
        raise ValueError(f"unknown start {start!r}")
    actions = rng.integers(0, spec.num_actions, size=(episodes, steps_per_episode))
    states = np.empty((episodes, steps_per_episode, s, 2), dtype=np.int64)
    nexts = np.empty_like(states)
    for t in range(steps_per_episode):
        states[:, t] = pos
        pos = step_array(pos, actions[:, t], spec)
        nexts[:, t] = pos
    n = episodes * steps_per_episode
    return ReplayBuffer(
        spec,
        states.reshape(n, s, 2),
        actions.reshape(n),
        np.full(n, STEP_REWARD),
        nexts.reshape(n, s, 2),
        np.repeat(np.arange(episodes), steps_per_episode),
        np.tile(np.arange(steps_per_episode), episodes),
    )


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_uniform(buffer: ReplayBuffer, n: int, seed) -> np.ndarray:
    return _rng(seed).integers(0, len(buffer), size=n)


def sample_temporal_triplets(buffer: ReplayBuffer, cfg: SamplerConfig, n: int, seed) -> np.ndarray:
    """``(n, 3)`` anchor/positive/negative indices ordered in time within one episode."""
    rng = _rng(seed)
    eligible = np.flatnonzero(buffer.steps_remaining >= cfg.max_negative_offset)
    if eligible.size == 0:
        raise SamplingError(f"no episode longer than max_negative_offset={cfg.max_negative_offset}")
    a = eligible[rng.integers(0, eligible.size, size=n)]
    p_off = rng.integers(1, cfg.max_positive_offset + 1, size=n)
    n_off = rng.integers(p_off + 1, cfg.max_negative_offset + 1)
    return np.stack([a, a + p_off, a + n_off], axis=1)


def sample_temporal_triplet(buffer: ReplayBuffer, cfg: SamplerConfig, seed) -> TripletIndices:
    return TripletIndices(*map(int, sample_temporal_triplets(buffer, cfg, 1, seed)[0]))


def sample_ground_truth_triplets(buffer: ReplayBuffer, n: int, seed, max_rounds: int = 100) -> np.ndarray:
    """Triplets whose anchor-positive factor L1 distance is strictly the smaller one.

    Three distinct indices are drawn; the first is the anchor and the nearer of
    the other two becomes the positive. Ties are redrawn.
    """
    rng = _rng(seed)
    if len(buffer) < 3:
        raise SamplingError("need at least three transitions")
    y = buffer.factors
    out = []
    have = 0
    for _ in range(max_rounds):
        m = max(2 * (n - have), 16)
        idx = _distinct_triples(rng, len(buffer), m)
        d1 = np.abs(y[idx[:, 0]] - y[idx[:, 1]]).sum(1)
        d2 = np.abs(y[idx[:, 0]] - y[idx[:, 2]]).sum(1)
        keep = d1 != d2
        idx, d1, d2 = idx[keep], d1[keep], d2[keep]
        swap = d2 < d1
        idx[swap, 1:] = idx[swap][:, ::-1][:, :2]
        out.append(idx)
        have += len(idx)
        if have >= n:
            return np.concatenate(out)[:n]
    raise SamplingError(f"could not draw {n} untied triplets in {max_rounds} rounds")


def _distinct_triples(rng: np.random.Generator, size: int, m: int) -> np.ndarray:
    idx = rng.integers(0, size, size=(m, 3))
    ok = (idx[:, 0] != idx[:, 1]) & (idx[:, 0] != idx[:, 2]) & (idx[:, 1] != idx[:, 2])
    return idx[ok]


def sample_ground_truth_triplet(buffer: ReplayBuffer, seed) -> TripletIndices:
    return TripletIndices(*map(int, sample_ground_truth_triplets(buffer, 1, seed)[0]))


def sample_pairs(buffer: ReplayBuffer, cfg: SamplerConfig, n: int, seed) -> np.ndarray:
    """``(n, 2)`` index pairs from one episode, at most ``max_positive_offset`` apart.

    ``UNIFORM_PAIR`` mode ignores episodes and draws two independent indices.
    """
    rng = _rng(seed)
    if len(buffer) < 2:
        raise SamplingError("need at least two transitions")
    if cfg.mode is SamplerMode.UNIFORM_PAIR:
        return rng.integers(0, len(buffer), size=(n, 2))
    remaining = buffer.steps_remaining
    eligible = np.flatnonzero(remaining >= 1)
    if eligible.size == 0:
        raise SamplingError("every episode has length 1")
    a = eligible[rng.integers(0, eligible.size, size=n)]
    hi = np.minimum(remaining[a], cfg.max_positive_offset)
    off = rng.integers(1, hi + 1)
    return np.stack([a, a + off], axis=1)


def sample_pair(buffer: ReplayBuffer, cfg: SamplerConfig, seed) -> tuple[int, int]:
    a, b = sample_pairs(buffer, cfg, 1, seed)[0]
    return int(a), int(b)
