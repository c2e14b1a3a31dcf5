"""Distances between states and representations, rank correlation and MIG.

A *representation* here is any callable mapping a batch of ``(N, H, W, C)``
observations to an ``(N, Z)`` array; :func:`as_representation` wraps a trained
model so that it returns posterior means.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .gridworld import FactorState, GridSpec, enumerate_state_array, render_batch

log = logging.getLogger(__name__)

__all__ = [
    "DistanceKind",
    "DistanceMatrix",
    "RankCorrelation",
    "MigReport",
    "as_representation",
    "ground_truth_distance",
    "perceived_distance",
    "traversal_states",
    "traversal_distance_matrix",
    "spearman",
    "distance_rank_correlation",
    "equal_frequency_discretize",
    "discrete_mutual_info",
    "discrete_entropy",
    "mig",
    "oracle_representation",
]

Representation = Callable[[np.ndarray], np.ndarray]


class DistanceKind(str, Enum):
    GROUND_TRUTH = "ground_truth"
    PERCEIVED = "perceived"
    LATENT = "latent"


@dataclass
class DistanceMatrix:
    values: np.ndarray
    labels: list[FactorState]

    def __post_init__(self):
        v = self.values
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError("distance matrix must be square")

    def off_diagonal(self) -> np.ndarray:
        iu = np.triu_indices(len(self.values), k=1)
        return self.values[iu]


@dataclass
class RankCorrelation:
    """Spearman correlation; ``value`` is None when either side is constant."""

    value: float | None
    n_pairs: int
    diagnostic: str | None = None

    @property
    def defined(self) -> bool:
        return self.value is not None


@dataclass
class MigReport:
    mig_score: float
    per_factor_gaps: np.ndarray
    mutual_info_matrix: np.ndarray  # factors x latents
    factor_entropy: np.ndarray
    excluded_factors: list[int]


def _as_factors(y) -> np.ndarray:
    if isinstance(y, FactorState):
        return y.factors()
    return np.asarray(y).reshape(-1)


def ground_truth_distance(y_a, y_b) -> float:
    """Manhattan distance between factor vectors (or :class:`FactorState` values)."""
    a, b = _as_factors(y_a), _as_factors(y_b)
    if a.shape != b.shape:
        raise ValueError(f"factor dimensionality mismatch {a.shape} vs {b.shape}")
    return float(np.abs(a - b).sum())


def perceived_distance(x_a, x_b) -> float:
    """Summed squared pixel difference, the reconstruction loss between two images."""
    a, b = np.asarray(x_a, dtype=np.float64), np.asarray(x_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(((a - b) ** 2).sum())


def as_representation(model, batch_size: int = 512) -> Representation:
    """Wrap an :class:`~replaytriplet.latentmodel.EncoderDecoder` as a means function."""
    import torch

    from .latentmodel.networks import observations_to_tensor

    dtype = next(model.parameters()).dtype

    @torch.no_grad()
    def rep(obs: np.ndarray) -> np.ndarray:
        out = []
        for lo in range(0, len(obs), batch_size):
            x = observations_to_tensor(obs[lo:lo + batch_size], dtype=dtype)
            out.append(model.encode(x).means.double().numpy())
        return np.concatenate(out) if out else np.zeros((0, model.latent_dim))

    return rep


def _latent_of(representation, positions: np.ndarray, spec: GridSpec, chunk: int = 2048) -> np.ndarray:
    parts = [
        np.asarray(representation(render_batch(positions[lo:lo + chunk], spec)), dtype=np.float64)
        for lo in range(0, len(positions), chunk)
    ]
    return np.concatenate(parts)


def _pairwise_l1(a: np.ndarray) -> np.ndarray:
    return np.abs(a[:, None, :] - a[None, :, :]).sum(-1)


def traversal_states(spec: GridSpec, factor_index: int, base: FactorState | None = None) -> np.ndarray:
    """Positions varying one factor over every cell while the others stay at ``base``."""
    if not 0 <= factor_index < spec.num_factors:
        raise ValueError(f"factor_index {factor_index} out of range for {spec.num_factors} factors")
    base_arr = np.zeros(spec.num_factors, dtype=np.int64) if base is None else base.factors()
    k = spec.grid_cells_per_axis
    flat = np.tile(base_arr, (k, 1))
    flat[:, factor_index] = np.arange(k)
    return flat.reshape(k, spec.num_squares, 2)


def traversal_distance_matrix(
    spec: GridSpec,
    factor_index: int,
    distance_kind: DistanceKind | str,
    representation: Representation | None = None,
    base: FactorState | None = None,
) -> DistanceMatrix:
    kind = DistanceKind(distance_kind)
    pos = traversal_states(spec, factor_index, base)
    labels = [FactorState.from_array(p) for p in pos]
    if kind is DistanceKind.GROUND_TRUTH:
        values = _pairwise_l1(pos.reshape(len(pos), -1).astype(np.float64))
    elif kind is DistanceKind.PERCEIVED:
        imgs = render_batch(pos, spec).reshape(len(pos), -1).astype(np.float64)
        values = ((imgs[:, None, :] - imgs[None, :, :]) ** 2).sum(-1)
    else:
        if representation is None:
            raise ValueError("latent distance matrix needs a representation")
        values = _pairwise_l1(_latent_of(representation, pos, spec))
    return DistanceMatrix(values, labels)


def spearman(a: Sequence[float], b: Sequence[float]) -> RankCorrelation:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if len(a) != len(b):
        raise ValueError("length mismatch")
    if len(a) < 2:
        return RankCorrelation(None, len(a), "fewer than two pairs")
    for name, v in (("ground-truth", a), ("learnt", b)):
        if np.all(v == v[0]):
            return RankCorrelation(None, len(a), f"{name} distances are constant")
    return RankCorrelation(float(stats.spearmanr(a, b).statistic), len(a))


def distance_rank_correlation(
    representation: Representation,
    spec: GridSpec,
    states: np.ndarray | None = None,
    num_pairs: int | None = 10_000,
    seed: int = 0,
) -> RankCorrelation:
    """Spearman correlation of factor L1 distance against latent L1 distance.

    ``states`` defaults to the full enumeration; ``num_pairs=None`` uses every
    unordered pair instead of sampling uniformly with replacement.
    """
    pos = enumerate_state_array(spec) if states is None else np.asarray(states, dtype=np.int64)
    pos = pos.reshape(len(pos), spec.num_squares, 2)
    if len(pos) < 2:
        raise ValueError("need at least two states")
    if num_pairs is None:
        i, j = np.triu_indices(len(pos), k=1)
    else:
        rng = np.random.default_rng(seed)
        i = rng.integers(0, len(pos), size=num_pairs)
        j = rng.integers(0, len(pos), size=num_pairs)
    used = np.unique(np.concatenate([i, j]))
    lookup = np.full(len(pos), -1)
    lookup[used] = np.arange(len(used))
    z = _latent_of(representation, pos[used], spec)
    y = pos.reshape(len(pos), -1)
    d_gt = np.abs(y[i] - y[j]).sum(1)
    d_z = np.abs(z[lookup[i]] - z[lookup[j]]).sum(1)
    res = spearman(d_gt, d_z)
    if not res.defined:
        log.warning("rank correlation undefined: %s", res.diagnostic)
    return res


def equal_frequency_discretize(values: np.ndarray, bins: int) -> np.ndarray:
    """Bin each row of ``(Z, N)`` values into at most ``bins`` quantile bins.

    Tied values always share a bin, so a variable with fewer distinct values
    than ``bins`` keeps its exact levels.
    """
    values = np.atleast_2d(values)
    out = np.zeros(values.shape, dtype=np.int64)
    qs = np.linspace(0, 1, bins + 1)[1:-1]
    for r, v in enumerate(values):
        edges = np.unique(np.quantile(v, qs))
        out[r] = np.searchsorted(edges, v, side="right")
    return out


def discrete_entropy(labels: np.ndarray) -> np.ndarray:
    """Entropy in nats of each row of an integer ``(K, N)`` array."""
    labels = np.atleast_2d(labels)
    out = np.zeros(len(labels))
    for r, v in enumerate(labels):
        p = np.unique(v, return_counts=True)[1] / v.size
        out[r] = -(p * np.log(p)).sum()
    return out


def _mutual_info(a: np.ndarray, b: np.ndarray) -> float:
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    joint = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(joint, (ai, bi), 1.0)
    joint /= a.size
    pa, pb = joint.sum(1, keepdims=True), joint.sum(0, keepdims=True)
    nz = joint > 0
    return float((joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])).sum())


def discrete_mutual_info(codes: np.ndarray, factors: np.ndarray) -> np.ndarray:
    """``(num_factors, num_codes)`` plug-in mutual information in nats."""
    codes, factors = np.atleast_2d(codes), np.atleast_2d(factors)
    return np.array([[_mutual_info(z, y) for z in codes] for y in factors])


def mig(
    representation: Representation,
    spec: GridSpec,
    bins: int = 20,
    samples: int = 10_000,
    seed: int = 0,
    states: np.ndarray | None = None,
) -> MigReport:
    """Mutual Information Gap of a representation over the gridworld factors.

    If the state space has at most ``samples`` states the full enumeration is
    used, tiled ``samples // num_states`` times (this only matters for
    stochastic representations); otherwise ``samples`` states are drawn
    uniformly.
    """
    if bins < 2:
        raise ValueError("bins must be >= 2")
    if states is None:
        if spec.num_states <= samples:
            base = enumerate_state_array(spec)
            states = np.tile(base, (max(samples // spec.num_states, 1), 1, 1))
        else:
            k = spec.grid_cells_per_axis
            states = np.random.default_rng(seed).integers(0, k, size=(samples, spec.num_squares, 2))
    states = np.asarray(states, dtype=np.int64)
    z = _latent_of(representation, states, spec).T
    y = states.reshape(len(states), -1).T
    codes = equal_frequency_discretize(z, bins)
    mi = discrete_mutual_info(codes, y)
    entropy = discrete_entropy(y)
    excluded = [k for k in range(len(y)) if entropy[k] <= 0]
    if excluded:
        log.warning("factors %s have zero entropy, excluded from MIG", excluded)
    keep = [k for k in range(len(y)) if k not in excluded]
    if mi.shape[1] < 2:
        raise ValueError("MIG needs at least two latent dimensions")
    top = np.sort(mi, axis=1)[:, ::-1]
    gaps = np.full(len(y), np.nan)
    gaps[keep] = (top[keep, 0] - top[keep, 1]) / entropy[keep]
    score = float(np.mean(gaps[keep])) if keep else float("nan")
    return MigReport(score, gaps, mi, entropy, excluded)


def oracle_representation(spec: GridSpec) -> Representation:
    """Recover the exact cell factors from an image via per-channel pixel centroids."""
    offset = (spec.square_size_px - 1) / 2.0
    pix = np.arange(spec.image_side_px, dtype=np.float64)

    def rep(obs: np.ndarray) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float64)
        mass = obs.sum(axis=(1, 2))  # (N, C)
        cx = (obs.sum(axis=1) * pix[None, :, None]).sum(1) / mass
        cy = (obs.sum(axis=2) * pix[None, :, None]).sum(1) / mass
        out = np.stack([(cx - offset) / spec.step_px, (cy - offset) / spec.step_px], axis=-1)
        return np.rint(out.reshape(len(obs), -1))

    return rep
