"""Pixel gridworld with one or more axis-aligned squares.

Each square lives on a ``grid_cells_per_axis x grid_cells_per_axis`` lattice
of cell positions. A cell step translates the square by ``step_px`` pixels, so
``step_px < square_size_px`` makes neighbouring states share lit pixels and
``step_px >= square_size_px`` makes them disjoint.

States are plain integer factors; images are rendered on demand.
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass
from enum import IntEnum
from typing import Iterator, Sequence

import numpy as np

__all__ = [
    "GridSpec",
    "FactorState",
    "Direction",
    "GridAction",
    "CapacityError",
    "render",
    "render_batch",
    "step",
    "step_array",
    "enumerate_states",
    "enumerate_state_array",
    "action_from_index",
    "action_to_index",
]


class CapacityError(RuntimeError):
    """Raised when an exhaustive enumeration would exceed the configured cap."""


@dataclass(frozen=True)
class GridSpec:
    num_squares: int = 1
    square_size_px: int = 8
    step_px: int = 8
    grid_cells_per_axis: int = 8
    image_side_px: int = 64

    def __post_init__(self):
        if self.num_squares < 1:
            raise ValueError(f"num_squares must be >= 1, got {self.num_squares}")
        if self.square_size_px <= 0:
            raise ValueError(f"square_size_px must be > 0, got {self.square_size_px}")
        if self.step_px < 1:
            raise ValueError(f"step_px must be >= 1, got {self.step_px}")
        if self.grid_cells_per_axis < 2:
            raise ValueError(f"grid_cells_per_axis must be >= 2, got {self.grid_cells_per_axis}")
        if self.image_side_px < self.min_image_side:
            raise ValueError(
                f"image_side_px={self.image_side_px} too small, squares need {self.min_image_side}px"
            )

    @property
    def min_image_side(self) -> int:
        return (self.grid_cells_per_axis - 1) * self.step_px + self.square_size_px

    @property
    def channels(self) -> int:
        # one colour channel per square, greyscale for a single square
        return self.num_squares

    @property
    def obs_shape(self) -> tuple[int, int, int]:
        return (self.image_side_px, self.image_side_px, self.channels)

    @property
    def num_factors(self) -> int:
        return 2 * self.num_squares

    @property
    def num_states(self) -> int:
        return self.grid_cells_per_axis ** (2 * self.num_squares)

    @property
    def num_actions(self) -> int:
        return 4 * self.num_squares

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(**d)


@dataclass(frozen=True)
class FactorState:
    """Cell coordinates ``(x, y)`` of every square, ``x`` is the column."""

    positions: tuple[tuple[int, int], ...]

    @classmethod
    def of(cls, *positions: Sequence[int]) -> "FactorState":
        return cls(tuple((int(x), int(y)) for x, y in positions))

    @classmethod
    def from_array(cls, arr) -> "FactorState":
        arr = np.asarray(arr).reshape(-1, 2)
        return cls(tuple((int(x), int(y)) for x, y in arr))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.positions, dtype=np.int64).reshape(-1, 2)

    def factors(self) -> np.ndarray:
        """Flat factor vector ``(x0, y0, x1, y1, ...)``."""
        return self.as_array().reshape(-1)

    def validate(self, spec: GridSpec) -> None:
        if len(self.positions) != spec.num_squares:
            raise ValueError(
                f"state has {len(self.positions)} squares, spec expects {spec.num_squares}"
            )
        for x, y in self.positions:
            if not (0 <= x < spec.grid_cells_per_axis and 0 <= y < spec.grid_cells_per_axis):
                raise ValueError(f"position {(x, y)} outside grid of {spec.grid_cells_per_axis} cells")


class Direction(IntEnum):
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3


# (dx, dy) in cell units; y grows downwards
_DELTAS = np.array([[0, -1], [0, 1], [-1, 0], [1, 0]], dtype=np.int64)


@dataclass(frozen=True)
class GridAction:
    square_index: int
    direction: Direction

    def validate(self, spec: GridSpec) -> None:
        if not 0 <= self.square_index < spec.num_squares:
            raise ValueError(f"square_index {self.square_index} invalid for {spec.num_squares} squares")


def action_from_index(index: int) -> GridAction:
    return GridAction(int(index) // 4, Direction(int(index) % 4))


def action_to_index(action: GridAction) -> int:
    return 4 * action.square_index + int(action.direction)


def step(state: FactorState, action: GridAction, spec: GridSpec) -> FactorState:
    """Move one square by one cell; moves into a wall leave the state unchanged."""
    state.validate(spec)
    action.validate(spec)
    pos = state.as_array()
    moved = pos[action.square_index] + _DELTAS[int(action.direction)]
    if np.any(moved < 0) or np.any(moved >= spec.grid_cells_per_axis):
        return state
    pos[action.square_index] = moved
    return FactorState.from_array(pos)


def step_array(positions: np.ndarray, actions: np.ndarray, spec: GridSpec) -> np.ndarray:
    """Vectorised :func:`step` over ``(N, num_squares, 2)`` positions and ``(N,)`` action indices."""
    positions = np.asarray(positions, dtype=np.int64)
    actions = np.asarray(actions, dtype=np.int64)
    out = positions.copy()
    rows = np.arange(len(actions))
    sq = actions // 4
    moved = positions[rows, sq] + _DELTAS[actions % 4]
    ok = np.all((moved >= 0) & (moved < spec.grid_cells_per_axis), axis=1)
    out[rows[ok], sq[ok]] = moved[ok]
    return out


def render_batch(positions: np.ndarray, spec: GridSpec, chunk: int = 4096) -> np.ndarray:
    """Render ``(N, num_squares, 2)`` cell positions into ``(N, H, W, C)`` float32 images."""
    positions = np.asarray(positions, dtype=np.int64)
    if positions.ndim == 2:
        positions = positions[None]
    n = positions.shape[0]
    if positions.shape[1:] != (spec.num_squares, 2):
        raise ValueError(f"expected positions of shape (N, {spec.num_squares}, 2), got {positions.shape}")
    if positions.size and (positions.min() < 0 or positions.max() >= spec.grid_cells_per_axis):
        raise ValueError("positions outside the grid")
    side, size = spec.image_side_px, spec.square_size_px
    out = np.zeros((n, side, side, spec.channels), dtype=np.float32)
    pix = np.arange(side)
    for lo in range(0, n, chunk):
        p = positions[lo:lo + chunk] * spec.step_px
        for s in range(spec.num_squares):
            col0 = p[:, s, 0, None]
            row0 = p[:, s, 1, None]
            rmask = (pix >= row0) & (pix < row0 + size)
            cmask = (pix >= col0) & (pix < col0 + size)
            out[lo:lo + chunk, :, :, s] = rmask[:, :, None] & cmask[:, None, :]
    return out


def render(state: FactorState, spec: GridSpec) -> np.ndarray:
    """Render one state as an ``(H, W, C)`` image with background 0 and squares 1."""
    state.validate(spec)
    return render_batch(state.as_array()[None], spec)[0]


def _check_capacity(spec: GridSpec, max_states: int) -> None:
    if spec.num_states > max_states:
        raise CapacityError(f"{spec.num_states} states exceeds cap of {max_states}")


def enumerate_state_array(spec: GridSpec, max_states: int = 1 << 20) -> np.ndarray:
    """All states as an ``(N, num_squares, 2)`` array in lexicographic factor order."""
    _check_capacity(spec, max_states)
    k = spec.grid_cells_per_axis
    grids = np.indices((k,) * spec.num_factors).reshape(spec.num_factors, -1).T
    return grids.reshape(-1, spec.num_squares, 2).astype(np.int64)


def enumerate_states(spec: GridSpec, max_states: int = 1 << 20) -> list[FactorState]:
    _check_capacity(spec, max_states)
    return list(_iter_states(spec))


def _iter_states(spec: GridSpec) -> Iterator[FactorState]:
    cells = range(spec.grid_cells_per_axis)
    for flat in itertools.product(cells, repeat=spec.num_factors):
        yield FactorState(tuple(zip(flat[0::2], flat[1::2])))
