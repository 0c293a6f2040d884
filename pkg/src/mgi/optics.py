"""Four-mode parametric converter and exit-field second moments.

The converter acts on the column ``(a1, a2†, a3, a4†)`` through a 4x4 matrix
``Q = expm(M * zeta)``. The generator couples a1/a2† (pair creation, unit
strength) and a1/a3, a2/a4 (frequency conversion, strength ``coupling_ratio``).
Physicality means Q preserves the metric ``K = diag(1, -1, 1, -1)``.

Fields are discretised into pixels; each pixel carries four modes (one per
frequency arm) and distinct pixels are statistically independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg

from mgi import ConsistencyError
from mgi.wick import LadderOp, PairMomentTable, annihilate, create, vacuum_pair_moment

METRIC = np.diag([1.0, -1.0, 1.0, -1.0]).astype(complex)
ARMS = (1, 2, 3, 4)
# rows of Q hold an annihilation operator for arms 1, 3 and a creation operator for 2, 4
_ROW_IS_CREATION = {1: False, 2: True, 3: False, 4: True}


@dataclass(frozen=True)
class PhysicalParams:
    k1: float = 6.0e4
    k3: float = 1.7e5
    beta: float = 10.0
    coupling_ratio: float = 0.4
    zeta: float = 6.0
    focal_length: float = 10.0
    grid: tuple[int, int] = (64, 64)
    pixel_pitch: float = 1.0e-3
    n_frames: int = 10_000

    def __post_init__(self):
        for name in ("k1", "k3", "beta", "focal_length", "pixel_pitch"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        if not self.zeta >= 0:
            raise ValueError("zeta must be non-negative")
        if not self.coupling_ratio >= 0:
            raise ValueError("coupling_ratio must be non-negative")
        rows, cols = self.grid
        if rows < 1 or cols < 1:
            raise ValueError(f"grid dimensions must be positive, got {self.grid}")
        object.__setattr__(self, "grid", (int(rows), int(cols)))
        if int(self.n_frames) != self.n_frames or self.n_frames < 1:
            raise ValueError("n_frames must be a positive integer")

    @property
    def thickness(self) -> float:
        """Crystal length l (cm) from zeta = beta * l."""
        return self.zeta / self.beta

    @property
    def physical_scale(self) -> float:
        """(k1 / 2 pi f)^2 * pixel area; informational, all unit factors are set to 1."""
        return (self.k1 / (2 * math.pi * self.focal_length)) ** 2 * self.pixel_pitch ** 2

    @property
    def n_pixels(self) -> int:
        return self.grid[0] * self.grid[1]


def build_generator(params: PhysicalParams) -> np.ndarray:
    """Generator M with ``M K + K M† = 0`` in the (a1, a2†, a3, a4†) basis."""
    g = params.coupling_ratio
    m = np.zeros((4, 4), dtype=complex)
    # pair creation a1 <-> a2†
    m[0, 1] = 1j
    m[1, 0] = -1j
    # conversion a1 <-> a3
    m[0, 2] = 1j * g
    m[2, 0] = 1j * g
    # conversion a2 <-> a4, written for the conjugated pair a2† <-> a4†
    m[1, 3] = -1j * g
    m[3, 1] = -1j * g
    return m


def metric_residual(q: np.ndarray) -> float:
    return float(np.max(np.abs(q @ METRIC @ q.conj().T - METRIC)))


@dataclass(frozen=True)
class ConverterMatrix:
    q: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=complex)
        if q.shape != (4, 4):
            raise ValueError(f"converter matrix must be 4x4, got {q.shape}")
        q.setflags(write=False)
        object.__setattr__(self, "q", q)

    def metric_residual(self) -> float:
        return metric_residual(self.q)

    def exit_expansion(self, op: LadderOp) -> list[tuple[complex, LadderOp]]:
        """Express a single-pixel exit operator as a combination of input operators.

        ``op.mode_id`` is the arm number 1..4.
        """
        arm = op.mode_id
        if arm not in ARMS:
            raise ValueError(f"arm must be 1..4, got {arm}")
        row = self.q[arm - 1]
        # input basis (a1, a2†, a3, a4†)
        basis = [annihilate(1), create(2), annihilate(3), create(4)]
        if op.is_creation == _ROW_IS_CREATION[arm]:
            return [(row[n], basis[n]) for n in range(4)]
        return [(row[n].conjugate(), basis[n].dag()) for n in range(4)]

    @cached_property
    def local_table(self) -> np.ndarray:
        """8x8 matrix of <X Y> over ``single_pixel_ops()`` ordering."""
        ops = single_pixel_ops()
        out = np.zeros((8, 8), dtype=complex)
        for r, x in enumerate(ops):
            for c, y in enumerate(ops):
                out[r, c] = exit_pair_moment(x, y, self)
        out.setflags(write=False)
        return out


def single_pixel_ops() -> list[LadderOp]:
    """(a1, a1†, a2, a2†, a3, a3†, a4, a4†) with mode_id = arm number."""
    ops = []
    for arm in ARMS:
        ops += [annihilate(arm), create(arm)]
    return ops


def _op_slot(op: LadderOp) -> int:
    return 2 * (op.mode_id - 1) + int(op.is_creation)


def converter_matrix(params: PhysicalParams) -> ConverterMatrix:
    q = scipy.linalg.expm(build_generator(params) * params.zeta)
    residual = metric_residual(q)
    if residual > 1e-8:
        raise ConsistencyError(f"converter matrix breaks the bosonic metric by {residual:.3e}")
    return ConverterMatrix(q)


def exit_pair_moment(x: LadderOp, y: LadderOp, q: ConverterMatrix) -> complex:
    """<X Y> for two exit operators of the same pixel (``mode_id`` = arm 1..4)."""
    total = 0j
    for cx, ux in q.exit_expansion(x):
        if cx == 0:
            continue
        for cy, uy in q.exit_expansion(y):
            if cy != 0:
                total += cx * cy * vacuum_pair_moment(ux, uy)
    return total


@dataclass(frozen=True)
class PixelModeSet:
    """Mode bookkeeping for a rows x cols pixel array with four arms per pixel.

    ``mode_id = 4 * pixel + (arm - 1)`` with pixels in row-major order.
    """

    grid: tuple[int, int]
    _inv: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        rows, cols = self.grid
        idx = np.arange(rows * cols).reshape(rows, cols)
        inv = idx[::-1, ::-1].ravel().copy()
        inv.setflags(write=False)
        object.__setattr__(self, "_inv", inv)

    @property
    def n_pixels(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def n_modes(self) -> int:
        return 4 * self.n_pixels

    def mode_id(self, pixel: int, arm: int) -> int:
        if not 0 <= pixel < self.n_pixels:
            raise IndexError(f"pixel {pixel} outside grid {self.grid}")
        if arm not in ARMS:
            raise ValueError(f"arm must be 1..4, got {arm}")
        return 4 * pixel + arm - 1

    def locate(self, mode_id: int) -> tuple[int, int]:
        """(pixel, arm) of a mode id."""
        if not 0 <= mode_id < self.n_modes:
            raise IndexError(f"mode {mode_id} outside 0..{self.n_modes - 1}")
        return mode_id // 4, mode_id % 4 + 1

    def mirror(self, pixel: int) -> int:
        """Pixel reflected through the grid centre (r -> -r)."""
        return int(self._inv[pixel])

    @property
    def inversion(self) -> np.ndarray:
        """Permutation array: ``inversion[p]`` is the mirrored pixel of ``p``."""
        return self._inv


class GroupedMomentTable(PairMomentTable):
    """Pair moments over many pixels: identical 8x8 block per pixel, zero across pixels."""

    def __init__(self, local: np.ndarray, modes: PixelModeSet):
        super().__init__(func=self._lookup)
        self.local = local
        self.modes = modes

    def _lookup(self, x: LadderOp, y: LadderOp) -> complex:
        px, ax = self.modes.locate(x.mode_id)
        py, ay = self.modes.locate(y.mode_id)
        if px != py:
            return 0j
        sx = 2 * (ax - 1) + int(x.is_creation)
        sy = 2 * (ay - 1) + int(y.is_creation)
        return complex(self.local[sx, sy])


def build_pair_moment_table(q: ConverterMatrix, modes: PixelModeSet) -> GroupedMomentTable:
    return GroupedMomentTable(q.local_table, modes)


def single_pixel_table(q: ConverterMatrix) -> PairMomentTable:
    """Pair-moment table for one pixel with operators labelled by arm number."""
    local = q.local_table
    return PairMomentTable(func=lambda x, y: complex(local[_op_slot(x), _op_slot(y)]))
