"""Ghost-image means, measurement operator and inter-image noise covariance.

Discrete model: pixel ``g`` of the crystal feeds object pixel ``g`` (arm 1)
and, through an inverting imager, detector pixel ``mirror(g)`` of every
reference arm. The bucket detector measures ``I1 = sum_g f(g) n1(g)``; the
correlator for arm j at detector pixel r estimates
``<I1 n_j(mirror(r))> - <I1><n_j>`` from ``n_frames`` frames.

All intensity operators commute, so products of them behave as classical
random variables whose joint moments are vacuum expectations evaluated by the
Wick engine. Pixels are independent, which reduces every eighth-order moment
to per-pixel moments of at most eight operators.

Two covariance representations are provided:

* dense ``CovarianceBlocks`` -- the full ``3N x 3N`` matrix;
* ``StructuredCovariance`` -- the same matrix written exactly as per-pixel
  3x3 blocks plus a rank-9 term spanned by ``1, f, f**2`` in each arm, which
  makes 64x64 grids tractable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from mgi import ConsistencyError
from mgi.optics import ConverterMatrix, PixelModeSet, single_pixel_table
from mgi.wick import gaussian_moment, number

REF_ARMS = (2, 3, 4)


@dataclass(frozen=True)
class ObjectImage:
    """Pixelwise intensity transparency ``f = |T|^2`` in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 2:
            raise ValueError(f"object image must be 2-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("object image contains non-finite values")
        if v.min() < 0 or v.max() > 1:
            raise ValueError(f"transparency outside [0, 1]: [{v.min()}, {v.max()}]")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def uniform(cls, grid: tuple[int, int], level: float = 1.0) -> "ObjectImage":
        return cls(np.full(grid, float(level)))

    @property
    def grid(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def flat(self) -> np.ndarray:
        return self.values.ravel()


def invert_image(values: np.ndarray) -> np.ndarray:
    """Point inversion through the grid centre."""
    return np.asarray(values)[::-1, ::-1]


# ---------------------------------------------------------------------------
# single-pixel moments


@dataclass(frozen=True)
class GroupMoments:
    """Raw photon-number moments of one pixel; reference arms indexed 0..2 for arms 2..4."""

    mu: float          # <n1>
    mu2: float         # <n1 n1>
    m: np.ndarray      # <n_j>
    a1: np.ndarray     # <n1 n_j>
    a2: np.ndarray     # <n1 n1 n_j>
    y: np.ndarray      # <n_i n_j>
    ny: np.ndarray     # <n1 n_i n_j>
    nny: np.ndarray    # <n1 n_i n1 n_j>
    all_means: np.ndarray  # <n_arm> for arms 1..4

    @property
    def var1(self) -> float:
        return self.mu2 - self.mu ** 2

    @property
    def c(self) -> np.ndarray:
        """Cov(n1, n_j), the ghost-image coefficient of each reference arm."""
        return self.a1 - self.mu * self.m

    @property
    def k(self) -> np.ndarray:
        """Cov(n_i, n_j) between reference arms."""
        return self.y - np.outer(self.m, self.m)

    @property
    def h(self) -> np.ndarray:
        """E[(n1 - mu)^2 (n_j - m_j)]."""
        return self.a2 - 2 * self.mu * self.a1 + self.mu ** 2 * self.m - self.var1 * self.m


_moment_cache: dict[bytes, GroupMoments] = {}


def group_moments(q: ConverterMatrix) -> GroupMoments:
    key = q.q.tobytes()
    cached = _moment_cache.get(key)
    if cached is not None:
        return cached
    table = single_pixel_table(q)

    def mom(*arms):
        ops = []
        for arm in arms:
            ops += number(arm)
        val = gaussian_moment(ops, table)
        if abs(val.imag) > 1e-9 * max(1.0, abs(val.real)):
            raise ConsistencyError(f"intensity moment {arms} has imaginary part {val.imag:.3e}")
        return val.real

    r = REF_ARMS
    gm = GroupMoments(
        mu=mom(1),
        mu2=mom(1, 1),
        m=np.array([mom(j) for j in r]),
        a1=np.array([mom(1, j) for j in r]),
        a2=np.array([mom(1, 1, j) for j in r]),
        y=np.array([[mom(i, j) for j in r] for i in r]),
        ny=np.array([[mom(1, i, j) for j in r] for i in r]),
        nny=np.array([[mom(1, i, 1, j) for j in r] for i in r]),
        all_means=np.array([mom(a) for a in (1, 2, 3, 4)]),
    )
    _moment_cache[key] = gm
    return gm


# ---------------------------------------------------------------------------
# means and coefficients


def mean_intensity(q: ConverterMatrix, arm: int, grid: tuple[int, int] = (1, 1),
                   f: ObjectImage | None = None) -> np.ndarray:
    """Mean photon number per pixel in ``arm``; arm 1 is weighted by ``f`` if given."""
    if arm not in (1, 2, 3, 4):
        raise ValueError(f"arm must be 1..4, got {arm}")
    if f is not None:
        grid = f.grid
    value = group_moments(q).all_means[arm - 1]
    out = np.full(grid, value)
    if arm == 1 and f is not None:
        out = out * f.values
    return out


def gi_coefficient(q: ConverterMatrix, j: int, rtol: float = 1e-8) -> float:
    """Proportionality factor c_j between ghost image j and the object transparency.

    Evaluated as ``|Q11 Qj1* + Q13 Qj3*|^2`` and checked against the
    Wick-computed same-pixel covariance Cov(n1, n_j).
    """
    if j not in REF_ARMS:
        raise ValueError(f"reference arm must be 2..4, got {j}")
    m = q.q
    amp = m[0, 0] * np.conj(m[j - 1, 0]) + m[0, 2] * np.conj(m[j - 1, 2])
    c = float(abs(amp) ** 2)
    wick = float(group_moments(q).c[j - 2])
    if abs(c - wick) > rtol * max(abs(c), abs(wick)) + 1e-12:
        raise ConsistencyError(f"c_{j}: closed form {c!r} disagrees with Wick covariance {wick!r}")
    return c


def gi_coefficients(q: ConverterMatrix) -> np.ndarray:
    return np.array([gi_coefficient(q, j) for j in REF_ARMS])


def ghost_image_mean(f: ObjectImage, c_j: float) -> np.ndarray:
    """Mean correlator output on the detector grid: c_j * f(-r)."""
    return c_j * invert_image(f.values)


# ---------------------------------------------------------------------------
# measurement operator


def binning_matrix(grid: tuple[int, int], factor: int) -> np.ndarray:
    """Detector that sums ``factor x factor`` pixel blocks (row-major on both sides)."""
    rows, cols = grid
    if rows % factor or cols % factor:
        raise ValueError(f"grid {grid} not divisible by binning factor {factor}")
    br, bc = rows // factor, cols // factor
    out = np.zeros((br * bc, rows * cols))
    for r in range(rows):
        for c in range(cols):
            out[(r // factor) * bc + c // factor, r * cols + c] = 1.0
    return out


def inversion_matrix(grid: tuple[int, int]) -> np.ndarray:
    perm = PixelModeSet(grid).inversion
    out = np.zeros((perm.size, perm.size))
    out[np.arange(perm.size), perm] = 1.0
    return out


@dataclass(frozen=True)
class MeasurementModel:
    """Block operator stacking ``B_j C_j`` for the reference arms.

    ``detectors`` is ``None`` for ideal detectors (every ``B_j = I``).
    """

    c_coeffs: np.ndarray
    grid: tuple[int, int]
    detectors: tuple[np.ndarray, ...] | None = None

    @property
    def n_pixels(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def ideal(self) -> bool:
        return self.detectors is None

    @cached_property
    def a(self) -> np.ndarray:
        inv = inversion_matrix(self.grid)
        blocks = []
        for k, c in enumerate(self.c_coeffs):
            b = np.eye(self.n_pixels) if self.ideal else self.detectors[k]
            blocks.append(b @ (c * inv))
        return np.vstack(blocks)

    @property
    def block_rows(self) -> list[int]:
        if self.ideal:
            return [self.n_pixels] * len(self.c_coeffs)
        return [d.shape[0] for d in self.detectors]

    def apply(self, f: ObjectImage | np.ndarray) -> np.ndarray:
        vals = f.values if isinstance(f, ObjectImage) else np.asarray(f).reshape(self.grid)
        if self.ideal:
            flipped = invert_image(vals).ravel()
            return np.concatenate([c * flipped for c in self.c_coeffs])
        return self.a @ vals.ravel()


def build_measurement_operator(c: Sequence[float], grid: tuple[int, int],
                               detectors: Sequence[np.ndarray] | None = None) -> MeasurementModel:
    c = np.asarray(c, dtype=float)
    if detectors is not None:
        detectors = tuple(np.asarray(b, dtype=float) for b in detectors)
        if len(detectors) != len(c):
            raise ValueError(f"{len(detectors)} detector matrices for {len(c)} arms")
        n = grid[0] * grid[1]
        for k, b in enumerate(detectors):
            if b.ndim != 2 or b.shape[1] != n:
                raise ValueError(f"detector {k} has shape {b.shape}, expected (*, {n})")
    return MeasurementModel(c, tuple(grid), detectors)


# ---------------------------------------------------------------------------
# covariance: direct per-pixel-pair evaluation


def _pair_covariance(f: np.ndarray, gm: GroupMoments, i: int, j: int) -> np.ndarray:
    """Cov(I1 n_i(a), I1 n_j(b)) for all crystal pixels a, b (one frame).

    ``i``, ``j`` index the reference arms 0..2.
    """
    mu, v = gm.mu, gm.var1
    s1, s2 = f.sum(), (f ** 2).sum()
    fa, fb = f[:, None], f[None, :]
    mi, mj = gm.m[i], gm.m[j]
    # a != b: split I1 = f_a n1(a) + f_b n1(b) + rest, the rest independent of both pixels
    r1 = mu * (s1 - fa - fb)
    r2 = v * (s2 - fa ** 2 - fb ** 2) + r1 ** 2
    ex2yz = (fa ** 2 * gm.a2[i] * mj + fb ** 2 * mi * gm.a2[j]
             + 2 * fa * fb * gm.a1[i] * gm.a1[j]
             + 2 * r1 * (fa * gm.a1[i] * mj + fb * mi * gm.a1[j])
             + r2 * mi * mj)
    exy = fa * gm.a1[i] + (fb * mu + r1) * mi
    exz = fb * gm.a1[j] + (fa * mu + r1) * mj
    out = ex2yz - exy * exz
    # a == b: both reference operators sit in the same pixel
    r1 = mu * (s1 - f)
    r2 = v * (s2 - f ** 2) + r1 ** 2
    same = f ** 2 * gm.nny[i, j] + 2 * r1 * f * gm.ny[i, j] + r2 * gm.y[i, j]
    same -= (f * gm.a1[i] + r1 * mi) * (f * gm.a1[j] + r1 * mj)
    np.fill_diagonal(out, same)
    return out


def covariance_block(f: ObjectImage, q: ConverterMatrix, i: int, j: int,
                     n_frames: int = 1) -> np.ndarray:
    """Noise covariance between ghost images i and j (arms 2..4) on the detector grid."""
    if i not in REF_ARMS or j not in REF_ARMS:
        raise ValueError(f"arms must be in 2..4, got {i}, {j}")
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    gm = group_moments(q)
    block = _pair_covariance(f.flat, gm, i - 2, j - 2) / n_frames
    perm = PixelModeSet(f.grid).inversion
    return block[np.ix_(perm, perm)]


@dataclass(frozen=True)
class CovarianceBlocks:
    """Dense noise covariance of the stacked correlator outputs."""

    sigma: np.ndarray
    block_rows: tuple[int, ...]
    n_frames: int

    def block(self, i: int, j: int) -> np.ndarray:
        """Block for reference arms i, j in 2..4."""
        edges = np.concatenate([[0], np.cumsum(self.block_rows)])
        a, b = i - 2, j - 2
        return self.sigma[edges[a]:edges[a + 1], edges[b]:edges[b + 1]]

    def to_dense(self) -> np.ndarray:
        return self.sigma


def build_covariance(f: ObjectImage, q: ConverterMatrix, n_frames: int = 1,
                     detectors: Sequence[np.ndarray] | None = None,
                     white_noise: float = 0.0, psd_tol: float = 1e-10) -> CovarianceBlocks:
    """Assemble all nine blocks ``B_i Sigma_ij B_j^T`` (plus optional white noise)."""
    n = f.grid[0] * f.grid[1]
    if detectors is None:
        detectors = [None] * 3
    elif len(detectors) != 3:
        raise ValueError("need one detector matrix per reference arm")
    rows = []
    for a, i in enumerate(REF_ARMS):
        row = []
        for b, j in enumerate(REF_ARMS):
            blk = covariance_block(f, q, i, j, n_frames)
            if detectors[a] is not None:
                blk = detectors[a] @ blk
            if detectors[b] is not None:
                blk = blk @ detectors[b].T
            row.append(blk)
        rows.append(row)
    sigma = np.block(rows)
    sigma = 0.5 * (sigma + sigma.T)
    if white_noise:
        sigma[np.diag_indices_from(sigma)] += white_noise
    block_rows = tuple(n if d is None else d.shape[0] for d in detectors)
    _check_psd(sigma, psd_tol)
    return CovarianceBlocks(sigma, block_rows, n_frames)


def _check_psd(sigma: np.ndarray, tol: float) -> None:
    if sigma.size == 0:
        return
    scale = np.max(np.abs(sigma))
    if scale == 0:
        return
    lo = np.linalg.eigvalsh(sigma)[0]
    if lo < -tol * scale * max(1, sigma.shape[0]) ** 0.5 * 1e3:
        raise ConsistencyError(f"covariance not positive semidefinite: min eigenvalue {lo:.3e}")


# ---------------------------------------------------------------------------
# covariance: exact structured representation


@dataclass(frozen=True)
class StructuredCovariance:
    """``Sigma = P (blockdiag(local) + E M E^T) P^T / n_frames + white * I``.

    Indices inside the structure are crystal pixels (arm-major stacking,
    ``arm * N + pixel``); ``P`` maps them to detector pixels by inversion.
    ``local`` has shape (N, 3, 3); ``basis`` columns are ``1, f, f**2``;
    ``lowrank`` is the 9x9 coupling indexed by ``arm * 3 + basis``.
    """

    local: np.ndarray
    basis: np.ndarray
    lowrank: np.ndarray
    grid: tuple[int, int]
    n_frames: int = 1
    white_noise: float = 0.0
    _perm: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_perm", PixelModeSet(self.grid).inversion)

    @property
    def n_pixels(self) -> int:
        return self.local.shape[0]

    @property
    def scale(self) -> float:
        return 1.0 / self.n_frames

    def local_total(self) -> np.ndarray:
        """Per-pixel 3x3 blocks including the white-noise floor, already scaled."""
        out = self.local * self.scale
        if self.white_noise:
            out = out + self.white_noise * np.eye(3)
        return out

    def embedding(self) -> np.ndarray:
        """E: (3N, 9) in crystal-pixel order."""
        n = self.n_pixels
        e = np.zeros((3 * n, 9))
        for arm in range(3):
            e[arm * n:(arm + 1) * n, arm * 3:(arm + 1) * 3] = self.basis
        return e

    def to_dense(self) -> np.ndarray:
        """Dense matrix in detector-pixel order (for small grids and tests)."""
        n = self.n_pixels
        dense = np.zeros((3 * n, 3 * n))
        idx = np.arange(n)
        loc = self.local_total()
        for a in range(3):
            for b in range(3):
                dense[a * n + idx, b * n + idx] = loc[:, a, b]
        e = self.embedding()
        dense += self.scale * e @ self.lowrank @ e.T
        full_perm = np.concatenate([k * n + self._perm for k in range(3)])
        return dense[np.ix_(full_perm, full_perm)]

    def to_crystal_order(self, xi: np.ndarray) -> np.ndarray:
        """Reorder a stacked detector-grid vector into crystal-pixel order."""
        n = self.n_pixels
        return np.concatenate([xi[k * n:(k + 1) * n][self._perm] for k in range(3)])

    def to_detector_order(self, v: np.ndarray) -> np.ndarray:
        # inversion is an involution
        return self.to_crystal_order(v)

    def local_sqrt(self) -> np.ndarray:
        w, u = np.linalg.eigh(self.local_total())
        if np.any(w < -1e-10 * np.abs(w).max(axis=1, keepdims=True)):
            raise ConsistencyError("per-pixel covariance block is not positive semidefinite")
        w = np.clip(w, 0, None)
        return np.einsum("nij,nj,nkj->nik", u, np.sqrt(w), u)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        """One draw of N(0, Sigma) in detector order, exact for the structured form."""
        n = self.n_pixels
        root = self.local_sqrt()
        loc = self.local_total()
        w, _ = np.linalg.eigh(loc)
        if np.any(w <= 1e-300):
            raise ConsistencyError("structured sampling needs positive-definite pixel blocks")
        # Sigma = D^1/2 (I + G M G^T) D^1/2 with G = D^-1/2 E
        inv_root = np.linalg.inv(root)
        e = self.embedding()
        g = _apply_pixel_blocks(inv_root, e)
        qmat, rmat = np.linalg.qr(g)
        inner = np.eye(9) + rmat @ (self.scale * self.lowrank) @ rmat.T
        inner = 0.5 * (inner + inner.T)
        iw, iu = np.linalg.eigh(inner)
        if iw.min() < -1e-8 * max(1.0, iw.max()):
            raise ConsistencyError(f"covariance not positive semidefinite (inner eigenvalue {iw.min():.3e})")
        s = iu @ np.diag(np.sqrt(np.clip(iw, 0, None))) @ iu.T
        z = rng.standard_normal(3 * n)
        qz = qmat.T @ z
        y = z - qmat @ qz + qmat @ (s @ qz)
        x = _apply_pixel_blocks(root, y[:, None])[:, 0]
        return self.to_detector_order(x)


def _apply_pixel_blocks(blocks: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Multiply a (3N, k) arm-major array by blockdiag(blocks) of shape (N, 3, 3)."""
    n = blocks.shape[0]
    k = v.shape[1]
    stacked = v.reshape(3, n, k).transpose(1, 0, 2)       # (N, 3, k)
    out = np.einsum("nab,nbk->nak", blocks, stacked)
    return out.transpose(1, 0, 2).reshape(3 * n, k)


def build_structured_covariance(f: ObjectImage, q: ConverterMatrix, n_frames: int = 1,
                                white_noise: float = 0.0) -> StructuredCovariance:
    gm = group_moments(q)
    fv = f.flat
    n = fv.size
    s1, s2 = fv.sum(), (fv ** 2).sum()
    big_f, big_v = gm.mu * s1, gm.var1 * s2
    m, c, h = gm.m, gm.c, gm.h
    low = np.zeros((9, 9))
    for i in range(3):
        for j in range(3):
            low[3 * i + 2, 3 * j] += h[i] * m[j]
            low[3 * i, 3 * j + 2] += m[i] * h[j]
            low[3 * i, 3 * j] += big_v * m[i] * m[j]
            low[3 * i + 1, 3 * j] += big_f * c[i] * m[j]
            low[3 * i, 3 * j + 1] += big_f * m[i] * c[j]
            low[3 * i + 1, 3 * j + 1] += c[i] * c[j]
    basis = np.column_stack([np.ones(n), fv, fv ** 2])
    # per-pixel blocks: exact same-pixel covariance minus the low-rank part on the diagonal
    local = np.zeros((n, 3, 3))
    for i in range(3):
        for j in range(3):
            mu, v = gm.mu, gm.var1
            r1 = mu * (s1 - fv)
            r2 = v * (s2 - fv ** 2) + r1 ** 2
            same = fv ** 2 * gm.nny[i, j] + 2 * r1 * fv * gm.ny[i, j] + r2 * gm.y[i, j]
            same -= (fv * gm.a1[i] + r1 * m[i]) * (fv * gm.a1[j] + r1 * m[j])
            low_diag = np.einsum("nk,kl,nl->n", basis, low[3 * i:3 * i + 3, 3 * j:3 * j + 3], basis)
            local[:, i, j] = same - low_diag
    local = 0.5 * (local + local.transpose(0, 2, 1))
    return StructuredCovariance(local, basis, low, tuple(f.grid), n_frames, white_noise)


def image_covariance(cov: StructuredCovariance) -> np.ndarray:
    """3x3 covariance between the ghost images at a pixel, averaged over pixels.

    Only the pixel-local part is kept: the cross-pixel terms lie in the span
    of ``1, f, f**2`` and amount to a random offset and gain of each image.
    """
    return np.mean(cov.local_total(), axis=0)
