"""Measurement reduction: minimum-MSE linear estimate of ``U f`` from ``xi = A f + nu``.

    R xi = U (A^T S^- A)^- A^T S^- xi,    S = Cov(nu)

The noise covariance depends on the unknown object, so reconstruction
alternates between estimating f, projecting onto the unit box and
re-estimating the covariance from the projected estimate. From the second
iteration on, the previous estimate enters as a pseudo-measurement of f with
covariance ``kappa * I``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from mgi.correlation import (
    CovarianceBlocks,
    MeasurementModel,
    ObjectImage,
    StructuredCovariance,
    binning_matrix,
    build_covariance,
    build_structured_covariance,
)
from mgi.optics import ConverterMatrix

log = logging.getLogger(__name__)

Covariance = Union[CovarianceBlocks, StructuredCovariance, np.ndarray]


class ReductionError(ArithmeticError):
    pass


def pseudoinverse(m: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Moore-Penrose pseudoinverse; singular values below ``tol * s_max`` are dropped."""
    m = np.asarray(m)
    if m.size == 0:
        return np.zeros(m.T.shape, dtype=m.dtype)
    u, s, vh = np.linalg.svd(m, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        return np.zeros(m.T.shape, dtype=np.result_type(m, float))
    keep = s > tol * s[0]
    s_inv = np.zeros_like(s)
    s_inv[keep] = 1.0 / s[keep]
    return (vh.conj().T * s_inv) @ u.conj().T


def _dense(sigma: Covariance) -> np.ndarray:
    if isinstance(sigma, (CovarianceBlocks, StructuredCovariance)):
        return sigma.to_dense()
    return np.asarray(sigma)


def reduce_linear(xi: np.ndarray, a: np.ndarray, sigma: Covariance,
                  u: np.ndarray | None = None, tol: float = 1e-10) -> np.ndarray:
    """Dense reduction estimate ``U (A^T S^- A)^- A^T S^- xi``."""
    xi = np.asarray(xi, dtype=float)
    a = np.asarray(a, dtype=float)
    s = _dense(sigma)
    if a.ndim != 2 or xi.shape != (a.shape[0],):
        raise ValueError(f"measurement of shape {xi.shape} does not match operator {a.shape}")
    if s.shape != (a.shape[0], a.shape[0]):
        raise ValueError(f"covariance shape {s.shape} does not match {a.shape[0]} measurements")
    if u is not None and u.shape[1] != a.shape[1]:
        raise ValueError(f"U has {u.shape[1]} columns, A has {a.shape[1]}")
    s_pinv = pseudoinverse(s, tol)
    at_s = a.T @ s_pinv
    est = pseudoinverse(at_s @ a, tol) @ (at_s @ xi)
    if u is not None:
        est = u @ est
    return est


# ---------------------------------------------------------------------------
# structured solver (ideal detectors, exact Woodbury algebra)


@dataclass
class _StructuredSystem:
    """Normal equations ``(diag(delta) - J^T W J) x = rhs`` in object-pixel order."""

    delta: np.ndarray
    j: np.ndarray
    w: np.ndarray
    rhs: np.ndarray

    def _core(self, delta):
        z = self.j / delta                                # (9, N)
        inner = np.eye(self.w.shape[0]) - (z @ self.j.T) @ self.w
        return z, self.w @ np.linalg.inv(inner)

    def solve(self, delta=None, rhs=None) -> np.ndarray:
        delta = self.delta if delta is None else delta
        rhs = self.rhs if rhs is None else rhs
        z, t = self._core(delta)
        return rhs / delta + z.T @ (t @ (z @ rhs))

    def inverse_diagonal(self, delta=None) -> np.ndarray:
        delta = self.delta if delta is None else delta
        z, t = self._core(delta)
        return 1.0 / delta + np.einsum("kn,kl,ln->n", z, t, z)


def _structured_system(xi: np.ndarray, c: np.ndarray, cov: StructuredCovariance) -> _StructuredSystem:
    n = cov.n_pixels
    eta = cov.to_crystal_order(xi)
    loc = cov.local_total()
    norm = float(np.mean(np.trace(loc, axis1=1, axis2=2))) / 3
    if not norm > 0:
        raise ReductionError("noise covariance vanishes; structured solve needs positive-definite pixel blocks")
    loc = loc / norm
    low = cov.scale * cov.lowrank / norm
    try:
        dinv = np.linalg.inv(loc)
    except np.linalg.LinAlgError as exc:
        raise ReductionError("singular per-pixel covariance block") from exc
    e = cov.embedding()
    stacked = e.reshape(3, n, 9).transpose(1, 0, 2)       # (N, 3, 9)
    g = np.einsum("nab,nbk->nak", dinv, stacked)           # D^-1 E per pixel
    h = np.einsum("nak,nal->kl", stacked, g)
    w = low @ np.linalg.inv(np.eye(9) + h @ low)
    w = 0.5 * (w + w.T)
    dinv_c = np.einsum("nab,b->na", dinv, c)               # D^-1 A' per pixel
    delta = dinv_c @ c
    jmat = np.einsum("nak,a->kn", g, c)
    eta3 = eta.reshape(3, n).T                             # (N, 3)
    gt_eta = np.einsum("nak,na->k", g, eta3)
    rhs = np.einsum("na,na->n", dinv_c, eta3) - jmat.T @ (w @ gt_eta)
    # normalising Sigma rescales the normal equations; undo it so kappa keeps f^2 units
    return _StructuredSystem(delta / norm, jmat, w / norm, rhs / norm)


def reduce_structured(xi: np.ndarray, c: Sequence[float], cov: StructuredCovariance,
                      prior: np.ndarray | None = None, kappa: float | None = None) -> np.ndarray:
    """Reduction with ideal detectors and U = I using the structured covariance.

    Returns the estimate flattened in object-pixel (row-major) order. With a
    ``prior`` the system is augmented by the pseudo-measurement ``prior``
    with covariance ``kappa * I``.
    """
    system = _structured_system(np.asarray(xi, dtype=float), np.asarray(c, dtype=float), cov)
    if prior is None:
        return system.solve()
    return system.solve(system.delta + 1.0 / kappa, system.rhs + np.asarray(prior) / kappa)


# ---------------------------------------------------------------------------
# iteration


def project_unit_box(v: np.ndarray) -> np.ndarray:
    return np.clip(v, 0.0, 1.0)


@dataclass(frozen=True)
class ReductionConfig:
    """``kappa=None`` ties the pseudo-measurement variance to the current estimate's noise."""

    u: np.ndarray | None = None
    kappa: float | None = None
    pinv_tol: float = 1e-10
    max_iters: int = 20
    conv_tol: float = 1e-4
    init_level: float = 1.0

    def __post_init__(self):
        if self.kappa is not None and not self.kappa > 0:
            raise ValueError("kappa must be positive")
        if not 0 < self.pinv_tol < 1:
            raise ValueError("pinv_tol must lie in (0, 1)")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.conv_tol > 0:
            raise ValueError("conv_tol must be positive")
        if not 0 <= self.init_level <= 1:
            raise ValueError("init_level must lie in [0, 1]")


@dataclass
class IterationInfo:
    iteration: int
    residual: float
    change: float
    kappa: float | None


@dataclass
class ReductionResult:
    estimate: ObjectImage
    iterations: int
    history: list[IterationInfo] = field(default_factory=list)
    covariance: Covariance | None = None
    converged: bool = False


@dataclass(frozen=True)
class NoiseModel:
    """Object-dependent correlator-noise covariance for a given converter.

    ``mode`` is ``"dense"``, ``"structured"`` (exact, ideal detectors only)
    or ``"blockdiag"`` (structured with cross-pixel terms dropped).
    """

    q: ConverterMatrix
    n_frames: int = 1
    detectors: tuple[np.ndarray, ...] | None = None
    white_noise: float = 0.0
    mode: str = "dense"

    def __post_init__(self):
        if self.mode not in ("dense", "structured", "blockdiag"):
            raise ValueError(f"unknown covariance mode {self.mode!r}")
        if self.mode != "dense" and self.detectors is not None:
            raise ValueError("structured covariance requires ideal detectors")

    def __call__(self, f: ObjectImage) -> Covariance:
        if self.mode == "dense":
            return build_covariance(f, self.q, self.n_frames, self.detectors, self.white_noise)
        cov = build_structured_covariance(f, self.q, self.n_frames, self.white_noise)
        if self.mode == "blockdiag":
            cov = blockdiag_approximation(cov)
        return cov


def blockdiag_approximation(cov: StructuredCovariance) -> StructuredCovariance:
    """Keep the exact same-pixel 3x3 blocks, drop every cross-pixel covariance."""
    low_diag = np.einsum("nk,ikjl,nl->nij", cov.basis, cov.lowrank.reshape(3, 3, 3, 3), cov.basis)
    return StructuredCovariance(cov.local + low_diag, cov.basis, np.zeros_like(cov.lowrank),
                                cov.grid, cov.n_frames, cov.white_noise)


def estimate_noise_covariance(f_hat: ObjectImage, q: ConverterMatrix, n_frames: int = 1,
                              **kwargs) -> CovarianceBlocks:
    return build_covariance(f_hat, q, n_frames, **kwargs)


def _solve_step(xi, model: MeasurementModel, sigma: Covariance, config: ReductionConfig,
                prior: np.ndarray | None, kappa: float | None):
    """One reduction solve; returns (estimate, mean estimate variance)."""
    if isinstance(sigma, StructuredCovariance):
        if not model.ideal:
            raise ValueError("structured covariance requires ideal detectors")
        system = _structured_system(xi, model.c_coeffs, sigma)
        plain_var = float(np.mean(system.inverse_diagonal()))
        if prior is None:
            x = system.solve()
        else:
            k = plain_var if kappa is None else kappa
            x = system.solve(system.delta + 1.0 / k, system.rhs + prior / k)
        if config.u is not None:
            x = config.u @ x
        return x, plain_var
    return _dense_step(xi, model.a, _dense(sigma), config, prior, kappa)


def _dense_step(xi, a, s, config: ReductionConfig, prior, kappa):
    # the augmented covariance is block diagonal, so its pseudoinverse is taken
    # blockwise; a joint relative cutoff would discard kappa * I whenever Sigma
    # is many orders of magnitude larger
    at_s = a.T @ pseudoinverse(s, config.pinv_tol)
    normal = at_s @ a
    rhs = at_s @ xi
    plain_var = float(np.mean(np.diag(pseudoinverse(normal, config.pinv_tol))))
    if prior is not None:
        k = plain_var if kappa is None else kappa
        normal = normal + np.eye(a.shape[1]) / k
        rhs = rhs + prior / k
    x = pseudoinverse(normal, config.pinv_tol) @ rhs
    if config.u is not None:
        x = config.u @ x
    return x, plain_var


def iterate_reduction(xi: np.ndarray, model: MeasurementModel,
                      noise: Callable[[ObjectImage], Covariance],
                      config: ReductionConfig = ReductionConfig()) -> ReductionResult:
    """Iterative reconstruction with box projection and covariance re-estimation.

    ``noise`` maps an object estimate to the correlator-noise covariance
    (a :class:`NoiseModel` or any callable).
    """
    xi = np.asarray(xi, dtype=float)
    grid = model.grid
    if config.u is not None and config.u.shape[0] != model.n_pixels:
        raise ValueError("iteration needs a square U (the estimate is fed back as a prior)")
    sigma = noise(ObjectImage.uniform(grid, config.init_level))
    prev = None
    history = []
    converged = False
    for it in range(1, config.max_iters + 1):
        x, plain_var = _solve_step(xi, model, sigma, config, prev, config.kappa)
        if not np.all(np.isfinite(x)):
            raise ReductionError(f"non-finite estimate at iteration {it}")
        x = project_unit_box(x)
        residual = float(np.linalg.norm(xi - model.apply(x)) / max(np.linalg.norm(xi), 1e-300))
        if prev is None:
            change = float("inf")
        else:
            change = float(np.linalg.norm(x - prev) / max(np.linalg.norm(prev), 1e-12))
        kappa = None if prev is None else (plain_var if config.kappa is None else config.kappa)
        history.append(IterationInfo(it, residual, change, kappa))
        log.debug("iteration %d: residual %.3e change %.3e", it, residual, change)
        sigma = noise(ObjectImage(x.reshape(grid)))
        prev = x
        if change < config.conv_tol:
            converged = True
            break
    return ReductionResult(ObjectImage(prev.reshape(grid)), len(history), history, sigma, converged)


# ---------------------------------------------------------------------------
# resolution vs. MSE


def averaging_operator(grid: tuple[int, int], factor: int) -> np.ndarray:
    """Ideal instrument with ``factor``-times coarser pixels (block means)."""
    return binning_matrix(grid, factor) / factor ** 2


def reduction_mse(a: np.ndarray, sigma: np.ndarray, u: np.ndarray, tol: float = 1e-10) -> float:
    """Mean per-output-pixel MSE of the reduction estimate of ``U f``; inf if ``U f`` is not estimable."""
    a_pinv = pseudoinverse(a, tol)
    if np.max(np.abs(u @ (np.eye(a.shape[1]) - a_pinv @ a)), initial=0) > 1e-8:
        return float("inf")
    normal = a.T @ pseudoinverse(sigma, tol) @ a
    est_cov = u @ pseudoinverse(normal, tol) @ u.T
    return float(np.trace(est_cov) / u.shape[0])


def effective_resolution_curve(a: np.ndarray, sigma: np.ndarray, mse_budgets: Sequence[float],
                               grid: tuple[int, int], factors: Sequence[int] | None = None,
                               tol: float = 1e-10) -> list[tuple[float, int]]:
    """For each MSE budget, the largest rank of a block-averaging U meeting it.

    Candidate instruments average ``k x k`` pixel blocks for each ``k`` in
    ``factors`` (default: all divisors of the grid). A budget no candidate
    meets maps to rank 0.
    """
    rows, cols = grid
    if factors is None:
        factors = [k for k in range(1, min(rows, cols) + 1) if rows % k == 0 and cols % k == 0]
    sigma = np.asarray(sigma, dtype=float)
    levels = []
    for k in factors:
        u = averaging_operator(grid, k)
        levels.append((u.shape[0], reduction_mse(a, sigma, u, tol)))
    out = []
    for budget in mse_budgets:
        ok = [rank for rank, err in levels if err <= budget]
        out.append((budget, max(ok) if ok else 0))
    return out
