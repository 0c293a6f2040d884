"""Image-quality metrics and the summation-SNR report."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

SNR_CAP = 1e6


def snr(estimate: np.ndarray, truth: np.ndarray, cap: float = SNR_CAP) -> float:
    """Contrast-to-noise ratio of an estimate against a reference image.

    The estimate is fitted as ``alpha * truth + beta`` by least squares and
    rescaled as ``(estimate - beta) / alpha``. The signal is the mean of the
    rescaled estimate over transparent pixels (``truth == 1``) and the noise is
    the RMS of the rescaled estimate's residual over all pixels. The result is
    invariant under positive affine maps of the estimate; an estimate with no
    positive response to the truth scores 0.
    """
    est = np.asarray(estimate, dtype=float).ravel()
    t = np.asarray(truth, dtype=float).ravel()
    if est.shape != t.shape:
        raise ValueError(f"estimate has {est.size} pixels, truth has {t.size}")
    on = np.isclose(t, 1.0)
    if not on.any():
        raise ValueError("truth has no transparent pixels")
    design = np.column_stack([t, np.ones_like(t)])
    (alpha, beta), *_ = np.linalg.lstsq(design, est, rcond=None)
    resid = est - design @ np.array([alpha, beta])
    # relative threshold guards against round-off in the fit of constant images
    if alpha <= 1e-12 * max(np.max(np.abs(est)), 1e-300):
        return 0.0
    scaled = (est - beta) / alpha
    noise = np.sqrt(np.mean((resid / alpha) ** 2))
    signal = float(np.mean(scaled[on]))
    if noise <= signal / cap:
        return cap
    return min(signal / noise, cap)


def mse(estimate: np.ndarray, truth: np.ndarray) -> float:
    est = np.asarray(estimate, dtype=float)
    t = np.asarray(truth, dtype=float)
    if est.shape != t.shape:
        raise ValueError(f"shape mismatch {est.shape} vs {t.shape}")
    return float(np.mean((est - t) ** 2))


def summation_snr_ratio(c, cov, j_star: int) -> float:
    """Change of (power) SNR from summing the images relative to image ``j_star``.

    ``(sum c)^2 / (1^T C 1) * C[j*, j*] / c[j*]^2`` where ``c[j]`` is the gain of
    image j and ``C`` the covariance between images. ``j_star`` is 1-based
    (1 = first image).
    """
    c = np.asarray(c, dtype=float)
    cov = np.asarray(cov, dtype=float)
    n = c.size
    if cov.shape != (n, n):
        raise ValueError(f"covariance shape {cov.shape} does not match {n} images")
    if not 1 <= j_star <= n:
        raise ValueError(f"j_star must be in 1..{n}")
    k = j_star - 1
    if c[k] == 0:
        raise ValueError("reference image has zero gain")
    total_var = float(np.ones(n) @ cov @ np.ones(n))
    if total_var <= 0:
        raise ZeroDivisionError("covariance of the summed image is not positive")
    return float(c.sum() ** 2 / total_var * cov[k, k] / c[k] ** 2)


@dataclass
class SnrReport:
    """SNR fields are ``None`` when the truth has no transparent pixel to measure signal on."""

    c_coeffs: list[float]
    image_cov: list[list[float]]
    snr_per_arm: list[float] | None
    snr_sum: float | None
    snr_reduced: float | None
    best_arm: int | None
    ratio_reduced_best: float | None
    ratio_reduced_sum: float | None
    ratio_sum_best: float | None
    theoretical_sum_ratio: float | None
    mse_per_arm: list[float]
    mse_sum: float
    mse_reduced: float

    def to_dict(self) -> dict:
        return asdict(self)


def _ratio(a: float, b: float) -> float:
    return a / b if b else float("inf")


def build_report(truth: np.ndarray, ghost_images: list[np.ndarray], reduced: np.ndarray,
                 c, image_cov) -> SnrReport:
    """SNR/MSE summary of the ghost images, their sum and the reduced estimate.

    Ghost images are given on the object grid (already de-inverted); the
    power ratios compare ``snr**2`` so they are on the same footing as
    :func:`summation_snr_ratio`.
    """
    c = np.asarray(c, dtype=float)
    image_cov = np.asarray(image_cov, dtype=float)
    total = sum(ghost_images)
    errors = dict(
        mse_per_arm=[mse(g / ci, truth) if ci else float("inf") for g, ci in zip(ghost_images, c)],
        mse_sum=mse(total / c.sum(), truth) if c.sum() else float("inf"),
        mse_reduced=mse(reduced, truth),
    )
    if not np.isclose(truth, 1.0).any():
        return SnrReport(c.tolist(), image_cov.tolist(), None, None, None, None, None, None, None, None,
                         **errors)
    per_arm = [snr(g, truth) for g in ghost_images]
    s_sum = snr(total, truth)
    s_red = snr(reduced, truth)
    best = int(np.argmax(per_arm))
    best_snr = per_arm[best]
    return SnrReport(
        c_coeffs=c.tolist(),
        image_cov=image_cov.tolist(),
        snr_per_arm=per_arm,
        snr_sum=s_sum,
        snr_reduced=s_red,
        best_arm=best + 2,
        ratio_reduced_best=_ratio(s_red ** 2, best_snr ** 2),
        ratio_reduced_sum=_ratio(s_red ** 2, s_sum ** 2),
        ratio_sum_best=_ratio(s_sum ** 2, best_snr ** 2),
        theoretical_sum_ratio=summation_snr_ratio(c, image_cov, best + 1) if c[best] else None,
        **errors,
    )
