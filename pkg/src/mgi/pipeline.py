"""End-to-end simulation: object -> correlated ghost images -> reduction -> report."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mgi import ConsistencyError, __version__
from mgi.config import ExperimentConfig
from mgi.correlation import (
    CovarianceBlocks,
    MeasurementModel,
    ObjectImage,
    StructuredCovariance,
    binning_matrix,
    build_measurement_operator,
    build_structured_covariance,
    gi_coefficients,
    image_covariance,
    invert_image,
)
from mgi.images import load_object, write_image
from mgi.metrics import build_report
from mgi.optics import converter_matrix
from mgi.reduction import Covariance, NoiseModel, iterate_reduction

log = logging.getLogger(__name__)


@dataclass
class AcquisitionRecord:
    xi: np.ndarray
    seed: int
    n_frames: int
    fingerprint: str


def _eig_factor(sigma: np.ndarray, clip: float = 1e-10) -> np.ndarray:
    """L with L L^T = sigma; eigenvalues down to ``-clip * max|eig|`` are set to zero."""
    w, v = np.linalg.eigh(0.5 * (sigma + sigma.T))
    scale = max(np.max(np.abs(w)), 1e-300)
    if w.min() < -clip * scale:
        raise ConsistencyError(f"noise covariance not positive semidefinite (eigenvalue {w.min():.3e})")
    return v * np.sqrt(np.clip(w, 0.0, None))


def sample_acquisition(model: MeasurementModel, sigma: Covariance, f: ObjectImage, seed: int,
                       noise: bool = True, n_frames: int = 1, fingerprint: str = "") -> AcquisitionRecord:
    """Correlator outputs ``xi = A f + L z`` with ``z`` standard normal from ``seed``."""
    mean = model.apply(f)
    if noise:
        rng = np.random.default_rng(seed)
        if isinstance(sigma, StructuredCovariance):
            mean = mean + sigma.sample(rng)
        else:
            s = sigma.sigma if isinstance(sigma, CovarianceBlocks) else np.asarray(sigma)
            mean = mean + _eig_factor(s) @ rng.standard_normal(s.shape[0])
    return AcquisitionRecord(mean, seed, n_frames, fingerprint)


def detector_matrices(config: ExperimentConfig):
    k = config.detector_binning
    if k == 1:
        return None
    b = binning_matrix(config.grid, k)
    return (b, b, b)


def displayed_images(xi: np.ndarray, model: MeasurementModel) -> list[np.ndarray]:
    """Per-arm correlator outputs reshaped and de-inverted onto the object orientation.

    Binned detectors are expanded back to the object grid by pixel replication.
    """
    rows, cols = model.grid
    out = []
    start = 0
    for n_rows in model.block_rows:
        block = xi[start:start + n_rows]
        start += n_rows
        factor = int(round((rows * cols / n_rows) ** 0.5))
        img = invert_image(block.reshape(rows // factor, cols // factor))
        if factor > 1:
            img = np.kron(img, np.ones((factor, factor)))
        out.append(img)
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@dataclass
class PipelineResult:
    out_dir: Path
    files: list[Path]
    ghost_images: list[np.ndarray]
    sum_image: np.ndarray
    reduced: np.ndarray
    report: dict
    truth: np.ndarray


def run_pipeline(config: ExperimentConfig) -> PipelineResult:
    params = config.physical_params()
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    q = converter_matrix(params)
    c = gi_coefficients(q)
    truth = load_object(config.object, config.grid)
    detectors = detector_matrices(config)
    model = build_measurement_operator(c, config.grid, detectors)
    mode = config.covariance_mode()
    noise_model = NoiseModel(q, config.n_frames, detectors, config.white_noise, mode)
    log.info("c = %s, covariance mode %s", c, mode)

    sigma = noise_model(truth)
    acq = sample_acquisition(model, sigma, truth, config.seed, config.noise,
                             config.n_frames, config.fingerprint())
    ghosts = displayed_images(acq.xi, model)
    total = sum(ghosts)
    result = iterate_reduction(acq.xi, model, noise_model, config.reduction_config())
    reduced = result.estimate.values
    log.info("reduction: %d iterations, converged=%s", result.iterations, result.converged)

    # image covariance reported for ideal detectors on the object grid
    local = build_structured_covariance(truth, q, config.n_frames, config.white_noise)
    report = build_report(truth.values, ghosts, reduced, c, image_covariance(local)).to_dict()
    report["iterations"] = result.iterations
    report["converged"] = result.converged

    files: list[Path] = []
    if config.emit_ghost:
        for arm, img in zip((2, 3, 4), ghosts):
            files += write_image(out / f"ghost_arm{arm}", img)
            np.save(out / f"ghost_arm{arm}.npy", img)
            files.append(out / f"ghost_arm{arm}.npy")
    if config.emit_sum:
        files += write_image(out / "sum", total)
        np.save(out / "sum.npy", total)
        files.append(out / "sum.npy")
    if config.emit_reduced:
        files += write_image(out / "reduced", reduced, 0.0, 1.0)
        np.save(out / "reduced.npy", reduced)
        files.append(out / "reduced.npy")
    if config.emit_report:
        (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        (out / "report.txt").write_text(report_text(report))
        files += [out / "report.json", out / "report.txt"]

    manifest = {
        "version": __version__,
        "seed": config.seed,
        "n_frames": config.n_frames,
        "config_hash": config.fingerprint(),
        "config": {k: v for k, v in config.to_dict().items() if k != "out_dir"},
        "covariance_mode": mode,
        "files": {p.name: _sha256(p) for p in files},
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    files.append(manifest_path)
    return PipelineResult(out, files, ghosts, total, reduced, report, truth.values)


def report_text(report: dict) -> str:
    lines = []
    for key in sorted(report):
        val = report[key]
        if val is None:
            val = "null"
        elif isinstance(val, list):
            val = " ".join(repr(float(v)) for v in np.ravel(val))
        elif isinstance(val, bool):
            val = str(val).lower()
        elif isinstance(val, int):
            val = str(val)
        else:
            val = repr(float(val))
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"
