import time

import numpy as np
import pytest

from mgi.config import ExperimentConfig
from mgi.correlation import ObjectImage, build_covariance, build_measurement_operator, gi_coefficients
from mgi.optics import PhysicalParams, converter_matrix
from mgi.pipeline import displayed_images, report_text, run_pipeline, sample_acquisition


def _csv(tmp_path, values, name="obj.csv"):
    p = tmp_path / name
    np.savetxt(p, values, delimiter=",")
    return str(p)


def test_noiseless_uniform_object(tmp_path):
    cfg = ExperimentConfig(grid=(4, 4), object=_csv(tmp_path, np.ones((4, 4))), noise=False,
                           out_dir=str(tmp_path / "o"))
    result = run_pipeline(cfg)
    c = gi_coefficients(converter_matrix(cfg.physical_params()))
    for img, cj in zip(result.ghost_images, c):
        np.testing.assert_allclose(img, cj, rtol=1e-12)
    np.testing.assert_allclose(result.reduced, 1.0, atol=1e-9)
    np.testing.assert_allclose(result.sum_image, sum(result.ghost_images))


def test_noiseless_images_are_deinverted(tmp_path):
    f = np.zeros((4, 4))
    f[0, 1] = 1.0
    f[2, 3] = 0.5
    cfg = ExperimentConfig(grid=(4, 4), object=_csv(tmp_path, f), noise=False, zeta=1.0,
                           out_dir=str(tmp_path / "o"))
    result = run_pipeline(cfg)
    c = result.report["c_coeffs"]
    for img, cj in zip(result.ghost_images, c):
        np.testing.assert_allclose(img, cj * f, atol=1e-12 * cj)
    np.testing.assert_allclose(result.reduced, f, atol=1e-8)
    np.testing.assert_allclose(np.load(tmp_path / "o" / "sum.npy"), sum(result.ghost_images))


def test_binned_detectors_run(tmp_path):
    cfg = ExperimentConfig(grid=(4, 4), detectors="bin2", noise=False, zeta=1.0,
                           object=_csv(tmp_path, np.full((4, 4), 0.5)), out_dir=str(tmp_path / "o"))
    result = run_pipeline(cfg)
    assert result.ghost_images[0].shape == (4, 4)
    np.testing.assert_allclose(result.reduced, 0.5, atol=1e-8)


def test_sample_acquisition_statistics():
    q = converter_matrix(PhysicalParams(zeta=1.0, grid=(1, 1)))
    c = gi_coefficients(q)
    f = ObjectImage(np.array([[0.2, 1.0], [0.7, 0.4]]))
    model = build_measurement_operator(c, f.grid)
    sigma = build_covariance(f, q, 10)
    n = 20000
    draws = np.array([sample_acquisition(model, sigma, f, seed).xi for seed in range(n)])
    s = sigma.sigma
    se = np.sqrt((s ** 2 + np.outer(np.diag(s), np.diag(s))) / n)
    assert np.all(np.abs(np.cov(draws, rowvar=False) - s) < 5 * se)
    assert np.all(np.abs(draws.mean(axis=0) - model.apply(f)) < 5 * np.sqrt(np.diag(s) / n))
    a = sample_acquisition(model, sigma, f, 42).xi
    np.testing.assert_array_equal(a, sample_acquisition(model, sigma, f, 42).xi)
    np.testing.assert_array_equal(sample_acquisition(model, sigma, f, 1, noise=False).xi, model.apply(f))


def test_displayed_images_undo_inversion():
    model = build_measurement_operator([1.0, 2.0, 3.0], (2, 3))
    f = np.arange(6.0).reshape(2, 3) / 5
    images = displayed_images(model.apply(f), model)
    for img, cj in zip(images, (1.0, 2.0, 3.0)):
        np.testing.assert_allclose(img, cj * f)


def test_small_grid_is_fast(tmp_path):
    start = time.perf_counter()
    run_pipeline(ExperimentConfig(grid=(8, 8), out_dir=str(tmp_path / "o")))
    assert time.perf_counter() - start < 10


@pytest.mark.parametrize("grid", [(8, 8), (32, 32)])
def test_runs_are_byte_identical(tmp_path, grid):
    cfg = ExperimentConfig(grid=grid, seed=11)
    first = run_pipeline(cfg.replace(out_dir=str(tmp_path / "a")))
    second = run_pipeline(cfg.replace(out_dir=str(tmp_path / "b")))
    names = sorted(p.name for p in first.files)
    assert names == sorted(p.name for p in second.files)
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    third = run_pipeline(cfg.replace(seed=12, out_dir=str(tmp_path / "c")))
    assert (tmp_path / "c" / "ghost_arm2.npy").read_bytes() != (tmp_path / "a" / "ghost_arm2.npy").read_bytes()
    assert third.report["c_coeffs"] == first.report["c_coeffs"]


def test_report_text_format():
    text = report_text({"b": [1, 2], "a": 0.5, "flag": True, "n": 3})
    assert text.splitlines() == ["a = 0.5", "b = 1.0 2.0", "flag = true", "n = 3"]


def test_grey_object_reports_null_snr(tmp_path, capsys):
    from mgi.cli import main

    cfg = tmp_path / "c.cfg"
    cfg.write_text(f"grid = 4x4\nobject = {_csv(tmp_path, np.full((4, 4), 0.5))}\n")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    out = capsys.readouterr().out
    assert "snr_reduced = null" in out and "mse_reduced = " in out
