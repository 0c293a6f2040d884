import numpy as np
import pytest

from fock_oracle import FockPixel, brute_force_block, grid_moment, product_standard_error
from mgi import ConsistencyError
from mgi.correlation import (
    ObjectImage,
    binning_matrix,
    build_covariance,
    build_measurement_operator,
    build_structured_covariance,
    covariance_block,
    ghost_image_mean,
    gi_coefficient,
    gi_coefficients,
    group_moments,
    image_covariance,
    invert_image,
    mean_intensity,
)
from mgi.optics import PhysicalParams, converter_matrix, single_pixel_table
from mgi.wick import gaussian_moment, number


def _q(zeta, xi):
    return converter_matrix(PhysicalParams(zeta=zeta, coupling_ratio=xi, grid=(1, 1)))


@pytest.fixture(scope="module")
def fock_half():
    return FockPixel(0.5, 0.4, k_max=30)


@pytest.fixture(scope="module")
def fock_one():
    return FockPixel(1.0, 0.4, k_max=60)


def _rel(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300)


# -- object images ----------------------------------------------------------


def test_object_image_validation():
    with pytest.raises(ValueError):
        ObjectImage(np.array([0.5, 0.5]))
    with pytest.raises(ValueError):
        ObjectImage(np.array([[1.2]]))
    with pytest.raises(ValueError):
        ObjectImage(np.array([[np.nan]]))
    img = ObjectImage(np.array([[0.0, 1.0]]))
    assert img.grid == (1, 2)
    with pytest.raises(ValueError):
        img.values[0, 0] = 1.0


# -- means and coefficients ---------------------------------------------------


@pytest.mark.parametrize("fixture", ["fock_half", "fock_one"])
def test_means_and_coefficients_match_fock(fixture, request):
    fock = request.getfixturevalue(fixture)
    zeta = 0.5 if fixture == "fock_half" else 1.0
    q = _q(zeta, 0.4)
    for arm in (1, 2, 3, 4):
        assert _rel(mean_intensity(q, arm)[0, 0], fock.number_moment([arm])) < 1e-6
    for j in (2, 3, 4):
        ref = fock.number_moment([1, j]) - fock.number_moment([1]) * fock.number_moment([j])
        assert _rel(gi_coefficient(q, j), ref) < 1e-6


def test_two_mode_coefficient_closed_form():
    z = 0.5
    fock = FockPixel(z, 0.0, k_max=80)
    c2 = gi_coefficient(_q(z, 0.0), 2)
    s2, ch2 = np.sinh(z) ** 2, np.cosh(z) ** 2
    # covariance, not the raw correlation <n1 n2> = s2 ch2 + s2^2
    assert c2 == pytest.approx(s2 * ch2, rel=1e-12)
    assert fock.number_moment([1, 2]) == pytest.approx(s2 * ch2 + s2 ** 2, rel=1e-10)
    assert c2 == pytest.approx(fock.number_moment([1, 2]) - fock.number_moment([1]) ** 2, rel=1e-10)


def test_coefficients_at_default_parameters():
    q = converter_matrix(PhysicalParams())
    c = gi_coefficients(q)
    assert np.all(c > 0)
    np.testing.assert_allclose(c, group_moments(q).c, rtol=1e-8)


def test_coefficients_vanish_without_photons_or_coupling():
    np.testing.assert_allclose(gi_coefficients(_q(0.0, 0.4)), 0, atol=1e-15)
    c = gi_coefficients(_q(1.0, 0.0))
    assert c[0] > 0
    np.testing.assert_allclose(c[1:], 0, atol=1e-15)
    with pytest.raises(ValueError):
        gi_coefficient(_q(1.0, 0.4), 1)


def test_coefficient_cross_check_detects_mismatch(monkeypatch):
    import mgi.correlation as corr

    q = _q(0.7, 0.4)
    gm = corr.group_moments(q)
    fake = corr.GroupMoments(**{**gm.__dict__, "a1": gm.a1 * 1.1})
    monkeypatch.setattr(corr, "group_moments", lambda _: fake)
    with pytest.raises(ConsistencyError):
        corr.gi_coefficient(q, 2)


# -- ghost-image means and the measurement operator -----------------------------


def test_single_pixel_is_inverted():
    f = np.zeros((3, 4))
    f[0, 1] = 1.0
    g = ghost_image_mean(ObjectImage(f), 2.0)
    assert g[2, 2] == 2.0 and g.sum() == 2.0


def test_checkerboard_is_inverted():
    f = (np.indices((4, 5)).sum(axis=0) % 2).astype(float)
    g = ghost_image_mean(ObjectImage(f), 3.0)
    np.testing.assert_array_equal(g, 3.0 * f[::-1, ::-1])
    np.testing.assert_array_equal(invert_image(invert_image(f)), f)


def test_uniform_object_gives_constant_map():
    g = ghost_image_mean(ObjectImage.uniform((3, 3)), 1.5)
    np.testing.assert_array_equal(g, np.full((3, 3), 1.5))


def test_operator_stacks_inversions():
    model = build_measurement_operator([1, 1, 1], (2, 2))
    perm = np.fliplr(np.eye(4))
    np.testing.assert_array_equal(model.a, np.vstack([perm] * 3))
    assert np.linalg.matrix_rank(model.a) == 4


def test_operator_reproduces_ghost_image_means():
    q = _q(1.0, 0.4)
    c = gi_coefficients(q)
    rng = np.random.default_rng(3)
    f = ObjectImage(rng.uniform(size=(3, 4)))
    model = build_measurement_operator(c, f.grid)
    expected = np.concatenate([ghost_image_mean(f, cj).ravel() for cj in c])
    np.testing.assert_allclose(model.apply(f), expected, rtol=1e-14)
    np.testing.assert_allclose(model.a @ f.flat, expected, rtol=1e-14)


def test_binning_on_four_by_four():
    b = binning_matrix((4, 4), 2)
    f = np.arange(16.0).reshape(4, 4)
    np.testing.assert_array_equal(b @ f.ravel(), [0 + 1 + 4 + 5, 2 + 3 + 6 + 7, 8 + 9 + 12 + 13, 10 + 11 + 14 + 15])
    model = build_measurement_operator([1, 1, 1], (4, 4), [b, b, b])
    assert model.a.shape == (12, 16)
    assert model.block_rows == [4, 4, 4]
    np.testing.assert_allclose(model.apply(f / 15), np.tile(b @ f[::-1, ::-1].ravel() / 15, 3))
    with pytest.raises(ValueError):
        binning_matrix((4, 4), 3)
    with pytest.raises(ValueError):
        build_measurement_operator([1, 1, 1], (4, 4), [b, b])
    with pytest.raises(ValueError):
        build_measurement_operator([1, 1, 1], (4, 4), [b, b, np.ones((4, 9))])


# -- covariance -------------------------------------------------------------------


def _random_object(grid, seed=0):
    return ObjectImage(np.random.default_rng(seed).uniform(size=grid))


@pytest.mark.parametrize("grid", [(1, 1), (1, 2)])
@pytest.mark.parametrize("fixture", ["fock_half", "fock_one"])
def test_covariance_blocks_match_fock(grid, fixture, request):
    fock = request.getfixturevalue(fixture)
    zeta = 0.5 if fixture == "fock_half" else 1.0
    q = _q(zeta, 0.4)
    f = _random_object(grid, seed=7)
    perm = np.arange(f.flat.size)[::-1]
    for i in (2, 3, 4):
        for j in (2, 3, 4):
            ref = brute_force_block(fock, f.flat, i, j)[np.ix_(perm, perm)]
            got = covariance_block(f, q, i, j)
            assert _rel(got, ref) < 1e-6


def test_single_pixel_covariance_is_eight_operator_moment():
    q = _q(0.8, 0.4)
    table = single_pixel_table(q)
    cov = build_covariance(ObjectImage.uniform((1, 1)), q).sigma
    for a, i in enumerate((2, 3, 4)):
        for b, j in enumerate((2, 3, 4)):
            joint = gaussian_moment(number(1) + number(i) + number(1) + number(j), table).real
            left = gaussian_moment(number(1) + number(i), table).real
            right = gaussian_moment(number(1) + number(j), table).real
            assert cov[a, b] == pytest.approx(joint - left * right, rel=1e-10)


def test_zero_blocks_without_photons_or_bucket_signal():
    f = _random_object((2, 2))
    assert np.all(covariance_block(f, _q(0.0, 0.4), 2, 3) == 0)
    opaque = ObjectImage(np.zeros((2, 2)))
    for i in (2, 3, 4):
        np.testing.assert_allclose(covariance_block(opaque, _q(1.0, 0.4), i, i), 0, atol=1e-15)


def test_decoupled_arms_have_no_noise():
    f = _random_object((2, 2))
    q = _q(1.0, 0.0)
    assert np.abs(covariance_block(f, q, 2, 2)).max() > 0
    for i, j in [(3, 3), (4, 4), (2, 3), (3, 4)]:
        np.testing.assert_allclose(covariance_block(f, q, i, j), 0, atol=1e-15)


def test_frame_averaging_scales_covariance():
    f = _random_object((2, 3))
    q = _q(1.0, 0.4)
    one = covariance_block(f, q, 2, 4, n_frames=1)
    many = covariance_block(f, q, 2, 4, n_frames=250)
    np.testing.assert_allclose(many, one / 250, rtol=1e-14)
    with pytest.raises(ValueError):
        covariance_block(f, q, 2, 4, n_frames=0)


@pytest.mark.parametrize("zeta", [0.5, 1.0, 6.0])
def test_covariance_symmetric_psd(zeta):
    q = _q(zeta, 0.4)
    cov = build_covariance(_random_object((3, 3), seed=1), q).sigma
    scale = np.abs(cov).max()
    assert np.abs(cov - cov.T).max() < 1e-10 * scale
    assert np.linalg.eigvalsh(cov)[0] > -1e-9 * scale


def test_zero_detectors_give_zero_covariance():
    z = np.zeros((2, 4))
    cov = build_covariance(_random_object((2, 2)), _q(1.0, 0.4), detectors=[z, z, z])
    assert cov.sigma.shape == (6, 6)
    assert np.all(cov.sigma == 0)


def test_binned_covariance_is_conjugated():
    f = _random_object((4, 4))
    q = _q(1.0, 0.4)
    b = binning_matrix((4, 4), 2)
    cov = build_covariance(f, q, detectors=[b, b, b])
    np.testing.assert_allclose(cov.block(2, 3), b @ covariance_block(f, q, 2, 3) @ b.T, rtol=1e-12)


@pytest.mark.parametrize("zeta", [0.5, 6.0])
def test_structured_equals_dense(zeta):
    q = _q(zeta, 0.4)
    f = _random_object((3, 4), seed=2)
    dense = build_covariance(f, q, n_frames=7, white_noise=0.3).sigma
    structured = build_structured_covariance(f, q, n_frames=7, white_noise=0.3)
    assert _rel(structured.to_dense(), dense) < 1e-12
    xi = np.arange(36.0)
    np.testing.assert_array_equal(structured.to_detector_order(structured.to_crystal_order(xi)), xi)


def test_structured_sampling_reproduces_covariance():
    q = _q(0.5, 0.4)
    f = _random_object((2, 2), seed=4)
    structured = build_structured_covariance(f, q, white_noise=0.01)
    rng = np.random.default_rng(11)
    n = 40000
    draws = np.array([structured.sample(rng) for _ in range(n)])
    emp = np.cov(draws, rowvar=False)
    sigma = structured.to_dense()
    se = np.sqrt((sigma ** 2 + np.outer(np.diag(sigma), np.diag(sigma))) / n)
    assert np.all(np.abs(emp - sigma) < 5 * se)


def test_image_covariance_is_the_pixel_local_part():
    """Same-pixel covariance = local block + common-mode terms in span(1, f, f^2)."""
    q = _q(0.8, 0.4)
    f = _random_object((2, 3), seed=5)
    local = build_structured_covariance(f, q)
    dense = build_covariance(f, q).sigma
    n = f.flat.size
    perm = np.arange(n)[::-1]
    same_pixel = np.array([[np.diag(dense[a * n:(a + 1) * n, b * n:(b + 1) * n])[perm] for b in range(3)]
                           for a in range(3)]).transpose(2, 0, 1)
    low = np.einsum("nk,ikjl,nl->nij", local.basis, local.lowrank.reshape(3, 3, 3, 3), local.basis)
    np.testing.assert_allclose(local.local_total() + low, same_pixel, rtol=1e-10)
    np.testing.assert_allclose(image_covariance(local), local.local_total().mean(axis=0))
    single = ObjectImage.uniform((1, 1))
    one = build_structured_covariance(single, q)
    np.testing.assert_allclose(one.to_dense(), build_covariance(single, q).sigma, rtol=1e-12)


def test_raw_frame_monte_carlo_matches_analytic_covariance(fock_half):
    """Photon-number frames drawn from the Fock distribution, correlators formed per frame."""
    grid = (2, 2)
    n_pix = 4
    q = _q(0.5, 0.4)
    f = ObjectImage.uniform(grid)
    rng = np.random.default_rng(2024)
    n_frames = 10 ** 6
    probs = fock_half.probs / fock_half.probs.sum()
    draws = rng.choice(len(probs), size=(n_frames, n_pix), p=probs)
    occ = fock_half.occ[draws]                     # (frames, pixel, arm)
    bucket = occ[:, :, 0] @ f.flat
    mirror = np.arange(n_pix)[::-1]
    samples = np.concatenate([bucket[:, None] * occ[:, mirror, j] for j in (1, 2, 3)], axis=1)
    sigma = build_covariance(f, q).sigma
    centred = samples - samples.mean(axis=0)
    emp = centred.T @ centred / (n_frames - 1)
    # exact standard errors from the Fock distribution; sample-based ones are
    # unreliable for the rare coincidences that dominate the arm 3 and 4 entries
    bucket_form = [(w, p, 1) for p, w in enumerate(f.flat)]
    forms = [[bucket_form, [(1.0, int(mirror[r]), j)]] for j in (2, 3, 4) for r in range(n_pix)]
    se = np.array([[product_standard_error(fock_half, fu, fv, n_frames) for fv in forms] for fu in forms])
    assert np.all(np.abs(emp - sigma) < 5 * se)
    # means: E[I1 n_j] - E[I1] E[n_j] = c_j f(-r)
    c = gi_coefficients(q)
    means = samples.mean(axis=0) - bucket.mean() * np.concatenate([occ[:, mirror, j].mean(axis=0) for j in (1, 2, 3)])
    expected = np.repeat(c, n_pix)
    assert np.all(np.abs(means - expected) < 5 * np.sqrt(np.diag(sigma) / n_frames))


def test_grid_moment_oracle_factorizes(fock_half):
    assert grid_moment(fock_half, [(0, 1), (1, 2)]) == pytest.approx(
        fock_half.number_moment([1]) * fock_half.number_moment([2]))
