import numpy as np
import pytest

from probe_eit.errors import DimensionMismatch, MaskMismatch, SingularRegularizedSystem
from probe_eit.forward import ConductivityField, MeasurementFrame, SensitivityMatrix, solve_forward
from probe_eit.linear import (ConductivityImage, RegularizationPrior, build_reconstruction_matrix,
                              laplacian_matrix, prior_matrix, read_image, reconstruct_gn,
                              total_variation, write_image)
from probe_eit.scenario import rasterize_target, target_at_distance


@pytest.fixture(scope="module")
def small_R(small_mesh, small_ref):
    return build_reconstruction_matrix(small_ref[2], RegularizationPrior(), small_mesh)


@pytest.fixture(scope="module")
def target_frame(small_mesh, small_ref, probe, pattern):
    t = target_at_distance(probe, 1.0, (1.5 * probe.radius, 1.0 * probe.radius), 0.4)
    return solve_forward(small_mesh, rasterize_target(small_mesh, t), pattern, probe)


def shifted(ref: MeasurementFrame, dv):
    v = ref.voltages.copy()
    v[ref.valid_mask] += dv
    return MeasurementFrame(v, ref.valid_mask, ref.amplitude)


def test_default_shape(setup):
    assert setup.R.shape == (setup.mesh.n_elements, 40)
    assert np.all(np.isfinite(setup.R.entries))


@pytest.mark.parametrize("kind", ["identity", "laplacian", "noser"])
def test_prior_symmetric_psd(small_mesh, small_ref, kind):
    P = prior_matrix(kind, small_ref[2].entries, small_mesh)
    d = P - P.T
    assert d.nnz == 0 or abs(d).max() == 0
    # Gershgorin: diagonal dominance gives PSD for the Laplacian, diagonal priors are positive
    P = P.tocsr()
    off = np.asarray(abs(P).sum(axis=1)).ravel() - abs(P.diagonal())
    assert np.all(P.diagonal() - off >= -1e-12)


def test_laplacian_constant_null_space(small_mesh):
    L = laplacian_matrix(small_mesh)
    np.testing.assert_allclose(L @ np.ones(small_mesh.n_elements), 0, atol=1e-12)


def test_huge_lambda_vanishes(small_mesh, small_ref, small_R):
    J = small_ref[2].entries
    norm = np.linalg.norm(J.T @ J, 2)
    big = build_reconstruction_matrix(
        small_ref[2], RegularizationPrior(kind="identity", lam=float(np.sqrt(1e12 * norm))),
        small_mesh)
    assert np.abs(big.entries).max() < 1e-6 * np.abs(small_R.entries).max()


@pytest.mark.parametrize("kind", ["identity", "laplacian", "noser"])
def test_resolution_near_probe(small_mesh, small_ref, kind):
    J = small_ref[2]
    R = build_reconstruction_matrix(J, RegularizationPrior(kind=kind), small_mesh)
    RJ = R.entries @ J.entries
    # element of the first ring facing electrode 0
    near = np.flatnonzero(small_mesh.element_ring == 0)
    c = small_mesh.centroids[near]
    k = near[np.argmin(np.abs(np.arctan2(c[:, 1], c[:, 0])))]
    row = np.abs(RJ[k])
    off = np.delete(row, k).mean()
    assert row[k] > 10 * off


def test_matches_normal_equations(small_mesh, small_ref):
    J = small_ref[2]
    prior = RegularizationPrior(kind="laplacian", lam=1e-3)
    R = build_reconstruction_matrix(J, prior, small_mesh)
    A = J.entries
    P = prior_matrix("laplacian", A, small_mesh).toarray()
    direct = np.linalg.solve(A.T @ A + 1e-6 * P, A.T)
    np.testing.assert_allclose(R.entries, direct, rtol=1e-6, atol=1e-8 * np.abs(direct).max())


def test_zero_difference_gives_zero_image(small_R, small_ref):
    ref = small_ref[1]
    img = reconstruct_gn(small_R, ref, ref)
    assert np.all(img.values == 0)
    assert len(img) == small_R.shape[0]


def test_linearity(small_R, small_ref, rng):
    ref = small_ref[1]
    d1, d2 = rng.normal(size=(2, 40)) * 1e-3
    a, b = 0.7, -2.3
    r1 = reconstruct_gn(small_R, shifted(ref, d1), ref).values
    r2 = reconstruct_gn(small_R, shifted(ref, d2), ref).values
    r12 = reconstruct_gn(small_R, shifted(ref, a * d1 + b * d2), ref).values
    assert np.abs(r12 - (a * r1 + b * r2)).max() < 1e-10 * max(1.0, np.abs(r12).max())


def test_deterministic(small_mesh, small_ref, target_frame):
    R1 = build_reconstruction_matrix(small_ref[2], RegularizationPrior(), small_mesh)
    R2 = build_reconstruction_matrix(small_ref[2], RegularizationPrior(), small_mesh)
    assert np.array_equal(R1.entries, R2.entries)
    ref = small_ref[1]
    assert np.array_equal(reconstruct_gn(R1, target_frame, ref).values,
                          reconstruct_gn(R2, target_frame, ref).values)


def test_insulator_reconstructs_negative(small_mesh, small_R, small_ref, target_frame):
    img = reconstruct_gn(small_R, target_frame, small_ref[1]).values
    assert img.min() < 0 and abs(img.min()) > abs(img.max())


def test_tv_non_increasing_in_lambda(small_mesh, small_ref, target_frame):
    ref = small_ref[1]
    J = small_ref[2]
    base = build_reconstruction_matrix(J, RegularizationPrior(kind="identity"), small_mesh).lam
    tvs = []
    for f in np.logspace(-1, 3, 5):
        R = build_reconstruction_matrix(J, RegularizationPrior(kind="identity", lam=base * f),
                                        small_mesh)
        tvs.append(total_variation(small_mesh, reconstruct_gn(R, target_frame, ref).values))
    assert np.all(np.diff(tvs) <= 1e-12 * tvs[0])


def test_mask_mismatch(small_R, small_ref):
    ref = small_ref[1]
    mask = ref.valid_mask.copy()
    mask[np.flatnonzero(mask)[0]] = False
    mask[np.flatnonzero(~mask)[0]] = True
    other = MeasurementFrame(ref.voltages, mask, ref.amplitude)
    with pytest.raises(MaskMismatch):
        reconstruct_gn(small_R, other, ref)
    with pytest.raises(MaskMismatch):
        reconstruct_gn(small_R, MeasurementFrame(ref.voltages, ref.valid_mask, 2.0), ref)


def test_singular_system(small_mesh, small_ref):
    J = small_ref[2]
    zero = SensitivityMatrix(np.zeros_like(J.entries), J.reference_field, J.valid_mask)
    with pytest.raises(SingularRegularizedSystem):
        build_reconstruction_matrix(zero, RegularizationPrior(kind="identity", lam=0.0),
                                    small_mesh)
    with pytest.raises(SingularRegularizedSystem):
        build_reconstruction_matrix(zero, RegularizationPrior(kind="noser"), small_mesh)


def test_prior_validation(small_ref):
    with pytest.raises(ValueError):
        RegularizationPrior(lam=-1.0)
    with pytest.raises(ValueError):
        RegularizationPrior(kind="bogus")
    with pytest.raises(ValueError):
        prior_matrix("laplacian", small_ref[2].entries, None)


def test_prior_mesh_mismatch(setup, small_ref):
    with pytest.raises(DimensionMismatch):
        prior_matrix("noser", small_ref[2].entries, setup.mesh)


def test_image_roundtrip(tmp_path, rng):
    img = ConductivityImage(rng.normal(size=17), "abc")
    write_image(img, tmp_path / "i.csv")
    back = read_image(tmp_path / "i.csv", "abc")
    assert np.array_equal(back.values, img.values)
    assert (tmp_path / "i.csv").read_text().splitlines()[0] == "element,delta_sigma"


def test_absolute_image(small_mesh):
    s0 = ConductivityField.uniform(small_mesh, 2.0)
    img = ConductivityImage(np.full(small_mesh.n_elements, -0.5), small_mesh.mesh_id)
    np.testing.assert_allclose(img.absolute(s0), 1.5)
