import time

import numpy as np
import pytest

from probe_eit.errors import DimensionMismatch, MaskMismatch
from probe_eit.forward import MeasurementFrame, solve_forward
from probe_eit.linear import reconstruct_gn, total_variation
from probe_eit.mesh import AnnularMesh
from probe_eit.pdipm import (TvConfig, build_edge_operator, outer_boundary_operator,
                             reconstruct_pdipm, tv_objective, tv_operator,
                             write_convergence_log)
from probe_eit.scenario import rasterize_target, target_at_distance


@pytest.fixture(scope="module")
def target_frame(small_mesh, probe, pattern):
    t = target_at_distance(probe, 1.0, (1.5 * probe.radius, probe.radius), 0.4)
    return solve_forward(small_mesh, rasterize_target(small_mesh, t), pattern, probe)


@pytest.fixture(scope="module")
def result(small_mesh, small_ref, target_frame):
    return reconstruct_pdipm(small_ref[2], target_frame, small_ref[1], mesh=small_mesh)


def census(mesh):
    """Brute-force count of element edges shared by exactly two elements."""
    seen = {}
    for el in mesh.elements.tolist():
        for i in range(3):
            key = tuple(sorted((el[i], el[(i + 1) % 3])))
            seen[key] = seen.get(key, 0) + 1
    return sum(1 for c in seen.values() if c == 2)


def normalized_objective(J, d, L, cfg, values):
    A = J.entries
    dn, jn = np.linalg.norm(d), np.linalg.norm(A)
    w = np.abs(L).sum(axis=1).A1 / 2.0
    return tv_objective(A / jn, d / dn, L / w.mean(), cfg.tv_lambda / L.shape[0],
                        values / (dn / jn))


def test_constant_image_has_zero_differences(small_mesh):
    D = build_edge_operator(small_mesh)
    assert np.all(D @ np.full(small_mesh.n_elements, 3.7) == 0)


def test_row_count_matches_census(small_mesh):
    assert build_edge_operator(small_mesh).shape == (census(small_mesh), small_mesh.n_elements)


def test_two_element_mesh():
    nodes = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]
    mesh = AnnularMesh(nodes, [(0, 1, 2), (0, 2, 3)], (), 0.0, 2.0)
    D = build_edge_operator(mesh).toarray()
    w = np.sqrt(2.0)
    assert D.shape == (1, 2)
    np.testing.assert_allclose(np.abs(D[0]), [w, w])
    assert D[0].sum() == pytest.approx(0.0)


def test_outer_operator_length(small_mesh):
    B = outer_boundary_operator(small_mesh)
    # chords of the outer circle add up to slightly less than its circumference
    total = B.sum()
    circ = 2 * np.pi * small_mesh.outer_radius
    assert 0.99 * circ < total < circ
    assert tv_operator(small_mesh).shape[0] == B.shape[0] + census(small_mesh)
    assert tv_operator(small_mesh, anchor_outer=False).shape[0] == census(small_mesh)


def test_zero_data_zero_image(small_mesh, small_ref):
    ref = small_ref[1]
    res = reconstruct_pdipm(small_ref[2], ref, ref, mesh=small_mesh)
    assert np.all(res.image.values == 0)
    assert res.converged


def test_objective_decreases(small_mesh, small_ref, target_frame, result):
    J, ref = small_ref[2], small_ref[1]
    d = target_frame.valid - ref.valid
    L = tv_operator(small_mesh)
    cfg = TvConfig()
    f0 = normalized_objective(J, d, L, cfg, np.zeros(small_mesh.n_elements))
    f = normalized_objective(J, d, L, cfg, result.image.values)
    assert f0 == pytest.approx(1.0)
    assert f <= f0
    objectives = np.array([row[1] for row in result.log])
    assert f == pytest.approx(objectives.min(), rel=1e-9)
    best = np.minimum.accumulate(objectives)
    assert np.all(np.diff(best) <= 0)


def test_dual_feasible_every_iteration(result):
    assert all(row[5] <= 1 + 1e-12 for row in result.log)
    assert result.iterations >= 1
    assert result.iterations == len(result.log) - 1


def test_converges_with_defaults(result):
    assert result.converged
    assert result.duality_gap < TvConfig().duality_gap_tol
    assert result.flags == ()


def test_max_iters_flag(small_mesh, small_ref, target_frame):
    res = reconstruct_pdipm(small_ref[2], target_frame, small_ref[1],
                            TvConfig(max_iters=2), mesh=small_mesh)
    assert not res.converged and "max_iters" in res.flags and res.iterations == 2


def test_insulator_is_negative(result):
    v = result.image.values
    assert v.min() < 0 and abs(v.min()) > abs(v.max())


def test_large_lambda_flattens(small_mesh, small_ref, target_frame):
    tvs = []
    for lam in (3e1, 3e2, 3e3):
        r = reconstruct_pdipm(small_ref[2], target_frame, small_ref[1],
                              TvConfig(tv_lambda=lam), mesh=small_mesh)
        tvs.append(total_variation(small_mesh, r.image.values))
    assert tvs[0] > tvs[1] > tvs[2]
    assert tvs[2] < 0.2 * tvs[0]


def test_scale_by_data(small_mesh, small_ref, target_frame, result):
    ref = small_ref[1]
    v = ref.voltages + 2.0 * (target_frame.voltages - ref.voltages)
    twice = reconstruct_pdipm(small_ref[2], MeasurementFrame(v, ref.valid_mask), ref,
                              mesh=small_mesh)
    np.testing.assert_allclose(twice.image.values, 2 * result.image.values,
                               rtol=1e-6, atol=1e-9 * np.abs(result.image.values).max())


def test_deterministic(small_mesh, small_ref, target_frame, result):
    again = reconstruct_pdipm(small_ref[2], target_frame, small_ref[1], mesh=small_mesh)
    assert np.array_equal(again.image.values, result.image.values)


def test_relinearize_runs(small_mesh, small_ref, target_frame, probe, pattern):
    res = reconstruct_pdipm(small_ref[2], target_frame, small_ref[1],
                            TvConfig(relinearize=True, max_iters=4),
                            mesh=small_mesh, probe=probe, pattern=pattern)
    assert np.all(np.isfinite(res.image.values))
    with pytest.raises(ValueError):
        reconstruct_pdipm(small_ref[2], target_frame, small_ref[1],
                          TvConfig(relinearize=True), mesh=small_mesh)


def test_errors(small_mesh, small_ref, target_frame, setup):
    ref = small_ref[1]
    with pytest.raises(MaskMismatch):
        reconstruct_pdipm(small_ref[2], MeasurementFrame(target_frame.voltages,
                                                         target_frame.valid_mask, 3.0),
                          ref, mesh=small_mesh)
    with pytest.raises(ValueError):
        reconstruct_pdipm(small_ref[2], target_frame, ref)
    with pytest.raises(DimensionMismatch):
        reconstruct_pdipm(small_ref[2], target_frame, ref, L=setup.tv)


@pytest.mark.parametrize("kw", [dict(tv_lambda=0.0), dict(line_search_shrink=1.0),
                                dict(max_iters=0), dict(beta=1.0, beta_start=0.1),
                                dict(beta_factor=0.0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TvConfig(**kw)


def test_convergence_log(tmp_path, result):
    write_convergence_log(result, tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "iteration,objective,duality_gap,beta,step,max_abs_dual"
    assert len(lines) == len(result.log) + 1


def test_slower_than_gn(setup, probe):
    t = target_at_distance(probe, 2.0, (1.5 * probe.radius, probe.radius), 1.0)
    frame = solve_forward(setup.mesh, rasterize_target(setup.mesh, t), setup.pattern, probe)

    def best_of(fn, n):
        ts = []
        for _ in range(n):
            t0 = time.perf_counter()
            fn()
            ts.append(time.perf_counter() - t0)
        return min(ts)

    t_gn = best_of(lambda: reconstruct_gn(setup.R, frame, setup.v_ref), 20)
    t_tv = best_of(lambda: reconstruct_pdipm(setup.J, frame, setup.v_ref, L=setup.tv), 2)
    assert t_tv >= 5 * t_gn
