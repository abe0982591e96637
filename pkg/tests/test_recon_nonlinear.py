import numpy as np
import pytest
import scipy.sparse as sp

from stroke_eit.datagen import MonitoringPair, NoiseModel, simulate_pair
from stroke_eit.fem import adjacent_patterns, solve_forward
from stroke_eit.mesh import HeadGeometrySpec, Mesh, generate_head_mesh
from stroke_eit.recon_nonlinear import (
    MOParams,
    MOProblem,
    ROIMap,
    layered_reference,
    load_mo,
    reconstruct_mo,
    save_mo,
    smoothed_tv,
    weighted_tv,
)
from stroke_eit.phantom import spherical_growth_pair

Z = 1e-3


def one_triangle():
    return Mesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([[0, 1, 2]]),
                np.array([[0, 1], [1, 2], [2, 0]]), (np.array([0]), np.array([1])), np.array([0]))


def fd_check(fun, x, rng, directions=5):
    _, g = fun(x)
    worst = 0.0
    for _ in range(directions):
        d = rng.standard_normal(x.size)
        h = 1e-6 * max(1.0, np.abs(x).max())
        fd = (fun(x + h * d)[0] - fun(x - h * d)[0]) / (2 * h)
        worst = max(worst, abs(fd - g @ d) / abs(g @ d))
    return worst


def test_constant_field_tv(small2d):
    area = small2d.element_measures().sum()
    v, g = smoothed_tv(np.full(small2d.node_count, 0.3), small2d, 2.0, 1e-3)
    assert v == pytest.approx(2.0 * 1e-3 * area, rel=1e-12)
    assert np.abs(g).max() < 1e-12


def test_tv_gradients_match_finite_differences(small2d, small3d, rng):
    for mesh in (small2d, small3d):
        f = rng.random(mesh.node_count)
        kappa = layered_reference(mesh)
        assert fd_check(lambda x: smoothed_tv(x, mesh, 1.3, 1e-2), f, rng) < 1e-6
        assert fd_check(lambda x: weighted_tv(x, kappa, mesh, 1.3, 1e-2, 0.9), f, rng) < 1e-6


def test_tv_is_one_homogeneous_as_beta_vanishes(small2d, rng):
    f = rng.random(small2d.node_count)
    v1, _ = smoothed_tv(f, small2d, 1.0, 1e-12)
    v2, _ = smoothed_tv(2 * f, small2d, 1.0, 1e-12)
    assert v2 == pytest.approx(2 * v1, rel=1e-9)


def test_weighted_with_zero_gamma_is_smoothed(small2d, rng):
    f = rng.random(small2d.node_count)
    kappa = rng.random(small2d.node_count)
    v0, g0 = smoothed_tv(f, small2d, 0.7, 1e-3)
    v1, g1 = weighted_tv(f, kappa, small2d, 0.7, 1e-3, 0.0)
    assert abs(v0 - v1) < 1e-12 * abs(v0)
    assert np.abs(g0 - g1).max() < 1e-12 * np.abs(g0).max()


def test_aligned_edges_are_cheap_on_one_element():
    mesh = one_triangle()
    kappa = np.array([0.0, 1.0, 2.0])
    field = 3.0 * kappa  # gradient parallel to the reference gradient
    alpha, beta, area = 1.5, 1e-2, 0.5
    v, _ = weighted_tv(field, kappa, mesh, alpha, beta, 1 - 1e-10, eta=1e-12)
    assert v / (alpha * area * beta) == pytest.approx(1.0, abs=1e-3)
    # a gradient across the reference edge pays the full price
    w, _ = weighted_tv(np.array([0.0, -2.0, 1.0]), kappa, mesh, alpha, beta, 1 - 1e-10, eta=1e-12)
    assert w > 10 * v


def test_params_validation():
    for bad in (MOParams(alpha_delta=0), MOParams(beta=0), MOParams(gamma=1.0), MOParams(gamma=-0.1)):
        with pytest.raises(ValueError):
            bad.validate()


def test_roi_extension_and_adjoint(small2d, rng):
    roi = ROIMap.brain(small2d)
    K = roi.matrix()
    d = rng.standard_normal(roi.size)
    v = rng.standard_normal(small2d.node_count)
    assert np.array_equal(roi.extend(d), K @ d)
    assert np.array_equal(roi.restrict(v), K.T @ v)
    outside = np.setdiff1d(np.arange(small2d.node_count), roi.nodes)
    assert not np.any(roi.extend(d)[outside])
    full = ROIMap.full(small2d)
    assert full.is_full and abs(full.matrix() - sp.identity(small2d.node_count)).max() == 0
    with pytest.raises(ValueError):
        ROIMap(np.array([], dtype=int), 5)


@pytest.fixture(scope="module")
def toy():
    spec = HeadGeometrySpec(target_element_size=0.008)
    dense = generate_head_mesh(spec, 2, "dense")
    inv = generate_head_mesh(HeadGeometrySpec(target_element_size=0.012), 2, "dense")
    pats = adjacent_patterns(16)
    pair = spherical_growth_pair(dense, 0.03, 0.045, [0.02, 0.025])
    mp = simulate_pair(pair, dense, Z, pats, NoiseModel(), 5)
    return dense, inv, pats, mp


def test_objective_gradient_matches_finite_differences(toy, rng):
    dense, inv, pats, mp = toy
    for roi in (ROIMap.brain(inv), ROIMap.full(inv)):
        params = MOParams(alpha_delta=1e2, alpha_sigma1=1e3)
        prob = MOProblem(mp.V1.voltages, mp.V2.voltages, inv, Z, pats, roi, layered_reference(inv),
                         params, mp.noise_std, dense)
        x = np.concatenate([0.05 + 0.01 * rng.random(inv.node_count), 0.01 * rng.random(roi.size)])
        g, H = prob.gauss_newton_system(x)
        assert H.shape == (x.size, x.size)
        assert np.allclose(H, H.T)
        for _ in range(3):
            d = rng.standard_normal(x.size)
            h = 1e-7
            fd = (prob.objective(x + h * d) - prob.objective(x - h * d)) / (2 * h)
            assert abs(fd - g @ d) < 1e-5 * abs(g @ d)


def test_zero_change_stays_zero(toy):
    dense, inv, pats, _ = toy
    # homogeneous noiseless frames on the inverse mesh: the start (fitted
    # constant, zero change) is exactly stationary and must be kept
    _, frame = solve_forward(inv, np.full(inv.node_count, 0.06948), Z, pats)
    same = MonitoringPair(frame, frame, NoiseModel(std_relative_to_max=0.0), 0.0)
    params = MOParams(alpha_delta=1e2, alpha_sigma1=1e3, max_iterations=10)
    res = reconstruct_mo(same, inv, Z, pats, params=params)
    assert np.abs(res.delta).max() < 1e-6
    # layered noiseless frames from the dense mesh: descent still never increases
    pair = spherical_growth_pair(dense, 0.03, 0.03, [0.02, 0.025])
    mp = simulate_pair(pair, dense, Z, pats, NoiseModel(std_relative_to_max=0.0), 0)
    res = reconstruct_mo(mp, inv, Z, pats, params=params, forward_mesh=dense)
    assert np.all(np.diff(res.objective_trace) <= 0)


def test_growth_run_descends_and_respects_roi(toy, tmp_path):
    dense, inv, pats, mp = toy
    roi = ROIMap.brain(inv)
    res = reconstruct_mo(mp, inv, Z, pats, roi=roi, params=MOParams(alpha_delta=1e3, alpha_sigma1=1e4,
                                                                    max_iterations=15), forward_mesh=dense)
    assert np.all(np.diff(res.objective_trace) < 0)
    assert not res.line_search_failed
    outside = np.setdiff1d(np.arange(inv.node_count), roi.nodes)
    assert np.all(res.delta[outside] == 0)
    assert res.sigma1.min() >= MOParams().sigma_floor
    save_mo(res, tmp_path / "mo.json", {"configHash": "k"})
    data = load_mo(tmp_path / "mo.json")
    assert data["objectiveTrace"] == res.objective_trace and data["configHash"] == "k"
