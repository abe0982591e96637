import numpy as np
import pytest
from scipy import stats

from stroke_eit.mesh import Mesh
from stroke_eit.phantom import (
    HEMORRHAGE_SIGMA,
    ContainmentError,
    PhantomRecipe,
    half_ellipsoid_max_radius,
    hemorrhage_indicator,
    load_phantom,
    sample_phantom_pair,
    save_phantom,
    shell_volume,
    spherical_growth_pair,
)


def test_values_come_from_the_tissue_list(mesh2d):
    for seed in range(5):
        pair = sample_phantom_pair(seed, mesh2d)
        ps, pk, pb = pair.layer_perturbations
        allowed = np.array([0.06948 * ps, 0.009 * pk, 0.06948 * pb, HEMORRHAGE_SIGMA])
        for s in (pair.sigma1, pair.sigma2):
            assert np.all(np.min(np.abs(s[:, None] - allowed[None, :]), axis=1) == 0)


def test_delta_is_exact_nonnegative_and_inside_brain(mesh2d):
    for seed in range(5):
        pair = sample_phantom_pair(seed, mesh2d)
        assert np.array_equal(pair.delta_true, pair.sigma2 - pair.sigma1)
        assert pair.delta_true.min() >= 0
        r = np.linalg.norm(mesh2d.nodes[pair.delta_true > 0], axis=1)
        assert r.size == 0 or r.max() < mesh2d.radii["brain"]


def test_zero_expansion_length_gives_no_change(small2d):
    pair = sample_phantom_pair(3, small2d, PhantomRecipe(length_range=(0.0, 0.0)))
    assert not np.any(pair.delta_true)


def test_containment_over_many_seeds(small2d):
    rb = small2d.radii["brain"]
    for seed in range(1000):
        d = sample_phantom_pair(seed, small2d).descriptor
        c = np.asarray(d["center"])
        assert np.linalg.norm(c) < rb - d["radius"]
        assert half_ellipsoid_max_radius(c, np.asarray(d["axis"]), d["length"], d["radius"]) < rb


def test_same_seed_is_bit_identical(small2d):
    a = sample_phantom_pair(11, small2d)
    b = sample_phantom_pair(11, small2d)
    assert np.array_equal(a.sigma1, b.sigma1) and np.array_equal(a.sigma2, b.sigma2)
    assert a.descriptor == b.descriptor


def test_radius_distribution_is_uniform(small2d):
    # only the descriptor is needed; use a one-node stand-in mesh to keep this fast
    tiny = Mesh(np.array([[0.0, 0.0], [0.01, 0.0], [0.0, 0.01]]), np.array([[0, 1, 2]]),
                np.array([[0, 1], [1, 2], [2, 0]]), (np.array([0]), np.array([1])), np.array([0]),
                dict(small2d.radii))
    radii = [sample_phantom_pair(s, tiny).descriptor["radius"] for s in range(10_000)]
    p = stats.kstest(radii, stats.uniform(loc=0.01, scale=0.0133).cdf).pvalue
    assert p > 0.01


def test_support_is_expanded_minus_initial(mesh2d):
    pair = sample_phantom_pair(5, mesh2d)
    d = pair.descriptor
    ini = hemorrhage_indicator(mesh2d.nodes, d["center"], d["radius"])
    exp = hemorrhage_indicator(mesh2d.nodes, d["center"], d["radius"], d["axis"], d["length"])
    assert np.array_equal(pair.delta_true > 0, exp & ~ini)


def test_growth_pairs(small3d):
    pair = spherical_growth_pair(small3d, 0.02, 0.02, [0, 0.02, 0])
    assert not np.any(pair.delta_true)
    with pytest.raises(ContainmentError):
        spherical_growth_pair(small3d, 0.02, 0.06, [0, 0.06, 0])
    with pytest.raises(ValueError):
        spherical_growth_pair(small3d, 0.03, 0.02, [0, 0, 0])


def test_shell_volumes_of_the_monitoring_examples():
    assert shell_volume(0.025, 0.030) * 1e6 == pytest.approx(5.96, abs=0.005)
    assert shell_volume(0.015, 0.020) * 1e6 == pytest.approx(2.42, abs=0.005)


def test_half_ellipsoid_max_radius_against_sampling(rng):
    for _ in range(20):
        c = rng.uniform(-0.03, 0.03, 3)
        u = rng.standard_normal(3)
        u /= np.linalg.norm(u)
        a, r = rng.uniform(0.005, 0.05), rng.uniform(0.005, 0.02)
        # brute force over the curved surface
        t = rng.uniform(0, np.pi / 2, 20000)
        w = rng.standard_normal((20000, 3))
        w -= np.outer(w @ u, u)
        w /= np.linalg.norm(w, axis=1, keepdims=True)
        pts = c + a * np.cos(t)[:, None] * u + r * np.sin(t)[:, None] * w
        brute = np.linalg.norm(pts, axis=1).max()
        exact = half_ellipsoid_max_radius(c, u, a, r)
        assert brute <= exact + 1e-12 and exact - brute < 1e-3


def test_phantom_round_trip(tmp_path, small2d):
    pair = sample_phantom_pair(2, small2d)
    save_phantom(pair, tmp_path / "p.json", {"configHash": "h"})
    back = load_phantom(tmp_path / "p.json")
    assert np.array_equal(back.sigma2, pair.sigma2) and back.descriptor == pair.descriptor
