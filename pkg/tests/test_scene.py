import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xpra_unrolled.rng import Xoshiro256
from xpra_unrolled.scene import (
    DistributionConfig, Grid, InvalidConfigError, ScattererOutsideError, ScattererSpec, SceneConfig,
    build_dataset, enumerate_links, place_nodes, rasterize, rasterize_ground_truth,
    rasterize_permittivity, sample_scene, split_counts,
)


def test_config_invariants():
    with pytest.raises(InvalidConfigError):
        SceneConfig(node_count=2)
    with pytest.raises(InvalidConfigError):
        SceneConfig(inverse_nx=1)
    with pytest.raises(InvalidConfigError):
        SceneConfig(wavelength=0.0)
    cfg = SceneConfig()
    assert cfg.n_inverse == 2500
    assert cfg.k0 == pytest.approx(2 * math.pi / 0.125)
    with pytest.raises(InvalidConfigError):
        SceneConfig(forward_nx=50, forward_ny=50).check_no_inverse_crime()


def test_place_nodes_reference_layout():
    nodes = place_nodes(SceneConfig())
    assert nodes.shape == (40, 2)
    # arc length between consecutive nodes is 0.15 m (corners split steps evenly here)
    ring = np.vstack([nodes, nodes[:1]])
    steps = np.abs(np.diff(ring, axis=0)).sum(axis=1)
    assert np.allclose(steps, 0.15)


def test_place_nodes_small():
    c4 = place_nodes(SceneConfig(doi_width=1, doi_height=1, node_count=4))
    assert np.allclose(c4, [(0, 0), (1, 0), (1, 1), (0, 1)])
    c8 = place_nodes(SceneConfig(doi_width=1, doi_height=1, node_count=8))
    assert np.allclose(c8[1], (0.5, 0.0))


def test_links():
    assert len(enumerate_links(40)) == 780
    assert enumerate_links(2).pairs == ((0, 1),)
    t = enumerate_links(4)
    assert len(t) == 6 and t.pairs[:3] == ((0, 1), (0, 2), (0, 3))
    with pytest.raises(InvalidConfigError):
        enumerate_links(1)


@given(st.integers(2, 30))
def test_link_index_bijection(m):
    t = enumerate_links(m)
    for l, (a, b) in enumerate(t.pairs):
        assert a < b
        assert t.index_of(a, b) == l == t.index_of(b, a)
    assert len(set(t.pairs)) == m * (m - 1) // 2


def test_rasterize_empty_and_caption_values():
    g = Grid(24, 24, 1.5, 1.5)
    assert np.all(rasterize([], g) == 1 + 0j)
    assert np.all(rasterize([], g, "ground_truth") == 0)
    gt = rasterize_ground_truth([ScattererSpec("circle", 0, 0, 0.5, 4 + 0.4j)], g)
    assert np.allclose(gt[gt > 0], 0.2)
    gt = rasterize_ground_truth([ScattererSpec("square", 0, 0, 0.5, 77 + 7.7j)], g)
    assert math.floor(gt.max() * 1000) == 877


def test_rasterize_later_wins_and_outside():
    g = Grid(10, 10, 1.0, 1.0)
    a = ScattererSpec("square", 0, 0, 0.6, 2 + 0.2j)
    b = ScattererSpec("square", 0, 0, 0.2, 9 + 0.9j)
    perm = rasterize_permittivity([a, b], g)
    assert perm[5, 5] == 9 + 0.9j and perm[3, 3] == 2 + 0.2j
    with pytest.raises(ScattererOutsideError) as exc:
        rasterize_permittivity([a, ScattererSpec("circle", 0.45, 0, 0.3, 2 + 0.2j)], g)
    assert exc.value.index == 1


def test_raster_order_lower_left_first():
    g = Grid(4, 3, 4.0, 3.0)
    c = g.centers()
    assert np.allclose(c[0], (0.5, 0.5)) and np.allclose(c[1], (1.5, 0.5)) and np.allclose(c[4], (0.5, 1.5))


@given(st.integers(0, 2**32), st.sampled_from([1, 3, 5]))
@settings(max_examples=25, deadline=None)
def test_resolution_consistency(seed, factor):
    # odd integer refinement keeps every coarse centre on a fine centre
    cfg = SceneConfig(inverse_nx=24, inverse_ny=24)
    specs = sample_scene(Xoshiro256(seed), DistributionConfig(), cfg)
    coarse = rasterize_ground_truth(specs, Grid(24, 24, 1.5, 1.5))
    fine = rasterize_ground_truth(specs, Grid(24 * factor, 24 * factor, 1.5, 1.5))
    k = factor // 2
    assert np.array_equal(fine[k::factor, k::factor], coarse)


@given(st.integers(0, 2**64 - 1))
@settings(max_examples=50, deadline=None)
def test_sample_scene_distribution(seed):
    cfg = SceneConfig()
    specs = sample_scene(Xoshiro256(seed), DistributionConfig(), cfg)
    allowed = {round(0.1 * math.sqrt(e), 12) for e in DistributionConfig().eps_real_values}
    assert len(specs) == 2
    for s in specs:
        assert -0.6 <= s.cx <= 0.6 and 0.15 <= s.cy <= 0.6
        assert s.shape in ("circle", "square")
        assert round(s.size / cfg.wavelength, 9) in (0.5, 1.0, 1.5, 2.0, 2.5)
        assert s.eps.imag == pytest.approx(0.1 * s.eps.real)
        assert round(s.target_value, 12) in allowed
        assert s.fits_inside(cfg.doi_width, cfg.doi_height)
    assert sample_scene(Xoshiro256(seed), DistributionConfig(), cfg) == specs


def test_target_values_enumerated():
    vals = sorted(round(0.1 * math.sqrt(e), 3) for e in (2, 4, 6, 8, 10))
    assert vals == [0.141, 0.2, 0.245, 0.283, 0.316]


def test_split_counts():
    assert split_counts(2000) == (1350, 150, 500)
    assert split_counts(20) == (13, 2, 5)
    assert sum(split_counts(37)) == 37
    with pytest.raises(InvalidConfigError):
        split_counts(0)


def test_build_dataset_deterministic():
    cfg = SceneConfig(node_count=8, forward_nx=30, forward_ny=30, inverse_nx=12, inverse_ny=12)
    a = build_dataset(cfg, 4, seed=3)
    b = build_dataset(cfg, 4, seed=3)
    for sa, sb in zip(a.train + a.val + a.test, b.train + b.val + b.test):
        assert np.array_equal(sa.measurements, sb.measurements)
        assert np.array_equal(sa.ground_truth, sb.ground_truth)
        assert sa.measurements.shape == (cfg.link_count,)
        assert sa.ground_truth.min() >= 0 and sa.ground_truth.max() <= 0.1 * math.sqrt(77)
