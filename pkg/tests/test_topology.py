import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import brute_edt, gauss_legendre_pixel
from topomicro.errors import InvalidArgument, OracleTooLarge
from topomicro.grid import PhaseGrid
from topomicro.topology import (
    PersistenceDiagram,
    PiConfig,
    brute_force_persistence,
    build_complex,
    compute_persistence,
    diagrams_for_mask,
    featurize,
    fit_channel_ranges,
    persistence_image,
    pixel_edges,
    signed_distance_filtration,
    surface_value,
    weight,
)


def _multiset(d):
    return sorted(map(tuple, d.pairs.tolist()))


# ---------------------------------------------------------------- filtration

def test_filtration_row_and_slab():
    row = np.array([[[0, 1, 0]]], dtype=bool)
    assert signed_distance_filtration(row).values.ravel().tolist() == [1.0, -1.0, 1.0]
    slab = np.zeros((1, 1, 7), dtype=bool)
    slab[0, 0, 2:5] = True
    assert signed_distance_filtration(slab).values[0, 0, 3] == -2.0


def test_filtration_matches_brute_edt():
    rng = np.random.default_rng(0)
    m = rng.random((12, 12, 12)) < 0.5
    f = signed_distance_filtration(m)
    assert not f.degenerate
    assert np.array_equal(f.values < 0, m)
    inside = brute_edt(m)
    outside = brute_edt(~m)
    assert np.allclose(np.abs(f.values), np.where(m, inside, outside), atol=1e-12)


def test_filtration_degenerate_masks_flagged():
    f = signed_distance_filtration(np.zeros((2, 2, 2), bool))
    assert f.degenerate and np.all(f.values > 0)
    f = signed_distance_filtration(np.ones((2, 2, 2), bool))
    assert f.degenerate and np.all(f.values < 0)


# ------------------------------------------------------------------- complex

def test_single_voxel_complex():
    c = build_complex(np.full((1, 1, 1), 2.5))
    assert c.n_cells == 27 and np.all(c.values == 2.5)


def test_shared_face_takes_minimum():
    c = build_complex(np.array([[[1.0, 2.0]]]))
    assert c.values.shape == (3, 3, 5)
    assert c.values[1, 1, 2] == 1.0
    assert c.values[1, 1, 3] == 2.0


def test_complex_monotone_on_random_field():
    rng = np.random.default_rng(1)
    c = build_complex(rng.normal(size=(6, 6, 6)))
    v = c.values
    dims = np.broadcast_to(c.dimensions(), v.shape)
    assert v.size == 13 ** 3
    for ax in range(3):
        # cofaces sit at odd coordinates along ax, faces at the even neighbours
        sl = [slice(None)] * 3
        for start in (0, 2):
            sl[ax] = slice(1, None, 2)
            co = v[tuple(sl)]
            sl[ax] = slice(start, start + co.shape[ax] * 2, 2)
            face = v[tuple(sl)]
            assert np.all(face <= co)
    assert dims.min() == 0 and dims.max() == 3


def test_non_finite_field_rejected():
    with pytest.raises(InvalidArgument):
        build_complex(np.array([[[np.inf]]]))


# --------------------------------------------------------------- persistence

def _ring():
    m = np.zeros((1, 3, 3), bool)
    m[0] = True
    m[0, 1, 1] = False
    return np.pad(m, 1)


def _shell():
    m = np.ones((5, 5, 5), bool)
    m[1:4, 1:4, 1:4] = False
    return np.pad(m, 1)


def test_single_voxel_has_no_finite_pairs():
    m = np.zeros((3, 3, 3), bool)
    m[1, 1, 1] = True
    h0, h1, h2 = diagrams_for_mask(m)
    assert len(h0) == len(h1) == len(h2) == 0


def test_solid_blob_has_no_loops_or_voids():
    m = np.zeros((7, 7, 7), bool)
    m[1:6, 1:6, 1:6] = True
    _, h1, h2 = diagrams_for_mask(m)
    assert len(h1) == 0 and len(h2) == 0


def test_ring_has_one_loop():
    h0, h1, h2 = diagrams_for_mask(_ring())
    assert len(h1) == 1
    b, d = h1.pairs[0]
    assert b < 0 < d


def test_shell_has_one_void():
    assert len(diagrams_for_mask(_shell())[2]) == 1


def test_two_voxels_merge_once():
    m = np.zeros((1, 1, 5), bool)
    m[0, 0, 1] = m[0, 0, 3] = True
    h0 = brute_force_persistence(build_complex(signed_distance_filtration(m)))[0]
    assert len(h0) == 1


def test_oracle_size_guard():
    with pytest.raises(OracleTooLarge):
        brute_force_persistence(build_complex(np.zeros((20, 20, 20))))


def test_empty_and_full_masks_give_empty_diagrams():
    for m in (np.zeros((3, 3, 3), bool), np.ones((3, 3, 3), bool)):
        for a, b in zip(diagrams_for_mask(m), brute_force_persistence(build_complex(signed_distance_filtration(m)))):
            assert len(a) == 0 and len(b) == 0


@settings(max_examples=40, deadline=None)
@given(arrays(np.bool_, st.tuples(*[st.integers(1, 4)] * 3)))
def test_persistence_matches_oracle_property(m):
    c = build_complex(signed_distance_filtration(m))
    for fast, slow in zip(compute_persistence(c), brute_force_persistence(c)):
        assert _multiset(fast) == _multiset(slow)


def _symmetries():
    for perm in itertools.permutations(range(3)):
        for flips in itertools.product((False, True), repeat=3):
            yield perm, flips


def test_diagrams_invariant_under_cube_symmetries():
    rng = np.random.default_rng(4)
    m = rng.random((5, 4, 6)) < 0.45
    ref = [_multiset(d) for d in diagrams_for_mask(m)]
    count = 0
    for perm, flips in _symmetries():
        t = np.transpose(m, perm)
        for ax, f in enumerate(flips):
            if f:
                t = np.flip(t, ax)
        got = [_multiset(d) for d in diagrams_for_mask(np.ascontiguousarray(t))]
        assert got == ref
        count += 1
    assert count == 48


# -------------------------------------------------------------------- images

def test_weight_values():
    assert weight(0.3, 0.0, 5.0, 2) == 0.0
    assert math.isclose(weight(-1.0, 1.0, 1.0, 1), math.pi / 4)
    ps = np.linspace(0, 3, 50)
    w = weight(0.0, ps, 2.0, 3)
    assert np.all(np.diff(w) >= 0) and np.all(w < math.pi / 2)
    assert weight(-5.0, 0.7, 3.0, 2) == weight(5.0, 0.7, 3.0, 2)


def test_pi_config_validation():
    with pytest.raises(InvalidArgument):
        PiConfig(gamma=0)
    with pytest.raises(InvalidArgument):
        PiConfig(gamma=1.5)
    with pytest.raises(InvalidArgument):
        PiConfig(C=0)
    with pytest.raises(InvalidArgument):
        PiConfig(sigma=-1)
    with pytest.raises(InvalidArgument):
        PiConfig(birth_range=(1, 1))


def test_surface_value_basics():
    cfg = PiConfig(C=2.0, gamma=1, sigma=0.1)
    empty = PersistenceDiagram(0)
    assert surface_value(empty, 0.2, 0.3, cfg) == 0.0
    d = PersistenceDiagram(1, [(0.2, 0.5)])
    peak = surface_value(d, 0.2, 0.3, cfg)
    assert math.isclose(peak, weight(0.2, 0.3, 2.0, 1) / (2 * math.pi * 0.01), rel_tol=1e-12)
    d2 = PersistenceDiagram(1, [(-0.1, 0.4)])
    xs, ys = np.meshgrid(np.linspace(-1, 1, 7), np.linspace(0, 1, 5))
    assert np.allclose(surface_value(d + d2, xs, ys, cfg),
                       surface_value(d, xs, ys, cfg) + surface_value(d2, xs, ys, cfg), atol=1e-12)


def test_empty_diagram_image_is_zero():
    assert np.all(persistence_image(PersistenceDiagram(2), PiConfig()) == 0)


def test_image_matches_quadrature_oracle():
    rng = np.random.default_rng(5)
    for _ in range(20):
        sigma = rng.uniform(0.03, 0.2)
        cfg = PiConfig(C=rng.uniform(0.5, 40), gamma=int(rng.integers(1, 7)), sigma=sigma,
                       resolution=32, birth_range=(-1.0, 1.0), pers_range=(0.0, 1.0))
        b = rng.uniform(-1.2, 1.2)
        p = rng.uniform(0.01, 1.2)
        img = persistence_image(PersistenceDiagram(0, [(b, b + p)]), cfg)
        bx, py = pixel_edges(cfg)
        ref = gauss_legendre_pixel((b, p), sigma, weight(b, p, cfg.C, cfg.gamma), bx, py)
        assert np.max(np.abs(img - ref)) < 1e-6


def test_interior_pair_mass_equals_weight():
    cfg = PiConfig(C=3.0, gamma=2, sigma=0.01)
    d = PersistenceDiagram(1, [(0.1, 0.6)])
    assert abs(persistence_image(d, cfg).sum() - weight(0.1, 0.5, 3.0, 2)) < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(-1.5, 1.5), st.floats(1e-3, 1.5)), max_size=6),
       st.lists(st.tuples(st.floats(-1.5, 1.5), st.floats(1e-3, 1.5)), max_size=6))
def test_image_linearity_and_mass_bound(a, b):
    cfg = PiConfig(C=5.0, gamma=1, sigma=0.05)
    da = PersistenceDiagram(0, [(x, x + p) for x, p in a])
    db = PersistenceDiagram(0, [(x, x + p) for x, p in b])
    ia, ib, iab = (persistence_image(d, cfg) for d in (da, db, da + db))
    assert np.allclose(iab, ia + ib, atol=1e-12)
    assert np.all(iab >= 0)
    total = float(weight(0, (da + db).persistence, cfg.C, cfg.gamma).sum())
    assert iab.sum() <= total + 1e-12


def test_channel_ranges_padding():
    d = {key: PersistenceDiagram(key[1]) for key in
         [(ph, k) for ph in range(3) for k in range(3)]}
    from topomicro.topology import CHANNELS
    first = dict(d)
    first[CHANNELS[0]] = PersistenceDiagram(0, [(-1.0, 0.5), (-0.5, 0.0)])
    r = fit_channel_ranges([first, d], sigma=0.1)
    assert r.shape == (9, 4)
    assert np.allclose(r[0], (-1.2, -0.3, 0.3, 1.7))
    assert np.allclose(r[1], (-0.2, 0.2, -0.2, 0.2))


# ----------------------------------------------------------------- featurize

def test_featurize_uniform_grid_is_zero():
    g = PhaseGrid(np.full((6, 6, 6), 1, np.uint8), 0.1)
    out = featurize(g, PiConfig())
    assert out.shape == (9, 32, 32) and np.all(out == 0)


def test_featurize_shape_and_rotation():
    rng = np.random.default_rng(6)
    data = rng.integers(0, 3, (10, 10, 10)).astype(np.uint8)
    g = PhaseGrid(data, 0.1)
    cfg = PiConfig(sigma=0.05, birth_range=(-0.3, 0.3), pers_range=(0.0, 0.4))
    a = featurize(g, cfg)
    assert a.shape == (9, 32, 32) and np.all(a >= 0)
    for axes in ((0, 1), (1, 2), (0, 2)):
        r = PhaseGrid(np.ascontiguousarray(np.rot90(data, 1, axes)), 0.1)
        assert np.max(np.abs(featurize(r, cfg) - a)) <= 1e-9
    assert np.array_equal(featurize(g, cfg), a)
