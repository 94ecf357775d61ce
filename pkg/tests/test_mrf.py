import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polstereo.geometry import VectorMap, normalize
from polstereo.mrf import (
    BIG,
    N_STATES,
    BPConfig,
    FactorGraph,
    MRFWeights,
    brute_force,
    build_graph,
    initial_specular_mask,
    pairwise_cost,
    solve_bp,
    ternary_cost,
    unary_cost,
    update_mask,
)
from polstereo.polarisation import CANDIDATE_KINDS, CandidateField

E1 = np.exp(-1.0)


def _field(shape, seed=0, identical=False):
    rng = np.random.default_rng(seed)
    H, W = shape
    if identical:
        n = np.broadcast_to([0.0, 0.0, 1.0], (H, W, N_STATES, 3)).copy()
    else:
        n = rng.normal(size=(H, W, N_STATES, 3))
        n[..., 2] = np.abs(n[..., 2]) + 0.5
        n = normalize(n)
    return CandidateField(normals=n, valid=np.ones((H, W, N_STATES), bool), clamped=np.zeros((H, W), bool))


def _guide(shape, v=(0.0, 0.0, 1.0)):
    return VectorMap(np.broadcast_to(np.asarray(v, float), shape + (3,)).copy(), np.ones(shape, bool))


def _random_graph(shape, seed):
    g = build_graph(_field(shape, seed), _guide(shape), np.zeros(shape, bool), np.ones(shape, bool))
    rng = np.random.default_rng(seed + 1000)
    g.unary = rng.random(g.unary.shape)
    g.pair_tables = rng.random(g.pair_tables.shape)
    g.tern_tables = rng.random(g.tern_tables.shape)
    return g


def test_initial_mask_examples():
    assert not initial_specular_mask(np.full((4, 4), 0.5)).any()
    assert initial_specular_mask(np.array([1.0]))[0]
    assert initial_specular_mask(np.array([250.0]), 0.98, 255.0)[0]


def test_unary_examples():
    z = np.array([0.0, 0.0, 1.0])
    x = np.array([1.0, 0.0, 0.0])
    assert unary_cost(z, z, 0, 0) == pytest.approx(0.36788, abs=1e-5)
    assert unary_cost(z, x, 0, 0) == 1.0
    # literal reading multiplies by k; the default divides, which penalises disagreement
    assert unary_cost(z, z, 0, 1, k=0.1, mode="literal") == pytest.approx(0.036788, abs=1e-6)
    assert unary_cost(z, z, 0, 1, k=0.1) == pytest.approx(10 * E1, rel=1e-12)
    with pytest.raises(ValueError):
        MRFWeights(unary_mode="other")


def test_invalid_guide_gives_uniform_unary():
    shape = (2, 2)
    guide = _guide(shape)
    guide.mask[0, 0] = False
    g = build_graph(_field(shape), guide, np.zeros(shape, bool), np.ones(shape, bool))
    np.testing.assert_array_equal(g.unary[g.index[0, 0]], 1.0)


def test_pairwise_examples():
    np.testing.assert_array_equal(pairwise_cost([0, 0, 1], [0, 1, 1]), [0, 1, 0])


def test_ternary_examples():
    s, c = np.sin(np.radians(10)), np.cos(np.radians(10))
    z = np.array([0.0, 0.0, 1.0])
    assert ternary_cost(z, z, z) == 0.0
    assert ternary_cost(z, np.array([s, 0, c]), np.array([0, s, c])) == pytest.approx(0.0, abs=1e-15)
    # grazing normal stays finite through the nz clamp
    assert np.isfinite(ternary_cost(np.array([1.0, 0, 0]), z, z))


@settings(max_examples=30, deadline=None)
@given(st.floats(-0.5, 0.5), st.floats(-0.5, 0.5), st.floats(-0.5, 0.5))
def test_ternary_zero_on_linear_gradient_field(p0, q0, a):
    # p = p0 + a y, q = q0 + a x has dp/dy = dq/dx = a, i.e. zero curl
    def n(p, q):
        return normalize(np.array([-p, -q, 1.0]))

    assert ternary_cost(n(p0, q0), n(p0, q0 + a), n(p0 + a, q0)) == pytest.approx(0.0, abs=1e-12)


def test_build_graph_counts_and_errors():
    g = build_graph(_field((3, 3)), _guide((3, 3)), np.zeros((3, 3), bool), np.ones((3, 3), bool))
    assert len(g.tern_vars) == 4 and len(g.pair_vars) == 12
    assert g.pair_tables.shape == (12, 6, 6) and g.tern_tables.shape == (4, 6, 6, 6)
    one = build_graph(_field((1, 1)), _guide((1, 1)), np.zeros((1, 1), bool), np.ones((1, 1), bool))
    assert one.n_vars == 1 and len(one.pair_vars) == 0 and len(one.tern_vars) == 0
    with pytest.raises(ValueError):
        build_graph(_field((2, 2)), _guide((2, 2)), np.zeros((2, 2), bool), np.zeros((2, 2), bool))


def test_uniform_energy_on_identical_candidates():
    g = build_graph(_field((2, 2), identical=True), _guide((2, 2)), np.zeros((2, 2), bool), np.ones((2, 2), bool))
    assert g.energy(np.zeros(4, int)) == pytest.approx(4 * E1, abs=1e-14)


def test_low_pol_pixels_get_guide_pseudo_candidates():
    f = _field((2, 2))
    f.valid[1, 1] = False
    L0 = np.zeros((2, 2), bool)
    L0[1, 1] = True
    g = build_graph(f, _guide((2, 2)), L0, np.ones((2, 2), bool))
    row = g.unary[g.index[1, 1]]
    np.testing.assert_allclose(row, [BIG, BIG, E1, E1, BIG, BIG])
    np.testing.assert_allclose(g.normals[g.index[1, 1], 2], [0, 0, 1])


def test_zero_weights_return_unary_argmin():
    shape = (4, 5)
    g = build_graph(
        _field(shape, 3), _guide(shape), np.zeros(shape, bool), np.ones(shape, bool), MRFWeights(w_pair=0, w_tern=0)
    )
    r = solve_bp(g)
    np.testing.assert_array_equal(r.labels, np.argmin(g.unary, axis=1))


@pytest.mark.parametrize("shape", [(1, 7), (6, 1)])
@pytest.mark.parametrize("seed", range(5))
def test_chain_is_exact(shape, seed):
    g = _random_graph(shape, seed)
    assert len(g.tern_vars) == 0
    r = solve_bp(g, BPConfig(iters=100))
    _, e_min = brute_force(g)
    assert r.energy == pytest.approx(e_min, abs=1e-9)


@pytest.mark.parametrize("seed", range(10))
def test_bp_never_worse_than_unary_argmin(seed):
    g = _random_graph((2, 3), seed)
    r = solve_bp(g)
    assert r.energy <= r.baseline_energy + 1e-12
    assert r.energy == pytest.approx(g.energy(r.labels))
    assert r.trace[0] == r.baseline_energy


def test_update_mask_and_label_consistency():
    labels = np.array([[0, 1, 2], [3, 4, 5], [-1, 0, 5]])
    L = update_mask(labels)
    np.testing.assert_array_equal(L, [[0, 0, 1], [1, 1, 1], [0, 0, 1]])
    g = _random_graph((3, 3), 1)
    r = solve_bp(g)
    np.testing.assert_array_equal(r.L[g.ys, g.xs], CANDIDATE_KINDS[r.labels] == 1)


def test_true_branch_has_lower_curl_on_sphere():
    from polstereo import synth
    from polstereo.polarisation import candidates, decompose

    cfg = synth.paper_scene(size=96, ks=0.0)
    tr = synth.render(cfg)
    stack, _ = synth.polarise(tr, cfg)
    pol = decompose(cfg.angles, stack)
    c = candidates(pol, cfg.eta, cfg.rig.left)
    m = tr.mask & pol.mask & ~pol.low_pol
    dots = np.einsum("hwkc,hwc->hwk", c.normals[:, :, :2], tr.normals)
    true = np.argmax(dots, axis=-1)
    n_true = np.take_along_axis(c.normals, true[..., None, None], 2)[:, :, 0]
    n_flip = np.take_along_axis(c.normals, (1 - true)[..., None, None], 2)[:, :, 0]
    ok = m[:-1, :-1] & m[:-1, 1:] & m[1:, :-1]
    good = ternary_cost(n_true[:-1, :-1], n_true[:-1, 1:], n_true[1:, :-1])
    bad = ternary_cost(n_flip[:-1, :-1], n_true[:-1, 1:], n_true[1:, :-1])
    assert np.mean(good[ok] < bad[ok]) >= 0.95


def test_brute_force_guard():
    g = _random_graph((3, 3), 0)
    with pytest.raises(ValueError):
        brute_force(g)
    assert isinstance(g, FactorGraph)
