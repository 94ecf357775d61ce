import numpy as np
import pytest
import scipy.sparse as sp

from polstereo import synth
from polstereo.depth import (
    DepthSystem,
    IsolatedPixelError,
    PixelIndexing,
    assemble,
    build_normal_operator,
    derivative_operators,
    guide_normal_rows,
    normalise_rows,
    phase_rows,
    prune_isolated,
    shading_rows,
    solve_depth,
)
from polstereo.geometry import CameraIntrinsics, normalize, unnormalised_normal
from polstereo.polarisation import PolarisationImage

CAM = CameraIntrinsics(310.0, 290.0, 9.5, 7.5, 20, 16)


def _pol(phi, rho=0.2, iun=0.5, shape=(1, 1), low=False):
    z = np.zeros(shape)
    return PolarisationImage(
        phi=z + phi, rho=z + rho, iun=z + iun, mask=np.ones(shape, bool), low_pol=np.full(shape, low)
    )


def _apply(rows, n):
    """Row residuals for a single pixel's normal ``n``."""
    return rows @ np.asarray(n, dtype=float)


def test_indexing_is_row_major_and_splits_by_mask():
    m = np.array([[1, 0, 1], [1, 1, 0]], bool)
    ix = PixelIndexing.from_mask(m)
    assert list(zip(ix.ys, ix.xs)) == [(0, 0), (0, 2), (1, 0), (1, 1)]
    L = np.array([[0, 0, 1], [0, 1, 0]], bool)
    d, s = ix.subsets(L)
    assert list(d) == [0, 2] and list(s) == [1, 3]


def test_normal_operator_constant_and_ramp():
    m = np.ones(CAM.shape, bool)
    N_op, ix = build_normal_operator(CAM, m)
    n = ix.n
    c = 0.8
    out = N_op @ np.full(n, c)
    np.testing.assert_allclose(out[: 2 * n], 0.0, atol=1e-15)
    np.testing.assert_allclose(out[2 * n :], c, atol=1e-15)

    a = 0.003
    Z = c + a * (ix.xs - CAM.x0)
    out = (N_op @ Z).reshape(3, -1)
    # x-derivative scales with fx; interior and boundary stencils are exact on a ramp
    np.testing.assert_allclose(out[0], -CAM.fx * a, atol=1e-13)
    np.testing.assert_allclose(out[1], 0.0, atol=1e-12)
    np.testing.assert_allclose(out[2], (ix.xs - CAM.x0) * a + Z, atol=1e-13)


def test_normal_operator_matches_core_normal():
    rng = np.random.default_rng(2)
    m = np.ones(CAM.shape, bool)
    m[:3, :4] = False
    m[10:, 15:] = False
    m = prune_isolated(m)
    N_op, ix = build_normal_operator(CAM, m)
    Dx, Dy = derivative_operators(ix)
    assert max(np.diff(Dx.indptr).max(), np.diff(Dy.indptr).max()) <= 6
    x, y = CAM.pixel_grid()
    Zimg = 1.0 + 0.01 * np.sin(x / 3.0) + 0.02 * np.cos(y / 4.0) + 0.001 * rng.random(CAM.shape)
    Z = Zimg[ix.ys, ix.xs]
    Zx = np.zeros(CAM.shape)
    Zy = np.zeros(CAM.shape)
    Zx[ix.ys, ix.xs] = Dx @ Z
    Zy[ix.ys, ix.xs] = Dy @ Z
    ref = unnormalised_normal(Zimg, Zx, Zy, CAM)[ix.ys, ix.xs].T.ravel()
    np.testing.assert_allclose(N_op @ Z, ref, atol=1e-12)


def test_isolated_pixels_rejected():
    m = np.zeros((5, 5), bool)
    m[1:4, 1] = True  # a one-pixel-wide column has no x-neighbours
    with pytest.raises(IsolatedPixelError, match=r"\(1, 1\)"):
        build_normal_operator(CAM, m)
    assert not prune_isolated(m).any()


def test_phase_row_examples():
    ix = PixelIndexing.from_mask(np.ones((1, 1), bool))
    L0 = np.zeros((1, 1), bool)
    assert _apply(phase_rows(_pol(0.0), L0, ix), [0, 5, 1])[0] == pytest.approx(0.0, abs=1e-15)
    r45 = phase_rows(_pol(np.pi / 4), L0, ix)
    assert _apply(r45, [1, 1, 0.3])[0] == pytest.approx(0.0, abs=1e-15)
    assert abs(_apply(r45, [1, -1, 0.3])[0]) == pytest.approx(np.sqrt(2), abs=1e-15)
    spec = phase_rows(_pol(0.0), np.ones((1, 1), bool), ix)
    assert _apply(spec, [3, 0, 1])[0] == pytest.approx(0.0, abs=1e-15)
    assert not phase_rows(_pol(0.3, low=True), L0, ix).toarray().any()


def test_shading_row_examples():
    cam = CameraIntrinsics(100.0, 100.0, 0.0, 0.0, 1, 1)
    ix = PixelIndexing.from_mask(np.ones((1, 1), bool))
    a, rho, eta = 0.6, 0.0, 1.4  # zero polarisation at the centre: cos(theta) = 1
    row = shading_rows(_pol(0.0, rho, iun=a), np.full((1, 1), a), np.zeros((1, 1), bool), [0, 0, 1], eta, cam, ix)
    assert row.nnz == 0 or np.abs(row.toarray()).max() == 0.0
    res = []
    for eps in (0.0, 0.1, 0.2):
        r = shading_rows(
            _pol(0.0, rho, iun=a), np.full((1, 1), a * (1 + eps)), np.zeros((1, 1), bool), [0, 0, 1], eta, cam, ix
        )
        res.append(_apply(r, [0, 0, 1])[0])
    assert res[0] == 0.0 and res[2] == pytest.approx(2 * res[1], rel=1e-12)
    spec = shading_rows(_pol(0.0), np.ones((1, 1)), np.ones((1, 1), bool), [0, 0, 1], eta, cam, ix)
    assert spec.shape[0] == 0


def test_guide_row_examples():
    ix = PixelIndexing.from_mask(np.ones((1, 1), bool))
    g = guide_normal_rows(np.array([[[0.0, 0.6, 0.8]]]), ix)
    assert np.linalg.norm(_apply(g, [0.0, 1.2, 1.6])) == pytest.approx(0.0, abs=1e-15)
    assert np.linalg.norm(_apply(g, [1.0, 0.0, 0.0])) == pytest.approx(1.0, abs=1e-15)


def _toy_system(shape=(2, 2), lam=1.0, seed=0, valid=None):
    rng = np.random.default_rng(seed)
    H, W = shape
    cam = CameraIntrinsics(50.0, 50.0, (W - 1) / 2, (H - 1) / 2, W, H)
    m = np.ones(shape, bool)
    N_op, ix = build_normal_operator(cam, m)
    pol = PolarisationImage(
        phi=rng.uniform(0, np.pi, shape),
        rho=rng.uniform(0.0, 0.2, shape),
        iun=rng.uniform(0.2, 0.8, shape),
        mask=m,
        low_pol=np.zeros(shape, bool),
    )
    L = np.zeros(shape, bool)
    nprime = normalize(rng.normal(size=shape + (3,)) + [0, 0, 3])
    albedo = rng.uniform(0.3, 0.9, shape)
    guide = 1.0 + 0.05 * rng.random(shape)
    valid = np.ones(shape, bool) if valid is None else valid
    parts = (
        phase_rows(pol, L, ix),
        guide_normal_rows(nprime, ix),
        shading_rows(pol, albedo, L, [0.2, 0.1, 1.0], 1.4, cam, ix),
    )
    return assemble(*parts, N_op, ix, guide, valid, lam), guide


def test_assemble_dimensions_and_selector():
    sysm, _ = _toy_system()
    assert sysm.matrix.shape == (4 * 4 + 4 + 4, 4)
    W = sysm.W.toarray()
    assert np.all((W != 0).sum(axis=1) == 1) and np.all((W != 0).sum(axis=0) <= 1)
    norms = np.sqrt(np.asarray(sysm.A.multiply(sysm.A).sum(axis=1)).ravel())
    np.testing.assert_allclose(norms[norms > 0], 1.0)
    with pytest.raises(ValueError):
        _toy_system(valid=np.zeros((2, 2), bool))
    with pytest.raises(ValueError):
        _toy_system(lam=0.0)


def test_small_lambda_returns_guide():
    sysm, guide = _toy_system(lam=1e-9)
    sol = solve_depth(sysm)
    np.testing.assert_allclose(sol.depth, guide, atol=1e-12)


def test_anchor_only_system():
    ix = PixelIndexing.from_mask(np.ones((2, 3), bool))
    N_op, _ = build_normal_operator(CameraIntrinsics(50.0, 50.0, 1.0, 0.5, 3, 2), ix.mask)
    z = np.linspace(1, 2, 6)
    W = sp.identity(6, format="csr")
    sysm = DepthSystem(A=sp.csr_matrix((0, 18)), N_op=N_op, W=W, z_guide=z, lam=1.0, indexing=ix)
    np.testing.assert_allclose(solve_depth(sysm).Z, z, atol=1e-15)


@pytest.mark.parametrize("seed", range(3))
def test_matches_dense_pseudoinverse(seed):
    valid = np.random.default_rng(seed).random((18, 20)) < 0.3
    sysm, _ = _toy_system((18, 20), lam=0.3, seed=seed, valid=valid)
    sol = solve_depth(sysm, method="direct")
    oracle = np.linalg.pinv(sysm.matrix.toarray()) @ sysm.rhs
    assert np.max(np.abs(sol.Z - oracle)) < 1e-8 * np.max(np.abs(oracle))
    it = solve_depth(sysm, method="iterative", tol=1e-14)
    assert np.max(np.abs(it.Z - oracle)) < 1e-6 * np.max(np.abs(oracle))


def test_anchor_residual_monotone_in_lambda():
    valid = np.random.default_rng(9).random((10, 12)) < 0.5
    prev = np.inf
    for lam in (10.0, 3.0, 1.0, 0.3, 0.1, 0.03):
        sysm, _ = _toy_system((10, 12), lam=lam, seed=5, valid=valid)
        r = solve_depth(sysm).residuals["anchor"]
        assert r <= prev + 1e-12
        prev = r


def test_non_finite_system_rejected():
    sysm, _ = _toy_system()
    sysm.z_guide[0] = np.nan
    with pytest.raises(ValueError):
        solve_depth(sysm)
    with pytest.raises(ValueError):
        solve_depth(_toy_system()[0], method="qr")


def test_row_normalisation_keeps_zero_rows():
    A = normalise_rows(sp.csr_matrix(np.array([[3.0, 4.0], [0.0, 0.0]])))
    np.testing.assert_allclose(A.toarray(), [[0.6, 0.8], [0.0, 0.0]])


def test_consistent_at_ground_truth():
    cfg = synth.paper_scene(size=128, ks=0.0, normal_source="depth")
    tr = synth.render(cfg)
    synth.polarise(tr, cfg)
    cam = cfg.rig.left
    m = tr.mask
    pol = PolarisationImage(phi=tr.phi, rho=tr.rho, iun=tr.iun, mask=m, low_pol=np.zeros_like(m))
    L = tr.dominance == 1
    N_op, ix = build_normal_operator(cam, m)
    P = phase_rows(pol, L, ix)
    G = guide_normal_rows(tr.normals, ix)
    S = shading_rows(pol, tr.albedo, L, cfg.light_dir, cfg.eta, cam, ix)
    sysm = assemble(P, G, S, N_op, ix, tr.depth, m, 1.0)
    Z = tr.depth[ix.ys, ix.xs]
    rel = np.linalg.norm(sysm.matrix @ Z - sysm.rhs) / np.linalg.norm(sysm.rhs)
    assert rel < 1e-6
    n = (N_op @ Z).reshape(3, -1)
    for name, rows in (("phase", P), ("guide", G)):
        r = np.abs(rows @ n.ravel()) / np.linalg.norm(n, axis=0).max()
        assert r.max() < 1e-8, name
