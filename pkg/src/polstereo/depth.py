"""Global linear depth estimation under perspective projection.

Unknowns are the metric depths of the foreground pixels.  The linear map
``N_op`` takes depth to unnormalised normals ``[n_x; n_y; n_z]`` (component
blocks of length N); phase, guide-normal and shading rows act on those
normals and guide depths anchor the absolute scale.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import lsqr, splu

from .geometry import CameraIntrinsics, ray_direction
from .polarisation import PolarisationImage, invert_dop_diffuse

log = logging.getLogger(__name__)

DIRECT_LIMIT = 200_000
# weight of the shape rows against unit-weight depth anchors, with normals in
# the unnormalised (metric) parameterisation and unit-norm constraint rows
DEFAULT_LAMBDA = 0.05


@dataclass
class PixelIndexing:
    """Row-major bijection between foreground pixels and ``0..N-1``."""

    mask: np.ndarray
    index: np.ndarray
    ys: np.ndarray
    xs: np.ndarray

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> PixelIndexing:
        mask = np.asarray(mask, dtype=bool)
        index = np.full(mask.shape, -1, dtype=np.int64)
        ys, xs = np.nonzero(mask)
        index[ys, xs] = np.arange(ys.size)
        return cls(mask=mask, index=index, ys=ys, xs=xs)

    @property
    def n(self) -> int:
        return int(self.ys.size)

    def subsets(self, L: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Indices of diffuse (``L == 0``) and specular pixels."""
        spec = np.asarray(L, dtype=bool)[self.ys, self.xs]
        return np.nonzero(~spec)[0], np.nonzero(spec)[0]

    def scatter(self, values: np.ndarray, fill=np.nan) -> np.ndarray:
        out = np.full(self.mask.shape + np.shape(values)[1:], fill, dtype=np.float64)
        out[self.ys, self.xs] = values
        return out


class IsolatedPixelError(ValueError):
    pass


def _shifted(mask: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """``out[y, x] = mask[y + dy, x + dx]`` with False outside the image."""
    H, W = mask.shape
    out = np.zeros_like(mask)
    ys = slice(max(0, -dy), min(H, H - dy))
    xs = slice(max(0, -dx), min(W, W - dx))
    ysrc = slice(max(0, dy), min(H, H + dy))
    xsrc = slice(max(0, dx), min(W, W + dx))
    out[ys, xs] = mask[ysrc, xsrc]
    return out


def prune_isolated(mask: np.ndarray) -> np.ndarray:
    """Drop pixels lacking a horizontal or a vertical neighbour, until stable."""
    m = np.asarray(mask, dtype=bool).copy()
    while True:
        hx = _shifted(m, 0, 1) | _shifted(m, 0, -1)
        hy = _shifted(m, 1, 0) | _shifted(m, -1, 0)
        keep = m & hx & hy
        if keep.sum() == m.sum():
            return keep
        m = keep


def _derivative(indexing: PixelIndexing, axis: str) -> sp.csr_matrix:
    m = indexing.mask
    ys, xs = indexing.ys, indexing.xs
    idx = indexing.index
    # along = step in the derivative direction, across = orthogonal step
    if axis == "x":
        along, across = (0, 1), (1, 0)
    else:
        along, across = (1, 0), (0, 1)

    def nb(sa, sc):
        dy = sa * along[0] + sc * across[0]
        dx = sa * along[1] + sc * across[1]
        return _shifted(m, dy, dx)[ys, xs], ys + dy, xs + dx

    fwd = nb(1, 0)[0]
    bwd = nb(-1, 0)[0]
    smooth = fwd & bwd
    for sc in (-1, 1):
        smooth &= nb(1, sc)[0] & nb(-1, sc)[0]
    central = fwd & bwd & ~smooth
    forward = fwd & ~bwd
    backward = bwd & ~fwd
    isolated = ~(fwd | bwd)
    if isolated.any():
        bad = list(zip(xs[isolated].tolist(), ys[isolated].tolist()))
        raise IsolatedPixelError(
            f"pixels without {axis}-neighbours (x, y): {bad[:20]}" + (" ..." if len(bad) > 20 else "")
        )

    rows, cols, vals = [], [], []
    rid = np.arange(indexing.n)

    def add(sel, sa, sc, w):
        _, yy, xx = nb(sa, sc)
        rows.append(rid[sel])
        cols.append(idx[yy[sel], xx[sel]])
        vals.append(np.full(int(sel.sum()), w))

    for sa in (-1, 1):
        for sc, ws in ((-1, 0.25), (0, 0.5), (1, 0.25)):
            add(smooth, sa, sc, 0.5 * sa * ws)
        add(central, sa, 0, 0.5 * sa)
    add(forward, 1, 0, 1.0)
    add(forward, 0, 0, -1.0)
    add(backward, 0, 0, 1.0)
    add(backward, -1, 0, -1.0)
    n = indexing.n
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))


def derivative_operators(indexing: PixelIndexing) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """``(D_x, D_y)``: smoothed central differences where the 2x3 / 3x2
    neighbourhood is foreground, else central, else one-sided."""
    return _derivative(indexing, "x"), _derivative(indexing, "y")


def build_normal_operator(cam: CameraIntrinsics, mask: np.ndarray, indexing: PixelIndexing | None = None):
    """Sparse ``3N x N`` operator mapping depth to unnormalised normals.

    Returns ``(N_op, indexing)``.
    """
    if indexing is None:
        indexing = PixelIndexing.from_mask(mask)
    Dx, Dy = derivative_operators(indexing)
    X = sp.diags(indexing.xs - cam.x0)
    Y = sp.diags(indexing.ys - cam.y0)
    I = sp.identity(indexing.n, format="csr")
    N_op = sp.vstack([-cam.fx * Dx, -cam.fy * Dy, X @ Dx + Y @ Dy + I]).tocsr()
    return N_op, indexing


def depth_normals(Z: np.ndarray, mask: np.ndarray, cam: CameraIntrinsics):
    """Unit normals of a depth map using the solver's stencils.

    Pixels without neighbours in both directions are dropped; returns
    ``(normals (H, W, 3), valid mask)``.
    """
    m = prune_isolated(mask)
    N_op, ix = build_normal_operator(cam, m)
    n = (N_op @ np.asarray(Z, dtype=np.float64)[ix.ys, ix.xs]).reshape(3, -1).T
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    return np.nan_to_num(ix.scatter(n, 0.0)), m


# -- constraint rows -----------------------------------------------------


def _rows_on_normals(row_ids, pix, coeffs, n_rows, n_pix) -> sp.csr_matrix:
    """Rows acting on the (n_x, n_y, n_z) slots of pixel ``pix``."""
    rows = np.repeat(row_ids, 3)
    cols = (np.arange(3)[None, :] * n_pix + pix[:, None]).ravel()
    return sp.csr_matrix((coeffs.ravel(), (rows, cols)), shape=(n_rows, 3 * n_pix))


def phase_rows(pol: PolarisationImage, L: np.ndarray, indexing: PixelIndexing) -> sp.csr_matrix:
    """One row per pixel: the normal's image-plane projection is collinear
    with the phase direction (rotated by 90 degrees for specular pixels).

    Low-polarisation pixels get an all-zero row.
    """
    ys, xs = indexing.ys, indexing.xs
    phi = pol.phi[ys, xs]
    spec = np.asarray(L, dtype=bool)[ys, xs]
    ang = np.where(spec, phi + np.pi / 2, phi)
    coef = np.stack([np.cos(ang), -np.sin(ang), np.zeros_like(ang)], axis=1)
    coef[pol.low_pol[ys, xs]] = 0.0
    n = indexing.n
    return _rows_on_normals(np.arange(n), np.arange(n), coef, n, n)


def shading_rows(
    pol: PolarisationImage,
    albedo: np.ndarray,
    L: np.ndarray,
    light: np.ndarray,
    eta: float,
    cam: CameraIntrinsics,
    indexing: PixelIndexing,
    normalise: bool = False,
) -> sp.csr_matrix:
    """One row per diffuse pixel: ``(a cos(theta) s - i_un d) . n = 0``.

    ``cos(theta)`` comes from the diffuse degree of polarisation and ``d``
    is the line of sight.  Rows are scaled to unit norm when ``normalise``
    (:func:`assemble` does this for every block anyway).
    """
    diff, _ = indexing.subsets(L)
    ys, xs = indexing.ys[diff], indexing.xs[diff]
    d = ray_direction(cam)[ys, xs]
    cos_t = invert_dop_diffuse(pol.rho[ys, xs], eta)
    a = np.asarray(albedo)[ys, xs]
    iun = pol.iun[ys, xs]
    s = np.asarray(light, dtype=np.float64)
    coef = (a * cos_t)[:, None] * s[None, :] - iun[:, None] * d
    if normalise:
        norm = np.linalg.norm(coef, axis=1, keepdims=True)
        coef = np.divide(coef, norm, out=np.zeros_like(coef), where=norm > 0)
    return _rows_on_normals(np.arange(diff.size), diff, coef, diff.size, indexing.n)


def guide_normal_rows(nprime: np.ndarray, indexing: PixelIndexing) -> sp.csr_matrix:
    """Three rows per pixel realising ``n' x n = 0``."""
    n = indexing.n
    v = np.asarray(nprime, dtype=np.float64)[indexing.ys, indexing.xs]
    nx, ny, nz = v[:, 0], v[:, 1], v[:, 2]
    z = np.zeros(n)
    pix = np.arange(n)
    blocks = [
        np.stack([z, -nz, ny], axis=1),
        np.stack([nz, z, -nx], axis=1),
        np.stack([-ny, nx, z], axis=1),
    ]
    return sp.vstack([_rows_on_normals(pix, pix, b, n, n) for b in blocks]).tocsr()


# -- assembly and solve --------------------------------------------------


@dataclass
class DepthSystem:
    A: sp.csr_matrix
    N_op: sp.csr_matrix
    W: sp.csr_matrix
    z_guide: np.ndarray
    lam: float
    indexing: PixelIndexing
    blocks: dict[str, slice] = field(default_factory=dict)

    @property
    def matrix(self) -> sp.csr_matrix:
        return sp.vstack([self.lam * (self.A @ self.N_op), self.W]).tocsr()

    @property
    def rhs(self) -> np.ndarray:
        return np.concatenate([np.zeros(self.A.shape[0]), self.z_guide])

    def block_residuals(self, Z: np.ndarray) -> dict[str, float]:
        """2-norm of each constraint block's residual at ``Z``."""
        r = self.A @ (self.N_op @ Z)
        out = {name: float(np.linalg.norm(r[sl])) for name, sl in self.blocks.items()}
        out["anchor"] = float(np.linalg.norm(self.W @ Z - self.z_guide))
        return out


def normalise_rows(A: sp.csr_matrix) -> sp.csr_matrix:
    """Scale each row to unit 2-norm; all-zero rows stay zero."""
    A = sp.csr_matrix(A)
    norm = np.sqrt(np.asarray(A.multiply(A).sum(axis=1)).ravel())
    inv = np.divide(1.0, norm, out=np.zeros_like(norm), where=norm > 0)
    return (sp.diags(inv) @ A).tocsr()


def anchor_selector(indexing: PixelIndexing, valid: np.ndarray, depth: np.ndarray):
    """``W`` selecting every guide-valid foreground pixel, plus the anchor depths."""
    sel = np.nonzero(np.asarray(valid, dtype=bool)[indexing.ys, indexing.xs])[0]
    k = sel.size
    W = sp.csr_matrix((np.ones(k), (np.arange(k), sel)), shape=(k, indexing.n))
    return W, np.asarray(depth, dtype=np.float64)[indexing.ys[sel], indexing.xs[sel]]


def assemble(
    phase: sp.csr_matrix,
    guide: sp.csr_matrix,
    shading: sp.csr_matrix,
    N_op: sp.csr_matrix,
    indexing: PixelIndexing,
    guide_depth: np.ndarray,
    guide_valid: np.ndarray,
    lam: float = DEFAULT_LAMBDA,
) -> DepthSystem:
    """Stack ``[lam A N_op; W] Z = [0; z_guide]`` with ``A = [phase; guide; shading]``.

    Each row of ``A`` is scaled to unit norm so that no block dominates by
    the magnitude of its coefficients.
    """
    n = indexing.n
    if phase.shape[0] != n or guide.shape[0] != 3 * n:
        raise ValueError("row blocks do not share the pixel indexing")
    if not lam > 0:
        raise ValueError("lambda must be positive")
    A = normalise_rows(sp.vstack([phase, guide, shading]))
    W, z = anchor_selector(indexing, guide_valid, guide_depth)
    if W.shape[0] == 0:
        raise ValueError("no guide-depth anchors: the system has no metric scale")
    blocks = {
        "phase": slice(0, n),
        "guide_normal": slice(n, 4 * n),
        "shading": slice(4 * n, 4 * n + shading.shape[0]),
    }
    return DepthSystem(A=A, N_op=N_op, W=W, z_guide=z, lam=float(lam), indexing=indexing, blocks=blocks)


@dataclass
class DepthSolution:
    depth: np.ndarray
    Z: np.ndarray
    method: str
    converged: bool
    residuals: dict[str, float]
    iterations: int = 0


def solve_depth(system: DepthSystem, method: str = "auto", tol: float = 1e-10, refine: int = 3) -> DepthSolution:
    """Least-squares depth.

    ``direct``: sparse LU of the normal equations followed by ``refine``
    steps of residual correction (corrected semi-normal equations).
    ``iterative``: LSQR with relative tolerance ``tol`` and ``10 N`` iterations.
    """
    M = system.matrix
    b = system.rhs
    if not (np.all(np.isfinite(M.data)) and np.all(np.isfinite(b))):
        raise ValueError("depth system contains non-finite entries")
    n = M.shape[1]
    if method == "auto":
        method = "direct" if n < DIRECT_LIMIT else "iterative"
    converged = True
    iters = 0
    if method == "direct":
        MT = M.T.tocsc()
        lu = splu((MT @ M).tocsc(), permc_spec="COLAMD")
        Z = lu.solve(MT @ b)
        for _ in range(refine):
            Z = Z + lu.solve(MT @ (b - M @ Z))
    elif method == "iterative":
        x0 = np.full(n, float(np.median(system.z_guide)))
        res = lsqr(M, b, atol=tol, btol=tol, iter_lim=10 * n, x0=x0)
        Z, istop, iters = res[0], res[1], res[2]
        converged = istop in (1, 2, 4, 5)
        if not converged:
            log.warning("LSQR stopped without convergence (istop=%d)", istop)
    else:
        raise ValueError(f"unknown method {method!r}")
    depth = system.indexing.scatter(Z)
    return DepthSolution(
        depth=depth, Z=Z, method=method, converged=converged, residuals=system.block_residuals(Z), iterations=iters
    )
