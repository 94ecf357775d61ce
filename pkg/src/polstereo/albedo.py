"""Diffuse albedo from normals and unpolarised intensity.

Minimises, over diffuse pixels,

    sum (a(u) (n(u) . s) - i(u))^2
      + lam_I sum (a(u) - a(v) - g(i(u) - i(v)))^2      (v = u + x, u + y)

where ``g`` zeroes differences smaller than ``t`` in magnitude, so albedo
edges follow strong intensity edges and the albedo is otherwise flat.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy import ndimage
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu

from .geometry import ScalarMap, normalize

log = logging.getLogger(__name__)


@dataclass
class AlbedoResult:
    albedo: ScalarMap
    unclamped: np.ndarray
    n_clamped: int
    objective: float


def threshold_gradient(delta: np.ndarray, t: float) -> np.ndarray:
    """``g``: zero where ``|delta| < t``, identity elsewhere."""
    delta = np.asarray(delta, dtype=np.float64)
    return np.where(np.abs(delta) < t, 0.0, delta)


def _smoothness_pairs(index: np.ndarray):
    H, W = index.shape
    pairs = []
    for dy, dx in ((0, 1), (1, 0)):
        a = index[: H - dy, : W - dx]
        b = index[dy:, dx:]
        ok = (a >= 0) & (b >= 0)
        pairs.append(np.stack([a[ok], b[ok]], axis=1))
    return np.concatenate(pairs, axis=0)


def albedo_system(iun, normals, diffuse, light, lam_I: float, t: float):
    """Sparse least-squares system ``(M, b)`` and the pixel index map."""
    diffuse = np.asarray(diffuse, dtype=bool)
    index = np.full(diffuse.shape, -1, dtype=np.int64)
    ys, xs = np.nonzero(diffuse)
    n = ys.size
    index[ys, xs] = np.arange(n)
    i = np.asarray(iun, dtype=np.float64)
    shade = normalize(np.asarray(normals, dtype=np.float64)[ys, xs]) @ np.asarray(light, dtype=np.float64)
    lit = np.nonzero(shade > 0)[0]
    data = sp.csr_matrix((shade[lit], (np.arange(lit.size), lit)), shape=(lit.size, n))
    rhs = [i[ys, xs][lit]]
    blocks = [data]
    if lam_I > 0:
        pairs = _smoothness_pairs(index)
        m = len(pairs)
        w = np.sqrt(lam_I)
        rows = np.repeat(np.arange(m), 2)
        cols = pairs.ravel()
        vals = np.tile([w, -w], m)
        blocks.append(sp.csr_matrix((vals, (rows, cols)), shape=(m, n)))
        iu = i[ys[pairs[:, 0]], xs[pairs[:, 0]]]
        iv = i[ys[pairs[:, 1]], xs[pairs[:, 1]]]
        rhs.append(w * threshold_gradient(iu - iv, t))
    return sp.vstack(blocks).tocsr(), np.concatenate(rhs), index, lit


def estimate_albedo(
    iun: np.ndarray,
    normals: np.ndarray,
    L: np.ndarray,
    light,
    mask: np.ndarray | None = None,
    lam_I: float = 1.0,
    t: float = 0.01,
    clamp: bool = True,
) -> AlbedoResult:
    """Albedo on diffuse pixels (``mask & ~L``), solved as one sparse least squares.

    Unlit pixels (``n . s <= 0``) have no data term and are tied to their
    neighbours by smoothness only; groups of pixels with no data term at
    all stay undefined (left for :func:`fill_specular`).
    """
    fg = np.ones(np.shape(iun), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    diffuse = fg & ~np.asarray(L, dtype=bool)
    if not diffuse.any():
        raise ValueError("no diffuse pixels for albedo estimation")
    if lam_I < 0:
        raise ValueError("lambda_I must be non-negative")
    M, b, index, lit = albedo_system(iun, normals, diffuse, light, lam_I, t)
    n = M.shape[1]
    # columns with no data row anywhere in their smoothness component are undetermined
    has_data = np.zeros(n, dtype=bool)
    has_data[lit] = True
    if lam_I > 0:
        pairs = _smoothness_pairs(index)
        adj = sp.csr_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
        _, comp = connected_components(adj, directed=False)
        good_comp = np.zeros(comp.max() + 1, dtype=bool)
        good_comp[comp[has_data]] = True
        solvable = good_comp[comp]
    else:
        solvable = has_data
    a = np.full(n, np.nan)
    cols = np.nonzero(solvable)[0]
    if cols.size:
        Ms = M[:, cols]
        keep = np.diff(Ms.indptr) > 0
        Ms, bs = Ms[keep], b[keep]
        MT = Ms.T.tocsc()
        lu = splu((MT @ Ms).tocsc(), permc_spec="COLAMD")
        x = lu.solve(MT @ bs)
        x = x + lu.solve(MT @ (bs - Ms @ x))
        a[cols] = x
        objective = float(np.sum((Ms @ x - bs) ** 2))
    else:
        objective = 0.0
    ys, xs = np.nonzero(diffuse)
    unclamped = np.full(diffuse.shape, np.nan)
    unclamped[ys, xs] = a
    defined = np.isfinite(unclamped)
    out = unclamped.copy()
    n_clamped = 0
    if clamp:
        n_clamped = int(np.sum(defined & ((unclamped < 0) | (unclamped > 1))))
        out = np.where(defined, np.clip(unclamped, 0.0, 1.0), np.nan)
        if n_clamped:
            log.info("albedo: clamped %d pixels to [0, 1]", n_clamped)
    return AlbedoResult(
        albedo=ScalarMap(np.where(defined, out, 0.0), defined),
        unclamped=unclamped,
        n_clamped=n_clamped,
        objective=objective,
    )


def albedo_objective(a, iun, normals, diffuse, light, lam_I: float, t: float) -> float:
    """Energy value of an albedo map over the diffuse support."""
    M, b, _, _ = albedo_system(iun, normals, diffuse, light, lam_I, t)
    ys, xs = np.nonzero(diffuse)
    return float(np.sum((M @ np.asarray(a, dtype=np.float64)[ys, xs] - b) ** 2))


def fill_specular(albedo: ScalarMap, L: np.ndarray, mask: np.ndarray | None = None) -> ScalarMap:
    """Give every foreground pixel lacking an albedo the value of its nearest
    defined pixel (Euclidean pixel distance)."""
    support = albedo.mask
    if not support.any():
        raise ValueError("no diffuse albedo to fill from")
    fg = support | np.asarray(L, dtype=bool) if mask is None else np.asarray(mask, dtype=bool) | support
    _, (iy, ix) = ndimage.distance_transform_edt(~support, return_indices=True)
    data = np.where(support, albedo.data, albedo.data[iy, ix])
    return ScalarMap(np.where(fg, data, 0.0), fg)
