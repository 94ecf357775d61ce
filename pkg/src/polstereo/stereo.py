"""Coarse metric guide depth from a rectified stereo pair.

Census 5x5 matching costs, 8-path semi-global aggregation, left-right
consistency and gradient (or parabola) subpixel refinement; then depth, hole filling and
finite-difference guide normals.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import _kernels
from .geometry import CameraIntrinsics, ScalarMap, StereoRig, VectorMap, normalize, unnormalised_normal

log = logging.getLogger(__name__)

CENSUS_RADIUS = 2
COST_RANGE = 255


@dataclass
class SGMConfig:
    min_disp: int = 0
    max_disp: int = 128
    P1: int = 10
    P2: int = 120
    lr_tol: float = 1.0
    subpixel: str = "gradient"
    unique: bool = True

    def __post_init__(self) -> None:
        if self.subpixel not in ("gradient", "parabola", "none"):
            raise ValueError(f"unknown subpixel method {self.subpixel!r}")
        if not 0 <= self.min_disp < self.max_disp:
            raise ValueError("need 0 <= min_disp < max_disp")
        if not 0 < self.P1 <= self.P2:
            raise ValueError("need 0 < P1 <= P2")


@dataclass
class DisparityMap(ScalarMap):
    pass


@dataclass
class GuideDepth:
    depth: ScalarMap
    normals: VectorMap
    valid: np.ndarray


def census_transform(img: np.ndarray, radius: int = CENSUS_RADIUS) -> np.ndarray:
    """Census bit string per pixel: bit set where a neighbour is darker than the centre.

    Borders replicate the edge pixels.
    """
    img = np.asarray(img, dtype=np.float64)
    H, W = img.shape
    pad = np.pad(img, radius, mode="edge")
    code = np.zeros((H, W), dtype=np.uint64)
    bit = 0
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dy == 0 and dx == 0:
                continue
            nb = pad[radius + dy : radius + dy + H, radius + dx : radius + dx + W]
            code |= (nb < img).astype(np.uint64) << np.uint64(bit)
            bit += 1
    return code


def cost_volume(left: np.ndarray, right: np.ndarray, min_disp: int, max_disp: int) -> np.ndarray:
    """Census Hamming distance rescaled to 0..255, ``C[y, x, d - min_disp]``.

    Disparities reaching outside the right image get the maximal cost.
    """
    cl, cr = census_transform(left), census_transform(right)
    H, W = cl.shape
    nbits = (2 * CENSUS_RADIUS + 1) ** 2 - 1
    lut = np.round(np.arange(nbits + 1) * COST_RANGE / nbits).astype(np.int32)
    D = max_disp - min_disp + 1
    C = np.full((H, W, D), COST_RANGE, dtype=np.int32)
    for k in range(D):
        d = min_disp + k
        if d >= W:
            break
        C[:, d:, k] = lut[np.bitwise_count(cl[:, d:] ^ cr[:, : W - d])]
    return C


def _subpixel(S: np.ndarray, idx: np.ndarray) -> np.ndarray:
    D = S.shape[-1]
    inner = (idx > 0) & (idx < D - 1)
    i = np.clip(idx, 1, D - 2)
    c0 = np.take_along_axis(S, i[..., None], -1)[..., 0].astype(np.float64)
    cm = np.take_along_axis(S, (i - 1)[..., None], -1)[..., 0].astype(np.float64)
    cp = np.take_along_axis(S, (i + 1)[..., None], -1)[..., 0].astype(np.float64)
    den = cm - 2.0 * c0 + cp
    off = np.divide(cm - cp, 2.0 * den, out=np.zeros_like(den), where=den > 0)
    return np.where(inner, np.clip(off, -0.5, 0.5), 0.0)


def _gradient_subpixel(left: np.ndarray, right: np.ndarray, disp: np.ndarray, radius: int = 2) -> np.ndarray:
    """Least-squares intensity shift ``delta`` around integer disparities.

    Linearises ``right(x - d - delta)`` over a ``(2r+1)^2`` window and solves
    for ``delta``; exact for integer shifts of the same image.
    """
    H, W = left.shape
    xs = np.arange(W)[None, :] - disp
    inside = xs >= 0
    rows = np.arange(H)[:, None]
    xc = np.clip(xs, 0, W - 1)
    Rs = right[rows, xc]
    gx = np.gradient(right, axis=1)[rows, xc]
    size = 2 * radius + 1
    num = ndimage.uniform_filter(gx * (Rs - left), size, mode="nearest")
    den = ndimage.uniform_filter(gx * gx, size, mode="nearest")
    ok = inside & (den > 1e-12)
    delta = np.divide(num, den, out=np.zeros_like(num), where=ok)
    return np.clip(delta, -0.5, 0.5)


def sgm_disparity(left: np.ndarray, right: np.ndarray, cfg: SGMConfig | None = None) -> DisparityMap:
    """Semi-global matching disparity of ``left`` against ``right`` (x_right = x_left - d)."""
    cfg = cfg or SGMConfig()
    left = np.asarray(left, dtype=np.float64)
    right = np.asarray(right, dtype=np.float64)
    if left.shape != right.shape:
        raise ValueError("stereo images must share dimensions")
    H, W = left.shape
    if np.ptp(left) == 0 or np.ptp(right) == 0:
        warnings.warn("constant stereo image: no disparity can be estimated", RuntimeWarning, stacklevel=2)
        return DisparityMap(np.zeros((H, W)), np.zeros((H, W), dtype=bool))

    C = cost_volume(left, right, cfg.min_disp, cfg.max_disp)
    S = _kernels.sgm_aggregate(C, cfg.P1, cfg.P2)
    D = S.shape[2]
    kL = np.argmin(S, axis=2)

    # right-view disparities from the same aggregated volume: S_R[y, xr, k] = S[y, xr + d, k]
    SR = np.full_like(S, np.iinfo(np.int32).max)
    for k in range(D):
        d = cfg.min_disp + k
        if d < W:
            SR[:, : W - d, k] = S[:, d:, k]
    kR = np.argmin(SR, axis=2)

    xs = np.arange(W)[None, :]
    xr = xs - (cfg.min_disp + kL)
    inside = xr >= 0
    kR_at = np.take_along_axis(kR, np.clip(xr, 0, W - 1), axis=1)
    valid = inside & (np.abs(kL - kR_at) <= cfg.lr_tol)
    # exact ties leave the match undetermined
    best = np.take_along_axis(S, kL[..., None], -1)[..., 0]
    far = np.abs(np.arange(D)[None, None, :] - kL[..., None]) > 1
    valid &= ~np.any((S == best[..., None]) & far, axis=2)
    if cfg.unique:
        # textureless: the raw cost is minimal at half the search range or more,
        # so only the smoothness term picked the disparity
        c_min = C.min(axis=2)
        valid &= np.count_nonzero(C == c_min[..., None], axis=2) < max(2, D // 2)

    disp = (cfg.min_disp + kL).astype(np.float64)
    if cfg.subpixel == "parabola":
        disp += _subpixel(S, kL)
    elif cfg.subpixel == "gradient":
        disp += _gradient_subpixel(left, right, cfg.min_disp + kL)
    valid &= disp > 0
    return DisparityMap(np.where(valid, disp, 0.0), valid)


def disparity_to_depth(disp: ScalarMap, rig: StereoRig) -> ScalarMap:
    ok = disp.mask & (disp.data > 0)
    Z = np.divide(rig.left.fx * rig.baseline, disp.data, out=np.zeros_like(disp.data, dtype=np.float64), where=ok)
    return ScalarMap(Z, ok)


def depth_to_disparity(depth: ScalarMap, rig: StereoRig) -> ScalarMap:
    ok = depth.mask & (depth.data > 0)
    d = np.divide(rig.left.fx * rig.baseline, depth.data, out=np.zeros_like(depth.data, dtype=np.float64), where=ok)
    return ScalarMap(d, ok)


def _one_sided(Z: np.ndarray, m: np.ndarray, axis: int):
    """Forward difference where the next pixel is valid, else backward."""
    fwd = np.zeros_like(Z)
    bwd = np.zeros_like(Z)
    has_f = np.zeros_like(m)
    has_b = np.zeros_like(m)
    sl = [slice(None)] * 2
    lo, hi = list(sl), list(sl)
    lo[axis], hi[axis] = slice(None, -1), slice(1, None)
    lo, hi = tuple(lo), tuple(hi)
    diff = Z[hi] - Z[lo]
    pair = m[hi] & m[lo]
    fwd[lo] = diff
    has_f[lo] = pair
    bwd[hi] = diff
    has_b[hi] = pair
    g = np.where(has_f, fwd, bwd)
    return g, has_f | has_b


def guide_normals(depth: ScalarMap, cam: CameraIntrinsics) -> VectorMap:
    """Unit normals from forward differences (backward at the far edges)."""
    Z = np.where(depth.mask, depth.data, 0.0)
    Zx, okx = _one_sided(Z, depth.mask, 1)
    Zy, oky = _one_sided(Z, depth.mask, 0)
    ok = depth.mask & okx & oky
    n = normalize(unnormalised_normal(Z, Zx, Zy, cam))
    return VectorMap(np.where(ok[..., None], n, 0.0), ok)


def _nan_median3(Z: np.ndarray, m: np.ndarray) -> np.ndarray:
    H, W = Z.shape
    pad = np.pad(np.where(m, Z, np.nan), 1, constant_values=np.nan)
    win = np.stack([pad[dy : dy + H, dx : dx + W] for dy in range(3) for dx in range(3)], axis=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        med = np.nanmedian(win, axis=0)
    return np.where(m, med, Z)


def fill_and_smooth(
    depth: ScalarMap,
    foreground: np.ndarray | None = None,
    cam: CameraIntrinsics | None = None,
    max_hole: int = 64,
    median: bool = True,
) -> GuideDepth:
    """Fill small holes by nearest valid depth, optionally 3x3 median, then guide normals.

    Holes are connected invalid regions of the foreground with fewer than
    ``max_hole`` pixels.  ``valid`` keeps the original measured support so
    that only measured depths anchor the solver.
    """
    valid = depth.mask.copy()
    fg = valid.copy() if foreground is None else np.asarray(foreground, dtype=bool)
    valid &= fg
    Z = np.where(valid, depth.data, 0.0)
    filled = valid.copy()
    if valid.any() and max_hole > 0:
        holes = fg & ~valid
        lab, n = ndimage.label(holes)
        if n:
            sizes = np.bincount(lab.ravel())
            small = (sizes < max_hole)[lab] & holes
            _, (iy, ix) = ndimage.distance_transform_edt(~valid, return_indices=True)
            Z = np.where(small, Z[iy, ix], Z)
            filled |= small
    if median:
        Z = _nan_median3(Z, filled)
    dmap = ScalarMap(np.where(filled, Z, 0.0), filled)
    if cam is None:
        normals = VectorMap(np.zeros(Z.shape + (3,)), np.zeros(Z.shape, dtype=bool))
    else:
        normals = guide_normals(dmap, cam)
    return GuideDepth(depth=dmap, normals=normals, valid=valid)
