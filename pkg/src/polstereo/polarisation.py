"""Polarisation image formation and inversion.

Phase angle convention: a diffuse-dominant normal with in-image components
``(n_x, n_y)`` satisfies ``n_x cos(phi) - n_y sin(phi) = 0``, i.e. its
projection is parallel to ``(sin(phi), cos(phi))``.  This is the convention
under which the linear phase rows of :mod:`polstereo.depth` vanish on true
normals; :func:`polstereo.synth.polarise` generates phases accordingly.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .geometry import CameraIntrinsics, ray_direction

LOW_POLARISATION = 1e-3
BISECT_TOL = 1e-12
BISECT_MAX_ITER = 200
SPECULAR_EPS = 1e-6


class Kind(IntEnum):
    DIFFUSE = 0
    SPECULAR = 1


# Candidate slots: two diffuse then four specular.
CANDIDATE_KINDS = np.array([0, 0, 1, 1, 1, 1], dtype=np.int8)


@dataclass
class PolarisationImage:
    """Decomposed polarisation image.

    ``phi`` in ``[0, pi)``, ``rho`` in ``[0, 1]``, ``iun >= 0``.  ``low_pol``
    marks pixels whose phase is meaningless (``rho < 1e-3``).
    """

    phi: np.ndarray
    rho: np.ndarray
    iun: np.ndarray
    mask: np.ndarray
    low_pol: np.ndarray
    n_clamped: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.phi.shape


def canonical_phase(phi: np.ndarray) -> np.ndarray:
    """Fold angles into ``[0, pi)``."""
    out = np.mod(phi, np.pi)
    # np.mod can return exactly pi for tiny negative inputs
    return np.where(out >= np.pi, 0.0, out)


def simulate_polariser_stack(
    iun: np.ndarray, rho: np.ndarray, phi: np.ndarray, angles: Sequence[float]
) -> list[np.ndarray]:
    """Intensities ``iun (1 + rho cos(2 angle - 2 phi))`` for each polariser angle (radians)."""
    if len(angles) < 3:
        raise ValueError("at least 3 polariser angles are required")
    iun, rho, phi = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (iun, rho, phi)))
    return [iun * (1.0 + rho * np.cos(2.0 * a - 2.0 * phi)) for a in angles]


def decompose(
    angles: Sequence[float],
    images: Sequence[np.ndarray],
    mask: np.ndarray | None = None,
) -> PolarisationImage:
    """Per-pixel linear least-squares fit of ``c0 + c1 cos 2t + c2 sin 2t``.

    For exactly 0, 45 and 90 degrees the fit reduces to the closed form
    ``iun = (I0 + I90) / 2``, ``c1 = (I0 - I90) / 2``, ``c2 = I45 - iun``.
    """
    angles = np.asarray(angles, dtype=np.float64)
    if angles.size < 3:
        raise ValueError("at least 3 polariser angles are required")
    if np.unique(np.round(canonical_phase(angles), 12)).size < 3:
        raise ValueError("at least 3 distinct polariser angles (mod 180 deg) are required")
    if len(images) != angles.size:
        raise ValueError("number of images does not match number of angles")
    stack = np.stack([np.asarray(im, dtype=np.float64) for im in images], axis=-1)
    shape = stack.shape[:-1]

    if angles.size == 3 and np.allclose(
        np.sort(canonical_phase(angles)), [0.0, np.pi / 4, np.pi / 2], atol=1e-12, rtol=0
    ):
        order = np.argsort(canonical_phase(angles))
        i0, i45, i90 = (stack[..., k] for k in order)
        c0 = 0.5 * (i0 + i90)
        c1 = 0.5 * (i0 - i90)
        c2 = i45 - c0
    else:
        A = np.stack([np.ones_like(angles), np.cos(2 * angles), np.sin(2 * angles)], axis=1)
        coef, *_ = np.linalg.lstsq(A, stack.reshape(-1, angles.size).T, rcond=None)
        c0, c1, c2 = (c.reshape(shape) for c in coef)

    valid = np.isfinite(c0) & (c0 > 0)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    safe_c0 = np.where(valid, c0, 1.0)
    rho = np.hypot(c1, c2) / safe_c0
    clamped = valid & (rho > 1.0)
    rho = np.clip(rho, 0.0, 1.0)
    phi = canonical_phase(0.5 * np.arctan2(c2, c1))
    low = rho < LOW_POLARISATION
    phi = np.where(low, 0.0, phi)

    iun = np.where(valid, c0, 0.0)
    rho = np.where(valid, rho, 0.0)
    phi = np.where(valid, phi, 0.0)
    return PolarisationImage(phi=phi, rho=rho, iun=iun, mask=valid, low_pol=low & valid, n_clamped=int(clamped.sum()))


# -- diffuse model -------------------------------------------------------


def dop_diffuse(theta, eta: float):
    """Degree of diffuse polarisation at viewing angle ``theta``."""
    theta = np.asarray(theta, dtype=np.float64)
    if np.any(theta < 0) or np.any(theta > np.pi / 2):
        raise ValueError("theta must lie in [0, pi/2]")
    s2 = np.sin(theta) ** 2
    c = np.cos(theta)
    num = (eta - 1.0 / eta) ** 2 * s2
    den = 2.0 + 2.0 * eta**2 - (eta + 1.0 / eta) ** 2 * s2 + 4.0 * c * np.sqrt(eta**2 - s2)
    return num / den


def dop_diffuse_max(eta: float) -> float:
    """Limit of the diffuse degree of polarisation at grazing incidence."""
    return (eta - 1.0 / eta) / (eta + 1.0 / eta)


def _diffuse_terms(rho, eta):
    r = np.clip(rho, 0.0, dop_diffuse_max(eta))
    e2, e3, e4 = eta**2, eta**3, eta**4
    root = np.sqrt(1 - r**2)
    num = e4 * (1 - r**2) + 2 * e2 * (2 * r**2 + r - 1) + r**2 + 2 * r - 4 * e3 * r * root + 1
    den = (r + 1) ** 2 * (e4 + 1) + 2 * e2 * (3 * r**2 + 2 * r - 1)
    # den - num expanded symbolically, free of cancellation near rho = 0
    gap = 2 * r * ((r + 1) * e2 * (e2 + 1) + 2 * e3 * root)
    return num, den, gap


def invert_dop_diffuse(rho, eta: float, return_clamped: bool = False):
    """Closed-form ``cos(theta)`` from a diffuse degree of polarisation.

    Values above the grazing-angle maximum are clamped to it.
    """
    rho = np.asarray(rho, dtype=np.float64)
    num, _, gap = _diffuse_terms(rho, eta)
    # num + gap == den; exact 1 at rho = 0
    cos_theta = np.sqrt(np.clip(num / (num + gap), 0.0, 1.0))
    if return_clamped:
        return cos_theta, rho > dop_diffuse_max(eta)
    return cos_theta


def diffuse_zenith(rho, eta: float):
    """Viewing angle from a diffuse degree of polarisation, accurate near 0."""
    num, _, gap = _diffuse_terms(np.asarray(rho, dtype=np.float64), eta)
    return np.arctan2(np.sqrt(np.clip(gap, 0.0, None)), np.sqrt(np.clip(num, 0.0, None)))


# -- specular model ------------------------------------------------------


def dop_specular(theta, eta: float):
    """Degree of specular polarisation at viewing angle ``theta``."""
    theta = np.asarray(theta, dtype=np.float64)
    if np.any(theta < 0) or np.any(theta > np.pi / 2):
        raise ValueError("theta must lie in [0, pi/2]")
    return _dop_specular(theta, eta)


def _dop_specular(theta, eta):
    s = np.sin(theta)
    s2 = s * s
    root = np.sqrt(eta**2 - s2)
    num = 2.0 * s2 * np.cos(theta) * root
    den = eta**2 - s2 - eta**2 * s2 + 2.0 * s2 * s2
    return num / den


def brewster_angle(eta: float) -> float:
    return float(np.arctan(eta))


def _bisect(f, lo, hi, increasing):
    lo = np.array(lo, dtype=np.float64)
    hi = np.array(hi, dtype=np.float64)
    for _ in range(BISECT_MAX_ITER):
        mid = 0.5 * (lo + hi)
        above = f(mid) > 0
        go_low = above if increasing else ~above
        hi = np.where(go_low, mid, hi)
        lo = np.where(go_low, lo, mid)
        if np.all(hi - lo <= BISECT_TOL):
            break
    return 0.5 * (lo + hi)


def invert_dop_specular(rho, eta: float, return_clamped: bool = False):
    """Both viewing angles ``(theta_lo, theta_hi)`` with ``dop_specular == rho``.

    Roots are found by bisection either side of the Brewster angle; for
    ``rho == 1`` both equal the Brewster angle.  Returns angles in radians.
    """
    rho = np.asarray(rho, dtype=np.float64)
    clamped = rho > 1.0
    r = np.clip(rho, 0.0, 1.0)
    tb = brewster_angle(eta)
    lo_end = np.full(r.shape, SPECULAR_EPS)
    hi_end = np.full(r.shape, np.pi / 2 - SPECULAR_EPS)
    tbs = np.full(r.shape, tb)

    def g(t):
        return _dop_specular(t, eta) - r

    theta_lo = _bisect(g, lo_end, tbs, increasing=True)
    theta_hi = _bisect(g, tbs, hi_end, increasing=False)
    # the peak is quadratic, so bisection only locates it to ~1e-8
    theta_lo = np.where(r >= 1.0, tb, theta_lo)
    theta_hi = np.where(r >= 1.0, tb, theta_hi)
    if return_clamped:
        return theta_lo, theta_hi, clamped
    return theta_lo, theta_hi


# -- dominance -----------------------------------------------------------


def dominance(i_d, rho_d, i_s, rho_s):
    """``Kind.DIFFUSE`` (0) where ``i_d rho_d >= i_s rho_s``, else ``Kind.SPECULAR`` (1)."""
    i_d, rho_d, i_s, rho_s = (np.asarray(a, dtype=np.float64) for a in (i_d, rho_d, i_s, rho_s))
    spec = i_s * rho_s > i_d * rho_d
    if spec.ndim == 0:
        return Kind.SPECULAR if spec else Kind.DIFFUSE
    return spec.astype(np.int8)


# -- candidate normals ---------------------------------------------------


@dataclass
class CandidateField:
    """Up to six unit normal hypotheses per pixel.

    ``normals`` has shape ``(H, W, 6, 3)``; slots 0-1 are diffuse, 2-5
    specular (see :data:`CANDIDATE_KINDS`).  ``valid`` marks filled slots.
    """

    normals: np.ndarray
    valid: np.ndarray
    clamped: np.ndarray

    @property
    def kinds(self) -> np.ndarray:
        return CANDIDATE_KINDS

    @property
    def count(self) -> np.ndarray:
        return self.valid.sum(axis=-1)


def azimuth_plane_normals(direction: np.ndarray, cos_theta: np.ndarray, along: np.ndarray):
    """The two unit normals in the plane spanned by ``along`` (in-image) and +z
    whose cosine with ``direction`` equals ``cos_theta``.

    The first has a positive component along ``along`` at the image centre;
    at the centre the pair reduces to azimuths ``alpha`` and ``alpha + pi``.
    Returns ``(n_plus, n_minus, infeasible)``.
    """
    k = np.sum(along * direction, axis=-1)
    dz = direction[..., 2]
    R = np.hypot(k, dz)
    gamma = np.arctan2(dz, k)
    ratio = cos_theta / R
    infeasible = ratio > 1.0
    delta = np.arccos(np.clip(ratio, -1.0, 1.0))
    out = []
    for beta in (gamma - delta, gamma + delta):
        n = np.cos(beta)[..., None] * along
        n[..., 2] += np.sin(beta)
        out.append(n)
    return out[0], out[1], infeasible


def candidates(pol: PolarisationImage, eta: float, cam: CameraIntrinsics) -> CandidateField:
    """Six-way candidate normals from the diffuse and specular constraints.

    Each candidate satisfies the zenith constraint ``n . ray = cos(theta)``
    and lies in the plane through the optical axis selected by the phase, so
    its image-plane projection is collinear with the phase direction.
    """
    H, W = pol.shape
    d = ray_direction(cam)
    phi = pol.phi
    diff_dir = np.stack([np.sin(phi), np.cos(phi), np.zeros_like(phi)], axis=-1)
    spec_dir = np.stack([np.cos(phi), -np.sin(phi), np.zeros_like(phi)], axis=-1)

    normals = np.zeros((H, W, 6, 3))
    cos_d, clamp_d = invert_dop_diffuse(pol.rho, eta, return_clamped=True)
    a, b, inf_d = azimuth_plane_normals(d, cos_d, diff_dir)
    normals[..., 0, :], normals[..., 1, :] = a, b

    t_lo, t_hi, clamp_s = invert_dop_specular(pol.rho, eta, return_clamped=True)
    inf_s = np.zeros((H, W), dtype=bool)
    for slot, t in ((2, t_lo), (4, t_hi)):
        a, b, inf = azimuth_plane_normals(d, np.cos(t), spec_dir)
        normals[..., slot, :], normals[..., slot + 1, :] = a, b
        inf_s |= inf

    valid = np.repeat((pol.mask & ~pol.low_pol)[..., None], 6, axis=-1)
    normals[~valid] = 0.0
    clamped = (clamp_d | clamp_s | inf_d | inf_s) & pol.mask
    return CandidateField(normals=normals, valid=valid, clamped=clamped)
