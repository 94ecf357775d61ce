"""Synthetic ground-truth scenes: pinhole render, Blinn-Phong shading,
simulated polarisation and a second (right) view."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy.optimize import brentq

from .geometry import CameraIntrinsics, StereoRig, normalize, ray_direction
from .polarisation import (
    canonical_phase,
    dominance,
    dop_diffuse,
    dop_specular,
    simulate_polariser_stack,
)

PAPER_DEPTH_RANGE = (0.07233, 0.09009)


@dataclass
class SceneConfig:
    """Everything needed to render a reproducible synthetic dataset.

    Lengths are metres.  ``light`` uses the normal orientation convention of
    :mod:`polstereo.geometry` ((0, 0, 1) is a light at the camera).  ``noise``
    is the Gaussian standard deviation as a fraction of full intensity range.
    """

    rig: StereoRig
    surface: str = "sphere"
    sphere_center: tuple[float, float, float] = (0.0, 0.0, 0.1)
    sphere_radius: float = 0.02
    mesh_path: str | None = None
    albedo: str = "constant"
    albedo_value: float = 0.7
    albedo_values: tuple[float, float] = (0.5, 0.8)
    albedo_cell: float = 0.003
    texture_path: str | None = None
    light: tuple[float, float, float] = (0.0, 0.0, 1.0)
    eta: float = 1.4
    ks: float = 0.3
    shininess: float = 50.0
    noise: float = 0.0
    angles_deg: tuple[float, ...] = (0.0, 45.0, 90.0, 135.0)
    seed: int = 0
    full_range: float = 1.0
    clip: bool = True
    max_zenith_deg: float = 85.0
    min_shading: float = 0.05
    normal_source: str = "analytic"

    def __post_init__(self) -> None:
        if not self.eta > 1:
            raise ValueError("eta must exceed 1")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if len(self.angles_deg) < 3:
            raise ValueError("at least 3 polariser angles are required")
        if self.surface not in ("sphere", "mesh"):
            raise ValueError(f"unknown surface {self.surface!r}")
        if self.albedo not in ("constant", "two_tone", "cells", "texture"):
            raise ValueError(f"unknown albedo source {self.albedo!r}")
        if self.normal_source not in ("analytic", "depth"):
            raise ValueError(f"unknown normal source {self.normal_source!r}")

    @property
    def light_dir(self) -> np.ndarray:
        return normalize(np.asarray(self.light, dtype=np.float64))

    @property
    def angles(self) -> np.ndarray:
        return np.deg2rad(np.asarray(self.angles_deg, dtype=np.float64))

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["rig"] = self.rig.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> SceneConfig:
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scene config keys: {sorted(unknown)}")
        d["rig"] = StereoRig.from_dict(d["rig"])
        for key in ("sphere_center", "albedo_values", "light", "angles_deg"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class SceneTruth:
    depth: np.ndarray
    normals: np.ndarray
    albedo: np.ndarray
    mask: np.ndarray
    i_d: np.ndarray
    i_s: np.ndarray
    dominance: np.ndarray
    right_image: np.ndarray
    right_mask: np.ndarray
    iun: np.ndarray = field(default=None)  # type: ignore[assignment]
    rho: np.ndarray = field(default=None)  # type: ignore[assignment]
    phi: np.ndarray = field(default=None)  # type: ignore[assignment]
    stack: list[np.ndarray] = field(default_factory=list)


def paper_rig(size: int = 256, focal: float = 300.0, baseline: float = 0.02) -> StereoRig:
    c = (size - 1) / 2.0
    cam = CameraIntrinsics(focal, focal, c, c, size, size)
    return StereoRig(cam, cam, baseline)


def paper_sphere(rig: StereoRig, depth_range=PAPER_DEPTH_RANGE) -> tuple[tuple[float, float, float], float]:
    """Sphere centred between the cameras whose visible depth spans ``depth_range``."""
    zmin, zmax = depth_range
    cx = rig.baseline / 2.0

    def silhouette_zmax(r):
        C = np.array([cx, 0.0, zmin + r])
        D = np.linalg.norm(C)
        u = C / D
        dist = (D * D - r * r) / D
        rad = r * np.sqrt(D * D - r * r) / D
        return dist * u[2] + rad * np.sqrt(1.0 - u[2] ** 2) - zmax

    r = brentq(silhouette_zmax, 1e-4, 0.2)
    return (cx, 0.0, zmin + r), r


def paper_scene(noise: float = 0.0, size: int = 256, seed: int = 0, **overrides) -> SceneConfig:
    """Default textured sphere spanning the reference 72.33-90.09 mm depth range."""
    rig = paper_rig(size)
    center, radius = paper_sphere(rig)
    kw: dict[str, Any] = {
        "rig": rig,
        "sphere_center": center,
        "sphere_radius": radius,
        "albedo": "cells",
        "albedo_cell": 0.001,
        "light": (0.25, -0.25, 1.0),
        "noise": noise,
        "seed": seed,
    }
    kw.update(overrides)
    return SceneConfig(**kw)


# -- geometry ------------------------------------------------------------


def _ray_sphere(cam: CameraIntrinsics, center: np.ndarray, radius: float):
    x, y = cam.pixel_grid()
    r = np.stack([(x - cam.x0) / cam.fx, (y - cam.y0) / cam.fy, np.ones_like(x)], axis=-1)
    rr = np.sum(r * r, axis=-1)
    rc = r @ center
    disc = rc * rc - rr * (center @ center - radius * radius)
    hit = disc > 0
    t = (rc - np.sqrt(np.where(hit, disc, 0.0))) / rr
    hit &= t > 0
    P = r * t[..., None]
    # flipped orientation: (center - P) / radius
    n = (center - P) / radius
    return np.where(hit, t, np.inf), n, hit


def sphere_depth(cam: CameraIntrinsics, center, radius: float):
    """Analytic ray-sphere depth and normals; depth is ``inf`` off the sphere."""
    Z, n, hit = _ray_sphere(cam, np.asarray(center, dtype=np.float64), radius)
    n[~hit] = 0.0
    return Z, n, hit


def load_obj(path) -> tuple[np.ndarray, np.ndarray]:
    """Vertices and triangle indices of a Wavefront OBJ (polygons fan-triangulated)."""
    verts, faces = [], []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(v) for v in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
    return np.asarray(verts, dtype=np.float64), np.asarray(faces, dtype=np.int64)


def write_obj(path, verts: np.ndarray, faces: np.ndarray) -> None:
    with open(path, "w") as f:
        f.writelines(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n" for v in verts)
        f.writelines(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n" for t in faces)


def uv_sphere(center, radius: float, n_lat: int = 64, n_lon: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """Closed triangulated sphere (outward-wound faces)."""
    center = np.asarray(center, dtype=np.float64)
    verts = [center + [0, -radius, 0]]
    for i in range(1, n_lat):
        th = np.pi * i / n_lat
        for j in range(n_lon):
            ph = 2 * np.pi * j / n_lon
            verts.append(center + radius * np.array([np.sin(th) * np.cos(ph), -np.cos(th), np.sin(th) * np.sin(ph)]))
    verts.append(center + [0, radius, 0])
    faces = []
    for j in range(n_lon):
        faces.append([0, 1 + (j + 1) % n_lon, 1 + j])
    for i in range(n_lat - 2):
        a0 = 1 + i * n_lon
        b0 = a0 + n_lon
        for j in range(n_lon):
            a, b = a0 + j, a0 + (j + 1) % n_lon
            c, d = b0 + j, b0 + (j + 1) % n_lon
            faces += [[a, b, d], [a, d, c]]
    top = len(verts) - 1
    last = 1 + (n_lat - 2) * n_lon
    for j in range(n_lon):
        faces.append([top, last + j, last + (j + 1) % n_lon])
    return np.asarray(verts), np.asarray(faces, dtype=np.int64)


def rasterize_mesh(cam: CameraIntrinsics, verts: np.ndarray, faces: np.ndarray):
    """Z-buffer render of a triangle mesh: per-pixel depth and face normals.

    Depth at a pixel is the exact ray-plane intersection of the nearest
    covering triangle.  Normals use the flipped orientation (toward +z for
    surfaces facing the camera).
    """
    H, W = cam.shape
    Z = np.full((H, W), np.inf)
    N = np.zeros((H, W, 3))
    x, y = cam.pixel_grid()
    rays = np.stack([(x - cam.x0) / cam.fx, (y - cam.y0) / cam.fy, np.ones_like(x)], axis=-1)
    tri = verts[faces]
    fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    fn = normalize(fn)
    px = cam.x0 + cam.fx * tri[..., 0] / tri[..., 2]
    py = cam.y0 + cam.fy * tri[..., 1] / tri[..., 2]
    for k in range(len(faces)):
        if np.any(tri[k, :, 2] <= 0):
            continue
        x0, x1 = int(np.ceil(px[k].min())), int(np.floor(px[k].max()))
        y0, y1 = int(np.ceil(py[k].min())), int(np.floor(py[k].max()))
        x0, y0 = max(x0, 0), max(y0, 0)
        x1, y1 = min(x1, W - 1), min(y1, H - 1)
        if x0 > x1 or y0 > y1:
            continue
        ax, ay = px[k, 0], py[k, 0]
        bx, by = px[k, 1], py[k, 1]
        cx, cy = px[k, 2], py[k, 2]
        den = (by - cy) * (ax - cx) + (cx - bx) * (ay - cy)
        if den == 0:
            continue
        gx, gy = x[y0 : y1 + 1, x0 : x1 + 1], y[y0 : y1 + 1, x0 : x1 + 1]
        l0 = ((by - cy) * (gx - cx) + (cx - bx) * (gy - cy)) / den
        l1 = ((cy - ay) * (gx - cx) + (ax - cx) * (gy - cy)) / den
        l2 = 1.0 - l0 - l1
        inside = (l0 >= -1e-12) & (l1 >= -1e-12) & (l2 >= -1e-12)
        if not inside.any():
            continue
        r = rays[y0 : y1 + 1, x0 : x1 + 1]
        denom = r @ fn[k]
        t = np.divide(tri[k, 0] @ fn[k], denom, out=np.full(denom.shape, np.inf), where=denom != 0)
        sub = Z[y0 : y1 + 1, x0 : x1 + 1]
        closer = inside & (t > 0) & (t < sub)
        sub[closer] = t[closer]
        n = fn[k] if denom[inside].mean() > 0 else -fn[k]
        N[y0 : y1 + 1, x0 : x1 + 1][closer] = n
    hit = np.isfinite(Z)
    return Z, N, hit


# -- albedo --------------------------------------------------------------


def _cell_hash(ijk: np.ndarray) -> np.ndarray:
    h = (ijk[..., 0] * 73856093) ^ (ijk[..., 1] * 19349663) ^ (ijk[..., 2] * 83492791)
    return (h & 0xFFFF).astype(np.float64) / 65535.0


def albedo_at(points: np.ndarray, cfg: SceneConfig, reference: np.ndarray) -> np.ndarray:
    """Albedo attached to 3-D surface points so both views see the same texture."""
    shape = points.shape[:-1]
    if cfg.albedo == "constant":
        return np.full(shape, cfg.albedo_value)
    if cfg.albedo == "two_tone":
        lo, hi = cfg.albedo_values
        return np.where(points[..., 0] < reference[0], lo, hi)
    if cfg.albedo == "cells":
        ijk = np.floor(points / cfg.albedo_cell).astype(np.int64)
        levels = np.array([0.35, 0.5, 0.65, 0.8])
        return levels[np.minimum((_cell_hash(ijk) * 4).astype(np.int64), 3)]
    if cfg.albedo == "texture":
        from PIL import Image

        tex = np.asarray(Image.open(cfg.texture_path).convert("L"), dtype=np.float64) / 255.0
        span = (
            2.0 * cfg.sphere_radius if cfg.surface == "sphere" else np.ptp(points[..., :2][np.isfinite(points[..., 0])])
        )
        u = np.clip((points[..., 0] - reference[0]) / span + 0.5, 0, 1)
        v = np.clip((points[..., 1] - reference[1]) / span + 0.5, 0, 1)
        th, tw = tex.shape
        out = tex[np.minimum((v * th).astype(int), th - 1), np.minimum((u * tw).astype(int), tw - 1)]
        return np.clip(out, 0.0, 1.0)
    raise ValueError(cfg.albedo)


# -- rendering -----------------------------------------------------------


def _geometry(cfg: SceneConfig, cam: CameraIntrinsics, shift: float):
    if cfg.surface == "sphere":
        C = np.asarray(cfg.sphere_center, dtype=np.float64) - [shift, 0.0, 0.0]
        return sphere_depth(cam, C, cfg.sphere_radius)
    verts, faces = load_obj(cfg.mesh_path)
    return rasterize_mesh(cam, verts - [shift, 0.0, 0.0], faces)


def _reference(cfg: SceneConfig) -> np.ndarray:
    if cfg.surface == "sphere":
        return np.asarray(cfg.sphere_center, dtype=np.float64)
    verts, _ = load_obj(cfg.mesh_path)
    return verts.mean(axis=0)


def _shade(cfg: SceneConfig, cam: CameraIntrinsics, Z, n, hit, shift: float):
    d = ray_direction(cam)
    x, y = cam.pixel_grid()
    Zs = np.where(hit, Z, 0.0)
    P = np.stack([(x - cam.x0) * Zs / cam.fx + shift, (y - cam.y0) * Zs / cam.fy, Zs], axis=-1)
    a = np.where(hit, albedo_at(P, cfg, _reference(cfg)), 0.0)
    s = cfg.light_dir
    ns = n @ s
    lit = hit & (ns > 0)
    i_d = np.where(lit, a * ns, 0.0)
    h = normalize(d + s)
    nh = np.clip(np.sum(n * h, axis=-1), 0.0, 1.0)
    i_s = np.where(lit, cfg.ks * nh**cfg.shininess, 0.0)
    return a, i_d, i_s, d


def render(cfg: SceneConfig) -> SceneTruth:
    """Render ground truth for the left (polarisation) and right views."""
    cam = cfg.rig.left
    Z, n, hit = _geometry(cfg, cam, 0.0)
    if not hit.any():
        raise ValueError("scene has an empty foreground")
    d = ray_direction(cam)
    mask = (
        hit & (np.sum(n * d, axis=-1) > np.cos(np.deg2rad(cfg.max_zenith_deg))) & (n @ cfg.light_dir > cfg.min_shading)
    )
    if cfg.normal_source == "depth":
        # normals from the solver's own stencils on the final mask, so the
        # discrete constraints hold exactly at the true depth
        from .depth import depth_normals

        n_depth, mask = depth_normals(np.where(hit, Z, 0.0), mask, cam)
        n = np.where(mask[..., None], n_depth, n)
        mask &= n @ cfg.light_dir > 0
    a, i_d, i_s, d = _shade(cfg, cam, Z, n, hit, 0.0)
    cos_view = np.sum(n * d, axis=-1)

    theta = np.arccos(np.clip(cos_view, 0.0, 1.0))
    rho_d = np.where(hit, dop_diffuse(theta, cfg.eta), 0.0)
    rho_s = np.where(hit, dop_specular(theta, cfg.eta), 0.0)
    dom = np.where(hit, dominance(i_d, rho_d, i_s, rho_s), 0).astype(np.int8)

    # right view: camera translated by +baseline along x
    camR = cfg.rig.right
    ZR, nR, hitR = _geometry(cfg, camR, cfg.rig.baseline)
    _, i_dR, i_sR, _ = _shade(cfg, camR, ZR, nR, hitR, cfg.rig.baseline)

    truth = SceneTruth(
        depth=np.where(hit, Z, 0.0),
        normals=np.where(hit[..., None], n, 0.0),
        albedo=a,
        mask=mask,
        i_d=i_d,
        i_s=i_s,
        dominance=dom,
        right_image=i_dR + i_sR,
        right_mask=hitR,
    )
    _fill_polarisation(truth, rho_d, rho_s, cfg)
    return truth


def _fill_polarisation(truth: SceneTruth, rho_d, rho_s, cfg: SceneConfig) -> None:
    n = truth.normals
    alpha = np.arctan2(n[..., 0], n[..., 1])
    spec = truth.dominance == 1
    total = truth.i_d + truth.i_s
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = np.where(total > 0, np.abs(truth.i_d * rho_d - truth.i_s * rho_s) / total, 0.0)
    truth.iun = total
    truth.rho = rho
    truth.phi = canonical_phase(np.where(spec, alpha - np.pi / 2, alpha))


def polarise(truth: SceneTruth, cfg: SceneConfig) -> tuple[list[np.ndarray], np.ndarray]:
    """Noisy polariser stack for the left view and the noisy right image.

    Noise streams are derived from ``cfg.seed`` per image, so outputs are
    bit-identical for identical configs.
    """
    stack = simulate_polariser_stack(truth.iun, truth.rho, truth.phi, cfg.angles)
    seeds = np.random.SeedSequence(cfg.seed).spawn(len(stack) + 1)
    sigma = cfg.noise * cfg.full_range
    noisy = []
    for img, ss in zip(stack, seeds[:-1]):
        if sigma > 0:
            img = img + np.random.default_rng(ss).normal(0.0, sigma, img.shape)
        if cfg.clip:
            img = np.clip(img, 0.0, cfg.full_range)
        noisy.append(img)
    right = truth.right_image
    if sigma > 0:
        right = right + np.random.default_rng(seeds[-1]).normal(0.0, sigma, right.shape)
    if cfg.clip:
        right = np.clip(right, 0.0, cfg.full_range)
    truth.stack = noisy
    return noisy, right


def write_dataset(out_dir, cfg: SceneConfig, truth: SceneTruth, stack, right) -> Any:
    """Write the manifest plus PFM/PNG files consumed by the CLI stages."""
    from . import io

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    man = io.Manifest(out)
    pol_files = []
    for k, (deg, img) in enumerate(zip(cfg.angles_deg, stack)):
        rel = f"pol_{k:02d}.pfm"
        io.write_pfm(out / rel, img)
        pol_files.append({"angle_deg": float(deg), "file": rel})
    man.files["polariser_stack"] = pol_files
    io.write_pfm(man.add("right_image", "right.pfm"), right)
    io.write_mask(man.add("mask", "mask.png"), truth.mask)
    io.write_json(man.add("rig", "rig.json"), cfg.rig.to_dict())
    io.write_pfm(man.add("gt_depth", "gt_depth.pfm"), np.where(truth.mask, truth.depth, np.nan))
    io.write_pfm(man.add("gt_normals", "gt_normals.pfm"), np.where(truth.mask[..., None], truth.normals, np.nan))
    io.write_pfm(man.add("gt_albedo", "gt_albedo.pfm"), np.where(truth.mask, truth.albedo, np.nan))
    io.write_mask(man.add("gt_specular", "gt_specular.png"), truth.dominance.astype(bool) & truth.mask)
    man.meta.update(
        {
            "light": [float(v) for v in cfg.light_dir],
            "eta": cfg.eta,
            "full_range": cfg.full_range,
            "scene": cfg.to_dict(),
        }
    )
    man.save()
    return man
