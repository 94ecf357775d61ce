"""Camera models, image containers and perspective normal geometry.

Orientation convention
----------------------
The camera looks down +z and depth ``Z`` is positive in front of it.  The
normal computed from depth derivatives (:func:`unnormalised_normal`) points
along +z for a fronto-parallel plane.  All direction vectors used by the
reconstruction (normals, light direction, line of sight) share that
orientation, so the viewing cosine is ``n . ray_direction(u)`` and lies in
``(0, 1]`` for visible surfaces.  :func:`view_vector` returns the vector
toward the viewer exactly as the negated normalised ray (``vz < 0``); it is
the negation of :func:`ray_direction`.  A light direction of ``(0, 0, 1)``
therefore means a light co-located with the camera.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    x0: float
    y0: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0 <= self.x0 < self.width and 0 <= self.y0 < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def pixel_grid(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(x, y)`` pixel coordinate arrays of shape ``(height, width)``."""
        y, x = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        return x, y

    def to_dict(self) -> dict[str, Any]:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "x0": self.x0,
            "y0": self.y0,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> CameraIntrinsics:
        return cls(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            x0=float(d["x0"]),
            y0=float(d["y0"]),
            width=int(d["width"]),
            height=int(d["height"]),
        )


@dataclass(frozen=True)
class StereoRig:
    """Rectified pair; the right camera is translated by ``baseline`` metres along +x."""

    left: CameraIntrinsics
    right: CameraIntrinsics
    baseline: float

    def __post_init__(self) -> None:
        if not self.baseline > 0:
            raise ValueError("baseline must be positive")

    def to_dict(self) -> dict[str, Any]:
        return {"left": self.left.to_dict(), "right": self.right.to_dict(), "baseline": self.baseline}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> StereoRig:
        return cls(
            left=CameraIntrinsics.from_dict(d["left"]),
            right=CameraIntrinsics.from_dict(d["right"]),
            baseline=float(d["baseline"]),
        )


def _full_mask(shape: tuple[int, ...]) -> np.ndarray:
    return np.ones(shape, dtype=bool)


@dataclass
class ScalarMap:
    """Per-pixel scalar with a validity mask."""

    data: np.ndarray
    mask: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError("ScalarMap data must be 2-D")
        if self.mask is None:
            self.mask = np.isfinite(self.data)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.data.shape:
            raise ValueError("mask shape does not match data")
        if not np.all(np.isfinite(self.data[self.mask])):
            raise ValueError("ScalarMap data must be finite wherever the mask is set")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass
class VectorMap:
    """Per-pixel 3-vector with a validity mask; ``unit`` asserts unit length on the mask."""

    data: np.ndarray
    mask: np.ndarray = field(default=None)  # type: ignore[assignment]
    unit: bool = False

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ValueError("VectorMap data must have shape (H, W, 3)")
        if self.mask is None:
            self.mask = np.all(np.isfinite(self.data), axis=2)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.data.shape[:2]:
            raise ValueError("mask shape does not match data")
        if self.unit and np.any(np.abs(np.linalg.norm(self.data[self.mask], axis=-1) - 1.0) > 1e-6):
            raise ValueError("VectorMap flagged unit has non-unit vectors")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def normalize(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """Normalise vectors along ``axis``; zero vectors stay zero."""
    norm = np.linalg.norm(v, axis=axis, keepdims=True)
    return np.divide(v, norm, out=np.zeros_like(v, dtype=np.float64), where=norm > 0)


def backproject(Z: np.ndarray, cam: CameraIntrinsics, mask: np.ndarray | None = None) -> np.ndarray:
    """3-D points ``[(x-x0) Z/fx, (y-y0) Z/fy, Z]`` for every pixel; NaN off-mask."""
    x, y = cam.pixel_grid()
    Z = np.asarray(Z, dtype=np.float64)
    P = np.stack([(x - cam.x0) * Z / cam.fx, (y - cam.y0) * Z / cam.fy, Z], axis=-1)
    if mask is not None:
        P[~np.asarray(mask, dtype=bool)] = np.nan
    return P


def project(P: np.ndarray, cam: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Pinhole projection of points ``(..., 3)`` to pixel coordinates."""
    P = np.asarray(P, dtype=np.float64)
    return cam.x0 + cam.fx * P[..., 0] / P[..., 2], cam.y0 + cam.fy * P[..., 1] / P[..., 2]


def unnormalised_normal(Z: np.ndarray, Zx: np.ndarray, Zy: np.ndarray, cam: CameraIntrinsics) -> np.ndarray:
    """Perspective normal ``[-fx Zx, -fy Zy, (x-x0) Zx + (y-y0) Zy + Z]``.

    This is the cross product of the depth tangents divided by ``Z`` and
    scaled by ``fx fy``; only its direction is meaningful.  ``Zx``, ``Zy``
    are derivatives per pixel.
    """
    x, y = cam.pixel_grid()
    Z, Zx, Zy = (np.asarray(a, dtype=np.float64) for a in (Z, Zx, Zy))
    return np.stack([-cam.fx * Zx, -cam.fy * Zy, (x - cam.x0) * Zx + (y - cam.y0) * Zy + Z], axis=-1)


def ray_direction(cam: CameraIntrinsics, x=None, y=None) -> np.ndarray:
    """Unit line-of-sight direction through pixel centres (``z > 0``)."""
    if x is None or y is None:
        x, y = cam.pixel_grid()
    r = np.stack(
        np.broadcast_arrays((np.asarray(x, float) - cam.x0) / cam.fx, (np.asarray(y, float) - cam.y0) / cam.fy, 1.0),
        axis=-1,
    )
    return r / np.linalg.norm(r, axis=-1, keepdims=True)


def view_vector(cam: CameraIntrinsics, x=None, y=None) -> np.ndarray:
    """Unit vector from the surface toward the viewer, independent of depth."""
    return -ray_direction(cam, x, y)
