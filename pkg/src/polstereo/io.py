"""PFM / PNG / JSON readers and writers and the dataset manifest."""

from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image

from .geometry import CameraIntrinsics, ScalarMap, StereoRig, VectorMap

MANIFEST_NAME = "manifest.json"


def write_pfm(path, data: np.ndarray) -> None:
    """Write a 1- or 3-channel little-endian PFM (rows stored bottom-to-top)."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header = "Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = "PF"
    else:
        raise ValueError(f"PFM data must be (H, W) or (H, W, 3), got {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(f"{header}\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.flipud(data).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a PFM file into a float64 array with row 0 at the top."""
    with open(path, "rb") as f:
        raw = f.read()
    m = re.match(rb"(P[Ff])\s+(\d+)\s+(\d+)\s+(\S+)\s", raw)
    if m is None:
        raise ValueError(f"{path}: not a PFM file")
    channels = 3 if m.group(1) == b"PF" else 1
    w, h = int(m.group(2)), int(m.group(3))
    scale = float(m.group(4))
    dtype = "<f4" if scale < 0 else ">f4"
    count = w * h * channels
    arr = np.frombuffer(raw, dtype=dtype, count=count, offset=m.end())
    shape = (h, w, 3) if channels == 3 else (h, w)
    return np.flipud(arr.reshape(shape)).astype(np.float64)


def write_scalar_map(path, smap: ScalarMap) -> None:
    write_pfm(path, np.where(smap.mask, smap.data, np.nan))


def read_scalar_map(path) -> ScalarMap:
    data = read_pfm(path)
    mask = np.isfinite(data)
    return ScalarMap(np.where(mask, data, 0.0), mask)


def write_vector_map(path, vmap: VectorMap) -> None:
    write_pfm(path, np.where(vmap.mask[..., None], vmap.data, np.nan))


def read_vector_map(path) -> VectorMap:
    data = read_pfm(path)
    mask = np.all(np.isfinite(data), axis=2)
    return VectorMap(np.where(mask[..., None], data, 0.0), mask)


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8), mode="L").save(path)


def read_mask(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L")) > 127


def read_intensity_image(path) -> np.ndarray:
    """Read a PFM or PNG intensity image; 8/16-bit PNGs are scaled to [0, 1]."""
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        data = read_pfm(path)
        return data.mean(axis=2) if data.ndim == 3 else data
    img = Image.open(path)
    arr = np.asarray(img)
    if img.mode in ("I;16", "I;16B", "I;16L", "I"):
        return arr.astype(np.float64) / 65535.0
    if arr.ndim == 3:
        arr = np.asarray(img.convert("L"))
    return arr.astype(np.float64) / 255.0


def write_png16(path, data: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(data) * 65535.0), 0, 65535).astype(np.uint16)
    Image.fromarray(arr).save(path)


def write_json(path, obj: Any) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def read_json(path) -> Any:
    with open(path) as f:
        return json.load(f)


def read_camera(path) -> CameraIntrinsics:
    return CameraIntrinsics.from_dict(read_json(path))


def read_rig(path) -> StereoRig:
    return StereoRig.from_dict(read_json(path))


def write_csv(path, header: list[str], rows: list[list[Any]]) -> None:
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        f.writelines(",".join(_fmt(v) for v in row) + "\n" for row in rows)


def _fmt(v: Any) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_ply(path, points: np.ndarray, mask: np.ndarray) -> None:
    """Binary little-endian PLY of the masked depth grid, two triangles per full quad."""
    H, W = mask.shape
    index = -np.ones((H, W), dtype=np.int64)
    index[mask] = np.arange(int(mask.sum()))
    verts = points[mask].astype("<f4")
    a, b = index[:-1, :-1], index[:-1, 1:]
    c, d = index[1:, :-1], index[1:, 1:]
    faces = []
    for tri in ((a, c, b), (b, c, d)):
        ok = (tri[0] >= 0) & (tri[1] >= 0) & (tri[2] >= 0)
        faces.append(np.stack([t[ok] for t in tri], axis=1))
    faces = np.concatenate(faces, axis=0).astype("<i4")
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(verts)}\nproperty float x\nproperty float y\nproperty float z\n"
        f"element face {len(faces)}\nproperty list uchar int vertex_indices\nend_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(verts.tobytes())
        rec = np.zeros(len(faces), dtype=[("n", "u1"), ("v", "<i4", (3,))])
        rec["n"] = 3
        rec["v"] = faces
        f.write(rec.tobytes())


class Manifest:
    """Dataset manifest: files tagged by role, plus free-form metadata.

    Paths are stored relative to the manifest directory.
    """

    def __init__(self, root, files: dict[str, Any] | None = None, meta: dict[str, Any] | None = None):
        self.root = Path(root)
        self.files: dict[str, Any] = dict(files or {})
        self.meta: dict[str, Any] = dict(meta or {})

    @classmethod
    def load(cls, root) -> Manifest:
        root = Path(root)
        path = root / MANIFEST_NAME if root.is_dir() else root
        data = read_json(path)
        return cls(path.parent, data.get("files", {}), data.get("meta", {}))

    def save(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        write_json(self.root / MANIFEST_NAME, {"files": self.files, "meta": self.meta})

    def path(self, role: str) -> Path:
        if role not in self.files:
            raise KeyError(f"manifest in {self.root} has no file with role {role!r}")
        return self.root / self.files[role]

    def has(self, role: str) -> bool:
        return role in self.files

    def add(self, role: str, relpath: str) -> Path:
        self.files[role] = relpath
        return self.root / relpath
