"""Depth and normal error metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import ScalarMap, VectorMap


def _overlap(a_mask, b_mask) -> np.ndarray:
    m = np.asarray(a_mask, dtype=bool) & np.asarray(b_mask, dtype=bool)
    if not m.any():
        raise ValueError("estimate and ground truth have no valid pixels in common")
    return m


def optimal_scale(est: np.ndarray, gt: np.ndarray) -> float:
    """Least-squares ``s`` minimising ``||s est - gt||``."""
    return float(np.dot(est, gt) / np.dot(est, est))


def depth_mae(est: ScalarMap, gt: ScalarMap, align_scale: bool = False) -> tuple[float, float, int]:
    """Mean absolute depth error in millimetres (depths in metres).

    Returns ``(mae_mm, scale, pixels)``; ``scale`` is 1 unless ``align_scale``.
    """
    m = _overlap(est.mask, gt.mask)
    e, g = est.data[m].astype(np.float64), gt.data[m].astype(np.float64)
    s = optimal_scale(e, g) if align_scale else 1.0
    return float(np.mean(np.abs(s * e - g)) * 1000.0), s, int(m.sum())


def angular_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-pixel angle in degrees between unit vectors."""
    return np.degrees(np.arccos(np.clip(np.sum(a * b, axis=-1), -1.0, 1.0)))


def normal_mae(est: VectorMap, gt: VectorMap) -> tuple[float, int]:
    """Mean angular error in degrees and pixel count."""
    m = _overlap(est.mask, gt.mask)
    return float(np.mean(angular_error(est.data[m], gt.data[m]))), int(m.sum())


@dataclass
class MetricsReport:
    rows: list[tuple[str, float, str, int]] = field(default_factory=list)

    def add(self, metric: str, value: float, unit: str, pixels: int) -> None:
        self.rows.append((metric, float(value), unit, int(pixels)))

    def get(self, metric: str) -> float:
        for name, value, _, _ in self.rows:
            if name == metric:
                return value
        raise KeyError(metric)

    def as_dict(self) -> dict[str, float]:
        return {name: value for name, value, _, _ in self.rows}

    def write_csv(self, path) -> None:
        from .io import write_csv

        write_csv(path, ["metric", "value", "unit", "pixels"], [list(r) for r in self.rows])
