"""Pipeline configuration: one JSON document, unknown keys rejected."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any

from .depth import DEFAULT_LAMBDA
from .mrf import DEFAULT_SATURATION, BPConfig, MRFWeights
from .stereo import SGMConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    """Reconstruction settings.

    ``lam`` weights the shape rows against the guide-depth anchors (see
    :func:`polstereo.depth.assemble`); everything else follows the
    reference defaults.
    """

    data: str | None = None
    out: str | None = None
    eta: float = 1.4
    k: float = 0.1
    unary_mode: str = "penalise"
    w_pair: float = 1.0
    w_tern: float = 1.0
    lam_I: float = 1.0
    lam: float = DEFAULT_LAMBDA
    t: float = 0.01
    light: tuple[float, float, float] | None = None
    sat_threshold: float = DEFAULT_SATURATION
    bp: BPConfig = field(default_factory=BPConfig)
    sgm: SGMConfig = field(default_factory=lambda: SGMConfig(min_disp=32, max_disp=112))
    max_hole: int = 64
    median: bool = True
    solver: str = "auto"
    skip_stereo: bool = False
    guide_depth: str | None = None
    noise: float = 0.0
    seed: int = 0
    size: int = 256

    def __post_init__(self) -> None:
        if not self.eta > 1:
            raise ConfigError("eta must exceed 1")
        if not self.lam > 0:
            raise ConfigError("lam must be positive")
        if self.lam_I < 0 or self.t < 0:
            raise ConfigError("lam_I and t must be non-negative")
        if self.solver not in ("auto", "direct", "iterative"):
            raise ConfigError(f"unknown solver {self.solver!r}")
        if self.skip_stereo and not self.guide_depth:
            raise ConfigError("skip_stereo needs guide_depth")
        _ = self.weights  # validates the MRF settings

    @property
    def weights(self) -> MRFWeights:
        return MRFWeights(k=self.k, w_pair=self.w_pair, w_tern=self.w_tern, unary_mode=self.unary_mode)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["schema_version"] = SCHEMA_VERSION
        if d["light"] is not None:
            d["light"] = list(d["light"])
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> PipelineConfig:
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"config schema version {version} is not supported (expected {SCHEMA_VERSION})")
        kw: dict[str, Any] = {}
        names = {f.name for f in dataclasses.fields(cls)}
        for key, value in d.items():
            if key not in names:
                raise ConfigError(f"unknown config key {key!r}")
            if key == "bp":
                value = _sub(BPConfig, value, "bp")
            elif key == "sgm":
                value = _sub(SGMConfig, value, "sgm")
            elif key == "light" and value is not None:
                value = tuple(float(v) for v in value)
            kw[key] = value
        try:
            return cls(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def replace(self, **changes) -> PipelineConfig:
        return dataclasses.replace(self, **changes)


def _sub(kind, value, prefix: str):
    if isinstance(value, kind):
        return value
    names = {f.name for f in dataclasses.fields(kind)}
    for key in value:
        if key not in names:
            raise ConfigError(f"unknown config key {prefix}.{key!r}")
    try:
        return kind(**value)
    except ValueError as exc:
        raise ConfigError(f"{prefix}: {exc}") from exc


def load_config(path) -> PipelineConfig:
    from .io import read_json

    return PipelineConfig.from_dict(read_json(path))
