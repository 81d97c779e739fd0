"""Run configuration: dataclasses plus a TOML loader.

TOML tables and keys::

    [depth]        d_min, d_max, scale
    [losses]       alpha, eta, sigma, lambda, w_scale, w_edge, w_norm, w_reg
    [matching]     tau, theta_c, window, fine_tau, depth_features
    [registration] inlier_threshold, max_iters, seed
    [metrics]      vsd_delta, vsd_variant, vsd_norm, mssd_fracs, mspd_px, vsd_thresholds, vsd_taus, add_frac
    [synth]        any SynthConfig field
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields, replace

from .errors import InvalidInputError
from .geometry import DEPTH_MAX, DEPTH_MIN
from .losses import LossWeights
from .matching import MatchConfig
from .metrics import RecallConfig
from .synth import SynthConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass
class DepthConfig:
    d_min: float = DEPTH_MIN
    d_max: float = DEPTH_MAX
    scale: float = 1000.0

    def __post_init__(self):
        if not (0 < self.d_min < self.d_max) or not self.scale > 0:
            raise InvalidInputError("need 0 < d_min < d_max and scale > 0")


@dataclass
class RegisterConfig:
    inlier_threshold: float = 0.01
    max_iters: int = 2048
    seed: int = 0

    def __post_init__(self):
        if not self.inlier_threshold > 0 or self.max_iters < 1:
            raise InvalidInputError("inlier_threshold must be positive and max_iters >= 1")


@dataclass
class PipelineMatchConfig(MatchConfig):
    depth_features: bool = True


@dataclass
class RunConfig:
    depth: DepthConfig = field(default_factory=DepthConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    matching: PipelineMatchConfig = field(default_factory=PipelineMatchConfig)
    registration: RegisterConfig = field(default_factory=RegisterConfig)
    metrics: RecallConfig = field(default_factory=RecallConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)


_RENAMES = {"losses": {"lambda": "lam"}}


def _update(section: str, obj, table: dict):
    if not isinstance(table, dict):
        raise InvalidInputError(f"[{section}] must be a table")
    renames = _RENAMES.get(section, {})
    known = {f.name for f in fields(obj)}
    kwargs = {}
    for key, value in table.items():
        name = renames.get(key, key)
        if name not in known:
            raise InvalidInputError(f"unknown key {key!r} in [{section}]")
        kwargs[name] = tuple(value) if isinstance(value, list) else value
    try:
        return replace(obj, **kwargs)
    except TypeError as exc:
        raise InvalidInputError(f"[{section}]: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    cfg = RunConfig()
    for section, table in data.items():
        if not hasattr(cfg, section):
            raise InvalidInputError(f"unknown config section [{section}]")
        setattr(cfg, section, _update(section, getattr(cfg, section), table))
    return cfg


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise InvalidInputError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise InvalidInputError(f"{path}: {exc}") from exc
    return config_from_dict(data)
