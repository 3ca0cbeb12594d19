"""Run configuration: strict JSON schema with defaults.

Defaults follow the published setup (16 levels, 2^19 table entries, two
features per level, base resolution 16, growth 2, lr 1e-4, 5000 iterations).
Unknown keys are rejected with a nearest-key suggestion.

Layout::

    {
      "volume": {"voxels": [nx, ny, nz], "spacing_mm": [sx, sy, sz]},
      "geometry": [view, view]  or  {"orthogonal": [...], "clinical": [...]},
      "views": "orthogonal",
      "encoder": {...}, "mlp": {...}, "train": {...}, "projector": {...},
      "phantom": {...}, "thresholds": [0.4, 0.5, 0.6],
      "output_dir": "runs", "seed": 0, "noise_std": 0.0
    }
"""
from __future__ import annotations

import copy
import difflib
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .field import MlpConfig
from .geometry import GeometryError, ProjectionGeometry, VolumeGrid, geometry_from_dict
from .hashgrid import HashEncoderConfig
from .phantom import PhantomError, PhantomSpec
from .projector import ProjectorConfig
from .trainer import TrainConfig

__all__ = ["ConfigError", "RunConfig", "parse_config", "load_config", "DEFAULTS", "config_hash"]


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "views": None,
    "encoder": {
        "kind": "hash",
        "levels": 16,
        "table_size": 2 ** 19,
        "features": 2,
        "base_resolution": 16,
        "growth": 2.0,
        "n_frequencies": 8,
        "init_scale": 1e-4,
    },
    "mlp": {"n_layers": 8, "hidden_width": 256, "leaky_slope": 0.01, "skip": "concat"},
    "train": {
        "iterations": 5000,
        "lr": 1e-4,
        "adam_beta1": 0.9,
        "adam_beta2": 0.999,
        "adam_eps": 1e-8,
        "log_every": 100,
        "loss_normalization": "pixels",
        "chunk_size": 262144,
        "snapshot_every": 0,
    },
    "projector": {"step_mm": None, "chunk_rays": 2048},
    "phantom": {
        "n_branches": 3,
        "radius_root_mm": 2.0,
        "radius_taper": 0.8,
        "branch_angle_range_deg": [30.0, 70.0],
        "n_control_points": 5,
        "bend_fraction": 0.12,
    },
    "thresholds": [0.4, 0.5, 0.6],
    "output_dir": "runs",
    "seed": 0,
    "noise_std": 0.0,
}
_REQUIRED = ("volume", "geometry")
_VOLUME_KEYS = {"voxels", "spacing_mm"}
_VIEW_KEYS = {"dsd_mm", "dso_mm", "primary_deg", "secondary_deg", "det_pixels", "det_spacing_mm"}


def _reject_unknown(section: str, given, allowed):
    for key in given:
        if key not in allowed:
            close = difflib.get_close_matches(key, sorted(allowed), n=1, cutoff=0.5)
            hint = f"; did you mean {close[0]!r}?" if close else ""
            where = f" in {section!r}" if section else ""
            raise ConfigError(f"unknown key {key!r}{where}{hint}")


def _merge(section: str, defaults: dict, given) -> dict:
    if not isinstance(given, dict):
        raise ConfigError(f"{section!r} must be an object")
    _reject_unknown(section, given, defaults)
    out = copy.deepcopy(defaults)
    out.update(given)
    return out


@dataclass(frozen=True)
class RunConfig:
    grid: VolumeGrid
    geometries: dict  # block name -> list[ProjectionGeometry]
    views: str
    encoder_kind: str
    encoder: HashEncoderConfig
    n_frequencies: int
    table_init_scale: float
    mlp: MlpConfig
    train: TrainConfig
    snapshot_every: int
    projector: ProjectorConfig
    phantom: PhantomSpec
    thresholds: tuple
    output_dir: Path
    seed: int
    noise_std: float
    raw: dict  # fully resolved JSON, the basis of the config hash

    @property
    def geoms(self) -> list[ProjectionGeometry]:
        return self.geometries[self.views]

    def with_overrides(self, seed=None, encoder=None, views=None) -> "RunConfig":
        raw = copy.deepcopy(self.raw)
        if seed is not None:
            raw["seed"] = int(seed)
        if encoder is not None:
            raw["encoder"]["kind"] = encoder
        if views is not None:
            raw["views"] = views
        return parse_config(raw)


def config_hash(raw: dict) -> str:
    return hashlib.sha256(json.dumps(raw, sort_keys=True).encode()).hexdigest()


def _num_list(section, key, value, n, cast, positive=True):
    if not isinstance(value, (list, tuple)) or len(value) != n:
        raise ConfigError(f"{section}.{key} must be a list of {n} numbers, got {value!r}")
    try:
        out = [cast(v) for v in value]
    except (TypeError, ValueError):
        raise ConfigError(f"{section}.{key} must hold numbers, got {value!r}") from None
    if positive and any(v <= 0 for v in out):
        raise ConfigError(f"{section}.{key} entries must be positive, got {value!r}")
    return out


def _parse_views(name, views):
    if not isinstance(views, list) or not views:
        raise ConfigError(f"geometry block {name!r} must be a nonempty list of views")
    out = []
    for i, v in enumerate(views):
        where = f"geometry.{name}[{i}]"
        if not isinstance(v, dict):
            raise ConfigError(f"{where} must be an object")
        _reject_unknown(where, v, _VIEW_KEYS)
        for key in ("dsd_mm", "dso_mm", "det_pixels", "det_spacing_mm"):
            if key not in v:
                raise ConfigError(f"missing required field {where}.{key}")
        _num_list(where, "det_pixels", v["det_pixels"], 2, int)
        _num_list(where, "det_spacing_mm", v["det_spacing_mm"], 2, float)
        try:
            out.append(geometry_from_dict(v))
        except (GeometryError, TypeError, ValueError) as e:
            raise ConfigError(f"{where}: {e}") from None
    return out


def parse_config(data: dict) -> RunConfig:
    """Validate a config object and apply defaults."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    _reject_unknown("", data, set(DEFAULTS) | set(_REQUIRED))
    for key in _REQUIRED:
        if key not in data:
            raise ConfigError(f"missing required field {key!r}")
    raw = {k: copy.deepcopy(data.get(k, v)) for k, v in DEFAULTS.items()}
    for section in ("encoder", "mlp", "train", "projector", "phantom"):
        raw[section] = _merge(section, DEFAULTS[section], data.get(section, {}))

    vol = data["volume"]
    if not isinstance(vol, dict):
        raise ConfigError("'volume' must be an object")
    _reject_unknown("volume", vol, _VOLUME_KEYS)
    for key in sorted(_VOLUME_KEYS):
        if key not in vol:
            raise ConfigError(f"missing required field 'volume.{key}'")
    nx, ny, nz = _num_list("volume", "voxels", vol["voxels"], 3, int)
    sx, sy, sz = _num_list("volume", "spacing_mm", vol["spacing_mm"], 3, float)
    raw["volume"] = {"voxels": [nx, ny, nz], "spacing_mm": [sx, sy, sz]}
    grid = VolumeGrid(nx, ny, nz, sx, sy, sz)

    geo = data["geometry"]
    if isinstance(geo, list):
        geometries = {"default": _parse_views("default", geo)}
    elif isinstance(geo, dict):
        _reject_unknown("geometry", geo, {"orthogonal", "clinical"})
        geometries = {name: _parse_views(name, v) for name, v in geo.items()}
        if not geometries:
            raise ConfigError("'geometry' holds no view blocks")
    else:
        raise ConfigError("'geometry' must be a list of views or an object of named blocks")
    raw["geometry"] = copy.deepcopy(geo)
    views = raw["views"]
    if views is None:
        views = "orthogonal" if "orthogonal" in geometries else next(iter(geometries))
    if views not in geometries:
        raise ConfigError(f"views={views!r} has no geometry block; available: {sorted(geometries)}")
    raw["views"] = views

    e = raw["encoder"]
    if e["kind"] not in ("hash", "frequency"):
        raise ConfigError(f"encoder.kind must be 'hash' or 'frequency', got {e['kind']!r}")
    m, t, p, ph = raw["mlp"], raw["train"], raw["projector"], raw["phantom"]
    thresholds = raw["thresholds"]
    if not isinstance(thresholds, list) or not thresholds or not all(
            isinstance(x, (int, float)) and 0 < x < 1 for x in thresholds):
        raise ConfigError(f"thresholds must be numbers in (0, 1), got {thresholds!r}")
    if not isinstance(raw["seed"], int) or raw["seed"] < 0:
        raise ConfigError(f"seed must be a nonnegative integer, got {raw['seed']!r}")
    if not isinstance(raw["noise_std"], (int, float)) or raw["noise_std"] < 0:
        raise ConfigError(f"noise_std must be >= 0, got {raw['noise_std']!r}")
    if not isinstance(t["snapshot_every"], int) or t["snapshot_every"] < 0:
        raise ConfigError(f"train.snapshot_every must be a nonnegative integer, got {t['snapshot_every']!r}")
    try:
        enc = HashEncoderConfig(int(e["levels"]), int(e["table_size"]), int(e["features"]),
                                int(e["base_resolution"]), float(e["growth"]))
        n_freq = int(e["n_frequencies"])
        if n_freq < 1:
            raise ValueError(f"encoder.n_frequencies must be >= 1, got {n_freq}")
        in_dim = enc.out_dim if e["kind"] == "hash" else 6 * n_freq
        mlp = MlpConfig(int(m["n_layers"]), int(m["hidden_width"]), in_dim, 1, float(m["leaky_slope"]),
                        m["skip"])
        train = TrainConfig(
            iterations=int(t["iterations"]), lr=float(t["lr"]), adam_beta1=float(t["adam_beta1"]),
            adam_beta2=float(t["adam_beta2"]), adam_eps=float(t["adam_eps"]), seed=raw["seed"],
            log_every=int(t["log_every"]), binarize_thresholds=tuple(float(x) for x in thresholds),
            log_threshold=0.5 if 0.5 in thresholds else float(thresholds[0]),
            loss_normalization=t["loss_normalization"], chunk_size=int(t["chunk_size"]),
        )
        proj = ProjectorConfig(None if p["step_mm"] is None else float(p["step_mm"]), int(p["chunk_rays"]))
        proj.step_for(grid)
        if proj.chunk_rays < 1:
            raise ValueError("projector.chunk_rays must be positive")
        phantom = PhantomSpec(seed=raw["seed"], n_branches=int(ph["n_branches"]),
                              radius_root_mm=float(ph["radius_root_mm"]),
                              radius_taper=float(ph["radius_taper"]),
                              branch_angle_range_deg=tuple(float(a) for a in ph["branch_angle_range_deg"]),
                              n_control_points=int(ph["n_control_points"]),
                              bend_fraction=float(ph["bend_fraction"]))
    except (TypeError, ValueError, PhantomError) as err:
        raise ConfigError(str(err)) from None
    return RunConfig(
        grid=grid, geometries=geometries, views=views, encoder_kind=e["kind"], encoder=enc,
        n_frequencies=n_freq, table_init_scale=float(e["init_scale"]), mlp=mlp, train=train,
        snapshot_every=t["snapshot_every"], projector=proj, phantom=phantom,
        thresholds=tuple(float(x) for x in thresholds), output_dir=Path(raw["output_dir"]),
        seed=raw["seed"], noise_std=float(raw["noise_std"]), raw=raw,
    )


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return parse_config(data)
