"""Experiment configuration: one INI file with [experiment], [track], [noise].

Grammar (Python ``configparser`` INI)::

    # comment
    [experiment]
    seed = 7
    epochs = 40

    [track]
    tie_spacing_m = 0.6

    [noise]
    dropout_rate = 0.2

Every key is optional and falls back to its default. ``track_file`` in
[experiment] may point to a second INI file whose [track]/[noise] sections
are read first; sections of the main file override them key by key.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .synthgen import NoiseSpec, TrackSpec, noise_spec_from_section, track_spec_from_section


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    scale: float = 1 / 91
    pseudo_real_count: int = 1
    synthetic_count: int = 8
    synthetic_jitter: float = 0.15
    pseudo_real_density: float = 1600.0
    synthetic_density: float = 2400.0
    patches_per_cloud: int = 8
    epochs: int = 60
    lr: float = 0.002
    batch_size: int = 4
    seed: int = 0
    output_dir: str = "railseg_out"
    track_file: str = ""
    track: TrackSpec = TrackSpec()
    noise: NoiseSpec = NoiseSpec()

    def validate(self) -> "ExperimentConfig":
        if not 0 < self.scale <= 1:
            raise ConfigError(f"scale must be in (0, 1], got {self.scale}")
        if self.pseudo_real_count < 1:
            raise ConfigError("pseudo_real_count must be >= 1")
        if self.synthetic_count < 0:
            raise ConfigError("synthetic_count must be >= 0")
        if not 0 <= self.synthetic_jitter < 0.5:
            raise ConfigError("synthetic_jitter must be in [0, 0.5)")
        if self.pseudo_real_density <= 0 or self.synthetic_density <= 0:
            raise ConfigError("densities must be > 0")
        if self.patches_per_cloud < 1:
            raise ConfigError("patches_per_cloud must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        try:
            self.track.validate()
            self.noise.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    @property
    def out(self) -> Path:
        return Path(self.output_dir)


EXPERIMENT_KEYS = [f for f in dataclasses.fields(ExperimentConfig) if f.name not in ("track", "noise")]


def _convert(field_type, raw: str, key: str):
    t = field_type if isinstance(field_type, str) else field_type.__name__
    try:
        if t == "int":
            return int(raw)
        if t == "float":
            return float(raw)
        if t == "bool":
            low = raw.strip().lower()
            if low in ("1", "yes", "true", "on"):
                return True
            if low in ("0", "no", "false", "off"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def _read(path: str | Path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    unknown = set(cp.sections()) - {"experiment", "track", "noise"}
    if unknown:
        raise ConfigError(f"unknown sections in {path}: {sorted(unknown)}")
    return cp


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Defaults, then the config file, then ``overrides`` (flag values win)."""
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    exp: dict = {}
    track_kv: dict = {}
    noise_kv: dict = {}
    if path:
        cp = _read(path)
        sec = cp["experiment"] if cp.has_section("experiment") else {}
        known = {f.name: f for f in EXPERIMENT_KEYS}
        for k in sec:
            if k not in known:
                raise ConfigError(f"unknown key in [experiment]: {k}")
            exp[k] = _convert(known[k].type, sec[k], k)
        tf = overrides.get("track_file", exp.get("track_file"))
        if tf:
            tp = Path(tf)
            if not tp.is_absolute():
                tp = Path(path).parent / tp
            extra = _read(tp)
            for name, store in (("track", track_kv), ("noise", noise_kv)):
                if extra.has_section(name):
                    store.update(extra[name])
        for name, store in (("track", track_kv), ("noise", noise_kv)):
            if cp.has_section(name):
                store.update(cp[name])
    for f in dataclasses.fields(TrackSpec):
        if f.name in overrides:
            track_kv[f.name] = str(overrides.pop(f.name))
    for f in dataclasses.fields(NoiseSpec):
        if f.name in overrides:
            noise_kv[f.name] = str(overrides.pop(f.name))
    exp.update({k: v for k, v in overrides.items() if k in {f.name for f in EXPERIMENT_KEYS}})
    cp2 = configparser.ConfigParser()
    cp2["track"] = track_kv
    cp2["noise"] = noise_kv
    try:
        track = track_spec_from_section(cp2["track"])
        noise = noise_spec_from_section(cp2["noise"])
    except ValueError as exc:
        raise ConfigError(f"invalid track/noise spec: {exc}") from exc
    return ExperimentConfig(**exp, track=track, noise=noise).validate()


def all_keys() -> list[tuple[str, str, object]]:
    """(section, key, default) for every configuration key."""
    out = [("experiment", f.name, f.default) for f in EXPERIMENT_KEYS]
    out += [("track", f.name, f.default) for f in dataclasses.fields(TrackSpec)]
    out += [("noise", f.name, f.default) for f in dataclasses.fields(NoiseSpec)]
    return out
