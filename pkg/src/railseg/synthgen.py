"""Parametric railroad track surfaces and labeled point sampling.

Frame convention: x is lateral (across the track), y is up and z runs along
the track. The ballast plane lies at y = 0, crossties stand on it and the
rails rest on the tie tops.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .pointcloud import LabelSchema, PointCloud, derive_seed, make_rng


@dataclass(frozen=True)
class TrackSpec:
    length_m: float = 4.0
    gauge_m: float = 1.435
    rail_height_m: float = 0.17
    rail_head_width_m: float = 0.07
    rail_base_width_m: float = 0.15
    rail_web_width_m: float = 0.02
    tie_length_m: float = 2.6
    tie_width_m: float = 0.23
    tie_height_m: float = 0.18
    tie_spacing_m: float = 0.5
    ballast_flag: bool = True
    ballast_margin_m: float = 0.3

    def validate(self) -> "TrackSpec":
        for f in dataclasses.fields(self):
            if f.name != "ballast_flag":
                v = getattr(self, f.name)
                if not (math.isfinite(v) and v > 0):
                    raise ValueError(f"{f.name} must be > 0, got {v}")
        if not self.gauge_m > self.rail_head_width_m:
            raise ValueError("gauge_m must exceed rail_head_width_m")
        if not self.tie_length_m > self.gauge_m + 2 * self.rail_base_width_m:
            raise ValueError("tie_length_m must exceed gauge_m + 2*rail_base_width_m")
        if not self.tie_spacing_m > self.tie_width_m:
            raise ValueError("tie_spacing_m must exceed tie_width_m")
        if not self.rail_head_width_m > self.rail_web_width_m:
            raise ValueError("rail_head_width_m must exceed rail_web_width_m")
        if not self.rail_base_width_m > self.rail_web_width_m:
            raise ValueError("rail_base_width_m must exceed rail_web_width_m")
        return self

    @property
    def n_ties(self) -> int:
        return int(math.floor(self.length_m / self.tie_spacing_m + 1e-12))

    def tie_centers(self) -> np.ndarray:
        return self.tie_spacing_m * (np.arange(self.n_ties) + 0.5)

    def rail_center_x(self) -> tuple[float, float]:
        off = self.gauge_m / 2 + self.rail_head_width_m / 2
        return (-off, off)


WOOD_TIE = TrackSpec()


def concrete_tie(base: TrackSpec = WOOD_TIE) -> TrackSpec:
    """The concrete-tie preset: heavier ties at wider spacing."""
    return dataclasses.replace(
        base, tie_length_m=2.5, tie_width_m=0.28, tie_height_m=0.23, tie_spacing_m=0.6
    )


@dataclass(frozen=True)
class NoiseSpec:
    gaussian_sigma_m: float = 0.005
    dropout_rate: float = 0.1
    clutter_rate: float = 0.03
    clutter_band_m: float = 0.1

    def validate(self) -> "NoiseSpec":
        if not self.gaussian_sigma_m >= 0:
            raise ValueError("gaussian_sigma_m must be >= 0")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")
        if not 0 <= self.clutter_rate <= 1:
            raise ValueError("clutter_rate must be in [0, 1]")
        if not self.clutter_band_m >= 0:
            raise ValueError("clutter_band_m must be >= 0")
        return self

    def is_zero(self) -> bool:
        return self.gaussian_sigma_m == 0 and self.dropout_rate == 0 and self.clutter_rate == 0


NO_NOISE = NoiseSpec(0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True, eq=False)
class ComponentMesh:
    vertices: np.ndarray  # (V, 3)
    triangles: np.ndarray  # (T, 3) int
    label: int
    name: str = ""

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def area(self) -> float:
        return float(self.triangle_areas().sum())


class _MeshBuilder:
    def __init__(self):
        self.vertices: list = []
        self.triangles: list = []

    def quad(self, p0, p1, p2, p3):
        base = len(self.vertices)
        self.vertices.extend([p0, p1, p2, p3])
        self.triangles.extend([(base, base + 1, base + 2), (base, base + 2, base + 3)])

    def rect_xy(self, x0, x1, y0, y1, z):
        self.quad((x0, y0, z), (x1, y0, z), (x1, y1, z), (x0, y1, z))

    def build(self, label, name):
        return ComponentMesh(np.array(self.vertices, float), np.array(self.triangles), label, name)


def rail_profile(spec: TrackSpec) -> np.ndarray:
    """Closed 12-vertex I-shaped cross-section (x, y), base centered at x = 0."""
    h = spec.rail_height_m
    bw, ww, hw = spec.rail_base_width_m / 2, spec.rail_web_width_m / 2, spec.rail_head_width_m / 2
    bt, hh = 0.2 * h, 0.28 * h
    return np.array(
        [
            (-bw, 0), (bw, 0), (bw, bt), (ww, bt), (ww, h - hh), (hw, h - hh),
            (hw, h), (-hw, h), (-hw, h - hh), (-ww, h - hh), (-ww, bt), (-bw, bt),
        ]
    )


def _rail_mesh(spec: TrackSpec, x_center: float, label: int, name: str) -> ComponentMesh:
    prof = rail_profile(spec)
    y0 = spec.tie_height_m
    L = spec.length_m
    m = _MeshBuilder()
    # edge 0 is the foot's underside, which rests on the ties and is left open
    for k in range(1, len(prof)):
        (xa, ya), (xb, yb) = prof[k], prof[(k + 1) % len(prof)]
        xa, xb = xa + x_center, xb + x_center
        ya, yb = ya + y0, yb + y0
        m.quad((xa, ya, 0.0), (xb, yb, 0.0), (xb, yb, L), (xa, ya, L))
    h = spec.rail_height_m
    bw, ww, hw = spec.rail_base_width_m / 2, spec.rail_web_width_m / 2, spec.rail_head_width_m / 2
    bt, hh = 0.2 * h, 0.28 * h
    caps = [(-bw, bw, 0, bt), (-ww, ww, bt, h - hh), (-hw, hw, h - hh, h)]
    for z in (0.0, L):
        for x0, x1, ya, yb in caps:
            m.rect_xy(x_center + x0, x_center + x1, y0 + ya, y0 + yb, z)
    return m.build(label, name)


def _tie_mesh(spec: TrackSpec, zc: float, label: int, name: str) -> ComponentMesh:
    hx, hz, H = spec.tie_length_m / 2, spec.tie_width_m / 2, spec.tie_height_m
    z0, z1 = zc - hz, zc + hz
    m = _MeshBuilder()
    m.quad((-hx, H, z0), (hx, H, z0), (hx, H, z1), (-hx, H, z1))  # top
    m.quad((-hx, 0, z0), (hx, 0, z0), (hx, H, z0), (-hx, H, z0))  # front
    m.quad((-hx, 0, z1), (hx, 0, z1), (hx, H, z1), (-hx, H, z1))  # back
    m.quad((-hx, 0, z0), (-hx, 0, z1), (-hx, H, z1), (-hx, H, z0))  # left end
    m.quad((hx, 0, z0), (hx, 0, z1), (hx, H, z1), (hx, H, z0))  # right end
    return m.build(label, name)


def ballast_extent(spec: TrackSpec) -> tuple[float, float, float, float]:
    """(x0, x1, z0, z1) of the ground plane and clutter footprint."""
    hx = spec.tie_length_m / 2 + spec.ballast_margin_m
    return -hx, hx, -spec.ballast_margin_m, spec.length_m + spec.ballast_margin_m


def build_track_mesh(spec: TrackSpec, schema: LabelSchema | None = None) -> list[ComponentMesh]:
    """Two rails, one box shell (no bottom) per tie, optional ground plane."""
    spec.validate()
    schema = schema or LabelSchema()
    rail, tie = schema.index("rail"), schema.index("crosstie")
    meshes = [
        _rail_mesh(spec, x, rail, f"rail_{side}")
        for side, x in zip(("left", "right"), spec.rail_center_x())
    ]
    meshes += [_tie_mesh(spec, zc, tie, f"tie_{i}") for i, zc in enumerate(spec.tie_centers())]
    if spec.ballast_flag:
        x0, x1, z0, z1 = ballast_extent(spec)
        m = _MeshBuilder()
        m.quad((x0, 0, z0), (x0, 0, z1), (x1, 0, z1), (x1, 0, z0))
        meshes.append(m.build(schema.index("other"), "ballast"))
    return meshes


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def sample_surface(
    meshes: list[ComponentMesh], density_pts_per_m2: float, seed: int,
    schema: LabelSchema | None = None,
) -> PointCloud:
    """Sample round(area * density) points per mesh, uniformly over its surface."""
    schema = schema or LabelSchema()
    if not meshes:
        raise ValueError("empty mesh list")
    if not density_pts_per_m2 > 0:
        raise ValueError("density must be > 0")
    areas = [m.triangle_areas() for m in meshes]
    if sum(a.sum() for a in areas) <= 0:
        raise ValueError("all meshes have zero area")
    rng = make_rng(seed)
    pos, lab = [], []
    for mesh, tri_area in zip(meshes, areas):
        total = tri_area.sum()
        count = round_half_up(total * density_pts_per_m2)
        if count == 0:
            continue
        tri = rng.choice(len(tri_area), size=count, p=tri_area / total)
        r = rng.random((count, 2))
        flip = r.sum(axis=1) > 1.0
        r[flip] = 1.0 - r[flip]
        a, b, c = (mesh.vertices[mesh.triangles[tri, k]] for k in range(3))
        pos.append(a + r[:, :1] * (b - a) + r[:, 1:] * (c - a))
        lab.append(np.full(count, mesh.label, dtype=np.int64))
    if not pos:
        return PointCloud(np.zeros((0, 3)), np.zeros(0, np.int64), schema)
    return PointCloud(np.concatenate(pos), np.concatenate(lab), schema)


def generate_clean(
    spec: TrackSpec, density: float, seed: int, schema: LabelSchema | None = None
) -> PointCloud:
    schema = schema or LabelSchema()
    return sample_surface(build_track_mesh(spec, schema), density, seed, schema)


def generate_pseudo_real(
    spec: TrackSpec, density: float, noise: NoiseSpec, seed: int,
    schema: LabelSchema | None = None,
) -> PointCloud:
    """Clean sample followed by jitter, dropout and "other"-labeled clutter."""
    noise.validate()
    clean = generate_clean(spec, density, seed, schema)
    if noise.is_zero():
        return clean
    rng = make_rng(seed, 1)
    pos, lab = clean.positions, clean.labels
    if noise.gaussian_sigma_m > 0:
        pos = pos + rng.normal(0.0, noise.gaussian_sigma_m, size=pos.shape)
    if noise.dropout_rate > 0:
        keep = rng.random(len(pos)) >= noise.dropout_rate
        pos, lab = pos[keep], lab[keep]
    if noise.clutter_rate > 0:
        k = round_half_up(noise.clutter_rate * len(pos))
        x0, x1, z0, z1 = ballast_extent(spec)
        lo, hi = np.array([x0, 0.0, z0]), np.array([x1, noise.clutter_band_m, z1])
        extra = lo + rng.random((k, 3)) * (hi - lo)
        pos = np.concatenate([pos, extra])
        lab = np.concatenate([lab, np.full(k, clean.schema.index("other"), np.int64)])
    return PointCloud(pos, lab, clean.schema)


_JITTERED = ("tie_length_m", "tie_width_m", "tie_height_m", "tie_spacing_m")


def jittered_spec(base: TrackSpec, jitter_pct: float, rng: np.random.Generator) -> TrackSpec:
    u = rng.uniform(-jitter_pct, jitter_pct, size=len(_JITTERED))
    return dataclasses.replace(
        base, **{f: getattr(base, f) * (1.0 + d) for f, d in zip(_JITTERED, u)}
    )


def batch_seed(seed: int, index: int) -> int:
    return derive_seed(seed, index)


def batch_specs(base: TrackSpec, count: int, jitter_pct: float, seed: int) -> list[TrackSpec]:
    """Track specs of a batch: tie dimensions and spacing perturbed, rails untouched."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if not 0 <= jitter_pct < 0.5:
        raise ValueError("jitter_pct must be in [0, 0.5)")
    base.validate()
    specs = []
    for i in range(count):
        s = batch_seed(seed, i)
        spec = jittered_spec(base, jitter_pct, make_rng(s, 7)) if jitter_pct > 0 else base
        try:
            spec.validate()
        except ValueError as exc:
            raise ValueError(f"jittered spec {i} is invalid: {exc}") from exc
        specs.append(spec)
    return specs


def batch_generate(
    base: TrackSpec, count: int, jitter_pct: float, density: float, seed: int,
    schema: LabelSchema | None = None,
) -> list[PointCloud]:
    """``count`` clean clouds whose tie geometry is perturbed by up to ±jitter_pct.

    Cloud i uses ``batch_seed(seed, i)`` both for the perturbation and the
    sampling, so any cloud can be regenerated on its own.
    """
    specs = batch_specs(base, count, jitter_pct, seed)
    return [generate_clean(spec, density, batch_seed(seed, i), schema) for i, spec in enumerate(specs)]


def _coerce(cls, section: configparser.SectionProxy):
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in section:
            continue
        if f.type in ("bool", bool):
            kwargs[f.name] = section.getboolean(f.name)
        else:
            kwargs[f.name] = section.getfloat(f.name)
    unknown = set(section) - {f.name for f in dataclasses.fields(cls)}
    if unknown:
        raise ValueError(f"unknown keys in [{section.name}]: {sorted(unknown)}")
    return cls(**kwargs)


def track_spec_from_section(section: configparser.SectionProxy) -> TrackSpec:
    return _coerce(TrackSpec, section).validate()


def noise_spec_from_section(section: configparser.SectionProxy) -> NoiseSpec:
    return _coerce(NoiseSpec, section).validate()


def specs_to_config(track: TrackSpec, noise: NoiseSpec) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    cp["track"] = {k: repr(v) if isinstance(v, float) else str(v).lower()
                   for k, v in dataclasses.asdict(track).items()}
    cp["noise"] = {k: repr(v) for k, v in dataclasses.asdict(noise).items()}
    return cp


def specs_from_config(cp: configparser.ConfigParser) -> tuple[TrackSpec, NoiseSpec]:
    track = track_spec_from_section(cp["track"]) if cp.has_section("track") else TrackSpec()
    noise = noise_spec_from_section(cp["noise"]) if cp.has_section("noise") else NoiseSpec()
    return track, noise
