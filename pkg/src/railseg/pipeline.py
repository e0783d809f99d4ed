"""Training-set preparation: density levels, kNN patches, rotation, groups."""

from __future__ import annotations

import datetime as _dt
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .ply import load_ply, save_ply
from .pointcloud import LabelSchema, PointCloud, Rotation, derive_seed, make_rng, random_subsample, rotate

MILLION = "million-level"
HUNDRED_THOUSAND = "hundred-thousand-level"
RANDOM = "random"
ALIGNED = "aligned"

FULL_RANGES = {MILLION: (2_000_000, 5_000_000), HUNDRED_THOUSAND: (200_000, 500_000)}
FULL_PATCH = {MILLION: 372_680, HUNDRED_THOUSAND: 37_268}
DESK_SCALE = 1 / 91


@dataclass(frozen=True)
class DensityLevel:
    name: str
    point_range: tuple[int, int]
    patch_size: int

    @property
    def lo(self) -> int:
        return self.point_range[0]

    @property
    def hi(self) -> int:
        return self.point_range[1]


def density_levels(scale: float = 1.0) -> dict[str, DensityLevel]:
    """Both density levels shrunk by a common factor ``scale`` in (0, 1].

    Point ranges are rounded; the million-level patch is rounded up and the
    hundred-thousand-level patch down, which reproduces the published sizes
    at scale 1 and gives 4096 / 409 at the default desk scale of 1/91.
    """
    if not 0 < scale <= 1:
        raise ValueError("scale must be in (0, 1]")
    eps = 1e-9
    big = math.ceil(FULL_PATCH[MILLION] * scale - eps)
    small = max(1, math.floor(FULL_PATCH[HUNDRED_THOUSAND] * scale + eps))
    return {
        MILLION: DensityLevel(MILLION, tuple(round(v * scale) for v in FULL_RANGES[MILLION]), big),
        HUNDRED_THOUSAND: DensityLevel(
            HUNDRED_THOUSAND, tuple(round(v * scale) for v in FULL_RANGES[HUNDRED_THOUSAND]), small
        ),
    }


@dataclass(frozen=True)
class GroupConfig:
    id: str
    level: DensityLevel
    rotation: str
    bim_included: bool

    def row(self) -> tuple[str, str, str]:
        return (self.level.name, self.rotation, "yes" if self.bim_included else "no")


def make_group_configs(scale: float = DESK_SCALE) -> list[GroupConfig]:
    """G1..G8: every (level, rotation, BIM) combination, level-major."""
    levels = density_levels(scale)
    out = []
    for level in (MILLION, HUNDRED_THOUSAND):
        for rot in (RANDOM, ALIGNED):
            for bim in (True, False):
                out.append(GroupConfig(f"G{len(out) + 1}", levels[level], rot, bim))
    return out


def subsample_to_level(cloud: PointCloud, level: DensityLevel, seed: int) -> PointCloud:
    if cloud.n < level.lo:
        raise ValueError(f"cloud of {cloud.n} points is below density level {level.name} (min {level.lo})")
    if cloud.n > level.hi:
        return random_subsample(cloud, level.hi, seed)
    return cloud


def extract_patches(cloud: PointCloud, patch_size: int, num_patches: int, seed: int) -> list[PointCloud]:
    """kNN patches around uniformly drawn seed points.

    A cloud smaller than ``patch_size`` is resampled with replacement.
    """
    if cloud.n == 0:
        raise ValueError("cannot extract patches from an empty cloud")
    if patch_size < 1:
        raise ValueError("patch_size must be >= 1")
    rng = make_rng(seed)
    out = []
    tree = cKDTree(cloud.positions) if cloud.n > patch_size else None
    for _ in range(num_patches):
        if tree is None:
            if cloud.n == patch_size:
                idx = rng.permutation(cloud.n)
            else:
                idx = np.concatenate([rng.permutation(cloud.n),
                                      rng.integers(0, cloud.n, patch_size - cloud.n)])
        else:
            s = rng.integers(cloud.n)
            _, idx = tree.query(cloud.positions[s], k=patch_size)
        out.append(cloud.take(idx))
    return out


def augment(patches: list[PointCloud], strategy: str, seed: int) -> tuple[list[PointCloud], list[Rotation | None]]:
    """Rotate each patch independently (RANDOM) or leave it untouched (ALIGNED)."""
    if strategy == ALIGNED:
        return list(patches), [None] * len(patches)
    if strategy != RANDOM:
        raise ValueError(f"unknown rotation strategy {strategy!r}")
    rng = make_rng(seed)
    rots = [Rotation.random(rng) for _ in patches]
    return [rotate(p, r) for p, r in zip(patches, rots)], rots


@dataclass
class PatchRecord:
    file: str
    source: str
    rotation_axis: list[float] | None = None
    rotation_angle: float | None = None


@dataclass
class DatasetManifest:
    group_id: str
    level: DensityLevel
    rotation: str
    bim_included: bool
    seed: int
    patches: list[PatchRecord] = field(default_factory=list)
    created_at: str = ""
    root: str = "."

    @property
    def patch_files(self) -> list[Path]:
        return [Path(self.root) / p.file for p in self.patches]

    def load_patches(self, schema: LabelSchema | None = None) -> list[PointCloud]:
        return [load_ply(f, schema) for f in self.patch_files]

    def to_dict(self) -> dict:
        return {
            "group_id": self.group_id,
            "level": {"name": self.level.name, "point_range": list(self.level.point_range),
                      "patch_size": self.level.patch_size},
            "rotation": self.rotation,
            "bim_included": self.bim_included,
            "seed": self.seed,
            "created_at": self.created_at,
            "patches": [vars(p) for p in self.patches],
        }

    @classmethod
    def from_dict(cls, d: dict, root: str = ".") -> "DatasetManifest":
        lv = d["level"]
        return cls(
            group_id=d["group_id"],
            level=DensityLevel(lv["name"], tuple(lv["point_range"]), lv["patch_size"]),
            rotation=d["rotation"],
            bim_included=d["bim_included"],
            seed=d["seed"],
            patches=[PatchRecord(**p) for p in d["patches"]],
            created_at=d.get("created_at", ""),
            root=root,
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.dumps() + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DatasetManifest":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), root=str(path.parent))


def assemble_group(
    group: GroupConfig,
    pseudo_real: list[PointCloud],
    synthetic: list[PointCloud],
    patches_per_cloud: int,
    out_dir: str | os.PathLike,
    seed: int,
) -> DatasetManifest:
    """Subsample, patch and augment every source cloud of a group and persist it.

    Patch files are float32 binary PLY named ``<group>_<source>_<k>.ply``;
    the manifest goes to ``<out_dir>/<group>_manifest.json``.
    """
    if not pseudo_real:
        raise ValueError("at least one pseudo-real cloud is required")
    if group.bim_included and not synthetic:
        raise ValueError(f"{group.id} includes BIM data but no synthetic clouds were given")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sources = [(f"real{i}", c, 0, i) for i, c in enumerate(pseudo_real)]
    if group.bim_included:
        sources += [(f"bim{i}", c, 1, i) for i, c in enumerate(synthetic)]
    manifest = DatasetManifest(group.id, group.level, group.rotation, group.bim_included, seed,
                               created_at=_dt.datetime.now(_dt.timezone.utc).isoformat(),
                               root=str(out))
    for name, cloud, kind, i in sources:
        s = derive_seed(seed, kind, i)
        level_cloud = subsample_to_level(cloud, group.level, derive_seed(s, 0))
        patches = extract_patches(level_cloud, group.level.patch_size, patches_per_cloud, derive_seed(s, 1))
        patches, rots = augment(patches, group.rotation, derive_seed(s, 2))
        for k, (patch, rot) in enumerate(zip(patches, rots)):
            fname = f"{group.id}_{name}_{k:03d}.ply"
            save_ply(patch.astype(np.float32), out / fname)
            manifest.patches.append(PatchRecord(
                fname, name,
                list(rot.axis) if rot else None,
                rot.angle if rot else None,
            ))
    manifest.save(out / f"{group.id}_manifest.json")
    return manifest
