"""Labeled point clouds, rigid rotations, subsampling and seeded randomness."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_CLASSES = ("rail", "crosstie", "other")
MAX_SEED = 2**64 - 1


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Return a Philox generator keyed by ``seed`` and optional sub-stream keys.

    Philox (counter-based) is the project-wide generator. Sub-streams are
    derived through ``SeedSequence([seed, *keys])`` so that a derived stream
    depends only on its key tuple, never on call order.
    """
    if not 0 <= int(seed) <= MAX_SEED:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    ss = np.random.SeedSequence([int(seed), *(int(k) for k in keys)])
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *keys: int) -> int:
    """Derive a 64-bit child seed as a pure function of (seed, keys)."""
    ss = np.random.SeedSequence([int(seed), *(int(k) for k in keys)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class LabelSchema:
    class_names: tuple[str, ...] = DEFAULT_CLASSES

    def __post_init__(self):
        names = tuple(self.class_names)
        object.__setattr__(self, "class_names", names)
        if len(names) < 2:
            raise ValueError("a label schema needs at least 2 classes")
        if len(set(names)) != len(names):
            raise ValueError(f"class names must be unique: {names}")
        if len(names) > 256:
            raise ValueError("at most 256 classes fit in a uchar label")

    @property
    def C(self) -> int:
        return len(self.class_names)

    def index(self, name: str) -> int:
        return self.class_names.index(name)


@dataclass(frozen=True, eq=False)
class PointCloud:
    """An immutable set of n points with one class label each.

    ``positions`` keeps its floating dtype (float32 or float64); the arrays
    are copied and marked read-only on construction.
    """

    positions: np.ndarray
    labels: np.ndarray
    schema: LabelSchema = field(default_factory=LabelSchema)

    def __post_init__(self):
        pos = np.array(self.positions, copy=True)
        if pos.dtype not in (np.float32, np.float64):
            pos = pos.astype(np.float64)
        pos = pos.reshape(-1, 3) if pos.size == 0 else pos
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError(f"positions must be n x 3, got shape {pos.shape}")
        lab = np.array(self.labels, copy=True).reshape(-1)
        if lab.size and not np.issubdtype(lab.dtype, np.integer):
            raise ValueError("labels must be integers")
        lab = lab.astype(np.int64)
        if lab.shape[0] != pos.shape[0]:
            raise ValueError(
                f"positions ({pos.shape[0]}) and labels ({lab.shape[0]}) differ in length"
            )
        if lab.size and (lab.min() < 0 or lab.max() >= self.schema.C):
            raise ValueError("label out of range")
        if not np.all(np.isfinite(pos)):
            raise ValueError("non-finite coordinate")
        pos.setflags(write=False)
        lab.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "labels", lab)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def n(self) -> int:
        return len(self)

    def take(self, idx) -> "PointCloud":
        idx = np.asarray(idx, dtype=np.int64)
        return PointCloud(self.positions[idx], self.labels[idx], self.schema)

    def with_positions(self, positions: np.ndarray) -> "PointCloud":
        return PointCloud(positions, self.labels, self.schema)

    def astype(self, dtype) -> "PointCloud":
        return PointCloud(self.positions.astype(dtype), self.labels, self.schema)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.schema.C)

    def equals(self, other: "PointCloud") -> bool:
        """Exact equality of schema, position bits and labels."""
        return (
            self.schema == other.schema
            and self.positions.dtype == other.positions.dtype
            and np.array_equal(self.positions, other.positions)
            and np.array_equal(self.labels, other.labels)
        )

    @staticmethod
    def concat(clouds: list["PointCloud"]) -> "PointCloud":
        if not clouds:
            raise ValueError("nothing to concatenate")
        schema = clouds[0].schema
        if any(c.schema != schema for c in clouds):
            raise ValueError("cannot concatenate clouds with different schemas")
        return PointCloud(
            np.concatenate([c.positions for c in clouds]),
            np.concatenate([c.labels for c in clouds]),
            schema,
        )


@dataclass(frozen=True)
class Rotation:
    axis: tuple[float, float, float]
    angle: float

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(axis) - 1.0) > 1e-12:
            raise ValueError(f"rotation axis must be unit length, |axis|={np.linalg.norm(axis)!r}")
        object.__setattr__(self, "axis", tuple(float(a) for a in axis))
        object.__setattr__(self, "angle", float(self.angle))

    @classmethod
    def from_axis(cls, axis, angle: float) -> "Rotation":
        """Build a rotation, normalizing ``axis`` first."""
        a = np.asarray(axis, dtype=np.float64)
        return cls(tuple(a / np.linalg.norm(a)), angle)

    @classmethod
    def random(cls, rng: np.random.Generator) -> "Rotation":
        """Axis uniform on the unit sphere, angle uniform in [0, 2*pi)."""
        v = rng.standard_normal(3)
        while np.linalg.norm(v) < 1e-8:
            v = rng.standard_normal(3)
        return cls.from_axis(v, rng.uniform(0.0, 2.0 * np.pi))

    def matrix(self) -> np.ndarray:
        # Rodrigues' formula
        x, y, z = self.axis
        c, s = np.cos(self.angle), np.sin(self.angle)
        t = 1.0 - c
        return np.array(
            [
                [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
                [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
                [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
            ]
        )

    def inverse(self) -> "Rotation":
        return Rotation(self.axis, -self.angle)


def rotate(cloud: PointCloud, r: Rotation) -> PointCloud:
    """Rotate every point about the origin; labels are untouched."""
    R = r.matrix().astype(cloud.positions.dtype)
    return cloud.with_positions(cloud.positions @ R.T)


def random_subsample(cloud: PointCloud, target_n: int, seed: int) -> PointCloud:
    """Draw ``target_n`` points uniformly without replacement.

    Output keeps the input order of the selected points.
    """
    if target_n < 0 or target_n > cloud.n:
        raise ValueError(f"target_n={target_n} outside [0, {cloud.n}]")
    rng = make_rng(seed)
    idx = np.sort(rng.choice(cloud.n, size=target_n, replace=False))
    return cloud.take(idx)


def bounding_box(cloud: PointCloud) -> tuple[np.ndarray, np.ndarray]:
    if cloud.n == 0:
        raise ValueError("bounding box of an empty cloud")
    return cloud.positions.min(axis=0), cloud.positions.max(axis=0)
