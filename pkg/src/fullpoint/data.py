"""Synthetic point-cloud datasets with analytic ground truth."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .cloud import PointCloud, normalize_unit_sphere
from .errors import SpecError
from .rng import Rng

KINDS = ("shapes-cls", "scene-seg", "sphere-normals")
SHAPES = ("sphere", "cube", "torus", "plane")
TORUS_MAJOR = 1.0
TORUS_MINOR = 0.4


@dataclass
class SyntheticDatasetSpec:
    kind: str = "shapes-cls"
    points_per_cloud: int = 1024
    train_count: int = 200
    test_count: int = 80
    noise: float = 0.01
    seed: int = 0
    scene_box: float = 2.0
    # random orientation per shape; off by default so the toy task stays small
    rotate: bool = False

    @property
    def classes(self) -> tuple[str, ...]:
        return () if self.kind == "sphere-normals" else SHAPES

    def validate(self) -> "SyntheticDatasetSpec":
        problems = []
        if self.kind not in KINDS:
            problems.append(f"kind: unknown {self.kind!r}, expected one of {KINDS}")
        for name in ("points_per_cloud", "train_count", "test_count"):
            if getattr(self, name) < 1:
                problems.append(f"{name}: must be >= 1")
        if self.kind == "scene-seg" and self.points_per_cloud < 5:
            problems.append("points_per_cloud: a scene needs at least 5 points")
        if self.noise < 0:
            problems.append("noise: must be >= 0")
        if problems:
            raise SpecError(problems)
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticDatasetSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise SpecError([f"{name}: unknown field" for name in unknown])
        return cls(**data)


@dataclass
class Dataset:
    spec: SyntheticDatasetSpec
    train: list
    test: list

    @property
    def class_names(self) -> tuple[str, ...]:
        return self.spec.classes


def cloud_label(cloud: PointCloud) -> int:
    """Class of a classification cloud (all per-point labels agree)."""
    return int(cloud.labels[0])


# ---------------------------------------------------------------- surfaces


def sample_surface(shape: str, n: int, rng: Rng) -> np.ndarray:
    """Area-uniform samples on a canonical shape centred at the origin."""
    if shape == "sphere":
        v = rng.normal(size=(n, 3))
        return v / np.sqrt(np.sum(v * v, axis=1, keepdims=True))
    if shape == "cube":
        face = rng.integers(6, size=n)
        uv = rng.uniform(-1.0, 1.0, size=(n, 2))
        axis, sign = face // 2, np.where(face % 2 == 0, -1.0, 1.0)
        out = np.empty((n, 3))
        for a in range(3):
            others = [b for b in range(3) if b != a]
            rows = axis == a
            out[rows, a] = sign[rows]
            out[np.ix_(rows, others)] = uv[rows]
        return out
    if shape == "torus":
        # rejection on the tube angle makes the density proportional to area
        got = []
        need = n
        while need > 0:
            u = rng.uniform(0.0, 2 * math.pi, size=2 * need)
            v = rng.uniform(0.0, 2 * math.pi, size=2 * need)
            w = rng.uniform(size=2 * need)
            keep = w < (TORUS_MAJOR + TORUS_MINOR * np.cos(v)) / (TORUS_MAJOR + TORUS_MINOR)
            u, v = u[keep][:need], v[keep][:need]
            ring = TORUS_MAJOR + TORUS_MINOR * np.cos(v)
            got.append(np.stack([ring * np.cos(u), ring * np.sin(u), TORUS_MINOR * np.sin(v)], axis=1))
            need -= u.shape[0]
        return np.concatenate(got)
    if shape == "plane":
        uv = rng.uniform(-1.0, 1.0, size=(n, 2))
        return np.concatenate([uv, np.zeros((n, 1))], axis=1)
    raise SpecError([f"shape: unknown {shape!r}"])


def random_rotation(rng: Rng) -> np.ndarray:
    """Uniform rotation from a normalised random quaternion."""
    q = rng.normal(size=4)
    w, x, y, z = q / np.sqrt(np.sum(q * q))
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def _orient(pts: np.ndarray, spec: SyntheticDatasetSpec, rng: Rng) -> np.ndarray:
    return pts @ random_rotation(rng).T if spec.rotate else pts


def _shape_cloud(cls: int, spec: SyntheticDatasetSpec, rng: Rng) -> PointCloud:
    pts = _orient(sample_surface(SHAPES[cls], spec.points_per_cloud, rng), spec, rng)
    if spec.noise:
        pts = pts + rng.normal(0.0, spec.noise, size=pts.shape)
    return normalize_unit_sphere(PointCloud(pts, labels=np.full(pts.shape[0], cls)))


def _scene_cloud(spec: SyntheticDatasetSpec, rng: Rng) -> PointCloud:
    count = 2 + rng.integers(4)
    classes = rng.integers(len(SHAPES), size=count)
    n = spec.points_per_cloud
    sizes = np.full(count, n // count)
    sizes[: n - sizes.sum()] += 1
    cell = spec.scene_box / count
    slots = rng.permutation(count)
    parts, labels = [], []
    for i in range(count):
        pts = _orient(sample_surface(SHAPES[classes[i]], int(sizes[i]), rng), spec, rng)
        # shapes sit in disjoint slabs along x so their labels never overlap
        centre = np.array([(slots[i] + 0.5) * cell, spec.scene_box / 2, spec.scene_box / 2])
        radius = np.sqrt(np.sum(pts * pts, axis=1)).max()
        pts = pts * (0.45 * cell / radius) + centre
        if spec.noise:
            pts = pts + rng.normal(0.0, spec.noise * cell, size=pts.shape)
        parts.append(pts)
        labels.append(np.full(pts.shape[0], classes[i]))
    return PointCloud(np.concatenate(parts), labels=np.concatenate(labels))


def _sphere_normals_cloud(spec: SyntheticDatasetSpec, rng: Rng) -> PointCloud:
    pts = sample_surface("sphere", spec.points_per_cloud, rng)
    return PointCloud(pts, normals=pts.copy())


def gen_dataset(spec: SyntheticDatasetSpec) -> Dataset:
    """Deterministic train/test split for ``spec``.

    Classification clouds are balanced round-robin over the four shapes and
    carry the class as a constant per-point label column.
    """
    spec.validate()
    rng = Rng(spec.seed)
    splits = []
    for count in (spec.train_count, spec.test_count):
        stream = rng.fork()
        clouds = []
        for i in range(count):
            if spec.kind == "shapes-cls":
                clouds.append(_shape_cloud(i % len(SHAPES), spec, stream))
            elif spec.kind == "scene-seg":
                clouds.append(_scene_cloud(spec, stream))
            else:
                clouds.append(_sphere_normals_cloud(spec, stream))
        splits.append(clouds)
    return Dataset(spec, splits[0], splits[1])
