"""Point-cloud kernels: kNN, farthest point sampling, voxel grid, augmentation, file I/O.

All kernels are brute force on numpy arrays. Distances are squared Euclidean
computed as ``dx*dx + dy*dy + dz*dz`` in that order, and every tie breaks to
the lower point index.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError, ParameterError, ParseError, SchemaError
from .rng import Rng

JITTER_SIGMA = 0.01
JITTER_CLIP = 0.05


@dataclass
class PointCloud:
    positions: np.ndarray
    features: np.ndarray | None = None
    labels: np.ndarray | None = None
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.array(self.positions, dtype=np.float64, order="C")
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ContractError(f"positions must be [N, 3], got {self.positions.shape}")
        n = self.positions.shape[0]
        if n < 1:
            raise ContractError("a point cloud needs at least one point")
        if not np.isfinite(self.positions).all():
            raise ContractError("positions must be finite")
        if self.features is not None:
            self.features = np.array(self.features, dtype=np.float64, order="C")
            if self.features.ndim == 1:
                self.features = self.features[:, None]
            if self.features.shape[0] != n:
                raise ContractError(f"features have {self.features.shape[0]} rows, expected {n}")
        if self.labels is not None:
            self.labels = np.array(self.labels, dtype=np.int64).reshape(-1)
            if self.labels.shape[0] != n:
                raise ContractError(f"labels have {self.labels.shape[0]} rows, expected {n}")
        if self.normals is not None:
            self.normals = np.array(self.normals, dtype=np.float64, order="C")
            if self.normals.shape != (n, 3):
                raise ContractError(f"normals must be [{n}, 3], got {self.normals.shape}")
            norms = np.sqrt(np.sum(self.normals**2, axis=1))
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise ContractError("normals must have unit length (tolerance 1e-6)")

    def __len__(self):
        return self.positions.shape[0]

    def subset(self, index) -> "PointCloud":
        index = np.asarray(index, dtype=np.int64)
        pick = lambda a: None if a is None else a[index]  # noqa: E731
        return PointCloud(self.positions[index], pick(self.features), pick(self.labels), pick(self.normals))


def _positions(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.positions
    return np.asarray(cloud, dtype=np.float64)


def squared_distances(queries: np.ndarray, points: np.ndarray) -> np.ndarray:
    d = queries[:, None, :] - points[None, :, :]
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


@dataclass
class NeighborIndex:
    """Rows of neighbor indices, nearest first."""

    indices: np.ndarray
    distances: np.ndarray | None = field(default=None, repr=False)

    @property
    def query_count(self) -> int:
        return self.indices.shape[0]

    @property
    def neighbor_count(self) -> int:
        return self.indices.shape[1]


def _rows_sorted(d2: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k smallest entries per row, ordered by (distance, index)."""
    m, n = d2.shape
    if k == n:
        return np.argsort(d2, axis=1, kind="stable")
    part = np.argpartition(d2, k - 1, axis=1)[:, :k]
    pd = np.take_along_axis(d2, part, axis=1)
    order = np.lexsort((part, pd), axis=1)
    idx = np.take_along_axis(part, order, axis=1)
    # a tie straddling the k-th slot may have admitted a higher index; redo those rows exactly
    kth = np.take_along_axis(d2, idx[:, -1:], axis=1)
    ambiguous = np.flatnonzero((d2 <= kth).sum(axis=1) > k)
    for r in ambiguous:
        idx[r] = np.argsort(d2[r], kind="stable")[:k]
    return idx


def knn(
    cloud,
    queries,
    k: int,
    include_self: bool = True,
    query_indices=None,
    chunk: int = 2048,
) -> NeighborIndex:
    """k nearest cloud points for each query, nearest first.

    With ``query_indices`` (the cloud index of each query point), self
    inclusion is exact: ``include_self=True`` puts the query's own index first
    and ``False`` removes it. Without indices, queries are plain positions and
    ``include_self`` has no effect.
    """
    pts = _positions(cloud)
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    n = pts.shape[0]
    if not np.isfinite(q).all():
        raise ContractError("queries must be finite")
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    exclude = query_indices is not None and not include_self
    if k > n - (1 if exclude else 0):
        raise ParameterError(f"k={k} exceeds the {n} available points")
    qi = None if query_indices is None else np.asarray(query_indices, dtype=np.int64).reshape(-1)
    if qi is not None and qi.shape[0] != q.shape[0]:
        raise ContractError("query_indices must match queries")

    out_idx = np.empty((q.shape[0], k), dtype=np.int64)
    out_d2 = np.empty((q.shape[0], k))
    for start in range(0, q.shape[0], chunk):
        stop = min(start + chunk, q.shape[0])
        d2 = squared_distances(q[start:stop], pts)
        rows = np.arange(stop - start)
        if qi is not None:
            # -1 sorts ahead of every real distance; +inf drops the point
            d2[rows, qi[start:stop]] = -1.0 if include_self else np.inf
        idx = _rows_sorted(d2, k)
        if qi is not None and include_self:
            d2[rows, qi[start:stop]] = 0.0
        out_idx[start:stop] = idx
        out_d2[start:stop] = np.take_along_axis(d2, idx, axis=1)
    return NeighborIndex(out_idx, out_d2)


def farthest_point_sample(cloud, m: int, seed_index: int = 0) -> np.ndarray:
    """Greedy max-min subset of size m starting from ``seed_index``."""
    pts = _positions(cloud)
    n = pts.shape[0]
    if not 1 <= m <= n:
        raise ParameterError(f"m must lie in [1, {n}], got {m}")
    if not 0 <= seed_index < n:
        raise ParameterError(f"seed_index {seed_index} out of range")
    picks = np.empty(m, dtype=np.int64)
    picks[0] = seed_index
    mind = np.full(n, np.inf)
    taken = np.zeros(n, dtype=bool)
    taken[seed_index] = True
    last = seed_index
    for i in range(1, m):
        d = pts - pts[last]
        d2 = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]
        np.minimum(mind, d2, out=mind)
        last = int(np.argmax(np.where(taken, -1.0, mind)))
        picks[i] = last
        taken[last] = True
    return picks


def voxel_downsample(cloud: PointCloud, voxel_size: float) -> PointCloud:
    """One centroid point per occupied voxel, voxels in lexicographic key order.

    The grid starts at the cloud's minimum corner.
    Features are averaged, labels take the majority (lowest label on ties),
    normals are averaged and renormalised.
    """
    if not voxel_size > 0:
        raise ParameterError(f"voxel_size must be > 0, got {voxel_size}")
    pos = cloud.positions
    # grid anchored at the bounding-box minimum, so a box smaller than a voxel is one voxel
    origin = pos.min(axis=0)
    keys = np.floor((pos - origin) / voxel_size).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    v = uniq.shape[0]
    counts = np.bincount(inverse, minlength=v).astype(np.float64)

    def mean_rows(a):
        return np.stack([np.bincount(inverse, weights=a[:, c], minlength=v) for c in range(a.shape[1])], axis=1) / counts[:, None]

    centroid = mean_rows(pos)
    lo = origin + uniq * voxel_size
    centroid = np.clip(centroid, lo, lo + voxel_size)
    features = None if cloud.features is None else mean_rows(cloud.features)
    labels = None
    if cloud.labels is not None:
        labels = np.empty(v, dtype=np.int64)
        order = np.argsort(inverse, kind="stable")
        bounds = np.r_[0, np.cumsum(np.bincount(inverse, minlength=v))]
        for g in range(v):
            members = cloud.labels[order[bounds[g] : bounds[g + 1]]]
            vals, cnt = np.unique(members, return_counts=True)
            labels[g] = vals[np.argmax(cnt)]
    normals = None
    if cloud.normals is not None:
        nm = mean_rows(cloud.normals)
        length = np.sqrt(np.sum(nm**2, axis=1))
        first = np.full(v, -1)
        first[inverse[::-1]] = np.arange(len(inverse))[::-1]
        degenerate = length < 1e-12
        nm[degenerate] = cloud.normals[first[degenerate]]
        length[degenerate] = 1.0
        normals = nm / length[:, None]
    return PointCloud(centroid, features, labels, normals)


def normalize_unit_sphere(cloud: PointCloud) -> PointCloud:
    centered = cloud.positions - cloud.positions.mean(axis=0)
    scale = np.sqrt(np.sum(centered**2, axis=1)).max()
    if scale > 0:
        centered = centered / scale
    return replace(cloud, positions=centered)


@dataclass(frozen=True)
class AugmentSpec:
    permute: bool = False
    translate: tuple[float, float, float] = (0.0, 0.0, 0.0)
    scale: float = 1.0
    jitter_sigma: float = 0.0
    jitter_clip: float = JITTER_CLIP


def augment(cloud: PointCloud, spec: AugmentSpec, rng: Rng | None = None) -> PointCloud:
    """Permute, scale, translate, then add clipped Gaussian jitter, in that order."""
    if not spec.scale > 0:
        raise ParameterError(f"scale must be > 0, got {spec.scale}")
    if spec.jitter_sigma < 0:
        raise ParameterError("jitter_sigma must be >= 0")
    if (spec.permute or spec.jitter_sigma > 0) and rng is None:
        raise ParameterError("augment needs an rng for permutation or jitter")
    out = cloud
    if spec.permute:
        out = out.subset(rng.permutation(len(out)))
    pos = out.positions
    if spec.scale != 1.0:
        pos = pos * spec.scale
    if any(spec.translate):
        pos = pos + np.asarray(spec.translate, dtype=np.float64)
    if spec.jitter_sigma > 0:
        noise = np.clip(rng.normal(0.0, spec.jitter_sigma, size=pos.shape), -spec.jitter_clip, spec.jitter_clip)
        pos = pos + noise
    if pos is out.positions:
        return out
    return replace(out, positions=pos)


# ---------------------------------------------------------------- file I/O


def write_cloud(cloud: PointCloud, path) -> None:
    """Write the ASCII cloud format (or PLY when the suffix is ``.ply``)."""
    path = os.fspath(path)
    if path.lower().endswith(".ply"):
        _write_ply(cloud, path)
        return
    cols = [cloud.positions]
    c = 0 if cloud.features is None else cloud.features.shape[1]
    if c:
        cols.append(cloud.features)
    if cloud.normals is not None:
        cols.append(cloud.normals)
    with open(path, "w") as fh:
        fh.write(f"#cols {c}\n")
        if cloud.normals is not None:
            fh.write("#normals\n")
        if cloud.labels is not None:
            fh.write("#labels\n")
        block = np.concatenate(cols, axis=1)
        for i in range(len(cloud)):
            row = " ".join(repr(float(v)) for v in block[i])
            if cloud.labels is not None:
                row += f" {int(cloud.labels[i])}"
            fh.write(row + "\n")


def read_cloud(path) -> PointCloud:
    path = os.fspath(path)
    with open(path) as fh:
        first = fh.readline()
    if first.strip() == "ply":
        return _read_ply(path)
    return _read_ascii(path)


def _read_ascii(path) -> PointCloud:
    declared_c = None
    has_labels = has_normals = False
    rows, labels = [], []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            if text.startswith("#"):
                parts = text[1:].split()
                if not parts:
                    continue
                if parts[0] == "cols":
                    try:
                        declared_c = int(parts[1])
                    except (IndexError, ValueError):
                        raise ParseError("malformed '#cols' header", lineno) from None
                elif parts[0] == "labels":
                    has_labels = True
                elif parts[0] == "normals":
                    has_normals = True
                continue
            tokens = text.split()
            if width is None:
                width = len(tokens)
                extra = (3 if has_normals else 0) + (1 if has_labels else 0)
                c = declared_c if declared_c is not None else width - 3 - extra
                if c < 0 or width != 3 + c + extra:
                    raise SchemaError(
                        f"line {lineno}: expected {3 + max(c, 0) + extra} columns "
                        f"(xyz, {max(c, 0)} features{', normals' if has_normals else ''}"
                        f"{', label' if has_labels else ''}), found {width}"
                    )
            elif len(tokens) != width:
                raise ParseError(f"expected {width} columns, found {len(tokens)}", lineno)
            floats = tokens[:-1] if has_labels else tokens
            try:
                vals = [float(t) for t in floats]
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
            if not all(math.isfinite(v) for v in vals):
                raise ParseError("non-finite value", lineno)
            rows.append(vals)
            if has_labels:
                try:
                    labels.append(int(tokens[-1]))
                except ValueError:
                    raise ParseError(f"label {tokens[-1]!r} is not an integer", lineno) from None
    if not rows:
        raise ParseError("file contains no points")
    block = np.array(rows, dtype=np.float64)
    c = block.shape[1] - 3 - (3 if has_normals else 0)
    features = block[:, 3 : 3 + c] if c else None
    normals = block[:, 3 + c : 6 + c] if has_normals else None
    return PointCloud(block[:, :3], features, np.array(labels) if has_labels else None, normals)


def _read_ply(path) -> PointCloud:
    with open(path) as fh:
        lines = fh.read().splitlines()
    props, count, fmt, end = [], None, None, None
    for lineno, line in enumerate(lines, start=1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1:]
        elif parts[0] == "element":
            if parts[1] == "vertex":
                count = int(parts[2])
            elif count is not None and not props:
                raise SchemaError("vertex element declares no properties")
        elif parts[0] == "property" and count is not None:
            props.append((parts[-1], parts[1]))
        elif parts[0] == "end_header":
            end = lineno
            break
    if fmt is None or fmt[0] != "ascii":
        raise ParseError("only 'format ascii 1.0' PLY files are supported", 2)
    if end is None or count is None:
        raise ParseError("missing vertex element or end_header")
    names = [p for p, _ in props]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise SchemaError(f"PLY vertex element lacks property '{axis}'")
    col = {name: i for i, name in enumerate(names)}
    pos, labels = [], []
    label_col = col.get("label")
    for off in range(count):
        lineno = end + 1 + off
        if lineno > len(lines):
            raise ParseError(f"expected {count} vertices, file ends early", lineno)
        tokens = lines[lineno - 1].split()
        if len(tokens) < len(names):
            raise ParseError(f"expected {len(names)} values, found {len(tokens)}", lineno)
        try:
            xyz = [float(tokens[col[a]]) for a in ("x", "y", "z")]
            if label_col is not None:
                labels.append(int(float(tokens[label_col])))
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        if not all(math.isfinite(v) for v in xyz):
            raise ParseError("non-finite coordinate", lineno)
        pos.append(xyz)
    return PointCloud(np.array(pos), labels=np.array(labels) if label_col is not None else None)


def _write_ply(cloud: PointCloud, path) -> None:
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(cloud)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        if cloud.labels is not None:
            fh.write("property uchar label\n")
        fh.write("end_header\n")
        for i in range(len(cloud)):
            row = " ".join(repr(float(v)) for v in cloud.positions[i])
            if cloud.labels is not None:
                row += f" {int(cloud.labels[i])}"
            fh.write(row + "\n")
