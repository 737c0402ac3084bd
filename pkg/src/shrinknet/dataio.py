"""Mesh parsing, surface sampling, normalization, and the dataset cache.

The preprocessing chain is: parse an OFF mesh, draw an area-weighted
surface sample, min-max normalize each spatial dimension to [-1, 1]
(optionally appending unit face normals), and store the result in a
binary cache so training never touches mesh files again.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .binio import Reader, Writer
from .errors import ConfigError, DataError, OffParseError

CACHE_MAGIC = b"PCLCACH1"
CACHE_VERSION = 1
SPATIAL_DIMS = 3


@dataclass
class TriangleMesh:
    vertices: np.ndarray   # (V, 3) float64
    faces: np.ndarray      # (F, 3) int64, degenerate faces already dropped


def parse_off(path) -> TriangleMesh:
    """Parse an OFF mesh. Polygons are fan-triangulated; faces that repeat
    a vertex are dropped. Raises OffParseError with a 1-based line number.

    Tolerated quirks: counts on the header line ("OFF 8 6 0"), counts glued
    to the keyword ("OFF8 6 0"), comment and blank lines, and trailing
    colour values after vertex coordinates or face indices.
    """
    try:
        with open(path, "r", encoding="utf-8", errors="replace") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise DataError(f"cannot read mesh {path}: {exc}") from exc

    def significant(start):
        i = start
        while i < len(lines):
            stripped = lines[i].strip()
            if stripped and not stripped.startswith("#"):
                return i
            i += 1
        return None

    idx = significant(0)
    if idx is None:
        raise OffParseError(path, 1, "empty file")
    header = lines[idx].strip()
    if not header.startswith("OFF"):
        raise OffParseError(path, idx + 1, f"expected OFF keyword, got {header[:20]!r}")
    rest = header[3:].strip()

    if rest:
        count_tokens, counts_line = rest.split(), idx + 1
    else:
        idx = significant(idx + 1)
        if idx is None:
            raise OffParseError(path, len(lines) + 1, "missing element counts")
        count_tokens, counts_line = lines[idx].split(), idx + 1
    if len(count_tokens) < 2:
        raise OffParseError(path, counts_line, "need vertex and face counts")
    try:
        n_vertices, n_faces = int(count_tokens[0]), int(count_tokens[1])
    except ValueError:
        raise OffParseError(path, counts_line, f"bad counts {count_tokens[:3]}")
    if n_vertices < 0 or n_faces < 0:
        raise OffParseError(path, counts_line, "negative element count")

    vertices = np.empty((n_vertices, 3), dtype=np.float64)
    cursor = idx
    for v in range(n_vertices):
        cursor = significant(cursor + 1)
        if cursor is None:
            raise OffParseError(path, len(lines) + 1,
                                f"file ends after {v} of {n_vertices} vertices")
        tokens = lines[cursor].split()
        if len(tokens) < 3:
            raise OffParseError(path, cursor + 1,
                                f"vertex needs 3 coordinates, got {len(tokens)}")
        try:
            vertices[v] = [float(tokens[0]), float(tokens[1]), float(tokens[2])]
        except ValueError:
            raise OffParseError(path, cursor + 1, f"bad vertex coordinates {tokens[:3]}")

    triangles = []
    for f in range(n_faces):
        cursor = significant(cursor + 1)
        if cursor is None:
            raise OffParseError(path, len(lines) + 1,
                                f"file ends after {f} of {n_faces} faces")
        tokens = lines[cursor].split()
        try:
            k = int(tokens[0])
        except (ValueError, IndexError):
            raise OffParseError(path, cursor + 1, "face line must start with a vertex count")
        if k < 3:
            raise OffParseError(path, cursor + 1, f"face needs >= 3 vertices, got {k}")
        if len(tokens) < 1 + k:
            raise OffParseError(path, cursor + 1,
                                f"face declares {k} vertices but lists {len(tokens) - 1}")
        try:
            poly = [int(t) for t in tokens[1:1 + k]]
        except ValueError:
            raise OffParseError(path, cursor + 1, "non-integer vertex index")
        for p in poly:
            if p < 0 or p >= n_vertices:
                raise OffParseError(path, cursor + 1,
                                    f"vertex index {p} out of range [0, {n_vertices})")
        for a, b in zip(poly[1:-1], poly[2:]):
            tri = (poly[0], a, b)
            if len(set(tri)) == 3:
                triangles.append(tri)

    faces = np.array(triangles, dtype=np.int64).reshape(-1, 3)
    return TriangleMesh(vertices=vertices, faces=faces)


def _face_corners(mesh):
    a = mesh.vertices[mesh.faces[:, 0]]
    b = mesh.vertices[mesh.faces[:, 1]]
    c = mesh.vertices[mesh.faces[:, 2]]
    return a, b, c


def face_areas(mesh) -> np.ndarray:
    a, b, c = _face_corners(mesh)
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def sample_surface(mesh, count: int, rng):
    """Uniform area-weighted surface sample.

    Returns (points (count, 3), face_ids (count,)). Faces are drawn with
    probability proportional to area; within a face the square-root warp of
    the first barycentric draw keeps density uniform.
    """
    if count < 1:
        raise ConfigError(f"sample count must be >= 1, got {count}")
    if mesh.faces.shape[0] == 0:
        raise DataError("mesh has no triangles to sample")
    areas = face_areas(mesh)
    total = areas.sum()
    if total <= 0.0:
        raise DataError("mesh surface area is zero")
    face_ids = rng.choice(mesh.faces.shape[0], size=count, p=areas / total)
    a, b, c = _face_corners(mesh)
    a, b, c = a[face_ids], b[face_ids], c[face_ids]
    r1 = rng.random(count)[:, None]
    r2 = rng.random(count)[:, None]
    u = np.sqrt(r1)
    points = (1.0 - u) * a + u * (1.0 - r2) * b + u * r2 * c
    return points, face_ids


def normalize(cloud) -> np.ndarray:
    """Per-dimension min-max map onto [-1, 1].

    Extremes land on the interval ends exactly and a dimension with zero
    extent maps to 0. Already-normalized input passes through unchanged,
    so the map is idempotent.
    """
    cloud = np.asarray(cloud, dtype=np.float64)
    lo = cloud.min(axis=0)
    hi = cloud.max(axis=0)
    span = hi - lo
    out = np.zeros_like(cloud)
    live = span > 0.0
    out[:, live] = (2.0 * cloud[:, live] - (hi + lo)[live]) / span[live]
    return out


def with_normals(mesh, points, face_ids) -> np.ndarray:
    """Append the unit normal of each sample's source face: (S, 3) -> (S, 6).

    Normal channels are not min-max normalized; unit length already bounds
    them to [-1, 1].
    """
    points = np.asarray(points, dtype=np.float64)
    a, b, c = _face_corners(mesh)
    normals = np.cross(b - a, c - a)[face_ids]
    length = np.linalg.norm(normals, axis=1, keepdims=True)
    if np.any(length == 0.0):
        raise DataError("sampled a face with a degenerate normal")
    return np.concatenate([points, normals / length], axis=1)


def add_noise(cloud, sigma: float, rng) -> np.ndarray:
    """Gaussian jitter on the spatial channels only; extra channels (face
    normals) pass through untouched. sigma=0 returns the input unchanged."""
    if sigma < 0:
        raise ConfigError(f"noise sigma must be >= 0, got {sigma}")
    cloud = np.asarray(cloud, dtype=np.float64)
    if sigma == 0.0:
        return cloud.copy()
    out = cloud.copy()
    k = min(SPATIAL_DIMS, cloud.shape[1])
    out[:, :k] += rng.normal(0.0, sigma, size=(cloud.shape[0], k))
    return out


@dataclass
class Sample:
    cloud: np.ndarray   # (S, C) float64
    label: int
    source: str


@dataclass
class DatasetCache:
    split: str
    points: int
    dims: int
    class_names: list[str]
    samples: list[Sample] = field(default_factory=list)

    def counts_per_class(self) -> np.ndarray:
        counts = np.zeros(len(self.class_names), dtype=np.int64)
        for s in self.samples:
            counts[s.label] += 1
        return counts


def write_cache(cache: DatasetCache, path):
    """Atomic write: serialize to a temp file, then rename into place."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            w = Writer(fh, CACHE_MAGIC, CACHE_VERSION)
            w.text(cache.split)
            w.u32(cache.points)
            w.u32(cache.dims)
            w.u32(len(cache.class_names))
            for name in cache.class_names:
                w.text(name)
            w.u64(len(cache.samples))
            for s in cache.samples:
                if s.cloud.shape != (cache.points, cache.dims):
                    raise DataError(
                        f"sample {s.source}: cloud shape {s.cloud.shape} does not "
                        f"match cache geometry ({cache.points}, {cache.dims})")
                w.u32(s.label)
                w.text(s.source)
                w.array(s.cloud)
            w.finish()
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_cache(path) -> DatasetCache:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read dataset cache {path}: {exc}") from exc
    r = Reader(raw, CACHE_MAGIC, CACHE_VERSION, label="dataset cache")
    split = r.text()
    points = r.u32()
    dims = r.u32()
    class_names = [r.text() for _ in range(r.u32())]
    n = r.u64()
    samples = []
    for _ in range(n):
        label = r.u32()
        source = r.text()
        cloud = r.array()
        if cloud.shape != (points, dims):
            raise DataError(f"dataset cache: sample {source} has shape {cloud.shape}")
        if label >= len(class_names):
            raise DataError(f"dataset cache: label {label} out of range")
        samples.append(Sample(cloud=cloud, label=int(label), source=source))
    r.done()
    return DatasetCache(split=split, points=points, dims=dims,
                        class_names=class_names, samples=samples)


def preprocess_mesh(path, count, dims, rng) -> np.ndarray:
    """Mesh file to normalized cloud: sample, normalize positions, and
    append face normals when dims is 6."""
    if dims not in (3, 6):
        raise ConfigError(f"cloud dims must be 3 or 6, got {dims}")
    mesh = parse_off(path)
    points, face_ids = sample_surface(mesh, count, rng)
    cloud = normalize(points)
    if dims == 6:
        cloud = with_normals(mesh, cloud, face_ids)
    return cloud


def scan_modelnet_dir(data_dir, split):
    """Collect (path, class_name) pairs from a <root>/<class>/<split>/ tree."""
    if not os.path.isdir(data_dir):
        raise DataError(f"data directory not found: {data_dir}")
    classes = sorted(
        d for d in os.listdir(data_dir)
        if os.path.isdir(os.path.join(data_dir, d)) and not d.startswith("."))
    if not classes:
        raise DataError(f"no class directories under {data_dir}")
    items = []
    for cls in classes:
        split_dir = os.path.join(data_dir, cls, split)
        if not os.path.isdir(split_dir):
            continue
        for name in sorted(os.listdir(split_dir)):
            if name.lower().endswith(".off"):
                items.append((os.path.join(split_dir, name), cls))
    if not items:
        raise DataError(f"no .off files for split {split!r} under {data_dir}")
    return classes, items


def build_cache_from_meshes(data_dir, split, count, dims, seed) -> DatasetCache:
    from . import seeds as seedmod

    classes, items = scan_modelnet_dir(data_dir, split)
    class_index = {c: i for i, c in enumerate(classes)}
    cache = DatasetCache(split=split, points=count, dims=dims, class_names=classes)
    split_id = 0 if split == "train" else 1
    for i, (path, cls) in enumerate(items):
        rng = seedmod.stream(seed, seedmod.SAMPLER, split_id, i)
        cloud = preprocess_mesh(path, count, dims, rng)
        cache.samples.append(Sample(cloud=cloud, label=class_index[cls],
                                    source=os.path.basename(path)))
    return cache
