"""Analytic shape generators for quick end-to-end experiments.

Each generator draws points uniformly on the surface of a randomly sized
solid; the dataset builder then min-max normalizes like any other cloud.
Everything is deterministic given (seed, split, class, index).
"""

from __future__ import annotations

import numpy as np

from . import seeds
from .dataio import DatasetCache, Sample, normalize
from .errors import ConfigError


def sphere_cloud(count: int, rng, radius: float | None = None) -> np.ndarray:
    """Uniform sample of a sphere shell; every point sits exactly at the
    nominal radius."""
    if radius is None:
        radius = float(rng.uniform(0.6, 1.4))
    raw = rng.normal(size=(count, 3))
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    # a zero draw is astronomically unlikely; re-draw rather than divide by 0
    while np.any(norms == 0.0):
        bad = norms[:, 0] == 0.0
        raw[bad] = rng.normal(size=(int(bad.sum()), 3))
        norms = np.linalg.norm(raw, axis=1, keepdims=True)
    return radius * raw / norms


def cube_cloud(count: int, rng, edge: float | None = None) -> np.ndarray:
    """Uniform sample of the surface of an axis-aligned cube."""
    if edge is None:
        edge = float(rng.uniform(1.0, 2.4))
    half = edge / 2.0
    face = rng.integers(0, 6, size=count)
    uv = rng.uniform(-half, half, size=(count, 2))
    points = np.empty((count, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, half, -half)
    for a in range(3):
        mask = axis == a
        others = [d for d in range(3) if d != a]
        points[mask, a] = sign[mask]
        points[mask, others[0]] = uv[mask, 0]
        points[mask, others[1]] = uv[mask, 1]
    return points


def cylinder_cloud(count: int, rng, radius: float | None = None,
                   height: float | None = None) -> np.ndarray:
    """Uniform sample of a closed cylinder (lateral wall plus both caps),
    axis along z."""
    if radius is None:
        radius = float(rng.uniform(0.5, 1.0))
    if height is None:
        height = float(rng.uniform(1.2, 2.8))
    lateral = 2.0 * np.pi * radius * height
    caps = 2.0 * np.pi * radius * radius
    on_wall = rng.random(count) < lateral / (lateral + caps)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=count)
    points = np.empty((count, 3))

    wall = np.flatnonzero(on_wall)
    points[wall, 0] = radius * np.cos(theta[wall])
    points[wall, 1] = radius * np.sin(theta[wall])
    points[wall, 2] = rng.uniform(-height / 2.0, height / 2.0, size=wall.size)

    cap = np.flatnonzero(~on_wall)
    r = radius * np.sqrt(rng.random(cap.size))
    points[cap, 0] = r * np.cos(theta[cap])
    points[cap, 1] = r * np.sin(theta[cap])
    points[cap, 2] = np.where(rng.random(cap.size) < 0.5, height / 2.0, -height / 2.0)
    return points


GENERATORS = {
    "sphere": sphere_cloud,
    "cube": cube_cloud,
    "cylinder": cylinder_cloud,
}


def make_synth_cache(classes, per_class: int, count: int, seed: int,
                     split: str = "train") -> DatasetCache:
    """Build a normalized, labeled dataset of analytic shapes.

    Train and test splits with the same seed draw disjoint streams, so the
    two never share a cloud.
    """
    classes = list(classes)
    if not classes:
        raise ConfigError("need at least one shape class")
    for c in classes:
        if c not in GENERATORS:
            raise ConfigError(
                f"unknown shape {c!r}; choose from {sorted(GENERATORS)}")
    if per_class < 1 or count < 1:
        raise ConfigError("per_class and count must be >= 1")
    split_id = {"train": 0, "test": 1}.get(split)
    if split_id is None:
        raise ConfigError(f"split must be 'train' or 'test', got {split!r}")

    cache = DatasetCache(split=split, points=count, dims=3, class_names=classes)
    for label, cls in enumerate(classes):
        gen = GENERATORS[cls]
        for i in range(per_class):
            rng = seeds.stream(seed, seeds.SYNTH, split_id, label, i)
            cloud = normalize(gen(count, rng))
            cache.samples.append(
                Sample(cloud=cloud, label=label, source=f"{cls}-{split}-{i:04d}"))
    return cache
