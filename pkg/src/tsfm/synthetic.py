"""Synthetic volumes for smoke tests, demos and benchmarks."""

import numpy as np

from .datapool import DatasetSpec, build_pool
from .volumeio import Volume


def sphere_volume(shape=(16, 16, 32), center=None, radius=5.0, noise=0.1, seed=0, spacing=(1.0, 1.0, 1.0),
                  contrast=1.0, label=1):
    """A bright ball on a dark background; labels mark the ball."""
    rng = np.random.default_rng(seed)
    center = tuple((s - 1) / 2 for s in shape) if center is None else center
    grid = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij")
    dist2 = sum((g - c) ** 2 for g, c in zip(grid, center))
    inside = dist2 <= radius ** 2
    data = contrast * inside + noise * rng.standard_normal(shape)
    labels = np.where(inside, label, 0).astype(np.uint16)
    return Volume(data.astype(np.float32), spacing, "other", labels)


def random_spheres(n, shape=(16, 16, 32), radius=(3.0, 6.0), seed=0, **kw):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        r = float(rng.uniform(*radius))
        center = tuple(float(rng.uniform(r, s - 1 - r)) if s - 1 - r > r else (s - 1) / 2 for s in shape)
        out.append(sphere_volume(shape, center, r, seed=int(rng.integers(2**31)), **kw))
    return out


def in_memory_pool(volumes_by_dataset, labels=None, seed=0):
    """Build a pool over in-memory volumes; returns (manifest, {case_index: Volume})."""
    specs = []
    for dataset_id, vols in volumes_by_dataset.items():
        lab = (labels or {}).get(dataset_id, {1: "ball"})
        specs.append(DatasetSpec(dataset_id, "other", [(f"mem://{dataset_id}/{i}", "") for i in range(len(vols))], lab))
    manifest = build_pool(specs, seed=seed)
    volumes = {}
    k = 0
    for vols in volumes_by_dataset.values():
        for v in vols:
            volumes[k] = v
            k += 1
    return manifest, volumes
