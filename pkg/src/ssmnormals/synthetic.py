"""Analytic test shapes with exact normals, written in dataset layout.

Run ``python -m ssmnormals.synthetic OUT_DIR`` to create a small dataset
with train/test split files for trying the CLI without PCPNet.
"""
from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from .dataset_io import PointCloud, Variant, write_shape


def sphere(n=10000, radius=1.0, seed=0, name="sphere") -> PointCloud:
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return PointCloud(radius * v, v.copy(), name=name)


def quadric(n=10000, a=0.5, b=0.2, c=-0.3, extent=1.0, seed=0, name="quadric") -> PointCloud:
    """Height field ``z = a x^2 + b x y + c y^2`` over a square."""
    rng = np.random.default_rng(seed)
    xy = rng.uniform(-extent, extent, size=(n, 2))
    x, y = xy[:, 0], xy[:, 1]
    z = a * x * x + b * x * y + c * y * y
    nrm = np.stack([-(2 * a * x + b * y), -(b * x + 2 * c * y), np.ones(n)], axis=1)
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return PointCloud(np.stack([x, y, z], axis=1), nrm, name=name)


def plane(n=2000, normal=(0.0, 0.0, 1.0), noise=0.0, seed=0, name="plane") -> PointCloud:
    rng = np.random.default_rng(seed)
    nrm = np.asarray(normal, dtype=np.float64)
    nrm = nrm / np.linalg.norm(nrm)
    u = np.cross(nrm, [1.0, 0.0, 0.0] if abs(nrm[0]) < 0.9 else [0.0, 1.0, 0.0])
    u /= np.linalg.norm(u)
    v = np.cross(nrm, u)
    st = rng.uniform(-1, 1, size=(n, 2))
    pts = st[:, :1] * u + st[:, 1:] * v + noise * rng.standard_normal((n, 1)) * nrm
    return PointCloud(pts, np.tile(nrm, (n, 1)), name=name,
                      variant=Variant.CLEAN if noise == 0 else Variant.NOISE_HIGH)


def torus(n=20000, major=1.0, minor=0.4, seed=0, name="torus") -> PointCloud:
    rng = np.random.default_rng(seed)
    # rejection sampling for uniform surface density
    u = rng.uniform(0, 2 * np.pi, size=4 * n)
    v = rng.uniform(0, 2 * np.pi, size=4 * n)
    keep = rng.uniform(0, major + minor, size=4 * n) < major + minor * np.cos(v)
    u, v = u[keep][:n], v[keep][:n]
    nrm = np.stack([np.cos(v) * np.cos(u), np.cos(v) * np.sin(u), np.sin(v)], axis=1)
    centre = np.stack([major * np.cos(u), major * np.sin(u), np.zeros_like(u)], axis=1)
    return PointCloud(centre + minor * nrm, nrm, name=name)


def ellipsoid(n=20000, axes=(1.0, 0.7, 0.5), seed=0, name="ellipsoid") -> PointCloud:
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    ax = np.asarray(axes)
    pts = v * ax
    nrm = pts / ax ** 2
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return PointCloud(pts, nrm, name=name)


def add_noise(cloud: PointCloud, sigma_rel: float, seed=0, name=None, variant=Variant.NOISE_HIGH) -> PointCloud:
    """Gaussian noise with sigma relative to the bounding-box diagonal; keeps clean normals."""
    rng = np.random.default_rng(seed)
    diag = np.linalg.norm(cloud.points.max(0) - cloud.points.min(0))
    pts = cloud.points + sigma_rel * diag * rng.standard_normal(cloud.points.shape)
    return PointCloud(pts, cloud.normals.copy(), cloud.eval_indices, name or cloud.name, variant)


def with_eval_subset(cloud: PointCloud, count: int, seed=0) -> PointCloud:
    rng = np.random.default_rng(seed)
    cloud.eval_indices = np.sort(rng.choice(len(cloud), size=min(count, len(cloud)), replace=False))
    return cloud


def make_dataset(root, n_points=4000, eval_count=500, seed=0) -> Path:
    """Small clean + noisy dataset in PCPNet layout, with split files."""
    root = Path(root)
    shapes = [sphere(n_points, seed=seed), ellipsoid(n_points, seed=seed + 1),
              torus(n_points, seed=seed + 2), quadric(n_points, seed=seed + 3)]
    names = []
    for i, s in enumerate(shapes):
        with_eval_subset(s, eval_count, seed + i)
        write_shape(root, s)
        names.append(s.name)
        noisy = add_noise(s, 0.012, seed + 10 + i, name=f"{s.name}_noise_white_1.20e-02")
        write_shape(root, noisy)
        names.append(noisy.name)
    (root / "trainingset_synthetic.txt").write_text("\n".join(names) + "\n", encoding="utf-8")
    (root / "testset_synthetic.txt").write_text("\n".join(names) + "\n", encoding="utf-8")
    return root


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out_dir")
    parser.add_argument("--points", type=int, default=4000)
    parser.add_argument("--eval-count", type=int, default=500)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    make_dataset(args.out_dir, args.points, args.eval_count, args.seed)


if __name__ == "__main__":
    main()
