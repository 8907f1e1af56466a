"""Reading and writing PCPNet-style point cloud datasets.

A shape ``name`` lives in a directory as ``name.xyz`` (coordinates),
optionally ``name.normals`` and ``name.pidx`` (evaluation indices). Split
files (``trainingset*.txt``, ``testset*.txt``) list one shape per line.
"""
from __future__ import annotations

import enum
import logging
import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import ConsistencyError, DatasetMissingError, ParseError, ValidationError

log = logging.getLogger(__name__)

DEFAULT_PATCHES_PER_SHAPE = 1000


class Variant(str, enum.Enum):
    CLEAN = "clean"
    NOISE_LOW = "noise_low"
    NOISE_MED = "noise_med"
    NOISE_HIGH = "noise_high"
    STRIPE = "stripe"
    GRADIENT = "gradient"

    @property
    def label(self) -> str:
        return VARIANT_LABELS[self]


VARIANT_LABELS = {
    Variant.CLEAN: "None",
    Variant.NOISE_LOW: "Low",
    Variant.NOISE_MED: "Med.",
    Variant.NOISE_HIGH: "High",
    Variant.STRIPE: "Stripe",
    Variant.GRADIENT: "Grad.",
}

_NOISE_RE = re.compile(r"_noise_white_([0-9.eE+-]+)$")
_SPLIT_HINTS = (
    ("no_noise", Variant.CLEAN),
    ("low_noise", Variant.NOISE_LOW),
    ("med_noise", Variant.NOISE_MED),
    ("high_noise", Variant.NOISE_HIGH),
    ("striped", Variant.STRIPE),
    ("stripe", Variant.STRIPE),
    ("gradient", Variant.GRADIENT),
)


def variant_from_name(name: str) -> Variant:
    """Infer the benchmark variant from a PCPNet shape name.

    Noise suffixes carry the Gaussian sigma (relative to the bounding box
    diagonal); 0.12% / 0.6% / 1.2% map to low / medium / high.
    """
    m = _NOISE_RE.search(name)
    if m:
        sigma = float(m.group(1))
        if sigma < 3.5e-3:
            return Variant.NOISE_LOW
        if sigma < 8.5e-3:
            return Variant.NOISE_MED
        return Variant.NOISE_HIGH
    if name.endswith("_ddist_minmax_layers"):
        return Variant.STRIPE
    if name.endswith("_ddist_minmax"):
        return Variant.GRADIENT
    return Variant.CLEAN


def clean_name(name: str) -> str:
    """Name of the clean counterpart of a noisy / resampled shape."""
    for pattern in (_NOISE_RE, re.compile(r"_ddist_minmax(_layers)?$")):
        name = pattern.sub("", name)
    return name


def variant_from_split_file(path: str | Path) -> Optional[Variant]:
    stem = Path(path).stem.lower()
    for hint, variant in _SPLIT_HINTS:
        if hint in stem:
            return variant
    return None


@dataclass
class PointCloud:
    points: np.ndarray
    normals: Optional[np.ndarray] = None
    eval_indices: Optional[np.ndarray] = None
    name: str = ""
    variant: Variant = Variant.CLEAN

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or len(self.points) < 1:
            raise ValidationError(f"points must be a non-empty T x 3 array, got {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise ValidationError(f"{self.name}: non-finite coordinates")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64)
            if self.normals.shape != self.points.shape:
                raise ConsistencyError(
                    f"{self.name}: {len(self.normals)} normals for {len(self.points)} points")
        if self.eval_indices is not None:
            idx = np.asarray(self.eval_indices, dtype=np.int64)
            if idx.ndim != 1 or len(np.unique(idx)) != len(idx):
                raise ValidationError(f"{self.name}: evaluation indices must be unique")
            if len(idx) and (idx.min() < 0 or idx.max() >= len(self.points)):
                raise ValidationError(f"{self.name}: evaluation index out of range")
            self.eval_indices = idx

    def __len__(self):
        return len(self.points)


def _read_rows(path: Path, ncols: int) -> np.ndarray:
    """Parse an ASCII table of ``ncols`` floats per row, naming the first bad line."""
    text = path.read_text(encoding="utf-8", errors="replace")
    lines = text.splitlines()
    rows = []
    for lineno, line in enumerate(lines, start=1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != ncols:
            raise ParseError(path, lineno, f"expected {ncols} columns, found {len(tokens)}")
        try:
            row = [float(t) for t in tokens]
        except ValueError:
            raise ParseError(path, lineno, f"non-numeric token in {line.strip()!r}") from None
        if not all(np.isfinite(row)):
            raise ParseError(path, lineno, "non-finite value")
        rows.append(row)
    if not rows:
        return np.zeros((0, ncols))
    return np.asarray(rows, dtype=np.float64)


def _read_table(path: Path, ncols: int) -> np.ndarray:
    # fast path; the slow path only runs to produce a precise error message
    try:
        arr = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except ValueError:
        return _read_rows(path, ncols)
    if arr.size == 0:
        arr = arr.reshape(0, ncols)
    if arr.shape[1] != ncols or not np.all(np.isfinite(arr)):
        return _read_rows(path, ncols)
    return arr


def read_indices(path: str | Path) -> np.ndarray:
    """Read a ``.pidx`` file, either ASCII integers or raw little-endian int32."""
    path = Path(path)
    raw = path.read_bytes()
    try:
        tokens = raw.decode("ascii").split()
        return np.array([int(t) for t in tokens], dtype=np.int64)
    except (UnicodeDecodeError, ValueError):
        pass
    if len(raw) % 4:
        raise ParseError(path, 1, "neither ASCII integers nor a whole number of int32 values")
    return np.frombuffer(raw, dtype="<i4").astype(np.int64)


def load_shape(root: str | Path, name: str, variant: Optional[Variant] = None) -> PointCloud:
    root = Path(root)
    xyz = root / f"{name}.xyz"
    if not xyz.is_file():
        raise DatasetMissingError(f"missing coordinate file {xyz}")
    points = _read_table(xyz, 3)
    if len(points) == 0:
        raise ParseError(xyz, 1, "no points")

    normals = None
    nfile = root / f"{name}.normals"
    if nfile.is_file():
        normals = _read_table(nfile, 3)
        if len(normals) != len(points):
            raise ConsistencyError(
                f"{nfile}: {len(normals)} rows but {xyz} has {len(points)}")
        lengths = np.linalg.norm(normals, axis=1)
        bad = np.flatnonzero(lengths == 0)
        if len(bad):
            raise ParseError(nfile, int(bad[0]) + 1, "zero-length normal")
        normals = normals / lengths[:, None]

    idx = None
    pfile = root / f"{name}.pidx"
    if pfile.is_file():
        idx = read_indices(pfile)

    return PointCloud(points, normals, idx, name,
                      variant if variant is not None else variant_from_name(name))


def read_split(path: str | Path) -> list[str]:
    path = Path(path)
    if not path.is_file():
        raise DatasetMissingError(f"missing split file {path}")
    return [ln.strip() for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]


def count_points(path: Path) -> int:
    with open(path, "rb") as f:
        return sum(1 for line in f if line.strip())


@dataclass
class SplitManifest:
    root: Path
    shape_names: list[str]
    variants: list[Variant]
    patches_per_shape_per_epoch: int = DEFAULT_PATCHES_PER_SHAPE
    point_counts: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.root = Path(self.root)
        if not self.shape_names:
            raise ValidationError("manifest lists no shapes")
        if self.patches_per_shape_per_epoch < 1:
            raise ValidationError("patches_per_shape_per_epoch must be positive")
        if len(self.variants) != len(self.shape_names):
            raise ValidationError("one variant per shape required")
        for name in self.shape_names:
            if not (self.root / f"{name}.xyz").is_file():
                raise DatasetMissingError(f"shape {name!r} has no coordinate file under {self.root}")
            if name not in self.point_counts:
                self.point_counts[name] = count_points(self.root / f"{name}.xyz")

    @classmethod
    def from_split_file(cls, root, split_file, patches_per_shape_per_epoch=DEFAULT_PATCHES_PER_SHAPE):
        root = Path(root)
        split_file = Path(split_file)
        if not split_file.is_absolute() and not split_file.exists():
            split_file = root / split_file
        names = read_split(split_file)
        hint = variant_from_split_file(split_file)
        variants = [variant_from_name(n) if hint is None or variant_from_name(n) != Variant.CLEAN
                    else hint for n in names]
        return cls(root, names, variants, patches_per_shape_per_epoch)


_warned_replacement: set[str] = set()


def _shape_rng(seed: int, epoch: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, zlib.crc32(name.encode("utf-8"))])


def shape_draws(manifest: SplitManifest, name: str, seed: int, epoch: int = 0) -> np.ndarray:
    """Query indices drawn for one shape; independent of the other shapes."""
    count = manifest.point_counts[name]
    n = manifest.patches_per_shape_per_epoch
    rng = _shape_rng(seed, epoch, name)
    if n > count:
        if name not in _warned_replacement:
            log.warning("shape %s has %d points < %d patches; sampling with replacement",
                        name, count, n)
            _warned_replacement.add(name)
        return rng.integers(0, count, size=n)
    return rng.choice(count, size=n, replace=False)


def sample_training_patches(manifest: SplitManifest, seed: int,
                            epoch: int = 0) -> Iterator[tuple[str, int]]:
    """Yield ``(shape name, query index)`` pairs for one epoch, shuffled across shapes."""
    pairs = [(name, int(i)) for name in manifest.shape_names
             for i in shape_draws(manifest, name, seed, epoch)]
    order = np.random.default_rng([seed, epoch]).permutation(len(pairs))
    for k in order:
        yield pairs[k]


def write_indices(indices: Sequence[int], path: str | Path) -> None:
    Path(path).write_text("".join(f"{int(i)}\n" for i in indices), encoding="utf-8", newline="\n")


def write_normals(cloud: PointCloud, predictions: np.ndarray, path: str | Path,
                  indices: Optional[Sequence[int]] = None) -> Path:
    """Write one ``nx ny nz`` row per predicted normal.

    Full predictions have one row per point. Partial predictions (one row per
    ``indices`` entry, defaulting to the cloud's evaluation indices) also get
    a ``.pidx`` sidecar next to ``path``.
    """
    path = Path(path)
    pred = np.asarray(predictions, dtype=np.float64)
    if pred.ndim != 2 or pred.shape[1] != 3:
        raise ValidationError(f"predictions must be K x 3, got {pred.shape}")
    lengths = np.linalg.norm(pred, axis=1)
    bad = np.flatnonzero(~np.isfinite(lengths) | (np.abs(lengths - 1.0) > 1e-4))
    if len(bad):
        raise ValidationError(f"row {int(bad[0])} is not a unit vector (norm {lengths[bad[0]]:.6g})")

    partial = None
    if len(pred) != len(cloud):
        partial = indices if indices is not None else cloud.eval_indices
        if partial is None or len(partial) != len(pred):
            raise ValidationError(
                f"{len(pred)} predictions match neither {len(cloud)} points nor the index subset")
    elif indices is not None and len(indices) != len(cloud):
        raise ValidationError("indices length does not match predictions")

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row in pred:
            f.write(f"{row[0]:.9g} {row[1]:.9g} {row[2]:.9g}\n")
    if partial is not None:
        write_indices(partial, path.with_suffix(".pidx"))
    return path


def load_normals_file(path: str | Path) -> np.ndarray:
    path = Path(path)
    arr = _read_table(path, 3)
    return arr / np.linalg.norm(arr, axis=1, keepdims=True)


def write_shape(root: str | Path, cloud: PointCloud) -> None:
    """Write a cloud in dataset layout (used for fixtures and synthetic data)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    np.savetxt(root / f"{cloud.name}.xyz", cloud.points, fmt="%.9g")
    if cloud.normals is not None:
        np.savetxt(root / f"{cloud.name}.normals", cloud.normals, fmt="%.9g")
    if cloud.eval_indices is not None:
        write_indices(cloud.eval_indices, root / f"{cloud.name}.pidx")
