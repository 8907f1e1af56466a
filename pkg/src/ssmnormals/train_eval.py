"""Training loop, checkpoints, predictors and the evaluation suite."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
from scipy.spatial import cKDTree

from . import classical_fit
from .config import TrainConfig
from .dataset_io import (PointCloud, SplitManifest, Variant, VARIANT_LABELS, clean_name,
                         load_shape, sample_training_patches)
from .errors import ConfigError, DatasetMissingError, NumericalAbort, UnsupportedModeError
from .model import NormalNet
from .normal_head import sin_loss, total_loss, weight_loss, weight_targets
from .patch_geometry import NeighborIndex, align_patch, extract_patch, random_rotation, unalign_normal

log = logging.getLogger(__name__)

PGP_ALPHAS = (5, 10, 15, 20, 25, 30)
CATEGORY_ORDER = (Variant.CLEAN, Variant.NOISE_LOW, Variant.NOISE_MED,
                  Variant.NOISE_HIGH, Variant.STRIPE, Variant.GRADIENT)


# ---------------------------------------------------------------- metrics

def angular_error(n_pred, n_gt) -> np.ndarray:
    """Unoriented angle in degrees between row vectors."""
    n_pred = np.asarray(n_pred, dtype=np.float64)
    n_gt = np.asarray(n_gt, dtype=np.float64)
    dots = np.abs(np.sum(n_pred * n_gt, axis=-1))
    return np.degrees(np.arccos(np.clip(dots, 0.0, 1.0)))


def rmse(errors) -> float:
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        raise ValueError("RMSE of an empty error list")
    return float(np.sqrt(np.mean(errors ** 2)))


def pgp(errors, alpha: float) -> float:
    """Fraction of errors strictly below ``alpha`` degrees."""
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        raise ValueError("PGP of an empty error list")
    return float(np.mean(errors < alpha))


def cnd_error(n_pred, query_points, clean: Optional[PointCloud]) -> np.ndarray:
    """Angular error against the normal of the nearest clean point."""
    if clean is None or clean.normals is None:
        raise UnsupportedModeError("CND needs a clean reference cloud with normals")
    _, nearest = cKDTree(clean.points).query(np.asarray(query_points), k=1)
    return angular_error(n_pred, clean.normals[nearest])


@dataclass
class MetricsReport:
    per_shape_rmse: dict[str, float]
    per_variant_rmse: dict[str, float]
    pgp_curve: dict[int, float]
    cnd: Optional[float] = None
    average: Optional[float] = None
    per_variant_pgp: dict[str, dict[int, float]] = field(default_factory=dict)
    per_shape_cnd: dict[str, float] = field(default_factory=dict)
    method: str = ""
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "per_shape_rmse": self.per_shape_rmse,
            "per_variant_rmse": self.per_variant_rmse,
            "average_rmse": self.average,
            "average_definition": "mean of per-category RMSE over the categories present",
            "pgp_curve": {str(a): f for a, f in self.pgp_curve.items()},
            "per_variant_pgp": {v: {str(a): f for a, f in c.items()} for v, c in self.per_variant_pgp.items()},
            "cnd": self.cnd,
            "per_shape_cnd": self.per_shape_cnd,
            "notes": self.notes,
        }

    def table_row(self) -> list[str]:
        cells = []
        for v in CATEGORY_ORDER:
            val = self.per_variant_rmse.get(v.value)
            cells.append("-" if val is None else f"{val:.2f}")
        cells.append("-" if self.average is None else f"{self.average:.2f}")
        return cells

    def rmse_table(self) -> str:
        header = ["Method"] + [VARIANT_LABELS[v] for v in CATEGORY_ORDER] + ["Avg."]
        lines = ["| " + " | ".join(header) + " |",
                 "|" + "|".join(["---"] * len(header)) + "|",
                 "| " + " | ".join([self.method or "model"] + self.table_row()) + " |"]
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8", newline="\n")
        with open(out / "pgp_curve.csv", "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["alpha", "fraction"])
            for a, frac in self.pgp_curve.items():
                w.writerow([a, f"{frac:.6f}"])
        (out / "rmse_table.md").write_text(self.rmse_table(), encoding="utf-8", newline="\n")


def build_report(errors_by_shape: dict[str, np.ndarray], variants: dict[str, Variant],
                 cnd_by_shape: Optional[dict[str, np.ndarray]] = None, method="") -> MetricsReport:
    per_shape = {name: rmse(e) for name, e in errors_by_shape.items()}
    per_variant, per_variant_pgp = {}, {}
    for v in CATEGORY_ORDER:
        names = [n for n in errors_by_shape if variants[n] == v]
        if not names:
            continue
        per_variant[v.value] = float(np.mean([per_shape[n] for n in names]))
        pooled = np.concatenate([errors_by_shape[n] for n in names])
        per_variant_pgp[v.value] = {a: pgp(pooled, a) for a in PGP_ALPHAS}
    everything = np.concatenate(list(errors_by_shape.values()))
    report = MetricsReport(per_shape, per_variant, {a: pgp(everything, a) for a in PGP_ALPHAS},
                           average=float(np.mean(list(per_variant.values()))),
                           per_variant_pgp=per_variant_pgp, method=method)
    if cnd_by_shape:
        report.per_shape_cnd = {n: rmse(e) for n, e in cnd_by_shape.items()}
        cat = []
        for v in CATEGORY_ORDER:
            vals = [report.per_shape_cnd[n] for n in cnd_by_shape if variants[n] == v]
            if vals:
                cat.append(np.mean(vals))
        report.cnd = float(np.mean(cat))
    return report


# ---------------------------------------------------------------- patches

@dataclass
class PatchBatch:
    coords: torch.Tensor          # B x N x 3 aligned
    normals: Optional[torch.Tensor]  # B x 3 aligned ground truth
    patches: list
    ids: list


class ShapeStore:
    """Loaded clouds with their neighbour indices, keyed by shape name."""

    def __init__(self, root, names: Iterable[str] = (), variants: Optional[dict] = None):
        self.root = Path(root)
        self.clouds: dict[str, PointCloud] = {}
        self.index: dict[str, NeighborIndex] = {}
        self.variants = variants or {}
        self.warned: set[str] = set()
        for n in names:
            self.get(n)

    def get(self, name: str) -> PointCloud:
        if name not in self.clouds:
            cloud = load_shape(self.root, name, self.variants.get(name))
            self.clouds[name] = cloud
            self.index[name] = NeighborIndex(cloud.points)
        return self.clouds[name]

    def clean_reference(self, name: str) -> Optional[PointCloud]:
        base = clean_name(name)
        if base == name:
            return self.get(name)
        if (self.root / f"{base}.xyz").is_file() and (self.root / f"{base}.normals").is_file():
            return self.get(base)
        return None


def make_patch_batch(store: ShapeStore, ids: Sequence[tuple[str, int]], n: int,
                     rng: Optional[np.random.Generator] = None, cnd: bool = False,
                     dtype=torch.float32) -> PatchBatch:
    coords, normals, patches = [], [], []
    have_normals = True
    for name, q in ids:
        cloud = store.get(name)
        raw, src = extract_patch(cloud, q, n, store.index[name])
        gt = None
        if cloud.normals is not None:
            gt = cloud.normals[q]
            if cnd:
                ref = store.clean_reference(name)
                if ref is not None and ref is not cloud:
                    _, j = store.index[ref.name].tree.query(cloud.points[q])
                    gt = ref.normals[j]
                elif ref is None and name not in store.warned:
                    store.warned.add(name)
                    log.warning("no clean counterpart for %s; supervising with its own normals", name)
        if rng is not None:
            rot = random_rotation(rng)
            raw = (raw - raw[0]) @ rot.T + raw[0]
            gt = rot @ gt if gt is not None else None
        patch = align_patch(raw, src)
        coords.append(patch.coords)
        patches.append(patch)
        if gt is None:
            have_normals = False
        else:
            normals.append(patch.to_canonical(gt))
    coords_t = torch.as_tensor(np.stack(coords), dtype=dtype)
    normals_t = torch.as_tensor(np.stack(normals), dtype=dtype) if have_normals else None
    return PatchBatch(coords_t, normals_t, patches, list(ids))


# ---------------------------------------------------------------- losses

def batch_loss(model: NormalNet, batch: PatchBatch, config: TrainConfig):
    """Mean total loss over a batch, plus its parts and the predicted normals."""
    out = model(batch.coords)
    l_sin = sin_loss(out.normal, batch.normals).mean()
    m = config.token_count
    w_hat, _ = weight_targets(batch.coords[:, :m], batch.normals)
    l_wt = weight_loss(out.weights, w_hat).mean()
    if config.use_wt_loss:
        loss = total_loss(l_sin, l_wt, config.gamma_sin, config.gamma_wt)
    else:
        loss = config.gamma_sin * l_sin
    return loss, l_sin.detach(), l_wt.detach(), out


# ---------------------------------------------------------------- checkpoints

_ZIP_TIME = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    # ascontiguousarray would promote 0-d arrays to 1-d
    np.lib.format.write_array(buf, np.array(arr, order="C"), allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(path, model: NormalNet, optimizer: Optional[torch.optim.Optimizer],
                    config: TrainConfig, epoch: int, step: int = 0, extra: Optional[dict] = None) -> Path:
    """Zip archive: ``header.json`` plus little-endian float32 ``.npy`` blobs.

    Parameters are stored as ``param/<name>``, Adam moments as
    ``optim/<name>/exp_avg`` and ``optim/<name>/exp_avg_sq``.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = [n for n, _ in model.named_parameters()]
    header = {"format": "ssmnormals-checkpoint", "version": 1, "config": config.to_dict(),
              "config_hash": config.config_hash(), "epoch": epoch, "step": step,
              "parameters": names, **(extra or {})}
    blobs = {f"param/{n}": p.detach().cpu().numpy().astype("<f4") for n, p in model.named_parameters()}
    if optimizer is not None:
        state = optimizer.state_dict()
        header["optimizer"] = {"type": type(optimizer).__name__,
                               "param_groups": [{k: v for k, v in g.items() if k != "params"}
                                                for g in state["param_groups"]]}
        steps = {}
        for i, n in enumerate(names):
            s = state["state"].get(i)
            if not s:
                continue
            blobs[f"optim/{n}/exp_avg"] = s["exp_avg"].cpu().numpy().astype("<f4")
            blobs[f"optim/{n}/exp_avg_sq"] = s["exp_avg_sq"].cpu().numpy().astype("<f4")
            steps[n] = float(s["step"])
        header["optimizer"]["steps"] = steps
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("header.json", date_time=_ZIP_TIME)
        zf.writestr(info, json.dumps(header, sort_keys=True, indent=1).encode("utf-8"))
        for key in sorted(blobs):
            zf.writestr(zipfile.ZipInfo(f"{key}.npy", date_time=_ZIP_TIME), _npy_bytes(blobs[key]))
    return path


def read_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise DatasetMissingError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("header.json").decode("utf-8"))
        blobs = {}
        for name in zf.namelist():
            if name.endswith(".npy"):
                blobs[name[:-4]] = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
    return header, blobs


def load_checkpoint(path, optimizer_factory=None):
    """Rebuild ``(model, optimizer or None, config, header)`` from an archive."""
    header, blobs = read_checkpoint(path)
    config = TrainConfig.from_mapping(header["config"])
    model = NormalNet(config)
    with torch.no_grad():
        for n, p in model.named_parameters():
            key = f"param/{n}"
            if key not in blobs:
                raise ConfigError(f"checkpoint lacks parameter {n}")
            p.copy_(torch.from_numpy(blobs[key].astype(np.float32)))
    optimizer = None
    if optimizer_factory is not None:
        optimizer = optimizer_factory(model)
        opt_head = header.get("optimizer")
        if opt_head:
            for group, saved in zip(optimizer.param_groups, opt_head["param_groups"]):
                group.update(saved)
            params = dict(model.named_parameters())
            for n, s in opt_head["steps"].items():
                optimizer.state[params[n]] = {
                    "step": torch.tensor(s),
                    "exp_avg": torch.from_numpy(blobs[f"optim/{n}/exp_avg"].astype(np.float32)),
                    "exp_avg_sq": torch.from_numpy(blobs[f"optim/{n}/exp_avg_sq"].astype(np.float32)),
                }
    return model, optimizer, config, header


def make_optimizer(model, config: TrainConfig):
    return torch.optim.Adam(model.parameters(), lr=config.lr)


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    checkpoint: Path
    losses: list[float]
    epochs_run: int
    steps: int


def train(config: TrainConfig, manifest: SplitManifest, out_dir, resume=None,
          max_steps: Optional[int] = None, store: Optional[ShapeStore] = None) -> TrainResult:
    """Adam with the step schedule, periodic checkpoints, resumable from any checkpoint."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if any(m >= config.epochs for m in config.lr_milestones):
        log.warning("lr milestones %s at or beyond %d epochs never fire",
                    [m for m in config.lr_milestones if m >= config.epochs], config.epochs)
    manifest.patches_per_shape_per_epoch = config.patches_per_shape
    store = store or ShapeStore(manifest.root, manifest.shape_names,
                                dict(zip(manifest.shape_names, manifest.variants)))

    torch.manual_seed(config.seed)
    if resume is not None:
        model, optimizer, saved_cfg, header = load_checkpoint(resume, lambda m: make_optimizer(m, config))
        if saved_cfg.config_hash() != config.config_hash():
            log.warning("resuming with a config that differs from the checkpoint's")
        start_epoch, step = header["epoch"], header["step"]
    else:
        model = NormalNet(config)
        optimizer = make_optimizer(model, config)
        start_epoch, step = 0, 0
    model.train()

    losses: list[float] = []
    curve = out / "loss_curve.csv"
    if resume is None or not curve.exists():
        curve.write_text("epoch,step,loss,l_sin,l_wt\n", encoding="utf-8")
    ckpt = None
    epoch = start_epoch
    for epoch in range(start_epoch, config.epochs):
        for group in optimizer.param_groups:
            group["lr"] = config.lr_at_epoch(epoch)
        pairs = list(sample_training_patches(manifest, config.seed, epoch))
        aug = np.random.default_rng([config.seed, epoch, 1]) if config.augment_rotation else None
        t0 = time.time()
        with open(curve, "a", encoding="utf-8") as fcurve:
            for start in range(0, len(pairs), config.batch_size):
                ids = pairs[start:start + config.batch_size]
                batch = make_patch_batch(store, ids, config.patch_size, aug, config.use_cnd)
                loss, l_sin, l_wt, _ = batch_loss(model, batch, config)
                if not torch.isfinite(loss):
                    dump = out / "nan_batch.json"
                    dump.write_text(json.dumps({"epoch": epoch, "step": step, "batch": ids}), encoding="utf-8")
                    raise NumericalAbort(f"non-finite loss at epoch {epoch} step {step}; batch ids in {dump}", ids)
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                step += 1
                value = loss.item()
                losses.append(value)
                fcurve.write(f"{epoch},{step},{value:.9g},{float(l_sin):.9g},{float(l_wt):.9g}\n")
                if max_steps is not None and step >= max_steps:
                    break
        log.info("epoch %d: %d steps, last loss %.5f, %.1fs", epoch, step, losses[-1] if losses else float("nan"),
                 time.time() - t0)
        done = epoch + 1
        if done % config.checkpoint_every == 0 or done == config.epochs or (max_steps is not None and step >= max_steps):
            ckpt = save_checkpoint(out / f"ckpt_{done}.npz", model, optimizer, config, done, step)
        if max_steps is not None and step >= max_steps:
            break
    if ckpt is None:
        ckpt = save_checkpoint(out / f"ckpt_{epoch + 1}.npz", model, optimizer, config, epoch + 1, step)
    return TrainResult(ckpt, losses, epoch + 1 - start_epoch, step)


# ---------------------------------------------------------------- predictors

class NetworkPredictor:
    def __init__(self, model: NormalNet, batch_size: int = 64):
        self.model = model.eval()
        self.config = model.config
        self.batch_size = batch_size
        self.name = "network"

    @classmethod
    def from_checkpoint(cls, path, batch_size=64):
        model, _, _, _ = load_checkpoint(path)
        return cls(model, batch_size)

    def predict(self, store: ShapeStore, name: str, indices: Sequence[int]) -> np.ndarray:
        out = np.zeros((len(indices), 3))
        dtype = next(self.model.parameters()).dtype
        for s in range(0, len(indices), self.batch_size):
            ids = [(name, int(q)) for q in indices[s:s + self.batch_size]]
            batch = make_patch_batch(store, ids, self.config.patch_size, dtype=dtype)
            with torch.no_grad():
                n = self.model(batch.coords).normal.double().numpy()
            for j, patch in enumerate(batch.patches):
                out[s + j] = unalign_normal(patch, n[j])
        return out


class PCABaseline:
    def __init__(self, k: int = 64):
        self.k = k
        self.name = f"pca-k{k}"

    def predict(self, store: ShapeStore, name: str, indices: Sequence[int]) -> np.ndarray:
        cloud = store.get(name)
        idx = store.index[name]
        k = min(self.k, len(cloud))
        patches = np.stack([cloud.points[idx.query(int(q), k)] for q in indices])
        return classical_fit.pca_normals_batch(patches)


class JetBaseline:
    def __init__(self, k: int = 64, order: int = 2):
        self.k = k
        self.order = order
        self.name = f"jet{order}-k{k}"

    def predict(self, store: ShapeStore, name: str, indices: Sequence[int]) -> np.ndarray:
        cloud = store.get(name)
        out = np.zeros((len(indices), 3))
        k = min(self.k, len(cloud))
        for j, q in enumerate(indices):
            raw, src = extract_patch(cloud, int(q), k, store.index[name])
            patch = align_patch(raw, src)
            coeffs = classical_fit.fit_jet(patch.coords, self.order)
            out[j] = unalign_normal(patch, classical_fit.jet_normal(coeffs))
        return out


# ---------------------------------------------------------------- evaluation

def evaluation_indices(cloud: PointCloud) -> tuple[np.ndarray, Optional[str]]:
    if cloud.eval_indices is not None:
        return cloud.eval_indices, None
    note = f"{cloud.name}: no evaluation index file; evaluating all {len(cloud)} points"
    log.info(note)
    return np.arange(len(cloud)), note


def evaluate(predictor, root, shape_names: Sequence[str], out_dir=None,
             variants: Optional[dict[str, Variant]] = None, with_cnd: bool = True,
             predictions_dir=None) -> MetricsReport:
    """Predict at each shape's evaluation indices and aggregate six-category metrics."""
    if not shape_names:
        raise DatasetMissingError("no test shapes given")
    store = ShapeStore(root, variants=variants)
    errors, cnd, var_of, notes = {}, {}, {}, []
    for name in shape_names:
        cloud = store.get(name)
        if cloud.normals is None:
            raise DatasetMissingError(f"shape {name} has no ground-truth normals")
        indices, note = evaluation_indices(cloud)
        if note:
            notes.append(note)
        pred = predictor.predict(store, name, indices)
        errors[name] = angular_error(pred, cloud.normals[indices])
        var_of[name] = cloud.variant
        if predictions_dir is not None:
            from .dataset_io import write_normals
            write_normals(cloud, pred, Path(predictions_dir) / f"{name}.normals", indices)
        if with_cnd:
            ref = store.clean_reference(name)
            if ref is not None:
                cnd[name] = cnd_error(pred, cloud.points[indices], ref)
    report = build_report(errors, var_of, cnd or None, getattr(predictor, "name", ""))
    report.notes = notes
    if out_dir is not None:
        report.write(out_dir)
    return report


def pca_sweep(root, shape_names, ks=(32, 64, 128), out_dir=None) -> dict[int, MetricsReport]:
    """PCA baseline over several neighbourhood sizes."""
    reports = {}
    for k in ks:
        sub = None if out_dir is None else Path(out_dir) / f"pca_k{k}"
        reports[k] = evaluate(PCABaseline(k), root, shape_names, sub, with_cnd=False)
    return reports


def mean_training_error(model: NormalNet, batch: PatchBatch) -> float:
    with torch.no_grad():
        n = model(batch.coords).normal
    return float(np.mean(angular_error(n.double().numpy(), batch.normals.double().numpy())))
