"""Segmentation fine-tuning on weak land-cover labels and IoU evaluation."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from fractions import Fraction
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import encoders
from .checkpoint import load_checkpoint, save_checkpoint
from .data_model import BandStats, Manifest, compute_band_stats, normalize_patch
from .encoders import SegmentationModel, build_deconv_header, build_encoder
from .nn_backend import cross_entropy, set_deterministic
from .pretrain import center_crop

log = logging.getLogger(__name__)

NO_DATA = 0


@dataclass(frozen=True)
class ClassTaxonomy:
    names: dict = field(default_factory=lambda: {
        1: "Urban and built-up",
        2: "Agriculture and mixed",
        3: "Natural",
        4: "Wetlands",
        5: "Permanent water",
    })

    def __post_init__(self) -> None:
        codes = sorted(self.names)
        if codes != list(range(1, len(codes) + 1)):
            raise ValueError("class codes must be contiguous from 1")

    @property
    def codes(self) -> list[int]:
        return sorted(self.names)

    def __len__(self) -> int:
        return len(self.names)


CLC_LEVEL0 = ClassTaxonomy()


def cross_entropy_masked(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean pixel-wise cross-entropy, skipping no-data (label 0) pixels."""
    return cross_entropy(logits, labels, ignore_index=NO_DATA)


def predict_codes(logits, n_classes: int = len(CLC_LEVEL0)):
    """Class codes 1..n from logits [.., nc, H, W].

    Only the scored channels 1..n compete, so the no-data channel and any
    extra channels beyond the taxonomy are never predicted.
    """
    if isinstance(logits, torch.Tensor):
        return logits[..., 1 : n_classes + 1, :, :].argmax(dim=-3) + 1
    logits = np.asarray(logits)
    return logits[..., 1 : n_classes + 1, :, :].argmax(axis=-3) + 1


def confusion_matrix(pred, truth, n_classes: int = len(CLC_LEVEL0)) -> np.ndarray:
    """Rows = truth, cols = prediction, over pixels whose truth is not no-data."""
    pred = np.asarray(pred).astype(np.int64).ravel()
    truth = np.asarray(truth).astype(np.int64).ravel()
    if pred.shape != truth.shape:
        raise ValueError("pred and truth must have the same size")
    keep = truth != NO_DATA
    p, t = pred[keep], truth[keep]
    if t.size and (t.min() < 1 or t.max() > n_classes):
        raise ValueError(f"truth codes outside 0..{n_classes}")
    if p.size and (p.min() < 1 or p.max() > n_classes):
        raise ValueError(f"predicted codes outside 1..{n_classes}")
    counts = np.bincount((t - 1) * n_classes + (p - 1), minlength=n_classes * n_classes)
    return counts.reshape(n_classes, n_classes).astype(np.int64)


def iou_per_class(confusion) -> np.ndarray:
    """TP / (TP + FP + FN) per class; NaN where the denominator is zero (class absent)."""
    cm = np.asarray(confusion, dtype=np.int64)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, tp / np.where(denom > 0, denom, 1), np.nan)


def class_weights(confusion) -> np.ndarray:
    """Share of truth pixels per class."""
    rows = np.asarray(confusion).sum(axis=1).astype(np.float64)
    total = rows.sum()
    return rows / total if total > 0 else np.zeros_like(rows)


def weighted_mean_iou(iou, weights) -> float:
    """Weighted mean over present (non-NaN) classes with weights renormalised over them."""
    iou = np.asarray(iou, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    present = ~np.isnan(iou)
    wp = w[present]
    if not present.any() or wp.sum() <= 0:
        return float("nan")
    return float(np.dot(wp / wp.sum(), iou[present]))


def weighted_miou_from_confusion(confusion) -> float:
    """Truth-weighted mean IoU evaluated in exact rational arithmetic, rounded once.

    Equal to ``weighted_mean_iou(iou_per_class(cm), class_weights(cm))`` up to
    summation order, but independent of it.
    """
    cm = np.asarray(confusion, dtype=np.int64)
    tp = np.diag(cm)
    rows, cols = cm.sum(axis=1), cm.sum(axis=0)
    num, den = Fraction(0), 0
    for c in range(len(cm)):
        union = int(rows[c] + cols[c] - tp[c])
        if union == 0:
            continue
        num += Fraction(int(rows[c]) * int(tp[c]), union)
        den += int(rows[c])
    return float(num / den) if den else float("nan")


@dataclass
class EvalReport:
    confusion: np.ndarray
    iou: np.ndarray
    weighted_miou: float
    class_weights: np.ndarray
    cell: dict = field(default_factory=dict)
    taxonomy: ClassTaxonomy = CLC_LEVEL0

    @classmethod
    def from_confusion(cls, confusion, cell: dict | None = None, taxonomy: ClassTaxonomy = CLC_LEVEL0):
        cm = np.asarray(confusion, dtype=np.int64)
        iou = iou_per_class(cm)
        w = class_weights(cm)
        return cls(cm, iou, weighted_miou_from_confusion(cm), w, dict(cell or {}), taxonomy)

    @property
    def n_test_pixels(self) -> int:
        return int(self.confusion.sum())

    def to_dict(self) -> dict:
        names = [self.taxonomy.names[c] for c in self.taxonomy.codes]
        iou = {n: (None if math.isnan(v) else float(v)) for n, v in zip(names, self.iou)}
        return {
            "cell": self.cell,
            "iou": iou,
            "iou_absent_as_zero": {n: (0.0 if v is None else v) for n, v in iou.items()},
            "weighted_miou": None if math.isnan(self.weighted_miou) else float(self.weighted_miou),
            "class_weights": {n: float(w) for n, w in zip(names, self.class_weights)},
            "confusion": self.confusion.tolist(),
            "n_test_pixels": self.n_test_pixels,
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "EvalReport":
        d = json.loads(Path(path).read_text())
        return cls.from_confusion(d["confusion"], d.get("cell"))


@dataclass
class FinetuneConfig:
    encoder: str = "resnet18"
    epochs: int = 20
    batch_size: int = 8
    lr: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    nc: int = encoders.DEFAULT_HEADER_CHANNELS
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    split_mode: str = "holdout"  # or "train_all": train, val and test are all samples
    freeze_encoder: bool = False
    input_size: int = 128
    deterministic: bool = True

    def __post_init__(self) -> None:
        self.betas = tuple(self.betas)
        self.split = tuple(self.split)
        self.encoder = encoders.canonical_variant(self.encoder)
        if self.epochs < 1 or self.lr <= 0 or self.batch_size < 1:
            raise ValueError("epochs, batch_size must be >= 1 and lr > 0")
        if self.split_mode not in ("holdout", "train_all"):
            raise ValueError("split_mode must be 'holdout' or 'train_all'")
        if len(self.split) != 3 or any(f < 0 for f in self.split) or abs(sum(self.split) - 1) > 1e-9:
            raise ValueError("split must be three non-negative fractions summing to 1")
        if self.nc < len(CLC_LEVEL0) + 1:
            raise ValueError(f"nc must be >= {len(CLC_LEVEL0) + 1} (no-data + scored classes)")
        if self.input_size % encoders.DOWNSAMPLE:
            raise ValueError(f"input_size must be divisible by {encoders.DOWNSAMPLE}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"], d["split"] = list(self.betas), list(self.split)
        return d


def split_ids(sample_ids, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Seeded shuffle of the sorted ids, cut into train/val/test."""
    ids = sorted(sample_ids)
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n_train = int(round(fractions[0] * len(ids)))
    n_val = int(round(fractions[1] * len(ids)))
    parts = shuffled[:n_train], shuffled[n_train : n_train + n_val], shuffled[n_train + n_val :]
    for name, part in zip(("train", "val", "test"), parts):
        if not part:
            raise ValueError(f"empty {name} split for {len(ids)} samples and fractions {fractions}")
    return parts


def load_labeled(manifest: Manifest, stats: BandStats, size: int):
    xs, ys = [], []
    for s in manifest:
        if s.lc is None:
            raise ValueError(f"sample {s.sample_id} has no label raster")
        xs.append(np.ascontiguousarray(center_crop(normalize_patch(s, stats), size)))
        ys.append(np.ascontiguousarray(center_crop(s.lc, size)).astype(np.int64))
    return np.stack(xs), np.stack(ys)


@torch.no_grad()
def evaluate(model: torch.nn.Module, x: np.ndarray, y: np.ndarray, batch_size: int = 8,
             taxonomy: ClassTaxonomy = CLC_LEVEL0, cell: dict | None = None) -> EvalReport:
    model.eval()
    n = len(taxonomy)
    cm = np.zeros((n, n), dtype=np.int64)
    for i in range(0, len(x), batch_size):
        logits = model(torch.from_numpy(x[i : i + batch_size]))
        cm += confusion_matrix(predict_codes(logits, n).numpy(), y[i : i + batch_size], n)
    return EvalReport.from_confusion(cm, cell, taxonomy)


@dataclass
class FinetuneResult:
    model: SegmentationModel
    report: EvalReport
    checkpoint: Path
    report_path: Path
    metrics_csv: Path
    best_epoch: int
    history: list = field(default_factory=list)


def _load_encoder(checkpoint, config: FinetuneConfig):
    if checkpoint is None:
        return build_encoder(config.encoder, seed=config.seed), {"objective": "none"}
    comps, extra = load_checkpoint(checkpoint)
    enc = comps["encoder"]
    if enc.variant != config.encoder:
        log.info("checkpoint encoder %s overrides configured %s", enc.variant, config.encoder)
    return enc, extra


def finetune_run(checkpoint, manifest: Manifest, config: FinetuneConfig, out_dir=".",
                 stats: BandStats | None = None) -> FinetuneResult:
    """Train encoder + header on labelled data; report test IoU at the best-validation epoch."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if config.deterministic:
        set_deterministic()
    encoder, extra = _load_encoder(checkpoint, config)
    header = build_deconv_header(config.nc, seed=config.seed + 1)
    model = SegmentationModel(encoder, header)
    cell = {"pretrain": extra.get("objective", "none"), "encoder": encoder.variant}

    if config.split_mode == "train_all":
        train_ids = val_ids = test_ids = sorted(manifest.sample_ids)
    else:
        train_ids, val_ids, test_ids = split_ids(manifest.sample_ids, config.split, config.seed)
    stats = stats or compute_band_stats(manifest.subset(train_ids))
    size = min(config.input_size, manifest.patch_size)
    xtr, ytr = load_labeled(manifest.subset(train_ids), stats, size)
    xva, yva = load_labeled(manifest.subset(val_ids), stats, size)
    xte, yte = load_labeled(manifest.subset(test_ids), stats, size)

    if config.freeze_encoder:
        for p in encoder.parameters():
            p.requires_grad_(False)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=config.lr, betas=config.betas)

    best = (-math.inf, -1, None)
    history = []
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        model.train()
        if config.freeze_encoder:
            encoder.eval()
        order = np.random.default_rng([config.seed, epoch, 0xF1E]).permutation(len(xtr))
        n_batches = max(1, -(-len(order) // config.batch_size))
        tot = 0.0
        for idx in np.array_split(order, n_batches):
            if (ytr[idx] == 0).all():
                continue
            logits = model(torch.from_numpy(xtr[idx]))
            loss = cross_entropy_masked(logits, torch.from_numpy(ytr[idx]))
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite fine-tuning loss at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            tot += loss.item() * len(idx)
        val = evaluate(model, xva, yva, config.batch_size).weighted_miou
        score = -math.inf if math.isnan(val) else val
        if score > best[0]:
            best = (score, epoch, copy.deepcopy(model.state_dict()))
        history.append({"epoch": epoch, "train_loss": tot / len(xtr), "val_weighted_miou": val,
                        "seconds": None if config.deterministic else time.perf_counter() - t0})
        log.info("finetune %s epoch %d loss %.4f val mIoU %.4f", cell, epoch, tot / len(xtr), val)

    if best[2] is not None:
        model.load_state_dict(best[2])
    report = evaluate(model, xte, yte, config.batch_size, cell=cell)

    ckpt = save_checkpoint(out / "finetune.ckpt", {"encoder": model.encoder, "header": model.header},
                           {"cell": cell, "best_epoch": best[1], "config": config.to_dict(),
                            "stats": stats.to_dict(), "test_ids": test_ids})
    report_path = report.save(out / "eval_report.json")
    csv_path = out / "finetune_metrics.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_weighted_miou", "seconds"])
        for r in history:
            w.writerow([r["epoch"], repr(float(r["train_loss"])), repr(float(r["val_weighted_miou"])),
                        "" if r["seconds"] is None else f"{r['seconds']:.3f}"])
    return FinetuneResult(model, report, ckpt, report_path, csv_path, best[1], history)


def evaluate_checkpoint(checkpoint, manifest: Manifest, sample_ids=None, batch_size: int = 8) -> EvalReport:
    """Evaluate a fine-tuned checkpoint on ``sample_ids`` (default: its recorded test split)."""
    comps, extra = load_checkpoint(checkpoint)
    model = SegmentationModel(comps["encoder"], comps["header"])
    stats = BandStats(**{k: v for k, v in extra["stats"].items() if k in ("mean", "std", "n_pixels", "provenance")})
    ids = sample_ids if sample_ids is not None else extra["test_ids"]
    size = min(extra["config"]["input_size"], manifest.patch_size)
    x, y = load_labeled(manifest.subset(ids), stats, size)
    return evaluate(model, x, y, batch_size, cell=extra.get("cell"))
