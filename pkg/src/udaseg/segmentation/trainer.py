import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..phantom import augment_arrays
from .losses import seg_loss
from .model import SegConfig, SegmentationModel
from .schedule import poly_lr

log = logging.getLogger(__name__)


class SegTrainingAborted(RuntimeError):
    def __init__(self, epoch, detail):
        super().__init__(f"non-finite segmentation loss at epoch {epoch}: {detail}")
        self.epoch = epoch


@dataclass
class TrainItem:
    image: np.ndarray
    labels: np.ndarray
    valid: np.ndarray | None = None


def as_items(pairs):
    """Accept LabeledVolumes, PseudoPairs, (image, labels) tuples or TrainItems."""
    items = []
    for p in pairs:
        if isinstance(p, TrainItem):
            items.append(p)
        elif isinstance(p, tuple):
            items.append(TrainItem(np.asarray(p[0], np.float32), np.asarray(p[1])))
        elif hasattr(p, "train_item"):
            items.append(p.train_item())
        else:
            items.append(TrainItem(np.asarray(p.intensities, np.float32), np.asarray(p.labels)))
    return items


def _fit_to(arr, size, offsets, fill):
    """Crop/pad ``arr`` (spatial dims only) to ``size`` starting at ``offsets``."""
    out = np.full(size, fill, dtype=arr.dtype)
    src, dst = [], []
    for n, s, o in zip(arr.shape, size, offsets):
        if n >= s:
            src.append(slice(o, o + s))
            dst.append(slice(0, s))
        else:
            pad = (s - n) // 2
            src.append(slice(0, n))
            dst.append(slice(pad, pad + n))
    out[tuple(dst)] = arr[tuple(src)]
    return out


class PatchSampler:
    """Random patches with augmentation from a list of training items."""

    def __init__(self, items, cfg: SegConfig, seed):
        if not items:
            raise ValueError("no training items")
        self.items, self.cfg = items, cfg
        self.rng = np.random.default_rng(seed)

    def _one(self):
        cfg, rng = self.cfg, self.rng
        it = self.items[rng.integers(len(self.items))]
        k = cfg.num_classes
        lab = it.labels.astype(np.int64)
        if it.valid is not None:
            lab = np.where(it.valid, lab, k)  # ignore marker travels with the geometry
        img = it.image
        if cfg.dims == 2:
            z = rng.integers(img.shape[0])
            img, lab = img[z], lab[z]
        size = cfg.patch
        offs = [rng.integers(0, max(n - s, 0) + 1) for n, s in zip(img.shape, size)]
        img = _fit_to(img, size, offs, 0.0)
        lab = _fit_to(lab, size, offs, 0)
        img, lab = augment_arrays(img[None], lab[None], cfg.augment, rng)
        lab = lab[0]
        valid = lab != k
        return img, np.where(valid, lab, 0), valid

    def sample(self, n):
        imgs, labs, valids = zip(*(self._one() for _ in range(n)))
        return (torch.from_numpy(np.stack(imgs)), torch.from_numpy(np.stack(labs)),
                torch.from_numpy(np.stack(valids)))


@dataclass
class SegResult:
    model: SegmentationModel
    history: list = field(default_factory=list)
    checkpoint: Path | None = None


def fit(model, streams, cfg: SegConfig, log_prefix="seg"):
    """Run ``cfg.epochs`` of SGD over one or more weighted patch streams.

    ``streams`` is a list of ``(name, sampler, weight)``.  Each step draws one
    batch per stream and minimises the weighted sum of their seg_loss values,
    accumulated in float64.  Returns per-epoch history rows.
    """
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, nesterov=cfg.nesterov,
                          weight_decay=cfg.weight_decay)
    history = []
    model.train()
    for epoch in range(cfg.epochs):
        lr = poly_lr(epoch, cfg.epochs, cfg.lr, cfg.poly_exponent)
        for g in opt.param_groups:
            g["lr"] = lr
        sums = {name: 0.0 for name, _, _ in streams}
        total_sum = 0.0
        for _ in range(cfg.iters_per_epoch):
            total = torch.zeros((), dtype=torch.float64)
            parts = {}
            for name, sampler, weight in streams:
                x, y, valid = sampler.sample(cfg.batch_size)
                term = seg_loss(model(x), y, valid, cfg.smooth, cfg.include_background,
                                cfg.dice_weight, cfg.ce_weight)
                parts[name] = float(term.detach())
                total = total + weight * term.to(torch.float64)
            if not torch.isfinite(total):
                raise SegTrainingAborted(epoch, parts)
            opt.zero_grad(set_to_none=True)
            total.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), 12.0)
            opt.step()
            total_sum += float(total.detach())
            for name in parts:
                sums[name] += parts[name]
        n = cfg.iters_per_epoch
        row = {"epoch": epoch, "lr": lr, "loss": total_sum / n, **{k: v / n for k, v in sums.items()}}
        if not math.isfinite(row["loss"]):
            raise SegTrainingAborted(epoch, row)
        history.append(row)
        log.info("%s epoch %d lr %.5f loss %.4f", log_prefix, epoch, lr, row["loss"])
    model.eval()
    return history


def write_history(path, history):
    if not history:
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(history[0]))
        w.writeheader()
        w.writerows(history)


def train_segmentation(pairs, cfg: SegConfig, out_dir=None, model=None):
    """Stage-3 training of a fresh (or supplied) network on labelled pairs."""
    items = as_items(pairs)
    if not items:
        raise ValueError("train_segmentation needs at least one pair")
    for it in items:
        if it.labels.min() < 0 or it.labels.max() >= cfg.num_classes:
            raise ValueError(f"labels outside [0, {cfg.num_classes})")
    torch.manual_seed(cfg.seed)
    if model is None:
        model = SegmentationModel(cfg)
    sampler = PatchSampler(items, cfg, [cfg.seed, 0])
    history = fit(model, [("synthetic", sampler, 1.0)], cfg)
    ckpt = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt = out_dir / "segmentation.ckpt"
        model.save(ckpt, cfg.epochs)
        write_history(out_dir / "segmentation_history.csv", history)
    return SegResult(model, history, ckpt)
