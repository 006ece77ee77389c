"""Pseudo-labelling of unlabelled target volumes and combined fine-tuning.

Each fine-tuning step draws one batch of synthetic (translated, labelled)
patches and one batch of pseudo-labelled target patches from independent
streams and minimises ``w_syn * L_seg(synthetic) + w_pseudo * L_seg(pseudo)``.
"""
from __future__ import annotations

import copy
import hashlib
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .evaluation import evaluate_model
from .phantom import LabeledVolume
from .segmentation import PatchSampler, SegConfig, TrainItem, fit, predict
from .segmentation.trainer import as_items, write_history

log = logging.getLogger(__name__)


@dataclass
class STConfig:
    rounds: int = 2
    confidence_threshold: float = 0.0
    finetune_epochs: int = 10
    synthetic_weight: float = 1.0
    pseudo_weight: float = 1.0

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("self-training needs rounds >= 1")
        if self.finetune_epochs < 1:
            raise ValueError("finetune_epochs must be >= 1")
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise ValueError("confidence_threshold must lie in [0, 1]")


def model_digest(model) -> str:
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


@dataclass
class PseudoPair:
    image: LabeledVolume
    labels: np.ndarray
    confidence: np.ndarray
    checkpoint_id: str
    threshold: float = 0.0

    @property
    def valid(self):
        if self.threshold <= 0:
            return np.ones(self.labels.shape, dtype=bool)
        return self.confidence > self.threshold

    def train_item(self):
        return TrainItem(np.asarray(self.image.intensities, np.float32), self.labels, self.valid)

    def as_volume(self):
        return replace(self.image, labels=self.labels.copy(), domain_tag="pseudo_B",
                       meta={**self.image.meta, "checkpoint_id": self.checkpoint_id,
                             "threshold": self.threshold}, tissue=None)

    def save(self, path):
        self.as_volume().save(path, extra={"confidence": self.confidence.astype(np.float32)})


def generate_pseudo_labels(targets, model, cfg: STConfig, checkpoint_id=None):
    checkpoint_id = checkpoint_id or model_digest(model)
    pairs = []
    for v in targets:
        pm = predict(v, model)
        pairs.append(PseudoPair(v, pm.labels, pm.confidence, checkpoint_id, cfg.confidence_threshold))
    return pairs


def stream_seed(seed, round_index, stream):
    return [int(seed), int(round_index), {"synthetic": 1, "pseudo": 2}[stream]]


def finetune_combined(synthetic_pairs, pseudo_pairs, model, cfg: STConfig, seg_cfg: SegConfig, round_index=0):
    """Warm-start fine-tuning on synthetic plus pseudo-labelled data.

    Returns ``(model, history)``; the incoming model is left untouched and a
    fresh poly schedule runs over ``cfg.finetune_epochs``.
    """
    if not synthetic_pairs:
        raise ValueError("finetune_combined needs synthetic pairs; they anchor the objective")
    if not pseudo_pairs:
        raise ValueError("finetune_combined needs pseudo-labelled pairs")
    ft_cfg = replace(seg_cfg, epochs=cfg.finetune_epochs)
    model = copy.deepcopy(model)
    streams = [
        ("synthetic", PatchSampler(as_items(synthetic_pairs), ft_cfg,
                                   stream_seed(seg_cfg.seed, round_index, "synthetic")), cfg.synthetic_weight),
        ("pseudo", PatchSampler(as_items(pseudo_pairs), ft_cfg,
                                stream_seed(seg_cfg.seed, round_index, "pseudo")), cfg.pseudo_weight),
    ]
    history = fit(model, streams, ft_cfg, log_prefix=f"finetune r{round_index}")
    return model, history


@dataclass
class STResult:
    model: object
    rounds: list = field(default_factory=list)
    evaluations: list = field(default_factory=list)


def st_loop(synthetic_pairs, targets, seg_model, cfg: STConfig, seg_cfg: SegConfig, eval_cases=None,
            out_dir=None, classes=None):
    """Alternate pseudo-labelling and fine-tuning for ``cfg.rounds`` rounds.

    ``eval_cases`` is a list of labelled held-out target volumes; their mean
    foreground DSC is recorded after every round.
    """
    model = seg_model
    result = STResult(model)
    classes = classes or list(range(1, seg_cfg.num_classes))
    for r in range(1, cfg.rounds + 1):
        ckpt_id = model_digest(model)
        pseudo = generate_pseudo_labels(targets, model, cfg, ckpt_id)
        model, history = finetune_combined(synthetic_pairs, pseudo, model, cfg, seg_cfg, round_index=r)
        info = {"round": r, "pseudo_from": ckpt_id, "checkpoint_id": model_digest(model), "history": history}
        if out_dir is not None:
            rdir = Path(out_dir) / f"round{r}"
            for p in pseudo:
                p.save(rdir / "pseudo" / f"{p.image.id}.vol")
            model.save(rdir / "segmentation.ckpt", r, {"pseudo_from": ckpt_id})
            write_history(rdir / "finetune_history.csv", history)
            info["dir"] = str(rdir)
        if eval_cases:
            rep = evaluate_model(model, eval_cases, classes)
            info["eval_dsc"] = rep.overall_dsc
            result.evaluations.append(rep)
        log.info("self-training round %d done (pseudo from %s)", r, ckpt_id)
        result.rounds.append(info)
    result.model = model
    return result
