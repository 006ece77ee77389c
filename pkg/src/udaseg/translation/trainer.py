import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from ..phantom import LabeledVolume, preprocess
from .losses import LossBreakdown, disc_objective, frozen, gen_objective, reconstruction_error
from .model import TranslationConfig, TranslationModel

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("iteration", "d_steps", "g_steps", *LossBreakdown.__dataclass_fields__)


class TrainingAborted(RuntimeError):
    def __init__(self, iteration, breakdown):
        super().__init__(f"non-finite loss at iteration {iteration}: {breakdown}")
        self.iteration = iteration
        self.breakdown = breakdown


def volume_slices(volumes, slice_size, already_preprocessed=False):
    """Stack the axial slices of ``volumes`` into an (N, 1, H, W) float tensor."""
    out = []
    for v in volumes:
        if not already_preprocessed:
            v = preprocess(v, slice_size)
        out.append(torch.from_numpy(np.asarray(v.intensities, dtype=np.float32)))
    return torch.cat(out)[:, None]


def manifest_slices(manifest, split, slice_size):
    refs = getattr(manifest, split)
    return volume_slices([manifest.load(r) for r in refs], slice_size)


@dataclass
class TranslationResult:
    model: TranslationModel
    history: list = field(default_factory=list)
    checkpoint: Path | None = None


def write_history(path, history, fieldnames=HISTORY_FIELDS):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames)
        w.writeheader()
        for row in history:
            w.writerow(row)


def train_translation(manifest, cfg: TranslationConfig, out_dir=None, slices=None, log_every=250):
    """Alternating D-step / G-step training on unpaired A and B slices.

    ``slices`` may supply ``(slices_a, slices_b)`` directly instead of reading
    the manifest's training splits.
    """
    if slices is None:
        if not manifest.source_train or not manifest.target_train:
            raise ValueError("manifest needs both source_train and target_train volumes")
        xa = manifest_slices(manifest, "source_train", cfg.slice_size)
        xb = manifest_slices(manifest, "target_train", cfg.slice_size)
    else:
        xa, xb = slices
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    model = TranslationModel(cfg)
    model.train()
    opt_g = torch.optim.Adam(model.generator_parameters(), lr=cfg.lr, betas=cfg.betas)
    opt_d = torch.optim.Adam(model.discriminator_parameters(), lr=cfg.lr, betas=cfg.betas)
    history = []
    d_steps = g_steps = 0
    f64 = torch.float64
    for it in range(cfg.iterations):
        ba = xa[torch.randint(len(xa), (cfg.batch_size,), generator=gen)]
        bb = xb[torch.randint(len(xb), (cfg.batch_size,), generator=gen)]
        c_a, c_b = model.encode_content(ba), model.encode_content(bb)
        s_a, s_b = model.encode_style(ba, "A"), model.encode_style(bb, "B")
        rec = (reconstruction_error(ba, model.decode(c_a, s_a), cfg.rec_norm)
               + reconstruction_error(bb, model.decode(c_b, s_b), cfg.rec_norm))
        x_ba = model.decode(c_b, s_a)
        x_ab = model.decode(c_a, s_b)

        disc_a = disc_objective(model.disc_a(ba), model.disc_a(x_ba.detach()), cfg.form)
        disc_b = disc_objective(model.disc_b(bb), model.disc_b(x_ab.detach()), cfg.form)
        disc_c = disc_objective(model.disc_c(c_b.detach()), model.disc_c(c_a.detach()), cfg.form)
        total_disc = cfg.w_adv * (disc_a.to(f64) + disc_b.to(f64) + disc_c.to(f64))
        if not torch.isfinite(total_disc):
            terms = {"disc_a": disc_a, "disc_b": disc_b, "disc_c": disc_c}
            raise TrainingAborted(it, {k: float(v.detach()) for k, v in terms.items()})
        opt_d.zero_grad(set_to_none=True)
        if cfg.w_adv > 0:
            total_disc.backward()
            opt_d.step()
        d_steps += 1

        with frozen(model.disc_a), frozen(model.disc_b), frozen(model.disc_c):
            adv_a = gen_objective(model.disc_a(x_ba), cfg.form)
            adv_b = gen_objective(model.disc_b(x_ab), cfg.form)
            adv_c = disc_objective(model.disc_c(c_a), model.disc_c(c_b), cfg.form)
        total_gen = cfg.w_adv * (adv_a.to(f64) + adv_b.to(f64) + adv_c.to(f64)) + cfg.w_rec * rec.to(f64)
        bd = LossBreakdown(*(float(t.detach()) for t in
                             (rec, adv_a, adv_b, adv_c, disc_a, disc_b, disc_c, total_gen, total_disc)))
        if not math.isfinite(bd.total_gen):
            raise TrainingAborted(it, bd)
        opt_g.zero_grad(set_to_none=True)
        total_gen.backward()
        opt_g.step()
        g_steps += 1
        history.append({"iteration": it, "d_steps": d_steps, "g_steps": g_steps, **bd.as_dict()})
        if log_every and (it % log_every == 0 or it == cfg.iterations - 1):
            log.info("translation it %d rec %.4f adv %.3f/%.3f/%.3f disc %.3f", it, bd.rec, bd.adv_a,
                     bd.adv_b, bd.adv_c, bd.total_disc)
        if out_dir and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            model.save(Path(out_dir) / f"translation_it{it + 1}.ckpt", it + 1)

    model.eval()
    ckpt = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt = out_dir / "translation.ckpt"
        model.save(ckpt, cfg.iterations)
        write_history(out_dir / "translation_history.csv", history)
    return TranslationResult(model, history, ckpt)


@torch.no_grad()
def translate_volume(x_a: LabeledVolume, style_source: LabeledVolume, model: TranslationModel, seed: int):
    """Map every slice of a source volume to domain B with one drawn style slice."""
    if style_source.intensities is None or style_source.shape[0] == 0:
        raise ValueError("style source volume is empty")
    if style_source.domain_tag != "B":
        raise ValueError(f"style source must be a domain-B volume, got {style_source.domain_tag!r}")
    k = int(np.random.default_rng(seed).integers(style_source.shape[0]))
    style_slice = torch.from_numpy(np.asarray(style_source.intensities[k], dtype=np.float32))
    s_b = model.encode_style(style_slice, "B")
    src = torch.from_numpy(np.asarray(x_a.intensities, dtype=np.float32))[:, None]
    out = model.decode(model.encode_content(src), s_b[None].expand(len(src), *s_b.shape))
    return replace(
        x_a,
        intensities=out[:, 0].numpy().astype(np.float32),
        labels=x_a.labels.copy(),
        domain_tag="synthetic_AB",
        meta={**x_a.meta, "style_volume": style_source.id, "style_slice": k, "translate_seed": int(seed)},
        tissue=None,
    )


@torch.no_grad()
def fidelity(model: TranslationModel, slices_a, slices_b, seed=0):
    """Self-reconstruction and a->b->a cycle errors, relative to the intensity range of ``slices_a``."""
    gen = torch.Generator().manual_seed(seed)
    idx = torch.randint(len(slices_b), (len(slices_a),), generator=gen)
    c_a = model.encode_content(slices_a)
    s_a = model.encode_style(slices_a, "A")
    s_b = model.encode_style(slices_b[idx], "B")
    x_aa = model.decode(c_a, s_a)
    x_ab = model.decode(c_a, s_b)
    x_aba = model.decode(model.encode_content(x_ab), s_a)
    rng = float(slices_a.max() - slices_a.min())
    c_b, s_bb = model.encode_content(slices_b), model.encode_style(slices_b, "B")
    rng_b = float(slices_b.max() - slices_b.min())
    return {
        "intensity_range": rng,
        "self_rec_a": float((slices_a - x_aa).abs().mean()) / rng,
        "self_rec_b": float((slices_b - model.decode(c_b, s_bb)).abs().mean()) / rng_b,
        "cycle_aba": float((slices_a - x_aba).abs().mean()) / rng,
    }
