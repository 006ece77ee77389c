"""Reconstruction and adversarial objectives for the translation model.

Discriminator outputs are taken at face value: raw scores for the
least-squares form, probabilities in (0, 1) for the log form.  Every
adversarial helper returns ``(generator_side, discriminator_side)``; the
discriminator side only ever sees detached inputs and the generator side is
evaluated with the discriminator frozen, so each term has gradients for one
player only.
"""
from contextlib import contextmanager
from dataclasses import asdict, dataclass

import torch

FORMS = ("least_squares", "log")


def _check_form(form):
    if form not in FORMS:
        raise ValueError(f"unknown adversarial loss form {form!r}; expected one of {FORMS}")


@contextmanager
def frozen(module):
    flags = [p.requires_grad for p in module.parameters()]
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield module
    finally:
        for p, f in zip(module.parameters(), flags):
            p.requires_grad_(f)


def reconstruction_error(x, x_rec, norm="l1"):
    if x.numel() == 0:
        raise ValueError("empty batch")
    if x.shape != x_rec.shape:
        raise ValueError(f"shape mismatch: image {tuple(x.shape)} vs reconstruction {tuple(x_rec.shape)}")
    diff = x - x_rec
    if norm == "l1":
        return diff.abs().mean()
    if norm == "l2":
        return diff.pow(2).mean()
    raise ValueError(f"unknown reconstruction norm {norm!r}")


def reconstruction_loss(batch_a, batch_b, model, norm="l1"):
    terms = []
    for x, dom in ((batch_a, "A"), (batch_b, "B")):
        if x is None:
            continue
        if x.shape[0] == 0:
            raise ValueError(f"empty batch for domain {dom}")
        rec = model.decode(model.encode_content(x), model.encode_style(x, dom))
        terms.append(reconstruction_error(x, rec, norm))
    if not terms:
        raise ValueError("both batches empty")
    return sum(terms)


def disc_objective(d_real, d_fake, form="least_squares"):
    """Loss minimised by a discriminator scoring ``d_real`` as real."""
    _check_form(form)
    if form == "least_squares":
        return (d_real - 1).pow(2).mean() + d_fake.pow(2).mean()
    return -(torch.log(d_real).mean() + torch.log(1 - d_fake).mean())


def gen_objective(d_fake, form="least_squares"):
    """Loss minimised by a generator whose samples produced ``d_fake``."""
    _check_form(form)
    if form == "least_squares":
        return (d_fake - 1).pow(2).mean()
    # minimax form as written: E[log(1 - D(G(.)))]
    return torch.log(1 - d_fake).mean()


def adversarial_loss_image(real_batch, translated_batch, disc, form="least_squares"):
    _check_form(form)
    disc_term = disc_objective(disc(real_batch.detach()), disc(translated_batch.detach()), form)
    with frozen(disc):
        gen_term = gen_objective(disc(translated_batch), form)
    return gen_term, disc_term


def adversarial_loss_content(codes_a, codes_b, disc_c, form="least_squares"):
    """D_c scores domain-B codes as real; the encoder term flips the labels."""
    _check_form(form)
    disc_term = disc_objective(disc_c(codes_b.detach()), disc_c(codes_a.detach()), form)
    with frozen(disc_c):
        enc_term = disc_objective(disc_c(codes_a), disc_c(codes_b), form)
    return enc_term, disc_term


@dataclass
class LossBreakdown:
    rec: float
    adv_a: float
    adv_b: float
    adv_c: float
    disc_a: float
    disc_b: float
    disc_c: float
    total_gen: float
    total_disc: float

    def as_dict(self):
        return asdict(self)


def total_loss(model, batch_a, batch_b, cfg, return_tensors=False):
    """Full objective on one pair of batches.

    ``total_gen = w_adv * (adv_a + adv_b + adv_c) + w_rec * rec`` and
    ``total_disc = w_adv * (disc_a + disc_b + disc_c)``.  Totals are
    accumulated in float64.
    """
    c_a, c_b = model.encode_content(batch_a), model.encode_content(batch_b)
    s_a, s_b = model.encode_style(batch_a, "A"), model.encode_style(batch_b, "B")
    rec = (reconstruction_error(batch_a, model.decode(c_a, s_a), cfg.rec_norm)
           + reconstruction_error(batch_b, model.decode(c_b, s_b), cfg.rec_norm))
    x_ba = model.decode(c_b, s_a)
    x_ab = model.decode(c_a, s_b)
    adv_a, disc_a = adversarial_loss_image(batch_a, x_ba, model.disc_a, cfg.form)
    adv_b, disc_b = adversarial_loss_image(batch_b, x_ab, model.disc_b, cfg.form)
    adv_c, disc_c = adversarial_loss_content(c_a, c_b, model.disc_c, cfg.form)
    d = torch.float64
    total_gen = cfg.w_adv * (adv_a.to(d) + adv_b.to(d) + adv_c.to(d)) + cfg.w_rec * rec.to(d)
    total_disc = cfg.w_adv * (disc_a.to(d) + disc_b.to(d) + disc_c.to(d))
    tensors = dict(rec=rec, adv_a=adv_a, adv_b=adv_b, adv_c=adv_c, disc_a=disc_a, disc_b=disc_b,
                   disc_c=disc_c, total_gen=total_gen, total_disc=total_disc)
    breakdown = LossBreakdown(**{k: float(v.detach()) for k, v in tensors.items()})
    if return_tensors:
        return breakdown, tensors
    return breakdown
