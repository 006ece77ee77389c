from dataclasses import asdict, dataclass, fields

import torch.nn as nn

from .. import storage
from .losses import FORMS
from .networks import ContentEncoder, Decoder, PatchDiscriminator, StyleEncoder


@dataclass
class TranslationConfig:
    slice_size: tuple = (64, 64)
    content_shape: tuple = (32, 16, 16)
    style_shape: tuple = (32, 16, 16)
    style_pool: int = 1
    enc_dim: int = 16
    n_res: int = 2
    fusion: str = "concat"
    disc_dim: int = 16
    disc_layers: int = 2
    form: str = "least_squares"
    rec_norm: str = "l1"
    w_rec: float = 1.0
    w_adv: float = 1.0
    lr: float = 2e-4
    betas: tuple = (0.5, 0.999)
    batch_size: int = 8
    iterations: int = 3000
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        for name in ("slice_size", "content_shape", "style_shape", "betas"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.w_rec < 0 or self.w_adv < 0:
            raise ValueError("loss weights must be >= 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.form not in FORMS:
            raise ValueError(f"form must be one of {FORMS}, got {self.form!r}")
        if self.rec_norm not in ("l1", "l2"):
            raise ValueError(f"rec_norm must be 'l1' or 'l2', got {self.rec_norm!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown translation config keys: {sorted(unknown)}")
        return cls(**d)


def _check_shape(what, actual, expected):
    if tuple(actual) != tuple(expected):
        raise ValueError(f"{what}: expected shape {tuple(expected)}, got {tuple(actual)}")


class TranslationModel(nn.Module):
    """Shared content encoder, two style encoders, shared decoder, three discriminators."""

    def __init__(self, cfg: TranslationConfig, modules=None):
        super().__init__()
        self.cfg = cfg
        if modules is None:
            sig = cfg.form == "log"
            modules = dict(
                content_enc=ContentEncoder(cfg.slice_size, cfg.content_shape, cfg.enc_dim, cfg.n_res),
                style_enc_a=StyleEncoder(cfg.slice_size, cfg.style_shape, cfg.enc_dim, cfg.style_pool),
                style_enc_b=StyleEncoder(cfg.slice_size, cfg.style_shape, cfg.enc_dim, cfg.style_pool),
                decoder=Decoder(cfg.slice_size, cfg.content_shape, cfg.style_shape, cfg.enc_dim, cfg.n_res,
                                cfg.fusion),
                disc_a=PatchDiscriminator(1, cfg.disc_dim, cfg.disc_layers, sig),
                disc_b=PatchDiscriminator(1, cfg.disc_dim, cfg.disc_layers, sig),
                disc_c=PatchDiscriminator(cfg.content_shape[0], cfg.disc_dim, 1, sig),
            )
        for name, m in modules.items():
            self.add_module(name, m)

    def generator_parameters(self):
        for m in (self.content_enc, self.style_enc_a, self.style_enc_b, self.decoder):
            yield from m.parameters()

    def discriminator_parameters(self):
        for m in (self.disc_a, self.disc_b, self.disc_c):
            yield from m.parameters()

    @staticmethod
    def _batch(x):
        if x.dim() == 2:
            return x[None, None], True
        if x.dim() == 3:
            return x[None], True
        return x, False

    def encode_content(self, x):
        x, single = self._batch(x)
        _check_shape("content encoder input", x.shape[1:], (1, *self.cfg.slice_size))
        c = self.content_enc(x)
        _check_shape("content code", c.shape[1:], self.cfg.content_shape)
        return c[0] if single else c

    def encode_style(self, x, domain):
        if domain not in ("A", "B"):
            raise ValueError(f"domain must be 'A' or 'B', got {domain!r}")
        x, single = self._batch(x)
        _check_shape("style encoder input", x.shape[1:], (1, *self.cfg.slice_size))
        s = (self.style_enc_a if domain == "A" else self.style_enc_b)(x)
        _check_shape("style code", s.shape[1:], self.cfg.style_shape)
        return s[0] if single else s

    def decode(self, c, s):
        single = c.dim() == 3
        if single:
            c, s = c[None], s[None]
        _check_shape("content code", c.shape[1:], self.cfg.content_shape)
        _check_shape("style code", s.shape[1:], self.cfg.style_shape)
        if s.shape[0] != c.shape[0]:
            s = s.expand(c.shape[0], *s.shape[1:])
        x = self.decoder(c, s)
        _check_shape("decoded image", x.shape[1:], (1, *self.cfg.slice_size))
        return x[0] if single else x

    def save(self, path, iteration=0, meta=None):
        storage.write_checkpoint(path, self.state_dict(), "translation", self.cfg.to_dict(), iteration,
                                 self.cfg.seed, meta)

    @classmethod
    def load(cls, path):
        header, state = storage.read_checkpoint(path)
        if header["kind"] != "translation":
            raise ValueError(f"{path} holds a {header['kind']!r} checkpoint, not a translation model")
        model = cls(TranslationConfig.from_dict(header["config"]))
        model.load_state_dict(state)
        model.eval()
        return model, header
