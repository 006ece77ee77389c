from dataclasses import asdict, dataclass, field, fields

import torch
import torch.nn as nn

from .. import storage
from ..phantom import AugmentConfig
from .unet import UNet

PAPER_PRESET = dict(dims=3, patch_size=(48, 192, 192), batch_size=2, epochs=800, iters_per_epoch=250,
                    lr=0.01, momentum=0.99, base_channels=32, depth=5)


@dataclass
class SegConfig:
    num_classes: int = 5
    dims: int = 2
    patch_size: tuple = (8, 64, 64)
    batch_size: int = 2
    epochs: int = 30
    iters_per_epoch: int = 50
    lr: float = 0.01
    momentum: float = 0.99
    nesterov: bool = True
    weight_decay: float = 3e-5
    poly_exponent: float = 0.9
    base_channels: int = 16
    depth: int = 3
    smooth: float = 1e-5
    include_background: bool = False
    dice_weight: float = 1.0
    ce_weight: float = 1.0
    window_overlap: float = 0.5
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0

    def __post_init__(self):
        self.patch_size = tuple(self.patch_size)
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**{k: tuple(v) if isinstance(v, list) else v
                                            for k, v in self.augment.items()})
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.dims not in (2, 3):
            raise ValueError(f"dims must be 2 or 3, got {self.dims}")
        if len(self.patch_size) != 3:
            raise ValueError("patch_size is (depth, H, W); 2D models use the last two entries")
        if not 0 <= self.window_overlap < 1:
            raise ValueError("window_overlap must lie in [0, 1)")

    @property
    def patch(self):
        return self.patch_size if self.dims == 3 else self.patch_size[1:]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown segmentation config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def paper(cls, **overrides):
        return cls(**{**PAPER_PRESET, **overrides})


class SegmentationModel(nn.Module):
    def __init__(self, cfg: SegConfig):
        super().__init__()
        self.cfg = cfg
        self.net = UNet(cfg.num_classes, cfg.dims, cfg.base_channels, cfg.depth,
                        pool_depth=cfg.dims == 3 and cfg.patch_size[0] >= 2**cfg.depth * 4)

    @property
    def num_classes(self):
        return self.cfg.num_classes

    def forward(self, x):
        return self.net(x)

    def save(self, path, iteration=0, meta=None):
        storage.write_checkpoint(path, self.state_dict(), "segmentation", self.cfg.to_dict(), iteration,
                                 self.cfg.seed, meta)

    @classmethod
    def load(cls, path):
        header, state = storage.read_checkpoint(path)
        if header["kind"] != "segmentation":
            raise ValueError(f"{path} holds a {header['kind']!r} checkpoint, not a segmentation model")
        model = cls(SegConfig.from_dict(header["config"]))
        model.load_state_dict(state)
        model.eval()
        return model, header


def seg_forward(patch, model):
    """Logits for a (N, 1, *patch) batch, or a single unbatched patch."""
    patch = torch.as_tensor(patch, dtype=next(model.parameters()).dtype)
    single = patch.dim() == model.cfg.dims
    if single:
        patch = patch[None, None]
    expected = tuple(model.cfg.patch)
    if tuple(patch.shape[2:]) != expected or patch.shape[1] != 1:
        raise ValueError(f"patch shape {tuple(patch.shape[1:])} does not match configured (1, {expected})")
    logits = model(patch)
    return logits[0] if single else logits
