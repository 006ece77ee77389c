import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class ResBlock(nn.Module):
    def __init__(self, dim, norm=True):
        super().__init__()
        layers = [nn.Conv2d(dim, dim, 3, padding=1, padding_mode="reflect")]
        if norm:
            layers.append(nn.InstanceNorm2d(dim, affine=True))
        layers += [nn.LeakyReLU(0.2), nn.Conv2d(dim, dim, 3, padding=1, padding_mode="reflect")]
        if norm:
            layers.append(nn.InstanceNorm2d(dim, affine=True))
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return x + self.body(x)


def _n_down(size, code_size):
    ratio = size // code_size
    if code_size * ratio != size or ratio & (ratio - 1):
        raise ValueError(f"slice size {size} must be a power-of-two multiple of code size {code_size}")
    return int(math.log2(ratio))


class ContentEncoder(nn.Module):
    """Shared encoder mapping a slice to a spatial content map."""

    def __init__(self, slice_size, content_shape, dim=16, n_res=2):
        super().__init__()
        c, h, _ = content_shape
        n_down = _n_down(slice_size[0], h)
        layers = [nn.Conv2d(1, dim, 3, padding=1, padding_mode="reflect"),
                  nn.InstanceNorm2d(dim, affine=True), nn.LeakyReLU(0.2)]
        for _ in range(n_down):
            layers += [nn.Conv2d(dim, dim * 2, 4, stride=2, padding=1),
                       nn.InstanceNorm2d(dim * 2, affine=True), nn.LeakyReLU(0.2)]
            dim *= 2
        layers += [ResBlock(dim) for _ in range(n_res)]
        layers.append(nn.Conv2d(dim, c, 1))
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)


class StyleEncoder(nn.Module):
    """Per-domain style encoder.

    The trunk is pooled to a ``pool x pool`` grid and broadcast back to the
    style map size, so the style map can only carry coarse appearance.
    """

    def __init__(self, slice_size, style_shape, dim=16, pool=1):
        super().__init__()
        c, h, w = style_shape
        n_down = _n_down(slice_size[0], h)
        layers = [nn.Conv2d(1, dim, 3, padding=1, padding_mode="reflect"), nn.LeakyReLU(0.2)]
        for _ in range(n_down):
            layers += [nn.Conv2d(dim, dim * 2, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            dim *= 2
        self.trunk = nn.Sequential(*layers)
        self.head = nn.Conv2d(dim, c, 1)
        self.pool = pool
        self.size = (h, w)

    def forward(self, x):
        y = F.adaptive_avg_pool2d(self.trunk(x), self.pool)
        y = F.interpolate(y, size=self.size, mode="nearest")
        return self.head(y)


class FiLMResBlock(nn.Module):
    """Residual block whose normalised activations are scaled and shifted by the style map."""

    def __init__(self, dim, style_dim):
        super().__init__()
        self.conv1 = nn.Conv2d(dim, dim, 3, padding=1, padding_mode="reflect")
        self.conv2 = nn.Conv2d(dim, dim, 3, padding=1, padding_mode="reflect")
        self.norm1 = nn.InstanceNorm2d(dim)
        self.norm2 = nn.InstanceNorm2d(dim)
        self.film1 = nn.Conv2d(style_dim, 2 * dim, 1)
        self.film2 = nn.Conv2d(style_dim, 2 * dim, 1)
        self.act = nn.LeakyReLU(0.2)

    @staticmethod
    def _mod(h, film, s):
        gamma, beta = film(F.interpolate(s, size=h.shape[-2:], mode="nearest")).chunk(2, dim=1)
        return h * (1 + gamma) + beta

    def forward(self, x, s):
        h = self.act(self._mod(self.norm1(self.conv1(x)), self.film1, s))
        h = self._mod(self.norm2(self.conv2(h)), self.film2, s)
        return x + h


class Decoder(nn.Module):
    """Shared decoder G(c, s).

    ``fusion="concat"`` concatenates content and style channels once before
    the residual trunk.  ``"concat_all"`` re-concatenates the (resized)
    style map before every upsampling stage as well.  ``"film"`` also
    concatenates at the input, then lets the style modulate the residual
    trunk through per-channel scale and shift.
    """

    def __init__(self, slice_size, content_shape, style_shape, dim=16, n_res=2, fusion="concat"):
        super().__init__()
        if fusion not in ("concat", "concat_all", "film"):
            raise ValueError(f"unknown fusion {fusion!r}")
        self.fusion = fusion
        n_up = _n_down(slice_size[0], content_shape[1])
        cs = style_shape[0]
        width = dim * 2**n_up
        self.stem = nn.Sequential(nn.Conv2d(content_shape[0] + cs, width, 1), nn.LeakyReLU(0.2))
        if fusion == "film":
            self.trunk = nn.ModuleList([FiLMResBlock(width, cs) for _ in range(n_res)])
        else:
            self.trunk = nn.ModuleList([ResBlock(width, norm=False) for _ in range(n_res)])
        extra = cs if fusion == "concat_all" else 0
        self.ups = nn.ModuleList()
        for _ in range(n_up):
            self.ups.append(nn.Sequential(
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(width + extra, width // 2, 3, padding=1, padding_mode="reflect"), nn.LeakyReLU(0.2)))
            width //= 2
        self.out = nn.Conv2d(width + extra, 1, 3, padding=1, padding_mode="reflect")

    def _cat(self, h, s):
        if self.fusion != "concat_all":
            return h
        return torch.cat([h, F.interpolate(s, size=h.shape[-2:], mode="nearest")], dim=1)

    def forward(self, content, style):
        h = self.stem(torch.cat([content, style], dim=1))
        for block in self.trunk:
            h = block(h, style) if self.fusion == "film" else block(h)
        for up in self.ups:
            h = up(self._cat(h, style))
        return self.out(self._cat(h, style))


class PatchDiscriminator(nn.Module):
    """LSGAN-style patch discriminator; raw scores unless ``sigmoid`` is set."""

    def __init__(self, in_channels, dim=16, n_layers=2, sigmoid=False):
        super().__init__()
        layers = [nn.Conv2d(in_channels, dim, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        for _ in range(n_layers - 1):
            layers += [nn.Conv2d(dim, dim * 2, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            dim *= 2
        layers.append(nn.Conv2d(dim, 1, 3, padding=1))
        self.model = nn.Sequential(*layers)
        self.sigmoid = sigmoid

    def forward(self, x):
        y = self.model(x)
        return torch.sigmoid(y) if self.sigmoid else y
