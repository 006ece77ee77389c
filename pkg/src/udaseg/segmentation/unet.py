import torch
import torch.nn as nn


def _ops(dims):
    if dims == 2:
        return nn.Conv2d, nn.ConvTranspose2d, nn.InstanceNorm2d
    if dims == 3:
        return nn.Conv3d, nn.ConvTranspose3d, nn.InstanceNorm3d
    raise ValueError(f"dims must be 2 or 3, got {dims}")


class ConvBlock(nn.Sequential):
    def __init__(self, dims, cin, cout):
        conv, _, norm = _ops(dims)
        super().__init__(
            conv(cin, cout, 3, padding=1), norm(cout, affine=True), nn.LeakyReLU(0.01),
            conv(cout, cout, 3, padding=1), norm(cout, affine=True), nn.LeakyReLU(0.01),
        )


class UNet(nn.Module):
    """Plain U-Net with instance norm; 3D variants pool in-plane only when depth is short."""

    def __init__(self, num_classes, dims=2, base=16, depth=3, in_channels=1, pool_depth=False):
        super().__init__()
        conv, upconv, _ = _ops(dims)
        self.dims, self.depth, self.num_classes = dims, depth, num_classes
        stride = 2 if dims == 2 or pool_depth else (1, 2, 2)
        self.stride = stride
        chans = [base * 2**i for i in range(depth + 1)]
        self.down = nn.ModuleList([ConvBlock(dims, in_channels, chans[0])])
        self.pools = nn.ModuleList()
        for i in range(depth):
            self.pools.append(conv(chans[i], chans[i], stride, stride=stride))
            self.down.append(ConvBlock(dims, chans[i], chans[i + 1]))
        self.ups = nn.ModuleList()
        self.up_blocks = nn.ModuleList()
        for i in reversed(range(depth)):
            self.ups.append(upconv(chans[i + 1], chans[i], stride, stride=stride))
            self.up_blocks.append(ConvBlock(dims, chans[i] * 2, chans[i]))
        self.head = conv(chans[0], num_classes, 1)
        self.apply(_kaiming)

    @property
    def divisor(self):
        f = 2**self.depth
        return (f,) * self.dims if self.stride == 2 else (1, f, f)

    def forward(self, x):
        skips = []
        x = self.down[0](x)
        for pool, block in zip(self.pools, self.down[1:]):
            skips.append(x)
            x = block(pool(x))
        for up, block, skip in zip(self.ups, self.up_blocks, reversed(skips)):
            x = block(torch.cat([up(x), skip], dim=1))
        return self.head(x)


def _kaiming(m):
    if isinstance(m, (nn.Conv2d, nn.Conv3d, nn.ConvTranspose2d, nn.ConvTranspose3d)):
        nn.init.kaiming_normal_(m.weight, a=0.01)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
