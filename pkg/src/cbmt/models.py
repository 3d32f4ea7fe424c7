"""Segmentation networks available behind the adapter contract."""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .meanteacher import TorchAdapter


def _block(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


def _up(x, size):
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class TinyUNet(nn.Module):
    """Small four-level encoder-decoder for desk-scale experiments.

    About 60k parameters with the default widths; a 128x128 epoch of 64
    images runs in a couple of seconds on one CPU core.
    """

    def __init__(self, num_classes: int = 2, widths=(8, 16, 32, 64)):
        super().__init__()
        w0, w1, w2, w3 = widths
        self.stem = _block(3, w0)
        self.enc1 = _block(w0, w1)
        self.enc2 = _block(w1, w2)
        self.enc3 = _block(w2, w3)
        self.dec2 = _block(w3 + w2, w2)
        self.dec1 = _block(w2 + w1, w1)
        self.dec0 = _block(w1 + w0, w0)
        self.head = nn.Conv2d(w0, num_classes, 1)

    def forward(self, x):
        x0 = self.stem(x)
        x1 = self.enc1(F.max_pool2d(x0, 2))
        x2 = self.enc2(F.max_pool2d(x1, 2))
        x3 = self.enc3(F.max_pool2d(x2, 2))
        y = self.dec2(torch.cat([_up(x3, x2.shape[-2:]), x2], 1))
        y = self.dec1(torch.cat([_up(y, x1.shape[-2:]), x1], 1))
        y = self.dec0(torch.cat([_up(y, x0.shape[-2:]), x0], 1))
        return self.head(y)


class DeepLabV3PlusMobileNet(nn.Module):
    """DeepLabv3+ decoder over a MobileNetV2 encoder (randomly initialized).

    Intended for full-size fundus ROIs; needs torchvision.
    """

    def __init__(self, num_classes: int = 2):
        super().__init__()
        from torchvision.models import mobilenet_v2
        from torchvision.models.segmentation.deeplabv3 import ASPP

        features = mobilenet_v2(weights=None).features
        self.low = features[:4]  # stride 4, 24 channels
        self.high = features[4:-1]  # stride 32, 320 channels
        self.aspp = ASPP(320, [6, 12, 18], 256)
        self.reduce = nn.Sequential(nn.Conv2d(24, 48, 1, bias=False), nn.BatchNorm2d(48), nn.ReLU(inplace=True))
        self.fuse = nn.Sequential(_block(256 + 48, 256), _block(256, 256))
        self.head = nn.Conv2d(256, num_classes, 1)

    def forward(self, x):
        size = x.shape[-2:]
        low = self.low(x)
        high = self.aspp(self.high(low))
        y = torch.cat([_up(high, low.shape[-2:]), self.reduce(low)], 1)
        return _up(self.head(self.fuse(y)), size)


MODELS = {
    "tiny_unet": TinyUNet,
    "deeplabv3plus_mobilenetv2": DeepLabV3PlusMobileNet,
}


def build_model(name: str = "tiny_unet", num_classes: int = 2) -> TorchAdapter:
    try:
        cls = MODELS[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(MODELS)}") from None
    return TorchAdapter(cls(num_classes=num_classes))


def count_parameters(adapter: TorchAdapter) -> int:
    return sum(p.numel() for p in adapter.module.parameters())
