"""Inflated Inception-V1 (I3D) stream network for real feature extraction.

Module names follow the widely shared PyTorch port, so its Kinetics-400
``rgb`` / ``flow`` state dicts load directly. Requires ``torch``.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import BackboneError, BackboneOutput, sha256_file
from .streams import StreamKind, StreamTensor

log = logging.getLogger(__name__)


def _same_pad(size: int, kernel: int, stride: int) -> tuple[int, int]:
    if size % stride == 0:
        total = max(kernel - stride, 0)
    else:
        total = max(kernel - size % stride, 0)
    return total // 2, total - total // 2


def _pad_same(x: torch.Tensor, kernel, stride) -> torch.Tensor:
    _, _, t, h, w = x.shape
    pt, ph, pw = (_same_pad(s, k, st) for s, k, st in zip((t, h, w), kernel, stride))
    return F.pad(x, (*pw, *ph, *pt))


class MaxPool3dSamePadding(nn.MaxPool3d):
    def forward(self, x):
        return super().forward(_pad_same(x, self.kernel_size, self.stride))


class Unit3D(nn.Module):
    def __init__(
        self,
        in_channels,
        output_channels,
        kernel_shape=(1, 1, 1),
        stride=(1, 1, 1),
        activation_fn=F.relu,
        use_batch_norm=True,
        use_bias=False,
    ):
        super().__init__()
        self._kernel = tuple(kernel_shape)
        self._stride = tuple(stride)
        self._activation = activation_fn
        self._use_bn = use_batch_norm
        self.conv3d = nn.Conv3d(in_channels, output_channels, self._kernel, self._stride, padding=0, bias=use_bias)
        if use_batch_norm:
            self.bn = nn.BatchNorm3d(output_channels, eps=0.001, momentum=0.01)

    def forward(self, x):
        x = self.conv3d(_pad_same(x, self._kernel, self._stride))
        if self._use_bn:
            x = self.bn(x)
        if self._activation is not None:
            x = self._activation(x)
        return x


class InceptionModule(nn.Module):
    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.b0 = Unit3D(in_channels, out_channels[0])
        self.b1a = Unit3D(in_channels, out_channels[1])
        self.b1b = Unit3D(out_channels[1], out_channels[2], (3, 3, 3))
        self.b2a = Unit3D(in_channels, out_channels[3])
        self.b2b = Unit3D(out_channels[3], out_channels[4], (3, 3, 3))
        self.b3a = MaxPool3dSamePadding(kernel_size=(3, 3, 3), stride=(1, 1, 1), padding=0)
        self.b3b = Unit3D(in_channels, out_channels[5])

    def forward(self, x):
        return torch.cat(
            [self.b0(x), self.b1b(self.b1a(x)), self.b2b(self.b2a(x)), self.b3b(self.b3a(x))], dim=1
        )


_MIXED = [
    ("Mixed_3b", 192, (64, 96, 128, 16, 32, 32)),
    ("Mixed_3c", 256, (128, 128, 192, 32, 96, 64)),
    ("MaxPool3d_4a_3x3", (3, 3, 3), (2, 2, 2)),
    ("Mixed_4b", 480, (192, 96, 208, 16, 48, 64)),
    ("Mixed_4c", 512, (160, 112, 224, 24, 64, 64)),
    ("Mixed_4d", 512, (128, 128, 256, 24, 64, 64)),
    ("Mixed_4e", 512, (112, 144, 288, 32, 64, 64)),
    ("Mixed_4f", 528, (256, 160, 320, 32, 128, 128)),
    ("MaxPool3d_5a_2x2", (2, 2, 2), (2, 2, 2)),
    ("Mixed_5b", 832, (256, 160, 320, 32, 128, 128)),
    ("Mixed_5c", 832, (384, 192, 384, 48, 128, 128)),
]


class InceptionI3d(nn.Module):
    """Up to ``Mixed_5c`` (1024 channels) plus the 400-way logits head."""

    def __init__(self, num_classes: int = 400, in_channels: int = 3):
        super().__init__()
        self.end_points: list[str] = []

        def add(name, module):
            self.add_module(name, module)
            self.end_points.append(name)

        add("Conv3d_1a_7x7", Unit3D(in_channels, 64, (7, 7, 7), (2, 2, 2)))
        add("MaxPool3d_2a_3x3", MaxPool3dSamePadding(kernel_size=(1, 3, 3), stride=(1, 2, 2), padding=0))
        add("Conv3d_2b_1x1", Unit3D(64, 64))
        add("Conv3d_2c_3x3", Unit3D(64, 192, (3, 3, 3)))
        add("MaxPool3d_3a_3x3", MaxPool3dSamePadding(kernel_size=(1, 3, 3), stride=(1, 2, 2), padding=0))
        for name, a, b in _MIXED:
            if name.startswith("MaxPool"):
                add(name, MaxPool3dSamePadding(kernel_size=a, stride=b, padding=0))
            else:
                add(name, InceptionModule(a, b))
        self.logits = Unit3D(1024, num_classes, activation_fn=None, use_batch_norm=False, use_bias=True)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        for name in self.end_points:
            x = getattr(self, name)(x)
        return x

    def head(self, fmap: torch.Tensor) -> torch.Tensor:
        # the published head averages 2x7x7 windows; small inputs fall back to a global average
        _, _, t, h, w = fmap.shape
        if t >= 2 and h >= 7 and w >= 7:
            pooled = F.avg_pool3d(fmap, (2, 7, 7), stride=1)
        else:
            pooled = fmap.mean(dim=(2, 3, 4), keepdim=True)
        return self.logits(pooled).mean(dim=(2, 3, 4))


class I3DBackbone:
    """Pretrained I3D stream network behind the ``Backbone`` interface."""

    def __init__(
        self,
        kind: StreamKind | str,
        weights: str | Path | None = None,
        expected_hash: str | None = None,
        device: str = "cpu",
        seed: int = 0,
    ):
        self.kind = StreamKind.parse(kind)
        self.device = torch.device(device)
        channels = 3 if self.kind is StreamKind.RGB else 2
        torch.manual_seed(seed)
        self.model = InceptionI3d(400, in_channels=channels)
        if weights is not None:
            weights = Path(weights)
            if not weights.exists():
                raise BackboneError(f"missing {self.kind.value} weights: {weights}")
            digest = sha256_file(weights)
            if expected_hash and digest != expected_hash:
                raise BackboneError(f"weight hash mismatch for {weights}: {digest} != {expected_hash}")
            state = torch.load(weights, map_location="cpu", weights_only=True)
            try:
                self.model.load_state_dict(state)
            except RuntimeError as exc:
                raise BackboneError(f"{weights} does not match the I3D {self.kind.value} layout: {exc}") from exc
            self.weights_hash = digest
        else:
            log.warning("I3D %s backbone running with random weights", self.kind.value)
            self.weights_hash = f"random-init-{seed}"
        self.model.to(self.device).eval()

    @torch.no_grad()
    def forward(self, stream: StreamTensor) -> BackboneOutput:
        if stream.kind is not self.kind:
            raise BackboneError(f"{stream.kind.value} stream fed to a {self.kind.value} backbone")
        x = torch.from_numpy(np.ascontiguousarray(stream.data.transpose(3, 0, 1, 2)))[None].to(self.device)
        fmap = self.model.features(x)
        logits = self.model.head(fmap)[0]
        pool_avg = fmap.mean(dim=(2, 3, 4))[0]
        pool_max = fmap.amax(dim=(2, 3, 4))[0]
        return BackboneOutput(
            logits.cpu().numpy().astype(np.float32),
            pool_avg.cpu().numpy().astype(np.float32),
            pool_max.cpu().numpy().astype(np.float32),
        )
