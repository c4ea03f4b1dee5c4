"""Disparity estimation network: shared ResNet-like feature extractor,
concatenation + group-wise correlation volumes, stacked 3D attention U-Nets
and the softmax / expectation heads.

Tensor layout follows PyTorch conventions: images ``B x 3 x H x W``, feature
volumes ``B x C x S/4 x H/4 x W/4``, cost volumes and distributions
``B x S x H x W`` (disparity on dim 1).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class NetScale:
    base_channels: int = 32
    feature_channels: int = 320
    compressed_channels: int = 12
    n_groups: int = 40
    s_max: int = 192
    n_hourglass: int = 3
    res_blocks: tuple = (3, 16, 3, 3)

    def __post_init__(self):
        object.__setattr__(self, "res_blocks", tuple(int(n) for n in self.res_blocks))
        counts = [self.base_channels, self.feature_channels, self.compressed_channels,
                  self.n_groups, self.s_max, self.n_hourglass]
        if min(counts) < 1 or len(self.res_blocks) != 4 or min(self.res_blocks) < 1:
            raise ValueError(f"all NetScale counts must be >= 1: {self}")
        if self.feature_channels != 10 * self.base_channels:
            raise ValueError("feature_channels must equal 10 * base_channels (2b + 4b + 4b concatenation)")
        if self.feature_channels % self.n_groups:
            raise ValueError(f"feature_channels={self.feature_channels} not divisible by n_groups={self.n_groups}")
        if self.s_max % 4:
            raise ValueError(f"s_max={self.s_max} must be divisible by 4")

    @classmethod
    def full(cls) -> "NetScale":
        return cls()

    @classmethod
    def desk(cls) -> "NetScale":
        return cls(8, 80, 3, 10, 32, 2, (1, 2, 1, 1))

    @classmethod
    def tiny(cls) -> "NetScale":
        return cls(4, 40, 2, 10, 32, 1, (1, 1, 1, 1))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["res_blocks"] = list(self.res_blocks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetScale":
        return cls(**d)


def convbn(cin, cout, k=3, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, stride, padding=k // 2, bias=False),
        nn.BatchNorm2d(cout),
    )


def convbn_3d(cin, cout, k=3, stride=1):
    return nn.Sequential(
        nn.Conv3d(cin, cout, k, stride, padding=k // 2, bias=False),
        nn.BatchNorm3d(cout),
    )


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Sequential(convbn(cin, cout, 3, stride), nn.ReLU(inplace=True))
        self.conv2 = convbn(cout, cout, 3, 1)
        self.downsample = None
        if stride != 1 or cin != cout:
            self.downsample = convbn(cin, cout, 1, stride)

    def forward(self, x):
        out = self.conv2(self.conv1(x))
        if self.downsample is not None:
            x = self.downsample(x)
        return out + x


def _stage(cin, cout, n, stride):
    # stride sits in the first block of the stage
    layers = [BasicBlock(cin, cout, stride)]
    layers += [BasicBlock(cout, cout, 1) for _ in range(n - 1)]
    return nn.Sequential(*layers)


class FeatureExtractor(nn.Module):
    def __init__(self, scale: NetScale):
        super().__init__()
        b = scale.base_channels
        n0, n1, n2, n3 = scale.res_blocks
        self.firstconv = nn.Sequential(
            convbn(3, b, 3, 2), nn.ReLU(inplace=True),
            convbn(b, b, 3, 1), nn.ReLU(inplace=True),
            convbn(b, b, 3, 1), nn.ReLU(inplace=True),
        )
        self.layer1 = _stage(b, b, n0, 1)
        self.layer2 = _stage(b, 2 * b, n1, 2)
        self.layer3 = _stage(2 * b, 4 * b, n2, 1)
        self.layer4 = _stage(4 * b, 4 * b, n3, 1)

    def forward(self, x):
        if x.shape[-2] % 4 or x.shape[-1] % 4:
            raise ValueError(f"image size {tuple(x.shape[-2:])} must be divisible by 4")
        x = self.layer1(self.firstconv(x))
        a = self.layer2(x)
        b = self.layer3(a)
        c = self.layer4(b)
        return torch.cat((a, b, c), dim=1)


def concat_volume(left: torch.Tensor, right: torch.Tensor, n_levels: int) -> torch.Tensor:
    """Shift-and-concatenate volume ``B x 2C x n_levels x H x W``; out-of-frame entries are zero."""
    if left.shape != right.shape:
        raise ValueError(f"feature shapes differ: {tuple(left.shape)} vs {tuple(right.shape)}")
    B, C, H, W = left.shape
    volume = left.new_zeros(B, 2 * C, n_levels, H, W)
    for s in range(n_levels):
        if s >= W:
            break
        volume[:, :C, s, :, :] = left
        if s > 0:
            volume[:, C:, s, :, s:] = right[:, :, :, :-s]
        else:
            volume[:, C:, s] = right
    return volume


def gwc_volume(left: torch.Tensor, right: torch.Tensor, n_levels: int, n_groups: int) -> torch.Tensor:
    """Group-wise correlation ``B x G x n_levels x H x W``: per-group mean of channel products."""
    if left.shape != right.shape:
        raise ValueError(f"feature shapes differ: {tuple(left.shape)} vs {tuple(right.shape)}")
    B, C, H, W = left.shape
    if C % n_groups:
        raise ValueError(f"{C} channels not divisible into {n_groups} groups")
    cpg = C // n_groups
    volume = left.new_zeros(B, n_groups, n_levels, H, W)
    for s in range(n_levels):
        if s >= W:
            break
        if s > 0:
            prod = left[:, :, :, s:] * right[:, :, :, :-s]
            volume[:, :, s, :, s:] = prod.view(B, n_groups, cpg, H, W - s).mean(dim=2)
        else:
            volume[:, :, s] = (left * right).view(B, n_groups, cpg, H, W).mean(dim=2)
    return volume


class ChannelAttention(nn.Module):
    def __init__(self, channels, reduction=4):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc = nn.Sequential(
            nn.Linear(channels, hidden), nn.ReLU(inplace=True),
            nn.Linear(hidden, channels), nn.Sigmoid(),
        )

    def forward(self, x):
        w = self.fc(x.mean(dim=(2, 3, 4)))
        return x * w[:, :, None, None, None]


def _match(x, ref):
    if x.shape[2:] != ref.shape[2:]:
        x = F.interpolate(x, size=ref.shape[2:], mode="trilinear", align_corners=False)
    return x


class AttentionUNet3d(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.conv1 = nn.Sequential(convbn_3d(c, 2 * c, 3, 2), nn.ReLU(inplace=True))
        self.conv2 = nn.Sequential(convbn_3d(2 * c, 2 * c, 3, 1), nn.ReLU(inplace=True))
        self.conv3 = nn.Sequential(convbn_3d(2 * c, 4 * c, 3, 2), nn.ReLU(inplace=True))
        self.conv4 = nn.Sequential(convbn_3d(4 * c, 4 * c, 3, 1), nn.ReLU(inplace=True))
        self.attention = ChannelAttention(4 * c)
        self.deconv1 = nn.Sequential(
            nn.ConvTranspose3d(4 * c, 2 * c, 3, 2, padding=1, output_padding=1, bias=False),
            nn.BatchNorm3d(2 * c),
        )
        self.deconv2 = nn.Sequential(
            nn.ConvTranspose3d(2 * c, c, 3, 2, padding=1, output_padding=1, bias=False),
            nn.BatchNorm3d(c),
        )
        self.out_conv = nn.Sequential(convbn_3d(c, c, 3, 1), nn.ReLU(inplace=True))

    def forward(self, x):
        y = self.conv2(self.conv1(x))
        z = self.attention(self.conv4(self.conv3(y)))
        y = F.relu(_match(self.deconv1(z), y) + y)
        x = F.relu(_match(self.deconv2(y), x) + x)
        return self.out_conv(x)


class CostAggregation(nn.Module):
    def __init__(self, in_channels, scale: NetScale):
        super().__init__()
        b = scale.base_channels
        self.dres0 = nn.Sequential(
            convbn_3d(in_channels, b), nn.ReLU(inplace=True),
            convbn_3d(b, b), nn.ReLU(inplace=True),
        )
        self.dres1 = nn.Sequential(convbn_3d(b, b), nn.ReLU(inplace=True), convbn_3d(b, b))
        self.hourglasses = nn.ModuleList(AttentionUNet3d(b) for _ in range(scale.n_hourglass))
        self.classify = nn.Conv3d(b, 1, 3, 1, padding=1, bias=False)

    def forward(self, volume, out_size):
        x = self.dres0(volume)
        x = F.relu(self.dres1(x) + x)
        for hg in self.hourglasses:
            x = hg(x)
        cost = self.classify(x)
        cost = F.interpolate(cost, size=out_size, mode="trilinear", align_corners=False)
        return cost.squeeze(1)

    def head_layers(self) -> list[nn.Module]:
        """The two output-side layers that are re-seeded per branch."""
        return [self.hourglasses[-1].out_conv, self.classify]


def cost_to_distribution(cost: torch.Tensor, dim: int = 1) -> torch.Tensor:
    """Softmax of the negated cost along ``dim`` (lower cost, higher probability)."""
    z = -cost
    z = z - z.amax(dim=dim, keepdim=True).detach()
    e = torch.exp(z)
    return e / e.sum(dim=dim, keepdim=True)


def distribution_to_disparity(prob: torch.Tensor, dim: int = 1) -> torch.Tensor:
    n = prob.shape[dim]
    shape = [1] * prob.dim()
    shape[dim] = n
    levels = torch.arange(n, dtype=prob.dtype, device=prob.device).view(shape)
    return (prob * levels).sum(dim=dim)


class DEnet(nn.Module):
    def __init__(self, scale: NetScale):
        super().__init__()
        self.scale = scale
        b = scale.base_channels
        self.feature_extraction = FeatureExtractor(scale)
        self.compress = nn.Sequential(
            convbn(scale.feature_channels, 4 * b, 3, 1), nn.ReLU(inplace=True),
            nn.Conv2d(4 * b, scale.compressed_channels, 1, bias=False),
        )
        self.aggregation = CostAggregation(2 * scale.compressed_channels + scale.n_groups, scale)

    def extract_features(self, image):
        return self.feature_extraction(image)

    def feature_volume(self, feat_l, feat_r):
        n = self.scale.s_max // 4
        c_concat = concat_volume(self.compress(feat_l), self.compress(feat_r), n)
        c_group = gwc_volume(feat_l, feat_r, n, self.scale.n_groups)
        return torch.cat((c_concat, c_group), dim=1)

    def forward(self, left, right):
        """Returns ``(prob, disparity, cost)``: ``B x S x H x W``, ``B x H x W``, ``B x S x H x W``."""
        if left.shape != right.shape:
            raise ValueError(f"left/right shapes differ: {tuple(left.shape)} vs {tuple(right.shape)}")
        H, W = left.shape[-2:]
        feats = self.extract_features(torch.cat((left, right), dim=0))
        feat_l, feat_r = feats.chunk(2, dim=0)
        volume = self.feature_volume(feat_l, feat_r)
        cost = self.aggregation(volume, (self.scale.s_max, H, W))
        prob = cost_to_distribution(cost)
        return prob, distribution_to_disparity(prob), cost
