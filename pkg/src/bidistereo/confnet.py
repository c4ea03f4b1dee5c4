from __future__ import annotations

import torch
import torch.nn as nn

# |D - D_gt| below this many pixels counts as a confident prediction
CONF_THRESHOLD_PX = 3.0


def hidden_width(s_max: int) -> int:
    return max(1, round(s_max / 3))


class Confnet(nn.Module):
    """Per-pixel reliability of a disparity map, read off its cost volume.

    The disparity axis of the ``B x S x H x W`` cost volume is used as the
    channel axis of two 2D convolutions; the output is squashed by a sigmoid
    into a ``B x H x W`` map in (0, 1).
    """

    def __init__(self, s_max: int):
        super().__init__()
        self.s_max = s_max
        hidden = hidden_width(s_max)
        self.conv1 = nn.Sequential(
            nn.Conv2d(s_max, hidden, 3, 1, padding=1, bias=False),
            nn.BatchNorm2d(hidden),
            nn.ReLU(inplace=True),
        )
        self.conv2 = nn.Conv2d(hidden, 1, 1)

    def forward(self, cost):
        if cost.dim() != 4 or cost.shape[1] != self.s_max:
            raise ValueError(f"expected B x {self.s_max} x H x W cost volume, got {tuple(cost.shape)}")
        return torch.sigmoid(self.conv2(self.conv1(cost))).squeeze(1)


def gt_confidence(disp, gt_disp, valid_mask=None):
    """Binary target: 1 where the prediction is within 3 px of ground truth.

    Pixels outside ``valid_mask`` are set to 0 and must be excluded by the
    caller's mask.
    """
    k = (torch.abs(disp - gt_disp) < CONF_THRESHOLD_PX).to(disp.dtype)
    if valid_mask is not None:
        k = torch.where(valid_mask, k, torch.zeros_like(k))
    return k.detach()
