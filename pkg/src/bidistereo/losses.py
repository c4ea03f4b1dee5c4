"""Supervision signals for the dual-branch model.

Maps are batched: disparities and confidences ``B x H x W``, distributions
``B x S x H x W``, masks boolean ``B x H x W``. Every loss is a mean over the
masked pixels only; inputs at masked-out pixels are replaced before any
arithmetic so they can never leak into a value or a gradient.

Cross-branch pseudo-labels and the confidences used to weight or soften
them are detached: each directional term only trains the receiving branch
and never the teacher or either confidence head.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, fields
from typing import NamedTuple, Optional

import torch

from .confnet import gt_confidence

LOG_EPS = 1e-12
NORM_TOL = 1e-4


class BranchOutput(NamedTuple):
    prob: torch.Tensor
    disp: torch.Tensor
    conf: torch.Tensor
    cost: Optional[torch.Tensor] = None


@dataclass
class LossWeights:
    lambda_conf: float = 8.0

    def __post_init__(self):
        if self.lambda_conf < 0:
            raise ValueError("lambda_conf must be non-negative")


@dataclass
class Ablation:
    aps_on: bool = True
    acs_on: bool = True
    adaptive_aps: bool = True
    adaptive_acs: bool = True
    bidirectional: bool = True
    # distribution constraint on labeled data (joint DEnet/Confnet learning)
    joint: bool = True
    # whose confidence softens the cross target: "student" pairs the teacher D with the student K
    rho_from: str = "student"

    def __post_init__(self):
        if self.rho_from not in ("student", "teacher"):
            raise ValueError(f"rho_from must be 'student' or 'teacher', got {self.rho_from!r}")


@dataclass
class LossBreakdown:
    aps: torch.Tensor | float = 0.0
    acs: torch.Tensor | float = 0.0
    conf: torch.Tensor | float = 0.0
    value: torch.Tensor | float = 0.0
    dist: torch.Tensor | float = 0.0
    self_total: torch.Tensor | float = 0.0
    full_total: torch.Tensor | float = 0.0
    masked_pixel_count: int = 0

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = float(v.detach()) if torch.is_tensor(v) else v
        return out


def smooth_l1(x):
    ax = torch.abs(x)
    return torch.where(ax < 1, 0.5 * x * x, ax - 0.5)


def rho(conf):
    return 1.0 / (2.0 - conf)


def unimodal_generate(disp, conf, s_max: int, adaptive: bool = True):
    """Confidence-softened unimodal distribution centred on ``disp``.

    ``P(s) ~ exp(-|s - disp| * rho(conf))``; with ``adaptive=False`` the
    sharpness is fixed at rho = 1. Output is ``B x S x H x W`` for
    ``B x H x W`` inputs.
    """
    if disp.dim() != 3:
        raise ValueError(f"expected B x H x W disparity, got {tuple(disp.shape)}")
    if torch.any(disp < -1e-6) or torch.any(disp > s_max - 1 + 1e-6) or not torch.isfinite(disp).all():
        raise ValueError(f"disparity outside [0, {s_max - 1}]")
    levels = torch.arange(s_max, dtype=disp.dtype, device=disp.device).view(1, s_max, 1, 1)
    sharp = rho(conf) if adaptive else torch.ones_like(disp)
    logits = -torch.abs(levels - disp.unsqueeze(1)) * sharp.unsqueeze(1)
    return torch.softmax(logits, dim=1)


def _count(mask) -> int:
    return int(mask.sum())


def _masked_mean(per_pixel, mask):
    n = _count(mask)
    if n == 0:
        warnings.warn("loss evaluated on an empty mask; returning 0", RuntimeWarning, stacklevel=3)
        return (per_pixel * 0).sum()
    return torch.where(mask, per_pixel, torch.zeros_like(per_pixel)).sum() / n


def _keep(x, mask, fill=0.0):
    m = mask if x.dim() == mask.dim() else mask.unsqueeze(1)
    return torch.where(m, x, torch.full_like(x, fill))


def _keep_prob(p, mask):
    s = p.shape[1]
    return torch.where(mask.unsqueeze(1), p, torch.full_like(p, 1.0 / s))


def _check_normalized(p, mask):
    if _count(mask) == 0:
        return
    sums = p.sum(dim=1)[mask]
    if torch.any(torch.abs(sums - 1) > NORM_TOL) or torch.any(p.detach()[mask.unsqueeze(1).expand_as(p)] < 0):
        raise ValueError("probability maps must be non-negative and sum to 1 over disparity")


def cross_entropy(target, prob):
    """Per-pixel ``-sum_s target * log(prob)`` with log clamped at 1e-12."""
    return -(target * torch.log(torch.clamp(prob, min=LOG_EPS))).sum(dim=1)


def entropy(p):
    return cross_entropy(p, p)


# --------------------------------------------------------------------------
# self-supervision on unlabeled pixels


def aps_terms(disp_a, conf_a, disp_b, conf_b, mask, adaptive: bool = True):
    """``(A->B, B->A)`` confidence-weighted smooth-L1 pseudo-label terms."""
    disp_a, disp_b = _keep(disp_a, mask), _keep(disp_b, mask)
    if adaptive:
        w_a, w_b = _keep(conf_a, mask).detach(), _keep(conf_b, mask).detach()
    else:
        w_a = w_b = torch.ones_like(disp_a)
    a_to_b = _masked_mean(w_a * smooth_l1(disp_b - disp_a.detach()), mask)
    b_to_a = _masked_mean(w_b * smooth_l1(disp_a - disp_b.detach()), mask)
    return a_to_b, b_to_a


def aps_loss(disp_a, conf_a, disp_b, conf_b, mask, adaptive: bool = True):
    a_to_b, b_to_a = aps_terms(disp_a, conf_a, disp_b, conf_b, mask, adaptive)
    return a_to_b + b_to_a


def acs_targets(disp_a, conf_a, disp_b, conf_b, mask, s_max, adaptive=True, rho_from="student"):
    """Pseudo distributions ``(for_b, for_a)``: UG(D_a, K_b) and UG(D_b, K_a) by default."""
    disp_a, disp_b = _keep(disp_a, mask).detach(), _keep(disp_b, mask).detach()
    conf_a, conf_b = _keep(conf_a, mask, 1.0).detach(), _keep(conf_b, mask, 1.0).detach()
    if rho_from == "teacher":
        conf_a, conf_b = conf_b, conf_a
    for_b = unimodal_generate(disp_a, conf_b, s_max, adaptive)
    for_a = unimodal_generate(disp_b, conf_a, s_max, adaptive)
    return for_b, for_a


def acs_terms(prob_a, disp_a, conf_a, prob_b, disp_b, conf_b, mask, adaptive=True, rho_from="student"):
    _check_normalized(prob_a, mask)
    _check_normalized(prob_b, mask)
    s_max = prob_a.shape[1]
    for_b, for_a = acs_targets(disp_a, conf_a, disp_b, conf_b, mask, s_max, adaptive, rho_from)
    a_to_b = _masked_mean(cross_entropy(for_b, _keep_prob(prob_b, mask)), mask)
    b_to_a = _masked_mean(cross_entropy(for_a, _keep_prob(prob_a, mask)), mask)
    return a_to_b, b_to_a


def acs_loss(prob_a, disp_a, conf_a, prob_b, disp_b, conf_b, mask, adaptive=True, rho_from="student"):
    a_to_b, b_to_a = acs_terms(prob_a, disp_a, conf_a, prob_b, disp_b, conf_b, mask, adaptive, rho_from)
    return a_to_b + b_to_a


def self_loss(out_a: BranchOutput, out_b: BranchOutput, mask, ablation: Ablation = Ablation()) -> LossBreakdown:
    zero = (out_a.disp * 0).sum() + (out_b.disp * 0).sum()
    aps = acs = zero
    if ablation.aps_on:
        a_to_b, b_to_a = aps_terms(out_a.disp, out_a.conf, out_b.disp, out_b.conf, mask, ablation.adaptive_aps)
        aps = a_to_b + b_to_a if ablation.bidirectional else a_to_b
    if ablation.acs_on:
        a_to_b, b_to_a = acs_terms(out_a.prob, out_a.disp, out_a.conf, out_b.prob, out_b.disp, out_b.conf,
                                   mask, ablation.adaptive_acs, ablation.rho_from)
        acs = a_to_b + b_to_a if ablation.bidirectional else a_to_b
    return LossBreakdown(aps=aps, acs=acs, self_total=aps + acs, masked_pixel_count=_count(mask))


# --------------------------------------------------------------------------
# full supervision on labeled pixels


def _bce(conf, target):
    return -(target * torch.log(torch.clamp(conf, min=LOG_EPS))
             + (1 - target) * torch.log(torch.clamp(1 - conf, min=LOG_EPS)))


def conf_loss(conf_a, gt_conf_a, conf_b, gt_conf_b, mask):
    conf_a, conf_b = _keep(conf_a, mask, 0.5), _keep(conf_b, mask, 0.5)
    gt_conf_a, gt_conf_b = _keep(gt_conf_a, mask), _keep(gt_conf_b, mask)
    return _masked_mean(_bce(conf_a, gt_conf_a) + _bce(conf_b, gt_conf_b), mask)


def disparity_weight(gt_disp, mask):
    """Normalized ground-truth disparity; all ones when the masked maximum is not positive."""
    gt_disp = _keep(gt_disp, mask)
    peak = gt_disp.max() if _count(mask) else gt_disp.new_tensor(0.0)
    if peak <= 0:
        return torch.ones_like(gt_disp)
    return gt_disp / peak


def value_loss(disp_a, disp_b, gt_disp, mask):
    disp_a, disp_b, gt_disp = _keep(disp_a, mask), _keep(disp_b, mask), _keep(gt_disp, mask)
    alpha = disparity_weight(gt_disp, mask)
    return _masked_mean(alpha * (smooth_l1(disp_a - gt_disp) + smooth_l1(disp_b - gt_disp)), mask)


def dist_loss(prob_a, conf_a, prob_b, conf_b, gt_disp, mask, adaptive: bool = True):
    """Cross-entropy against UG(gt, K); the confidences keep their gradient."""
    s_max = prob_a.shape[1]
    gt_disp = _keep(gt_disp, mask)
    conf_a, conf_b = _keep(conf_a, mask, 1.0), _keep(conf_b, mask, 1.0)
    target_a = unimodal_generate(gt_disp, conf_a, s_max, adaptive)
    target_b = unimodal_generate(gt_disp, conf_b, s_max, adaptive)
    per_pixel = (cross_entropy(target_a, _keep_prob(prob_a, mask))
                 + cross_entropy(target_b, _keep_prob(prob_b, mask)))
    return _masked_mean(per_pixel, mask)


def full_loss(out_a: BranchOutput, out_b: BranchOutput, gt_disp, mask,
              weights: LossWeights = LossWeights(), use_dist: bool = True) -> LossBreakdown:
    gt_conf_a = gt_confidence(out_a.disp.detach(), gt_disp, mask)
    gt_conf_b = gt_confidence(out_b.disp.detach(), gt_disp, mask)
    conf = conf_loss(out_a.conf, gt_conf_a, out_b.conf, gt_conf_b, mask)
    value = value_loss(out_a.disp, out_b.disp, gt_disp, mask)
    dist = dist_loss(out_a.prob, out_a.conf, out_b.prob, out_b.conf, gt_disp, mask) if use_dist else conf * 0
    total = weights.lambda_conf * conf + value + dist
    return LossBreakdown(conf=conf, value=value, dist=dist, full_total=total, masked_pixel_count=_count(mask))
