"""Dual-branch training: branch initialization, warm-up and semi-supervised
epochs with gradient routing, learning-rate schedule, checkpoints and
confidence-based branch selection at inference.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .confnet import Confnet
from .data import AugmentConfig, StereoSample, augment, to_tensors
from .denet import DEnet, NetScale
from .losses import Ablation, BranchOutput, LossBreakdown, LossWeights, full_loss, self_loss

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


class NumericError(RuntimeError):
    """A loss became NaN or infinite."""


@dataclass
class TrainConfig:
    warmup_epochs: int = 300
    semi_epochs: int = 100
    lr_init: float = 1e-3
    batch_size: int = 3
    seed: int = 0
    seed_a: int = 1
    seed_b: int = 2
    # labeled steps per unlabeled step in the semi-supervised stage
    labeled_ratio: float = 1.0
    scale: NetScale = field(default_factory=NetScale.full)
    weights: LossWeights = field(default_factory=LossWeights)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    ablation: Ablation = field(default_factory=Ablation)
    pretrained: Optional[str] = None
    checkpoint_every: int = 0
    device: str = "cpu"

    def __post_init__(self):
        if self.warmup_epochs < 1 or self.semi_epochs < 0:
            raise ValueError("warmup_epochs must be >= 1 and semi_epochs >= 0")
        if self.lr_init <= 0:
            raise ValueError("lr_init must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.labeled_ratio < 0:
            raise ValueError("labeled_ratio must be >= 0")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        base = dict(
            warmup_epochs=40, semi_epochs=20, batch_size=4, scale=NetScale.tiny(),
            augment=AugmentConfig(crop_h=64, crop_w=128, flip_prob=0.5,
                                  gamma_range=(0.9, 1.1), brightness_range=(0.9, 1.1)),
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale"] = self.scale.to_dict()
        d["augment"]["gamma_range"] = list(self.augment.gamma_range)
        d["augment"]["brightness_range"] = list(self.augment.brightness_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        if "scale" in d and isinstance(d["scale"], dict):
            d["scale"] = NetScale.from_dict(d["scale"])
        if "weights" in d and isinstance(d["weights"], dict):
            d["weights"] = LossWeights(**d["weights"])
        if "augment" in d and isinstance(d["augment"], dict):
            d["augment"] = AugmentConfig(**d["augment"])
        if "ablation" in d and isinstance(d["ablation"], dict):
            d["ablation"] = Ablation(**d["ablation"])
        return cls(**d)


class DualBranch(nn.Module):
    def __init__(self, scale: NetScale):
        super().__init__()
        self.scale = scale
        self.denet_a = DEnet(scale)
        self.denet_b = DEnet(scale)
        self.confnet_a = Confnet(scale.s_max)
        self.confnet_b = Confnet(scale.s_max)

    def branch(self, which: str, left, right, conf_grad: bool = True) -> BranchOutput:
        denet, confnet = (self.denet_a, self.confnet_a) if which == "a" else (self.denet_b, self.confnet_b)
        prob, disp, cost = denet(left, right)
        # Confnet reads a detached volume: confidence losses never reach DEnet
        with torch.set_grad_enabled(conf_grad and torch.is_grad_enabled()):
            conf = confnet(cost.detach())
        return BranchOutput(prob, disp, conf, cost)

    def forward(self, left, right, conf_grad: bool = True):
        return self.branch("a", left, right, conf_grad), self.branch("b", left, right, conf_grad)

    def confnet_parameters(self):
        return list(self.confnet_a.parameters()) + list(self.confnet_b.parameters())


@dataclass
class DualBranchState:
    config: TrainConfig
    model: DualBranch
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    epoch: int = 0

    @property
    def total_epochs(self) -> int:
        return self.config.warmup_epochs + self.config.semi_epochs

    @property
    def stage(self) -> str:
        return "warmup" if self.epoch < self.config.warmup_epochs else "semi"


def _reseed(module: nn.Module, seed: int) -> None:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        for m in module.modules():
            if hasattr(m, "reset_parameters"):
                m.reset_parameters()


def make_optimizer(model: nn.Module, lr: float) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=lr, betas=(0.9, 0.999))


def init_branches(cfg: TrainConfig) -> DualBranchState:
    """Identical DEnets except for the re-seeded output layers; independent Confnets."""
    if cfg.seed_a == cfg.seed_b:
        warnings.warn("seed_a == seed_b: both branches start identical", RuntimeWarning, stacklevel=2)
    torch.manual_seed(cfg.seed)
    model = DualBranch(cfg.scale)
    shared = DEnet(cfg.scale)
    if cfg.pretrained:
        blob = torch.load(cfg.pretrained, map_location="cpu", weights_only=False)
        shared.load_state_dict(blob.get("denet", blob))
    model.denet_a.load_state_dict(shared.state_dict())
    model.denet_b.load_state_dict(shared.state_dict())
    for denet, seed in ((model.denet_a, cfg.seed_a), (model.denet_b, cfg.seed_b)):
        for i, layer in enumerate(denet.aggregation.head_layers()):
            _reseed(layer, seed * 1000 + i)
    _reseed(model.confnet_a, cfg.seed_a * 1000 + 17)
    _reseed(model.confnet_b, cfg.seed_b * 1000 + 17)
    model.to(cfg.device)
    return DualBranchState(
        config=cfg,
        model=model,
        optimizer=make_optimizer(model, cfg.lr_init),
        rng=np.random.default_rng(cfg.seed),
    )


def lr_schedule(epoch: int, total_epochs: int, lr_init: float) -> float:
    """Halve the rate at every quarter of the stage."""
    return lr_init * 0.5 ** math.floor(4 * epoch / total_epochs)


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for g in opt.param_groups:
        g["lr"] = lr


def _batches(samples: Sequence[StereoSample], cfg: TrainConfig, rng: np.random.Generator) -> Iterator:
    order = rng.permutation(len(samples))
    for i in range(0, len(order), cfg.batch_size):
        chunk = [augment(samples[j], cfg.augment, rng) for j in order[i:i + cfg.batch_size]]
        yield tuple(t.to(cfg.device) if t is not None else None for t in to_tensors(chunk, cfg.scale.s_max))


def _cycle(samples, cfg, rng):
    while True:
        yield from _batches(samples, cfg, rng)


def _check(value: torch.Tensor, where: str) -> None:
    if not torch.isfinite(value):
        raise NumericError(f"non-finite loss at {where}")


def labeled_step(state: DualBranchState, batch) -> LossBreakdown:
    left, right, disp, mask = batch
    cfg = state.config
    state.model.train()
    state.optimizer.zero_grad(set_to_none=True)
    out_a, out_b = state.model(left, right)
    losses = full_loss(out_a, out_b, disp, mask, cfg.weights, use_dist=cfg.ablation.joint)
    _check(losses.full_total, f"epoch {state.epoch} labeled step")
    losses.full_total.backward()
    state.optimizer.step()
    return losses


def unlabeled_step(state: DualBranchState, batch) -> Optional[LossBreakdown]:
    """One L_self step; DEnets only. Returns None when self-supervision is disabled."""
    left, right, _, mask = batch
    ab = state.config.ablation
    if not (ab.aps_on or ab.acs_on):
        return None
    state.model.train()
    # frozen Confnets: no gradients and no BatchNorm statistics drift
    state.model.confnet_a.eval()
    state.model.confnet_b.eval()
    state.optimizer.zero_grad(set_to_none=True)
    out_a, out_b = state.model(left, right, conf_grad=False)
    losses = self_loss(out_a, out_b, mask, ab)
    _check(losses.self_total, f"epoch {state.epoch} unlabeled step")
    if losses.self_total.requires_grad:
        losses.self_total.backward()
        # confnet grads stay None, so Adam leaves those parameters untouched
        state.optimizer.step()
    return losses


def _stage_lr(state: DualBranchState) -> float:
    cfg = state.config
    if state.stage == "warmup":
        return lr_schedule(state.epoch, cfg.warmup_epochs, cfg.lr_init)
    return lr_schedule(state.epoch - cfg.warmup_epochs, cfg.semi_epochs, cfg.lr_init)


def warmup_epoch(state: DualBranchState, labeled: Sequence[StereoSample],
                 log: Optional[Callable[[dict], None]] = None) -> DualBranchState:
    lr = _stage_lr(state)
    _set_lr(state.optimizer, lr)
    for step, batch in enumerate(_batches(labeled, state.config, state.rng)):
        rec = labeled_step(state, batch).to_dict()
        if log:
            log({"stage": "warmup", "epoch": state.epoch, "step": step, "kind": "labeled", "lr": lr, **rec})
    state.epoch += 1
    return state


def semi_epoch(state: DualBranchState, labeled: Sequence[StereoSample], unlabeled: Sequence[StereoSample],
               log: Optional[Callable[[dict], None]] = None) -> DualBranchState:
    """Interleave labeled (L_full) and unlabeled (L_self) steps.

    Labeled data is cycled so that ``labeled_ratio`` labeled batches are taken
    per unlabeled batch.
    """
    cfg = state.config
    lr = _stage_lr(state)
    _set_lr(state.optimizer, lr)
    n_unlabeled = math.ceil(len(unlabeled) / cfg.batch_size)
    n_labeled = round(n_unlabeled * cfg.labeled_ratio) if labeled else 0
    lab_iter = _cycle(labeled, cfg, state.rng) if n_labeled else None
    unl_iter = _batches(unlabeled, cfg, state.rng)
    steps = max(n_unlabeled, n_labeled)
    for step in range(steps):
        # Bresenham-style spread of labeled steps over the epoch
        if n_labeled and (step + 1) * n_labeled // steps > step * n_labeled // steps:
            rec = labeled_step(state, next(lab_iter)).to_dict()
            if log:
                log({"stage": "semi", "epoch": state.epoch, "step": step, "kind": "labeled", "lr": lr, **rec})
        if step < n_unlabeled:
            out = unlabeled_step(state, next(unl_iter))
            if log and out is not None:
                log({"stage": "semi", "epoch": state.epoch, "step": step, "kind": "unlabeled", "lr": lr,
                     **out.to_dict()})
    state.epoch += 1
    return state


def fit(state: DualBranchState, labeled: Sequence[StereoSample], unlabeled: Sequence[StereoSample] = (),
        log: Optional[Callable[[dict], None]] = None, checkpoint_dir: Optional[Path] = None,
        until: Optional[int] = None) -> DualBranchState:
    """Run (or resume) warm-up then semi-supervised training up to epoch ``until``."""
    cfg = state.config
    stop = state.total_epochs if until is None else min(until, state.total_epochs)
    while state.epoch < stop:
        if state.stage == "warmup":
            warmup_epoch(state, labeled, log)
        else:
            semi_epoch(state, labeled, unlabeled, log)
        logger.info("finished epoch %d/%d (%s)", state.epoch, state.total_epochs, state.stage)
        if checkpoint_dir is not None and cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
            checkpoint(state, Path(checkpoint_dir) / f"epoch_{state.epoch:04d}.pt")
    return state


# --------------------------------------------------------------------------
# inference


def _pad_to(x, multiple):
    h, w = x.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="replicate")
    return x


@torch.no_grad()
def infer(model: DualBranch, left, right):
    """Predict with both branches and keep, per sample, the one with larger mean confidence.

    Ties go to branch A. Returns ``(disparity, confidence, chosen)`` with
    ``chosen`` a list of ``"A"``/``"B"``.
    """
    model.eval()
    squeeze = left.dim() == 3
    if squeeze:
        left, right = left[None], right[None]
    h, w = left.shape[-2:]
    out_a, out_b = model(_pad_to(left, 16), _pad_to(right, 16))
    d_a, k_a = out_a.disp[..., :h, :w], out_a.conf[..., :h, :w]
    d_b, k_b = out_b.disp[..., :h, :w], out_b.conf[..., :h, :w]
    pick_a = k_a.mean(dim=(1, 2)) >= k_b.mean(dim=(1, 2))
    sel = pick_a[:, None, None]
    disp = torch.where(sel, d_a, d_b)
    conf = torch.where(sel, k_a, k_b)
    chosen = ["A" if p else "B" for p in pick_a.tolist()]
    if squeeze:
        return disp[0], conf[0], chosen[0]
    return disp, conf, chosen


def predict_samples(model: DualBranch, samples: Sequence[StereoSample], device: str = "cpu", batch_size: int = 4):
    """Run :func:`infer` over samples; yields ``(disparity, confidence, chosen)`` numpy triples."""
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        shapes = {s.shape for s in chunk}
        if len(shapes) > 1:
            for s in chunk:
                yield from predict_samples(model, [s], device, 1)
            continue
        left, right, _, _ = to_tensors(chunk)
        disp, conf, chosen = infer(model, left.to(device), right.to(device))
        for j in range(len(chunk)):
            yield disp[j].cpu().numpy(), conf[j].cpu().numpy(), chosen[j]


# --------------------------------------------------------------------------
# checkpoints


def checkpoint(state: DualBranchState, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {
        "format": CHECKPOINT_FORMAT,
        "scale": state.config.scale.to_dict(),
        "config": state.config.to_dict(),
        "model": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "epoch": state.epoch,
        "np_rng": state.rng.bit_generator.state,
        "torch_rng": torch.get_rng_state(),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(blob, tmp)
    tmp.replace(path)
    return path


def restore(path, config: Optional[TrainConfig] = None) -> DualBranchState:
    """Load a checkpoint; if ``config`` is given its NetScale must match the stored one."""
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {blob.get('format')}")
    stored_scale = NetScale.from_dict(blob["scale"])
    cfg = config or TrainConfig.from_dict(blob["config"])
    if cfg.scale != stored_scale:
        raise ValueError(f"{path}: checkpoint NetScale {stored_scale} does not match config {cfg.scale}")
    model = DualBranch(stored_scale)
    model.load_state_dict(blob["model"])
    model.to(cfg.device)
    opt = make_optimizer(model, cfg.lr_init)
    opt.load_state_dict(blob["optimizer"])
    rng = np.random.default_rng()
    rng.bit_generator.state = blob["np_rng"]
    torch.set_rng_state(blob["torch_rng"])
    return DualBranchState(config=cfg, model=model, optimizer=opt, rng=rng, epoch=blob["epoch"])


def load_model(path, device: str = "cpu") -> DualBranch:
    return restore(path, None).model.to(device)
