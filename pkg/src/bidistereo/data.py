"""Stereo samples: synthetic generation with exact ground truth, dataset I/O,
photometric/geometric augmentation and reflective-pixel masking.

Images are float32 ``H x W x 3`` arrays in [0, 1]. Disparities are float32
``H x W`` maps in pixels with the positive convention
``left(x, y) == right(x - d(x, y), y)``.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image


class DataError(Exception):
    """Raised for unreadable files, malformed manifests and inconsistent samples."""


@dataclass
class Calibration:
    focal_px: float
    baseline_m: float

    @classmethod
    def from_dict(cls, d: dict) -> "Calibration":
        return cls(focal_px=float(d["focal_px"]), baseline_m=float(d["baseline_m"]))

    def to_dict(self) -> dict:
        return {"focal_px": self.focal_px, "baseline_m": self.baseline_m}


@dataclass
class StereoSample:
    left: np.ndarray
    right: np.ndarray
    gt_disparity: Optional[np.ndarray] = None
    valid_mask: Optional[np.ndarray] = None
    calibration: Optional[Calibration] = None
    # right-view ground truth; only needed to flip labeled samples consistently
    gt_disparity_right: Optional[np.ndarray] = None
    valid_mask_right: Optional[np.ndarray] = None
    name: str = ""

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise DataError(
                f"left/right shape mismatch {self.left.shape} vs {self.right.shape} ({self.name})"
            )
        if self.gt_disparity is not None:
            if self.gt_disparity.shape != self.left.shape[:2]:
                raise DataError(f"disparity shape {self.gt_disparity.shape} != image {self.left.shape[:2]}")
            if self.valid_mask is None:
                self.valid_mask = np.isfinite(self.gt_disparity) & (self.gt_disparity > 0)

    @property
    def labeled(self) -> bool:
        return self.gt_disparity is not None

    @property
    def shape(self) -> tuple[int, int]:
        return self.left.shape[0], self.left.shape[1]


# --------------------------------------------------------------------------
# synthetic pairs


@dataclass
class SynthSpec:
    height: int = 64
    width: int = 128
    s_max: int = 32
    n_blobs: int = 3
    texture_scale: float = 0.25
    seed: int = 0
    # None draws the base plane offset at random
    base_disparity: Optional[float] = None
    tilt: float = 4.0
    blob_amplitude: float = 8.0
    blob_sigma: float = 0.15
    texture: str = "noise"
    integer_disparity: bool = False
    focal_px: float = 100.0
    baseline_m: float = 0.05

    def validate(self) -> None:
        if self.s_max < 2:
            raise ValueError("s_max must be >= 2")
        if self.height < 1 or self.width < 1:
            raise ValueError("image dimensions must be positive")
        if self.n_blobs < 0:
            raise ValueError("n_blobs must be >= 0")
        if self.texture not in ("noise", "periodic"):
            raise ValueError(f"unknown texture {self.texture!r}")
        base = 0.0 if self.base_disparity is None else self.base_disparity
        if base < 0 or self.tilt < 0 or self.blob_amplitude < 0:
            raise ValueError("disparity parameters must be non-negative")
        amp = self.blob_amplitude if self.n_blobs else 0.0
        if base + self.tilt + amp >= self.s_max:
            raise ValueError(
                f"base {base} + tilt {self.tilt} + bump amplitude {amp} reaches s_max={self.s_max}"
            )

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown SynthSpec fields: {sorted(unknown)}")
        return cls(**d)


def _upsample(grid: np.ndarray, h: int, w: int) -> np.ndarray:
    t = torch.from_numpy(grid[None]).double()
    out = F.interpolate(t, size=(h, w), mode="bicubic", align_corners=True)
    return out[0].numpy()


def _noise_texture(rng: np.random.Generator, h: int, w: int, scale: float) -> np.ndarray:
    cell = max(1.0 / scale, 1.0)
    img = np.zeros((3, h, w))
    for octave, weight in ((1, 0.55), (2, 0.3), (4, 0.15)):
        c = max(cell * octave, 1.0)
        gh, gw = int(np.ceil(h / c)) + 2, int(np.ceil(w / c)) + 2
        up = _upsample(rng.random((3, gh, gw)), int(c * (gh - 1)) + 1, int(c * (gw - 1)) + 1)
        img += weight * up[:, :h, :w]
    img += 0.05 * rng.standard_normal((3, h, w))
    lo, hi = img.min(), img.max()
    img = 0.05 + 0.9 * (img - lo) / max(hi - lo, 1e-12)
    return img.transpose(1, 2, 0)


def _periodic_texture(rng: np.random.Generator, h: int, w: int, scale: float) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    phase = rng.uniform(0, 2 * np.pi, size=3)
    freq = 2 * np.pi * scale
    chans = [
        0.5 + 0.2 * np.sin(freq * xs + phase[c]) + 0.2 * np.cos(0.5 * freq * ys + 1.3 * phase[c])
        for c in range(3)
    ]
    return np.stack(chans, axis=-1)


def _disparity_field(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    if spec.base_disparity is None:
        budget = spec.s_max - 1 - spec.tilt - (spec.blob_amplitude if spec.n_blobs else 0.0)
        base = rng.uniform(0.0, max(budget, 0.0))
    else:
        base = float(spec.base_disparity)
    gx, gy = rng.uniform(-1, 1, size=2)
    norm = abs(gx) + abs(gy)
    plane = base + (0.0 if norm == 0 else spec.tilt / norm) * (
        abs(gx) * (xs / max(w - 1, 1) if gx > 0 else 1 - xs / max(w - 1, 1))
        + abs(gy) * (ys / max(h - 1, 1) if gy > 0 else 1 - ys / max(h - 1, 1))
    )
    bumps = np.zeros((h, w))
    sigma = spec.blob_sigma * min(h, w)
    for _ in range(spec.n_blobs):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        amp = rng.uniform(0.3, 1.0) * spec.blob_amplitude
        bumps += amp * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sigma**2))
    bumps = np.clip(bumps, 0.0, spec.blob_amplitude)
    disp = np.clip(plane + bumps, 0.0, spec.s_max - 1)
    if spec.integer_disparity:
        disp = np.round(disp)
    return disp


def sample_row_bilinear(row: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Linear interpolation of ``row`` (W or W x C) at fractional columns ``u``, border-clamped."""
    w = row.shape[0]
    u = np.clip(u, 0.0, w - 1)
    u0 = np.floor(u).astype(np.int64)
    u1 = np.minimum(u0 + 1, w - 1)
    t = u - u0
    if row.ndim == 2:
        t = t[:, None]
    return (1 - t) * row[u0] + t * row[u1]


def warp_right_to_left(right: np.ndarray, disparity: np.ndarray) -> np.ndarray:
    """Reconstruct the left view by sampling ``right`` at ``x - disparity``."""
    h, w = disparity.shape
    xs = np.arange(w, dtype=np.float64)
    out = np.empty(right.shape, dtype=np.float64)
    for y in range(h):
        out[y] = sample_row_bilinear(right[y].astype(np.float64), xs - disparity[y])
    return out


def _left_visibility(disp: np.ndarray) -> np.ndarray:
    h, w = disp.shape
    u = np.arange(w)[None, :] - disp
    # a pixel is hidden if some pixel to its right lands at or left of its match
    suffix = np.minimum.accumulate(u[:, ::-1], axis=1)[:, ::-1]
    later = np.full_like(u, np.inf)
    later[:, :-1] = suffix[:, 1:]
    return (u >= 0) & (later > u)


def _right_view_disparity(disp: np.ndarray, visible: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h, w = disp.shape
    out = np.zeros((h, w))
    valid = np.zeros((h, w), dtype=bool)
    cols = np.arange(w, dtype=np.float64)
    for y in range(h):
        u = cols - disp[y]
        u0, u1 = u[:-1], u[1:]
        d0, d1 = disp[y, :-1], disp[y, 1:]
        span = u1 - u0
        ok_seg = (span > 0) & (span < 2) & visible[y, :-1] & visible[y, 1:]
        best = np.full(w, -np.inf)
        # segment interpolation (W x W-1 brute force, rows are short)
        target = cols[:, None]
        inside = ok_seg[None, :] & (target >= u0[None, :]) & (target <= u1[None, :])
        t = np.where(inside, (target - u0[None, :]) / np.where(span > 0, span, 1)[None, :], 0)
        cand = np.where(inside, d0[None, :] + t * (d1 - d0)[None, :], -np.inf)
        best = np.maximum(best, cand.max(axis=1) if cand.shape[1] else best)
        # exact landings of visible pixels
        hit = visible[y] & (np.abs(u - np.round(u)) < 1e-9) & (u >= 0)
        for x in np.flatnonzero(hit):
            k = int(round(u[x]))
            best[k] = max(best[k], disp[y, x])
        found = np.isfinite(best)
        out[y, found] = best[found]
        valid[y] = found
    return out, valid


def generate_synthetic_pair(spec: SynthSpec) -> StereoSample:
    """Render a rectified pair with exact left-view disparity.

    The right view carries the procedural texture; the left view is obtained
    by bilinear inverse warping of it, so ``left(x) == right(x - d(x))`` holds
    to rounding on every valid pixel.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    disp = _disparity_field(spec, rng)
    if spec.texture == "noise":
        right = _noise_texture(rng, h, w, spec.texture_scale)
    else:
        right = _periodic_texture(rng, h, w, spec.texture_scale)
    right = np.clip(right, 0.0, 1.0)
    left = warp_right_to_left(right, disp)
    visible = _left_visibility(disp)
    disp_r, valid_r = _right_view_disparity(disp, visible)
    return StereoSample(
        left=left.astype(np.float32),
        right=right.astype(np.float32),
        gt_disparity=disp.astype(np.float32),
        valid_mask=visible,
        calibration=Calibration(spec.focal_px, spec.baseline_m),
        gt_disparity_right=disp_r.astype(np.float32),
        valid_mask_right=valid_r,
        name=f"synth_{spec.seed}",
    )


# --------------------------------------------------------------------------
# disparity / depth


def _calib(calibration) -> Calibration:
    if calibration is None:
        raise ValueError("calibration is required for depth/disparity conversion")
    if isinstance(calibration, dict):
        return Calibration.from_dict(calibration)
    return calibration


def depth_to_disparity(depth: np.ndarray, calibration) -> np.ndarray:
    """``f * B / z``; NaN where depth is non-positive or non-finite."""
    c = _calib(calibration)
    depth = np.asarray(depth, dtype=np.float64)
    ok = np.isfinite(depth) & (depth > 0)
    out = np.full(depth.shape, np.nan)
    out[ok] = c.focal_px * c.baseline_m / depth[ok]
    return out


def disparity_to_depth(disparity: np.ndarray, calibration, eps: float = 1e-3) -> np.ndarray:
    c = _calib(calibration)
    d = np.maximum(np.asarray(disparity, dtype=np.float64), eps)
    return c.focal_px * c.baseline_m / d


# --------------------------------------------------------------------------
# masking


def reflective_mask(image: np.ndarray, sat_thresh: float = 0.1, val_thresh: float = 0.9) -> np.ndarray:
    """True on specular pixels: HSV saturation < 0.1 and value > 0.9."""
    image = np.asarray(image, dtype=np.float64)
    vmax = image.max(axis=-1)
    vmin = image.min(axis=-1)
    sat = np.divide(vmax - vmin, vmax, out=np.zeros_like(vmax), where=vmax > 0)
    return (sat < sat_thresh) & (vmax > val_thresh)


# --------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    crop_h: int = 256
    crop_w: int = 256
    flip_prob: float = 0.5
    gamma_range: tuple[float, float] = (0.8, 1.2)
    brightness_range: tuple[float, float] = (0.8, 1.2)

    def __post_init__(self):
        self.gamma_range = tuple(self.gamma_range)
        self.brightness_range = tuple(self.brightness_range)
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must lie in [0, 1]")
        for name in ("gamma_range", "brightness_range"):
            lo, hi = getattr(self, name)
            if not lo <= 1.0 <= hi or lo <= 0:
                raise ValueError(f"{name} must be positive and contain 1.0, got {(lo, hi)}")
        if self.crop_h < 1 or self.crop_w < 1:
            raise ValueError("crop dimensions must be positive")


def _mirror(a: Optional[np.ndarray]) -> Optional[np.ndarray]:
    return None if a is None else np.ascontiguousarray(a[:, ::-1])


def hflip(sample: StereoSample) -> StereoSample:
    """Horizontal flip that keeps disparities positive.

    Views are swapped and mirrored, so the new left view is the mirrored old
    right view and its ground truth is the mirrored right-view disparity.
    Labeled samples without right-view ground truth cannot be flipped.
    """
    if sample.labeled and sample.gt_disparity_right is None:
        raise ValueError("flipping a labeled sample requires right-view disparity")
    return replace(
        sample,
        left=_mirror(sample.right),
        right=_mirror(sample.left),
        gt_disparity=_mirror(sample.gt_disparity_right),
        valid_mask=_mirror(sample.valid_mask_right),
        gt_disparity_right=_mirror(sample.gt_disparity),
        valid_mask_right=_mirror(sample.valid_mask),
    )


def crop(sample: StereoSample, top: int, left: int, h: int, w: int) -> StereoSample:
    H, W = sample.shape
    if h > H or w > W:
        raise ValueError(f"crop {h}x{w} larger than image {H}x{W}")
    sl = (slice(top, top + h), slice(left, left + w))

    def c(a):
        return None if a is None else np.ascontiguousarray(a[sl])

    return replace(
        sample,
        left=c(sample.left),
        right=c(sample.right),
        gt_disparity=c(sample.gt_disparity),
        valid_mask=c(sample.valid_mask),
        gt_disparity_right=c(sample.gt_disparity_right),
        valid_mask_right=c(sample.valid_mask_right),
    )


def photometric(sample: StereoSample, gamma: float, brightness: float) -> StereoSample:
    def adj(img):
        return np.clip((img ** gamma) * brightness, 0.0, 1.0).astype(np.float32)

    if gamma == 1.0 and brightness == 1.0:
        return sample
    return replace(sample, left=adj(sample.left), right=adj(sample.right))


def augment(sample: StereoSample, cfg: AugmentConfig, rng: np.random.Generator) -> StereoSample:
    H, W = sample.shape
    if cfg.crop_h > H or cfg.crop_w > W:
        raise ValueError(f"image {H}x{W} smaller than crop {cfg.crop_h}x{cfg.crop_w}")
    top = int(rng.integers(0, H - cfg.crop_h + 1))
    lft = int(rng.integers(0, W - cfg.crop_w + 1))
    out = crop(sample, top, lft, cfg.crop_h, cfg.crop_w)
    if rng.random() < cfg.flip_prob and (not out.labeled or out.gt_disparity_right is not None):
        out = hflip(out)
    gamma = float(rng.uniform(*cfg.gamma_range))
    bright = float(rng.uniform(*cfg.brightness_range))
    return photometric(out, gamma, bright)


# --------------------------------------------------------------------------
# file formats


def read_pfm(path) -> np.ndarray:
    path = Path(path)
    try:
        with open(path, "rb") as f:
            header = f.readline().decode("latin-1").rstrip()
            if header not in ("PF", "Pf"):
                raise DataError(f"{path}: not a PFM file")
            dims = f.readline().decode("latin-1")
            while dims.startswith("#"):
                dims = f.readline().decode("latin-1")
            m = re.match(r"^(\d+)\s+(\d+)\s*$", dims)
            if not m:
                raise DataError(f"{path}: malformed PFM header")
            w, h = int(m.group(1)), int(m.group(2))
            scale = float(f.readline().decode("latin-1").strip())
            endian = "<" if scale < 0 else ">"
            data = np.fromfile(f, dtype=endian + "f4")
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    chans = 3 if header == "PF" else 1
    if data.size != w * h * chans:
        raise DataError(f"{path}: expected {w * h * chans} values, got {data.size}")
    data = data.reshape(h, w, chans) if chans == 3 else data.reshape(h, w)
    return np.ascontiguousarray(np.flipud(data)).astype(np.float32)


def write_pfm(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype="<f4")
    color = array.ndim == 3
    h, w = array.shape[:2]
    with open(path, "wb") as f:
        f.write(b"PF\n" if color else b"Pf\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        np.flipud(array).tofile(f)


def read_disparity_png(path) -> np.ndarray:
    try:
        raw = np.array(Image.open(path))
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    return raw.astype(np.float32) / 256.0


def write_disparity_png(path, disparity: np.ndarray) -> None:
    d = np.nan_to_num(np.asarray(disparity, dtype=np.float64), nan=0.0)
    Image.fromarray(np.clip(np.round(d * 256.0), 0, 65535).astype(np.uint16)).save(path)


def read_image(path) -> np.ndarray:
    try:
        img = Image.open(path).convert("RGB")
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    return np.asarray(img, dtype=np.float32) / 255.0


def write_image(path, image: np.ndarray) -> None:
    Image.fromarray(np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)).save(path)


def read_mask(path) -> np.ndarray:
    try:
        return np.array(Image.open(path).convert("L")) > 127
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path)


def read_disparity(path) -> tuple[np.ndarray, np.ndarray]:
    """Disparity map plus validity (finite and non-zero) from PFM or 16-bit PNG."""
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        d = read_pfm(path)
    elif path.suffix.lower() == ".png":
        d = read_disparity_png(path)
    else:
        raise DataError(f"{path}: unsupported disparity format")
    valid = np.isfinite(d) & (d > 0)
    return np.where(valid, d, 0.0).astype(np.float32), valid


# --------------------------------------------------------------------------
# manifests


def load_dataset(manifest_path) -> list[StereoSample]:
    """Read a JSON manifest of ``{left, right, disparity?, depth?, calib?, ...}`` entries.

    Relative paths resolve against the manifest's directory. Entries without
    ``disparity`` or ``depth`` yield unlabeled samples.
    """
    manifest_path = Path(manifest_path)
    try:
        entries = json.loads(manifest_path.read_text())
    except OSError as e:
        raise DataError(f"cannot read manifest {manifest_path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"malformed manifest {manifest_path}: {e}") from e
    if not isinstance(entries, list):
        raise DataError(f"{manifest_path}: manifest must be a JSON list")
    root = manifest_path.parent

    def p(rel):
        return root / rel

    samples = []
    for i, e in enumerate(entries):
        try:
            left, right = read_image(p(e["left"])), read_image(p(e["right"]))
        except KeyError as err:
            raise DataError(f"{manifest_path}: entry {i} lacks {err}") from err
        if left.shape != right.shape:
            raise DataError(f"{e['left']} and {e['right']} differ in shape {left.shape} vs {right.shape}")
        calib = e.get("calib")
        if isinstance(calib, str):
            try:
                calib = json.loads(p(calib).read_text())
            except (OSError, json.JSONDecodeError) as err:
                raise DataError(f"cannot read calibration {p(calib)}: {err}") from err
        calib = Calibration.from_dict(calib) if calib else None

        disp = valid = None
        if e.get("disparity"):
            disp, valid = read_disparity(p(e["disparity"]))
        elif e.get("depth"):
            if calib is None:
                raise DataError(f"{manifest_path}: entry {i} has depth but no calibration")
            depth_path = p(e["depth"])
            depth = read_pfm(depth_path) if depth_path.suffix.lower() == ".pfm" else read_disparity_png(depth_path)
            disp = depth_to_disparity(depth, calib)
            valid = np.isfinite(disp)
            disp = np.where(valid, disp, 0.0).astype(np.float32)
        if disp is not None and disp.shape != left.shape[:2]:
            raise DataError(f"{manifest_path}: entry {i} disparity shape {disp.shape} != image {left.shape[:2]}")
        if disp is not None and e.get("mask"):
            valid = read_mask(p(e["mask"])) & np.isfinite(disp)

        disp_r = valid_r = None
        if disp is not None and e.get("disparity_right"):
            disp_r, valid_r = read_disparity(p(e["disparity_right"]))
            if e.get("mask_right"):
                valid_r = read_mask(p(e["mask_right"]))
        samples.append(
            StereoSample(
                left=left, right=right, gt_disparity=disp, valid_mask=valid, calibration=calib,
                gt_disparity_right=disp_r, valid_mask_right=valid_r,
                name=e.get("name", Path(e["left"]).stem),
            )
        )
    return samples


def save_dataset(samples: Sequence[StereoSample], out_dir, manifest_name: str = "manifest.json",
                 prefix: str = "") -> Path:
    """Write images (PNG), disparities (PFM), masks (PNG) and a manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        stem = f"{prefix}{i:04d}"
        e = {"name": s.name or stem, "left": f"{stem}_left.png", "right": f"{stem}_right.png"}
        write_image(out_dir / e["left"], s.left)
        write_image(out_dir / e["right"], s.right)
        if s.labeled:
            e["disparity"] = f"{stem}_disp.pfm"
            e["mask"] = f"{stem}_mask.png"
            write_pfm(out_dir / e["disparity"], s.gt_disparity)
            write_mask(out_dir / e["mask"], s.valid_mask)
            if s.gt_disparity_right is not None:
                e["disparity_right"] = f"{stem}_disp_right.pfm"
                e["mask_right"] = f"{stem}_mask_right.png"
                write_pfm(out_dir / e["disparity_right"], s.gt_disparity_right)
                write_mask(out_dir / e["mask_right"], s.valid_mask_right)
        if s.calibration is not None:
            e["calib"] = s.calibration.to_dict()
        entries.append(e)
    path = out_dir / manifest_name
    path.write_text(json.dumps(entries, indent=2))
    return path


def drop_labels(sample: StereoSample) -> StereoSample:
    return replace(sample, gt_disparity=None, valid_mask=None, gt_disparity_right=None, valid_mask_right=None)


def to_tensors(samples: Sequence[StereoSample], s_max: Optional[int] = None):
    """Stack samples into ``(left, right, disparity, mask)`` batch tensors.

    Images become ``B x 3 x H x W``; disparity and mask are ``None`` when the
    batch is unlabeled. Pixels beyond ``s_max - 1`` and reflective pixels of
    the left view are removed from the mask.
    """
    left = torch.from_numpy(np.stack([s.left for s in samples]).transpose(0, 3, 1, 2).copy()).float()
    right = torch.from_numpy(np.stack([s.right for s in samples]).transpose(0, 3, 1, 2).copy()).float()
    refl = torch.from_numpy(np.stack([reflective_mask(s.left) for s in samples]))
    if all(s.labeled for s in samples):
        disp = torch.from_numpy(np.stack([s.gt_disparity for s in samples]).astype(np.float32))
        mask = torch.from_numpy(np.stack([s.valid_mask for s in samples])) & ~refl
        if s_max is not None:
            mask &= disp <= s_max - 1
        disp = torch.where(mask, disp, torch.zeros_like(disp))
        return left, right, disp, mask
    return left, right, None, ~refl
