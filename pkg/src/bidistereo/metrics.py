"""Disparity and depth error metrics, SCU, and evaluation reports."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .data import Calibration, StereoSample, disparity_to_depth

OUTLIER_THRESHOLDS = (1, 2, 3, 4)
MIN_DISPARITY = 1e-3


def _errors(disp, gt, mask) -> np.ndarray:
    disp = np.asarray(disp, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    return np.abs(disp[mask] - gt[mask])


def mae(disp, gt, mask) -> float:
    err = _errors(disp, gt, mask)
    return float(err.mean()) if err.size else float("nan")


def rmse(disp, gt, mask) -> float:
    err = _errors(disp, gt, mask)
    return float(np.sqrt((err ** 2).mean())) if err.size else float("nan")


def outlier_pct(disp, gt, mask, n: float) -> float:
    """Percentage of valid pixels whose error is strictly greater than ``n`` px."""
    err = _errors(disp, gt, mask)
    return float(100.0 * (err > n).sum() / err.size) if err.size else float("nan")


def clamped_pixels(disp, mask, eps: float = MIN_DISPARITY) -> int:
    return int((np.asarray(disp)[np.asarray(mask, dtype=bool)] < eps).sum())


def depth_metrics(disp, calibration, gt_depth, mask, eps: float = MIN_DISPARITY) -> tuple[float, float]:
    """Depth MAE and RMSE in the units of ``gt_depth`` after converting ``disp`` with ``f*B/d``."""
    depth = disparity_to_depth(disp, calibration, eps)
    return mae(depth, gt_depth, mask), rmse(depth, gt_depth, mask)


def scu_from_means(mean_confidences: Iterable[float]) -> float:
    return float(sum(mean_confidences))


def scu(model, unlabeled: Sequence[StereoSample], device: str = "cpu") -> float:
    """Sum over samples of the mean confidence of the branch chosen at inference."""
    from .trainer import predict_samples

    return scu_from_means(float(conf.mean()) for _, conf, _ in predict_samples(model, unlabeled, device))


@dataclass
class EvalReport:
    mae_px: float
    rmse_px: float
    outlier_pct: dict
    depth_mae_mm: Optional[float] = None
    depth_rmse_mm: Optional[float] = None
    scu: Optional[float] = None
    clamped_pixels: int = 0
    n_samples: int = 0
    aggregation: str = "sample"
    per_sample: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    def to_csv(self) -> str:
        cols = ["name", "mae_px", "rmse_px"] + [f">{n}px" for n in OUTLIER_THRESHOLDS] + ["depth_mae_mm", "depth_rmse_mm"]
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(cols)
        for row in self.per_sample + [dict(self.to_dict(), name="mean")]:
            out = [row.get("name", ""), row["mae_px"], row["rmse_px"]]
            out += [row["outlier_pct"][str(n)] for n in OUTLIER_THRESHOLDS]
            out += [row.get("depth_mae_mm"), row.get("depth_rmse_mm")]
            w.writerow(out)
        return buf.getvalue()


def _sample_row(name, disp, gt, mask, calib: Optional[Calibration]) -> dict:
    row = {
        "name": name,
        "mae_px": mae(disp, gt, mask),
        "rmse_px": rmse(disp, gt, mask),
        "outlier_pct": {str(n): outlier_pct(disp, gt, mask, n) for n in OUTLIER_THRESHOLDS},
        "n_pixels": int(np.asarray(mask).sum()),
        "clamped_pixels": clamped_pixels(disp, mask),
    }
    if calib is not None:
        gt_depth = disparity_to_depth(np.where(mask, gt, 1.0), calib) * 1000.0
        depth = disparity_to_depth(disp, calib) * 1000.0
        row["depth_mae_mm"] = mae(depth, gt_depth, mask)
        row["depth_rmse_mm"] = rmse(depth, gt_depth, mask)
    return row


def evaluate(predictions: Sequence[np.ndarray], samples: Sequence[StereoSample], aggregate: str = "sample",
             min_valid_fraction: float = 0.0) -> EvalReport:
    """Score predicted disparities against labeled samples.

    ``aggregate="sample"`` averages per-sample metrics; ``"population"`` pools
    all valid pixels. Samples whose valid fraction is at most
    ``min_valid_fraction`` are skipped.
    """
    if aggregate not in ("sample", "population"):
        raise ValueError(f"unknown aggregation {aggregate!r}")
    rows, pooled = [], []
    for disp, s in zip(predictions, samples):
        if not s.labeled:
            continue
        mask = s.valid_mask
        if mask.mean() <= min_valid_fraction or not mask.any():
            continue
        rows.append(_sample_row(s.name, disp, s.gt_disparity, mask, s.calibration))
        pooled.append((np.asarray(disp)[mask], s.gt_disparity[mask]))
    if not rows:
        raise ValueError("no labeled samples with valid pixels to evaluate")
    has_depth = all("depth_mae_mm" in r for r in rows)
    if aggregate == "sample":
        m = lambda k: float(np.mean([r[k] for r in rows]))  # noqa: E731
        out = {str(n): float(np.mean([r["outlier_pct"][str(n)] for r in rows])) for n in OUTLIER_THRESHOLDS}
        report = EvalReport(m("mae_px"), m("rmse_px"), out)
        if has_depth:
            report.depth_mae_mm, report.depth_rmse_mm = m("depth_mae_mm"), m("depth_rmse_mm")
    else:
        d = np.concatenate([p for p, _ in pooled])
        g = np.concatenate([q for _, q in pooled])
        ones = np.ones_like(d, dtype=bool)
        out = {str(n): outlier_pct(d, g, ones, n) for n in OUTLIER_THRESHOLDS}
        report = EvalReport(mae(d, g, ones), rmse(d, g, ones), out)
        if has_depth:
            w = np.array([r["n_pixels"] for r in rows], dtype=np.float64)
            report.depth_mae_mm = float(np.average([r["depth_mae_mm"] for r in rows], weights=w))
            report.depth_rmse_mm = float(np.sqrt(np.average([r["depth_rmse_mm"] ** 2 for r in rows], weights=w)))
    report.per_sample = rows
    report.n_samples = len(rows)
    report.aggregation = aggregate
    report.clamped_pixels = sum(r["clamped_pixels"] for r in rows)
    return report


def evaluate_model(model, samples: Sequence[StereoSample], device: str = "cpu", **kw) -> tuple[EvalReport, list]:
    from .trainer import predict_samples

    preds = list(predict_samples(model, samples, device))
    report = evaluate([p[0] for p in preds], samples, **kw)
    return report, preds
