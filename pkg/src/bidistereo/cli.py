"""Command-line entry points: synth, template, train, eval, infer, report.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import json
import logging
import os
import platform
import shutil
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import __version__
from .data import DataError, read_image, save_dataset, write_image, write_pfm, load_dataset
from .experiments import make_benchmark
from .metrics import evaluate, scu
from .trainer import NumericError, TrainConfig, checkpoint, fit, infer, init_branches, load_model, predict_samples

logger = logging.getLogger("bidistereo")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
ERROR_BANDS_PX = (0.0, 1.0, 2.0, 3.0, 5.0)
ERROR_BAND_COLORS = ("#1a9850", "#91cf60", "#fee08b", "#fc8d59", "#d73027")

# field notes written into generated config templates
CONFIG_NOTES = {
    "warmup_epochs": "supervised-only epochs on labeled data (300 in the reference protocol)",
    "semi_epochs": "epochs mixing labeled and unlabeled batches (100 in the reference protocol)",
    "lr_init": "Adam learning rate, halved every quarter of each stage",
    "batch_size": "3 at full scale",
    "seed": "drives weight init, shuffling and augmentation",
    "seed_a": "re-initializes the last two DEnet layers and the Confnet of branch A",
    "seed_b": "same for branch B; must differ from seed_a",
    "labeled_ratio": "labeled batches per unlabeled batch in the semi stage (1.0 cycles labeled data)",
    "scale": "network widths; full scale is base 32, features 320, compressed 12, 40 groups, S=192",
    "weights.lambda_conf": "weight of the confidence BCE term (8)",
    "augment": "random crop 256x256, horizontal flip with view swap, gamma and brightness",
    "ablation.aps_on": "confidence-weighted value supervision between branches",
    "ablation.acs_on": "confidence-softened distribution supervision between branches",
    "ablation.adaptive_aps": "false: unweighted pseudo-label loss",
    "ablation.adaptive_acs": "false: fixed sharpness unimodal targets",
    "ablation.bidirectional": "false: only branch A teaches branch B",
    "ablation.joint": "false: drop the distribution loss on labeled data",
    "ablation.rho_from": "'student' or 'teacher': whose confidence softens the cross target",
    "pretrained": "optional DEnet state_dict to start both branches from",
    "checkpoint_every": "write checkpoints/epoch_NNNN.pt every N epochs (0 disables)",
    "data.labeled": "manifest of labeled pairs",
    "data.unlabeled": "manifest of unlabeled pairs (labels ignored if present)",
    "data.test": "optional manifest evaluated after training",
}


class ConfigError(ValueError):
    pass


@dataclass
class RunManifest:
    command: str
    config_path: Optional[str]
    out_dir: str
    seed: Optional[int]
    timestamp: str = field(default_factory=lambda: _dt.datetime.now(_dt.timezone.utc).isoformat())
    version: str = __version__
    torch_version: str = torch.__version__
    python: str = platform.python_version()
    deterministic_algorithms: bool = field(default_factory=torch.are_deterministic_algorithms_enabled)
    argv: list = field(default_factory=lambda: list(sys.argv))


# --------------------------------------------------------------------------
# helpers


def _read_json(path) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e


def _strip_notes(d):
    if isinstance(d, dict):
        return {k: _strip_notes(v) for k, v in d.items() if not k.startswith("_")}
    return d


def _device(arg: Optional[str]) -> str:
    dev = arg or os.environ.get("BIDISTEREO_DEVICE") or "cpu"
    if dev.startswith("cuda") and not torch.cuda.is_available():
        raise ConfigError(f"device {dev!r} requested but CUDA is unavailable")
    return dev


def _prepare_out(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise ConfigError(f"{path} exists and is not empty; pass --force to overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _run_dir(args, default_name: str) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get("BIDISTEREO_RUN_DIR")
    if root:
        return Path(root) / default_name
    raise ConfigError("no output directory: pass --out or set BIDISTEREO_RUN_DIR")


def _write_manifest(out: Path, command: str, config_path, seed) -> RunManifest:
    m = RunManifest(command=command, config_path=str(config_path) if config_path else None, out_dir=str(out),
                    seed=seed)
    (out / "run_manifest.json").write_text(json.dumps(asdict(m), indent=2))
    return m


def _colorize(values: np.ndarray, cmap: str, vmin: float, vmax: float) -> np.ndarray:
    import matplotlib

    norm = np.clip((values - vmin) / max(vmax - vmin, 1e-12), 0, 1)
    return matplotlib.colormaps[cmap](norm)[..., :3]


def error_map(disp, gt, mask) -> np.ndarray:
    """RGB image of |disp - gt| quantized into fixed px bands; invalid pixels black."""
    from matplotlib.colors import to_rgb

    err = np.abs(np.asarray(disp, dtype=np.float64) - gt)
    band = np.digitize(err, ERROR_BANDS_PX[1:])
    palette = np.array([to_rgb(c) for c in ERROR_BAND_COLORS])
    rgb = palette[band]
    rgb[~mask] = 0
    return rgb


# --------------------------------------------------------------------------
# commands


def default_config(desk: bool = True) -> dict:
    cfg = TrainConfig.desk() if desk else TrainConfig()
    d = cfg.to_dict()
    d.pop("device")
    d["data"] = {"labeled": "labeled/manifest.json", "unlabeled": "unlabeled/manifest.json",
                 "test": "test/manifest.json"}
    return {"_notes": CONFIG_NOTES, **d}


def cmd_template(args) -> int:
    text = json.dumps(default_config(desk=not args.full), indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def cmd_synth(args) -> int:
    spec = _strip_notes(_read_json(args.config)) if args.config else {}
    allowed = {"n_labeled", "n_unlabeled", "n_test", "height", "width", "s_max", "seed"}
    unknown = set(spec) - allowed
    if unknown:
        raise ConfigError(f"unknown synth fields: {sorted(unknown)}")
    if args.seed is not None:
        spec["seed"] = args.seed
    out = _prepare_out(_run_dir(args, "synth"), args.force)
    _write_manifest(out, "synth", args.config, spec.get("seed", 0))
    try:
        bench = make_benchmark(**spec)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    for split in ("labeled", "unlabeled", "test"):
        samples = getattr(bench, split)
        if samples:
            save_dataset(samples, out / split, prefix=split)
    (out / "synth.json").write_text(json.dumps(spec, indent=2))
    logger.info("wrote %d/%d/%d pairs to %s", len(bench.labeled), len(bench.unlabeled), len(bench.test), out)
    return 0


def _load_train_config(path, seed, device) -> tuple[TrainConfig, dict]:
    raw = _strip_notes(_read_json(path))
    data = raw.pop("data", None)
    if not data or "labeled" not in data:
        raise ConfigError("config needs a data section with at least a 'labeled' manifest")
    base = Path(path).parent
    data = {k: str(base / v) if v else None for k, v in data.items()}
    if seed is not None:
        raw["seed"] = seed
    raw["device"] = device
    try:
        cfg = TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from e
    return cfg, data


def cmd_train(args) -> int:
    device = _device(args.device)
    cfg, data = _load_train_config(args.config, args.seed, device)
    out = _prepare_out(_run_dir(args, _dt.datetime.now().strftime("run_%Y%m%d_%H%M%S")), args.force)
    _write_manifest(out, "train", args.config, cfg.seed)
    (out / "config.json").write_text(json.dumps({**cfg.to_dict(), "data": data}, indent=2))

    labeled = load_dataset(data["labeled"])
    unlabeled = load_dataset(data["unlabeled"]) if data.get("unlabeled") else []
    test = load_dataset(data["test"]) if data.get("test") else []
    if not any(s.labeled for s in labeled):
        raise DataError(f"{data['labeled']}: no labeled samples")

    with open(out / "log.jsonl", "w") as log_file:
        def log(rec):
            log_file.write(json.dumps(rec) + "\n")
            log_file.flush()

        log({"event": "start", "n_labeled": len(labeled), "n_unlabeled": len(unlabeled), "device": device})
        state = init_branches(cfg)
        try:
            fit(state, labeled, unlabeled, log=log, checkpoint_dir=out / "checkpoints")
        except NumericError as e:
            log({"event": "numeric_failure", "epoch": state.epoch, "message": str(e)})
            raise
        checkpoint(state, out / "final.pt")
        report = {"epochs": state.epoch}
        if unlabeled:
            report["scu"] = scu(state.model, unlabeled, device)
        if test:
            preds = [p[0] for p in predict_samples(state.model, test, device)]
            ev = evaluate(preds, test)
            ev.scu = report.get("scu")
            report.update(ev.to_dict())
        report["ablation"] = asdict(cfg.ablation)
        (out / "report.json").write_text(json.dumps(report, indent=2))
        log({"event": "done", **{k: v for k, v in report.items() if k != "per_sample"}})
    return 0


def _predictions_from_manifest(path, samples):
    preds = load_dataset(path)
    if len(preds) != len(samples):
        raise DataError(f"{path}: {len(preds)} predictions for {len(samples)} samples")
    out = []
    for p, s in zip(preds, samples):
        if p.gt_disparity is None:
            raise DataError(f"{path}: entry {p.name} has no disparity")
        if p.shape != s.shape:
            raise DataError(f"{path}: prediction {p.name} shape {p.shape} does not match {s.shape}")
        out.append(p.gt_disparity)
    return out


def cmd_eval(args) -> int:
    if bool(args.checkpoint) == bool(args.predictions):
        raise ConfigError("pass exactly one of --checkpoint or --predictions")
    device = _device(args.device)
    out = _prepare_out(_run_dir(args, "eval"), args.force)
    _write_manifest(out, "eval", args.checkpoint or args.predictions, None)
    samples = load_dataset(args.manifest)
    if args.checkpoint:
        model = load_model(args.checkpoint, device)
        preds = [p[0] for p in predict_samples(model, samples, device)]
    else:
        preds = _predictions_from_manifest(args.predictions, samples)
    try:
        report = evaluate(preds, samples, aggregate=args.aggregate, min_valid_fraction=args.min_valid_fraction)
    except ValueError as e:
        raise DataError(str(e)) from e
    (out / "report.json").write_text(report.to_json(indent=2))
    (out / "report.csv").write_text(report.to_csv())
    if not args.no_images:
        (out / "error_maps").mkdir()
        (out / "disparity").mkdir()
        for i, (d, s) in enumerate(zip(preds, samples)):
            name = s.name or f"{i:05d}"
            vmax = float(max(np.nanmax(d), np.nanmax(s.gt_disparity) if s.labeled else 0, 1.0))
            write_image(out / "disparity" / f"{name}.png", _colorize(np.asarray(d), "magma", 0.0, vmax))
            if s.labeled:
                write_image(out / "error_maps" / f"{name}.png", error_map(d, s.gt_disparity, s.valid_mask))
    print(json.dumps({k: v for k, v in report.to_dict().items() if k != "per_sample"}))
    return 0


def cmd_infer(args) -> int:
    device = _device(args.device)
    out = _prepare_out(_run_dir(args, "infer"), args.force)
    _write_manifest(out, "infer", args.checkpoint, None)
    try:
        left, right = read_image(args.left), read_image(args.right)
    except OSError as e:
        raise DataError(str(e)) from e
    if left.shape != right.shape:
        raise DataError(f"left {left.shape} and right {right.shape} differ")
    model = load_model(args.checkpoint, device)
    to_t = lambda a: torch.from_numpy(np.ascontiguousarray(a.transpose(2, 0, 1))).float().to(device)  # noqa: E731
    disp, conf, chosen = infer(model, to_t(left), to_t(right))
    disp, conf = disp.cpu().numpy(), conf.cpu().numpy()
    if not (np.isfinite(disp).all() and np.isfinite(conf).all()):
        raise NumericError("non-finite prediction")
    write_pfm(out / "disparity.pfm", disp)
    write_image(out / "confidence.png", np.repeat(conf[..., None], 3, axis=2))
    meta = {"chosen_branch": chosen, "mean_confidence": float(conf.mean()), "left": str(args.left),
            "right": str(args.right), "checkpoint": str(args.checkpoint), "shape": list(disp.shape)}
    (out / "meta.json").write_text(json.dumps(meta, indent=2))
    print(json.dumps(meta))
    return 0


REPORT_COLUMNS = ("run", "mae_px", "rmse_px", ">1px", ">2px", ">3px", ">4px", "scu")


def report_rows(run_dirs) -> list[dict]:
    rows = []
    for d in run_dirs:
        path = Path(d) / "report.json"
        try:
            rep = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"{path}: {e}") from e
        if "mae_px" not in rep:
            raise DataError(f"{path}: no test metrics (was a test manifest configured?)")
        row = {"run": Path(d).name, "mae_px": rep["mae_px"], "rmse_px": rep["rmse_px"], "scu": rep.get("scu")}
        for n in (1, 2, 3, 4):
            row[f">{n}px"] = rep["outlier_pct"][str(n)]
        rows.append(row)
    return sorted(rows, key=lambda r: r["mae_px"])


def _fmt(v):
    if v is None:
        return "-"
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def render_markdown(rows) -> str:
    lines = ["| " + " | ".join(REPORT_COLUMNS) + " |", "|" + "---|" * len(REPORT_COLUMNS)]
    for r in rows:
        lines.append("| " + " | ".join(_fmt(r[c]) for c in REPORT_COLUMNS) + " |")
    return "\n".join(lines) + "\n"


def render_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS)
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def cmd_report(args) -> int:
    rows = report_rows(args.runs)
    text = render_csv(rows) if args.format == "csv" else render_markdown(rows)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bidistereo", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required)
        sp.add_argument("--out")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--device")
        sp.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    sp = sub.add_parser("template", help="print a config with every default filled in")
    sp.add_argument("--out")
    sp.add_argument("--full", action="store_true", help="full-scale network instead of the desk preset")
    sp.set_defaults(func=cmd_template)

    sp = sub.add_parser("synth", help="generate a synthetic labeled/unlabeled/test dataset")
    common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="warm-up then semi-supervised training")
    common(sp, config_required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="score a checkpoint or saved predictions")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--predictions", help="manifest whose disparity entries are the predictions")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--aggregate", choices=("sample", "population"), default="sample")
    sp.add_argument("--min-valid-fraction", type=float, default=0.0)
    sp.add_argument("--no-images", action="store_true")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("infer", help="disparity and confidence for one pair")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--left", required=True)
    sp.add_argument("--right", required=True)
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("report", help="compare finished runs, sorted by MAE")
    sp.add_argument("runs", nargs="+")
    sp.add_argument("--format", choices=("md", "csv"), default="md")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
