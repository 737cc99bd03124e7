"""Command-line entry points: ``pylonloc <synth|train|eval|audit> --config FILE [flags]``.

Configs are JSON objects with flat dotted keys (``"train.lr0": 1e-3``); nested
objects are flattened the same way. Flags override file values and the fully
resolved config is written to ``<out>/config.json`` for every run.

Exit codes: 0 ok, 2 configuration, 3 I/O, 4 numerical, 5 missing annotations.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from . import data as D
from .equivariance import AuditConfig, audit_model
from .errors import ConfigurationError, MissingAnnotationError, PylonError
from .evaluation import score_predictions, upsample_heatmaps
from .models import VARIANTS, EncoderConfig, PylonConfig, build_variant, load_model
from .overlay import render_overlay, save_overlay
from .training import TrainConfig, fit, predict

log = logging.getLogger("pylonloc")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERICAL, EXIT_ANNOTATION = 0, 2, 3, 4, 5

DEFAULTS: Dict[str, Any] = {
    "data.dir": "data",
    "synth.n_images": 200,
    "synth.image_size": 64,
    "synth.noise_std": 0.1,
    "synth.background": 0.5,
    "synth.field_amplitude": 0.08,
    "synth.seed": 0,
    "synth.classes": None,  # None: the default big/small pair
    "synth.split": list(D.PAPER_SPLIT),  # fractions summing to 1, or exact counts
    "model.variant": "pylon",
    "model.pad_mode": "zeros",
    "model.dtype": "float32",
    "model.input_size": None,  # None: the dataset's stored image size
    "model.stage_channels": [16, 32, 64, 128],
    "model.decoder_channels": 128,
    "model.norm_groups": 32,
    "train.lr0": 1e-4,
    "train.plateau_factor": 0.2,
    "train.plateau_patience": 1,
    "train.plateau_min_delta": 1e-4,
    "train.stop_lr": 1e-6,
    "train.batch_size": 32,
    "train.max_epochs": 100,
    "train.seed": 0,
    "train.seeds": None,  # list of seeds: one run per seed under seed_<n>/
    "train.augment": True,
    "train.augment_ops": list(D.AUGMENT_OPS),
    "eval.checkpoint": None,  # None: <out>/best.ckpt
    "eval.split": "test",
    "eval.taus": [0.25, 0.5],
    "eval.k": 2,
    "eval.batch_size": 100,
    "audit.checkpoint": None,  # None: a freshly initialized model.variant
    "audit.pad_mode": "circular",
    "audit.dtype": "float64",
    "audit.shifts": None,
    "audit.interior_margin": None,
    "audit.n_trials": 8,
    "audit.seed": 0,
    "audit.tol": 1e-3,
}


# ---------------------------------------------------------------------------
# config handling


def flatten(obj: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    out = {}
    for key, value in obj.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict) and name != "synth.classes":
            out.update(flatten(value, name + "."))
        else:
            out[name] = value
    return out


def load_config(path: Optional[str]) -> Dict[str, Any]:
    cfg = dict(DEFAULTS)
    if path is None:
        return cfg
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigurationError(f"config {path} must be a JSON object")
    flat = flatten(raw)
    unknown = sorted(set(flat) - set(DEFAULTS))
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
    cfg.update(flat)
    return cfg


def parse_seeds(text: str) -> List[int]:
    """``"A..B"`` (inclusive) or a comma-separated list."""
    try:
        if ".." in text:
            a, b = text.split("..", 1)
            lo, hi = int(a), int(b)
            if hi < lo:
                raise ValueError
            return list(range(lo, hi + 1))
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigurationError(f"--seeds expects A..B with A <= B, got {text!r}") from None


def parse_taus(text: str) -> List[float]:
    try:
        taus = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigurationError(f"--taus expects comma-separated numbers, got {text!r}") from None
    if not taus or any(not 0.0 < t < 1.0 for t in taus):
        raise ConfigurationError("--taus values must lie in (0, 1)")
    return taus


def write_config(cfg: Dict[str, Any], out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _section(cfg: Dict[str, Any], name: str) -> Dict[str, Any]:
    prefix = name + "."
    return {k[len(prefix):]: v for k, v in cfg.items() if k.startswith(prefix)}


def _typed(factory, kwargs: Dict[str, Any], what: str):
    try:
        obj = factory(**kwargs)
        if hasattr(obj, "validate"):
            obj.validate()
        return obj
    except TypeError as exc:
        raise ConfigurationError(f"bad {what} settings: {exc}") from exc


def synthetic_config(cfg: Dict[str, Any]) -> D.SyntheticConfig:
    s = _section(cfg, "synth")
    classes = D.default_classes()
    if s["classes"] is not None:
        try:
            classes = [D.BlobClass(c["name"], tuple(c["area_range"]), c.get("kind", "disk"),
                                   tuple(c.get("intensity_range", (0.25, 0.45))), float(c.get("prevalence", 0.5)))
                       for c in s["classes"]]
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"bad synth.classes entry: {exc}") from exc
    return _typed(D.SyntheticConfig, dict(n_images=s["n_images"], image_size=s["image_size"], classes=classes,
                                          noise_std=s["noise_std"], background=s["background"],
                                          field_amplitude=s["field_amplitude"], seed=s["seed"]), "synth")


def train_config(cfg: Dict[str, Any]) -> TrainConfig:
    s = _section(cfg, "train")
    s.pop("seeds")
    s["augment_ops"] = tuple(s["augment_ops"])
    return _typed(TrainConfig, s, "train")


def model_configs(cfg: Dict[str, Any], n_classes: int, input_size: int):
    m = _section(cfg, "model")
    if m["variant"] not in VARIANTS:
        raise ConfigurationError(f"unknown variant {m['variant']!r}; choose from {', '.join(VARIANTS)}")
    enc = _typed(EncoderConfig, dict(stage_channels=tuple(m["stage_channels"]), input_size=input_size), "model")
    pyl = _typed(PylonConfig, dict(n_classes=n_classes, decoder_channels=m["decoder_channels"],
                                   norm_groups=m["norm_groups"]), "model")
    return enc, pyl


def _dtype(name: str):
    if name not in ("float32", "float64"):
        raise ConfigurationError(f"dtype must be float32 or float64, got {name!r}")
    return np.dtype(name)


def _load_split(cfg: Dict[str, Any], split: str, target_size: Optional[int]) -> D.ArrayDataset:
    root = Path(cfg["data.dir"])
    manifest = D.read_manifest(root).subset(split)
    if len(manifest) == 0:
        raise ConfigurationError(f"dataset {root} has no records in split {split!r}")
    return D.load_dataset(manifest, root, target_size)


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: Dict[str, Any], out: Path) -> int:
    syn = synthetic_config(cfg)
    write_config(cfg, out)
    manifest = D.generate_synthetic(syn, out)
    ratios = cfg["synth.split"]
    if all(float(r).is_integer() for r in ratios) and sum(ratios) == syn.n_images:
        parts = D.split_counts(manifest, ratios, seed=syn.seed)
    else:
        parts = D.split(manifest, ratios, seed=syn.seed)
    D.write_manifest(manifest, out)
    labels = manifest.label_matrix()
    print(f"wrote {len(manifest)} images to {out}")
    for name, part in parts.items():
        print(f"  {name}: {len(part)} images")
    for c, name in enumerate(manifest.class_names):
        print(f"  class {name}: {int(labels[:, c].sum())} positives")
    print(f"  manifest digest {_digest(out / 'manifest.csv')}")
    return EXIT_OK


def _train_one(cfg: Dict[str, Any], seed: int, out: Path, train_set, val_set) -> None:
    cfg = dict(cfg, **{"train.seed": seed})
    tcfg = train_config(cfg)
    enc, pyl = model_configs(cfg, len(train_set.class_names), train_set.images.shape[-1])
    model = build_variant(cfg["model.variant"], enc, pyl, seed=seed, pad_mode=cfg["model.pad_mode"],
                          dtype=_dtype(cfg["model.dtype"]))
    write_config(cfg, out)
    res = fit(model, train_set, val_set, tcfg, out_dir=out)
    best = res.log.epochs[res.log.best_epoch]
    print(f"[{cfg['model.variant']} seed {seed}] {len(res.log.epochs)} epochs, "
          f"best epoch {best.epoch} val loss {best.val_loss:.5f} -> {out / 'best.ckpt'}")


def cmd_train(cfg: Dict[str, Any], out: Path) -> int:
    # validate everything that does not need the data before touching it
    train_config(cfg)
    if cfg["model.variant"] not in VARIANTS:
        raise ConfigurationError(f"unknown variant {cfg['model.variant']!r}; choose from {', '.join(VARIANTS)}")
    _dtype(cfg["model.dtype"])
    size = cfg["model.input_size"]
    train_set = _load_split(cfg, "train", size)
    val_set = _load_split(cfg, "val", size)
    seeds = cfg["train.seeds"]
    if seeds is None:
        _train_one(cfg, int(cfg["train.seed"]), out, train_set, val_set)
        return EXIT_OK
    write_config(cfg, out)
    for seed in seeds:
        _train_one(dict(cfg, **{"train.seeds": None}), int(seed), out / f"seed_{seed}", train_set, val_set)
    return EXIT_OK


def _overlay_name(class_name: str, tag: str, rank: int, image_id: str) -> str:
    return f"{class_name}_{tag}{rank}_{image_id}.png"


def cmd_eval(cfg: Dict[str, Any], out: Path) -> int:
    taus = [float(t) for t in cfg["eval.taus"]]
    k = int(cfg["eval.k"])
    if k < 0:
        raise ConfigurationError("eval.k must be >= 0")
    ckpt = Path(cfg["eval.checkpoint"] or out / "best.ckpt")
    model = load_model(ckpt)
    data = _load_split(cfg, cfg["eval.split"], model.enc_cfg.input_size)
    if not any(boxes for boxes in data.boxes):
        raise MissingAnnotationError(f"no bounding boxes for split {cfg['eval.split']!r} in {cfg['data.dir']}")
    write_config(cfg, out)
    bs = int(cfg["eval.batch_size"])
    logits, heat = predict(model, data.images.astype(model.dtype), bs)
    report = score_predictions(logits, heat, data, taus, bs)
    (out / "metrics.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / "metrics.json").write_text(report.to_json() + "\n", encoding="utf-8")
    index = {img_id: i for i, img_id in enumerate(data.ids)}
    size = data.images.shape[-1]
    overlay_dir = out / "overlays"
    overlay_dir.mkdir(exist_ok=True)
    n_written = 0
    for c, name in enumerate(data.class_names):
        recs = [r for r in report.records if r.class_id == c]
        if not recs or k == 0:
            continue
        # rank by the better of IoU / IoR, then point hit; image id breaks ties
        ranked = sorted(recs, key=lambda r: (max(r.iou, r.ior), r.point_hit, r.image_id))
        picks = [("worst", i, r) for i, r in enumerate(ranked[:k])]
        picks += [("best", i, r) for i, r in enumerate(ranked[::-1][:k])]
        for tag, rank, rec in picks:
            i = index[rec.image_id]
            cam = upsample_heatmaps(heat[i : i + 1], size)[0, c]
            rgb = render_overlay(data.images[i, 0], cam, data.boxes[i].get(c, []))
            save_overlay(overlay_dir / _overlay_name(name, tag, rank, rec.image_id), rgb)
            n_written += 1
    print(report.to_csv(), end="")
    for note in report.notes:
        print(f"note: {note}")
    print(f"wrote metrics.csv, metrics.json and {n_written} overlays to {out}")
    return EXIT_OK


def cmd_audit(cfg: Dict[str, Any], out: Path) -> int:
    a = _section(cfg, "audit")
    shifts = [tuple(int(v) for v in s) for s in a["shifts"]] if a["shifts"] else None
    acfg = _typed(AuditConfig, dict(shifts=shifts, pad_mode=a["pad_mode"], interior_margin=a["interior_margin"],
                                    n_trials=a["n_trials"], seed=a["seed"], tol=a["tol"]), "audit")
    if a["checkpoint"]:
        model = load_model(a["checkpoint"])
        if model.pad_mode != acfg.pad_mode and model.pad_mode == "zeros" and acfg.pad_mode == "circular":
            log.warning("auditing a zero-padded model with circular shifts; expect boundary errors")
    else:
        size = cfg["model.input_size"] or 64
        enc, pyl = model_configs(cfg, 2, size)
        model = build_variant(cfg["model.variant"], enc, pyl, seed=int(a["seed"]), pad_mode=acfg.pad_mode,
                              dtype=_dtype(a["dtype"]))
    write_config(cfg, out)
    report = audit_model(model, acfg)
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    print(report.summary())
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pylonloc", description="Weakly-supervised localization toolkit.")
    p.add_argument("command", choices=("synth", "train", "eval", "audit"))
    p.add_argument("--config", required=True, help="JSON config file (flat dotted keys)")
    p.add_argument("--out", default="out", help="output directory (default: ./out)")
    seeds = p.add_mutually_exclusive_group()
    seeds.add_argument("--seed", type=int, help="seed for synth / train / audit")
    seeds.add_argument("--seeds", help="train one run per seed, A..B inclusive, into seed_<n>/ subdirectories")
    p.add_argument("--variant", help=f"model variant: {'|'.join(VARIANTS)}")
    p.add_argument("--taus", help="comma-separated localization thresholds for eval, e.g. 0.25,0.5")
    p.add_argument("--pad", choices=("zeros", "circular"), help="convolution padding mode")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    return p


def apply_flags(cfg: Dict[str, Any], args: argparse.Namespace) -> Dict[str, Any]:
    cfg = dict(cfg)
    if args.seed is not None:
        key = {"synth": "synth.seed", "train": "train.seed", "audit": "audit.seed"}.get(args.command)
        if key is None:
            raise ConfigurationError(f"--seed has no effect on {args.command}")
        cfg[key] = args.seed
    if args.seeds is not None:
        if args.command != "train":
            raise ConfigurationError("--seeds is only valid for train")
        cfg["train.seeds"] = parse_seeds(args.seeds)
    if args.variant is not None:
        cfg["model.variant"] = args.variant
    if args.taus is not None:
        cfg["eval.taus"] = parse_taus(args.taus)
    if args.pad is not None:
        cfg["model.pad_mode"] = args.pad
        cfg["audit.pad_mode"] = args.pad
    return cfg


def run(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    out = Path(args.out)
    try:
        cfg = apply_flags(load_config(args.config), args)
        if args.command == "synth":
            return cmd_synth(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, out)
        if args.command == "eval":
            return cmd_eval(cfg, out)
        return cmd_audit(cfg, out)
    except MissingAnnotationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ANNOTATION
    except (ConfigurationError, ValueError) as exc:
        # non-toolkit ValueErrors here come from malformed config values
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except PylonError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main(argv: Optional[Sequence[str]] = None) -> None:
    sys.exit(run(argv))
