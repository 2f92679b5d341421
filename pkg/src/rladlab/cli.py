"""Command line entry point wiring all stages into reproducible pipelines.

Every subcommand resolves its configuration as defaults < config file <
explicit flags, rejects unknown config keys, and dumps the resolved config
(plus content hashes of any input checkpoints) next to its outputs before
doing work.  Exit codes: 0 success, 1 operational failure, 2 usage errors.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, RladError
from .utils import read_json, write_json

_SUBCOMMANDS = (
    "toydata",
    "train-ae",
    "train-diffusion",
    "generate",
    "train-seg",
    "extract-layout",
    "eval-seg",
    "eval-gen",
    "vasculometry",
    "repro",
)


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < config file < explicitly passed flags."""
    provided = {k: v for k, v in vars(args).items() if k not in ("func", "config") and v is not argparse.SUPPRESS}
    resolved = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path and config_path is not argparse.SUPPRESS:
        file_cfg = read_json(config_path)
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        resolved.update(file_cfg)
    resolved.update(provided)
    return resolved


def _dump_provenance(out: Path, resolved: dict, input_hashes: dict | None = None) -> None:
    out = Path(out)
    target = out if out.suffix == "" else out.parent
    payload = {"resolved_config": {k: v for k, v in resolved.items() if not callable(v)}}
    if input_hashes:
        payload["input_hashes"] = input_hashes
    write_json(target / "resolved_config.json", payload)


def _parse_triplet(text: str, name: str) -> tuple:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise ConfigError(f"{name} needs three comma-separated values, got {text!r}")
    return tuple(parts)


# ---------------------------------------------------------------------------
# subcommand implementations


def _cmd_toydata(args):
    from .toydata import make_dataset

    defaults = {"n": 100, "seed": 0, "out": "toyset", "domain": "source", "canvas": 64, "splits": "0.8,0.1,0.1"}
    cfg = _resolve(args, defaults)
    splits = _parse_triplet(str(cfg["splits"]), "--splits")
    _dump_provenance(Path(cfg["out"]), cfg)
    manifest = make_dataset(int(cfg["n"]), splits, cfg["domain"], cfg["out"], seed=int(cfg["seed"]), canvas=int(cfg["canvas"]))
    print(f"wrote {len(manifest.records)} records to {cfg['out']}")
    return 0


def _cmd_train_ae(args):
    from .codec import CodecTrainConfig, train_codec
    from .toydata import load_manifest

    defaults = {"data": None, "out": "codec.pt", "epochs": 60, "seed": 0, "lr": 1e-3}
    cfg = _resolve(args, defaults)
    if not cfg["data"]:
        raise ConfigError("--data is required")
    _dump_provenance(Path(cfg["out"]).parent, cfg)
    codec = train_codec(
        load_manifest(cfg["data"]),
        CodecTrainConfig(epochs=int(cfg["epochs"]), lr=float(cfg["lr"]), seed=int(cfg["seed"]), include_layout_renders=False),
        out=cfg["out"],
    )
    print(f"codec PSNR {codec.meta['val_psnr']:.2f} dB -> {cfg['out']} ({codec.content_hash[:12]})")
    return 0


def _cmd_train_diffusion(args):
    from .codec import load_codec
    from .toydata import load_manifest
    from .training import DiffusionTrainConfig, fit

    defaults = {
        "data": None,
        "ae": None,
        "out": "diffusion",
        "steps": 20_000,
        "batch": 12,
        "lr": 1e-4,
        "pmask": "0.5,0.5,0.5",
        "seed": 0,
        "t_steps": 1000,
        "beta_start": 1e-4,
        "beta_end": 0.02,
        "resume": None,
    }
    cfg = _resolve(args, defaults)
    if not cfg["data"] or not cfg["ae"]:
        raise ConfigError("--data and --ae are required")
    codec = load_codec(cfg["ae"])
    _dump_provenance(Path(cfg["out"]), cfg, {"codec": codec.content_hash})
    train_cfg = DiffusionTrainConfig(
        steps=int(cfg["steps"]),
        lr=float(cfg["lr"]),
        batch=int(cfg["batch"]),
        p_mask=_parse_triplet(str(cfg["pmask"]), "--pmask"),
        T=int(cfg["t_steps"]),
        beta_start=float(cfg["beta_start"]),
        beta_end=float(cfg["beta_end"]),
        seed=int(cfg["seed"]),
    )
    _model, meta = fit(load_manifest(cfg["data"]), train_cfg, codec, cfg["out"], resume=cfg["resume"])
    print(f"final loss {meta['final_loss']}, checkpoint {meta['content_hash'][:12]} -> {cfg['out']}")
    return 0


def _cmd_generate(args):
    from .codec import load_codec
    from .denoiser import load_denoiser
    from .sampling import SamplerConfig, generate_paired_dataset
    from .toydata import load_manifest

    defaults = {"ckpt": None, "ae": None, "layouts": None, "out": "synthetic", "w": 2.0, "n_per_image": 15, "seed": 0, "vary": "CD,L", "batch": 120, "limit": None}
    cfg = _resolve(args, defaults)
    for key in ("ckpt", "ae", "layouts"):
        if not cfg[key]:
            raise ConfigError(f"--{key} is required")
    model, meta = load_denoiser(cfg["ckpt"])
    codec = load_codec(cfg["ae"])
    _dump_provenance(Path(cfg["out"]), cfg, {"denoiser": meta["content_hash"], "codec": codec.content_hash})
    manifest = load_manifest(cfg["layouts"])
    records = manifest.records if cfg["limit"] is None else manifest.records[: int(cfg["limit"])]
    vary = tuple(v for v in str(cfg["vary"]).split(",") if v)
    report = generate_paired_dataset(
        manifest,
        model,
        codec,
        cfg["out"],
        n_per_image=int(cfg["n_per_image"]),
        vary=vary,
        cfg=SamplerConfig(guidance=float(cfg["w"]), seed=int(cfg["seed"]), batch=int(cfg["batch"])),
        records=records,
    )
    print(f"generated {report['generated']} images ({report['skipped']} skipped) -> {cfg['out']}")
    return 0


def _cmd_train_seg(args):
    from .segmentation import (
        MAETrainConfig,
        SegTrainConfig,
        mae_pretrain,
        seg_data_from_manifest,
        seg_data_from_synthetic,
        train_segmenter,
    )
    from .toydata import load_manifest

    defaults = {
        "real": None,
        "synthetic": None,
        "lam": 0.1,
        "epochs": 200,
        "seed": 0,
        "pretrain": "none",
        "out": "segmenter.pt",
        "encoder": "unet",
        "n_real": None,
        "n_per_source": None,
    }
    cfg = _resolve(args, defaults)
    if not cfg["real"]:
        raise ConfigError("--real is required")
    if cfg["pretrain"] not in ("none", "mae"):
        raise ConfigError("--pretrain must be none or mae")
    _dump_provenance(Path(cfg["out"]).parent, cfg)
    manifest = load_manifest(cfg["real"])
    real = seg_data_from_manifest(manifest, "train", limit=None if cfg["n_real"] is None else int(cfg["n_real"]))
    val = seg_data_from_manifest(manifest, "val")
    synthetic = None
    if cfg["synthetic"]:
        limit = None if cfg["n_per_source"] is None else int(cfg["n_per_source"])
        synthetic = seg_data_from_synthetic(cfg["synthetic"], limit_per_source=limit)
    pretrained = None
    if cfg["pretrain"] == "mae":
        pretrained, _ = mae_pretrain(seg_data_from_manifest(manifest, "train"), MAETrainConfig(seed=int(cfg["seed"]), encoder=cfg["encoder"]))
    ckpt = train_segmenter(
        real,
        val,
        synthetic,
        SegTrainConfig(epochs=int(cfg["epochs"]), lam=float(cfg["lam"]), seed=int(cfg["seed"]), encoder=cfg["encoder"]),
        pretrained_encoder=pretrained,
    )
    ckpt.save(cfg["out"])
    print(f"best val dice {ckpt.best_val_dice:.4f}, checkpoint {ckpt.content_hash[:12]} -> {cfg['out']}")
    return 0


def _cmd_extract_layout(args):
    from .segmentation import extract_layout, load_seg_checkpoint
    from .toydata import load_image_png, save_bundle_pngs

    defaults = {"ckpt": None, "input": None, "out": "layout", "mode": "oracle"}
    cfg = _resolve(args, defaults)
    if not cfg["input"]:
        raise ConfigError("--in is required")
    seg = load_seg_checkpoint(cfg["ckpt"]) if cfg["ckpt"] else None
    bundle = extract_layout(load_image_png(cfg["input"]), seg=seg, mode=cfg["mode"])
    save_bundle_pngs(cfg["out"], bundle)
    print(f"extracted layout -> {cfg['out']}_{{av,cd,lesions}}.png (present={bundle.present.astuple()})")
    return 0


def _cmd_eval_seg(args):
    from .metrics import MetricsReport
    from .segmentation import evaluate_segmenter, load_seg_checkpoint, seg_data_from_manifest
    from .toydata import load_manifest
    from .utils import hash_json

    defaults = {"ckpt": None, "datasets": None, "out": "report.json", "split": "test"}
    cfg = _resolve(args, defaults)
    if not cfg["ckpt"] or not cfg["datasets"]:
        raise ConfigError("--ckpt and --datasets are required")
    ckpt = load_seg_checkpoint(cfg["ckpt"])
    model = ckpt.build()
    report = MetricsReport(config_hash=hash_json({"ckpt": ckpt.content_hash, "split": cfg["split"]}))
    entries = cfg["datasets"] if isinstance(cfg["datasets"], list) else str(cfg["datasets"]).split(",")
    for entry in entries:
        name, _, root = entry.partition("=")
        if not root:
            name, root = Path(entry).name, entry
        data = seg_data_from_manifest(load_manifest(root), cfg["split"])
        scores = evaluate_segmenter(model, data)
        report.add(name, scores, scores.pop("n"))
    write_json(cfg["out"], report.to_json())
    print(f"wrote {cfg['out']}")
    return 0


def _cmd_eval_gen(args):
    from .codec import load_codec
    from .metrics import feature_encode, frechet_distance
    from .toydata import load_image_png, load_manifest, load_record_image

    defaults = {"real": None, "gen": None, "ae": None, "out": "report.json", "split": "test"}
    cfg = _resolve(args, defaults)
    if not cfg["real"] or not cfg["gen"] or not cfg["ae"]:
        raise ConfigError("--real, --gen and --ae are required")
    codec = load_codec(cfg["ae"])
    real_manifest = load_manifest(cfg["real"])
    real = np.stack([load_record_image(real_manifest, r) for r in real_manifest.split(cfg["split"])])
    gen_root = Path(cfg["gen"])
    gen_entries = read_json(gen_root / "manifest.json")["records"]
    gen = np.stack([load_image_png(gen_root / e["image"]) for e in gen_entries])
    fd = frechet_distance(feature_encode(gen, codec), feature_encode(real, codec))
    payload = {"fd": fd, "n_real": len(real), "n_gen": len(gen), "encoder": codec.content_hash}
    write_json(cfg["out"], payload)
    print(f"fd {fd:.4f} -> {cfg['out']}")
    return 0


def _cmd_vasculometry(args):
    from .segmentation import load_seg_checkpoint, predict_probs
    from .toydata import load_bundle_pngs, load_manifest, load_record_image
    from .vasculometry import PARAM_KEYS, correlation_report

    defaults = {"gt": None, "pred": None, "ckpt": None, "out": "table.csv", "split": "test"}
    cfg = _resolve(args, defaults)
    if not cfg["gt"] or (not cfg["pred"] and not cfg["ckpt"]):
        raise ConfigError("--gt plus one of --pred / --ckpt are required")
    manifest = load_manifest(cfg["gt"])
    records = manifest.split(cfg["split"])
    gt_masks = [load_bundle_pngs(manifest.root / r.layout).av for r in records]
    if cfg["ckpt"]:
        model = load_seg_checkpoint(cfg["ckpt"]).build()
        images = np.stack([load_record_image(manifest, r) for r in records])
        pred_masks = list(predict_probs(model, images) >= 0.5)
    else:
        other = load_manifest(cfg["pred"])
        pred_masks = [load_bundle_pngs(other.root / r.layout).av for r in other.split(cfg["split"])]
    table = correlation_report(gt_masks, pred_masks)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(PARAM_KEYS))
        writer.writerow([f"{table.get(k, float('nan')):.6f}" for k in PARAM_KEYS])
    print(f"wrote {out}")
    return 0


def _cmd_repro(args):
    from .repro import FULL, QUICK, ReproPipeline, format_summary_table, load_repro_config

    defaults = {"out": "repro_run", "quick": False}
    cfg = _resolve(args, defaults)
    preset = QUICK if cfg["quick"] else FULL
    config_path = getattr(args, "config", None)
    if config_path and config_path is not argparse.SUPPRESS:
        preset = load_repro_config(config_path)
    pipeline = ReproPipeline(cfg["out"], preset)
    summary = pipeline.run()
    print(format_summary_table(summary))
    return 0 if summary["all_passed"] else 1


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rladlab", description="Layout-conditioned latent diffusion lab")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{" + ",".join(_SUBCOMMANDS) + "}")

    def add(name, fn, flags):
        p = sub.add_parser(name)
        p.add_argument("--config", default=argparse.SUPPRESS, help="JSON config file (flags win)")
        for flag, kwargs in flags.items():
            kwargs.setdefault("default", argparse.SUPPRESS)
            p.add_argument(flag, **kwargs)
        p.set_defaults(func=fn)
        return p

    add("toydata", _cmd_toydata, {
        "--n": {"type": int},
        "--seed": {"type": int},
        "--out": {},
        "--domain": {"choices": ["source", "shifted"]},
        "--canvas": {"type": int},
        "--splits": {},
    })
    add("train-ae", _cmd_train_ae, {
        "--data": {},
        "--out": {},
        "--epochs": {"type": int},
        "--seed": {"type": int},
        "--lr": {"type": float},
    })
    add("train-diffusion", _cmd_train_diffusion, {
        "--data": {},
        "--ae": {},
        "--out": {},
        "--steps": {"type": int},
        "--batch": {"type": int},
        "--lr": {"type": float},
        "--pmask": {},
        "--seed": {"type": int},
        "--t-steps": {"type": int, "dest": "t_steps"},
        "--beta-start": {"type": float, "dest": "beta_start"},
        "--beta-end": {"type": float, "dest": "beta_end"},
        "--resume": {},
    })
    add("generate", _cmd_generate, {
        "--ckpt": {},
        "--ae": {},
        "--layouts": {},
        "--out": {},
        "--w": {"type": float},
        "--n-per-image": {"type": int, "dest": "n_per_image"},
        "--seed": {"type": int},
        "--vary": {},
        "--batch": {"type": int},
        "--limit": {"type": int},
    })
    add("train-seg", _cmd_train_seg, {
        "--real": {},
        "--synthetic": {},
        "--lambda": {"type": float, "dest": "lam"},
        "--epochs": {"type": int},
        "--seed": {"type": int},
        "--pretrain": {"choices": ["none", "mae"]},
        "--out": {},
        "--encoder": {"choices": ["unet", "dilated"]},
        "--n-real": {"type": int, "dest": "n_real"},
        "--n-per-source": {"type": int, "dest": "n_per_source"},
    })
    add("extract-layout", _cmd_extract_layout, {
        "--ckpt": {},
        "--in": {"dest": "input"},
        "--out": {},
        "--mode": {"choices": ["oracle", "learned"]},
    })
    add("eval-seg", _cmd_eval_seg, {
        "--ckpt": {},
        "--datasets": {"nargs": "+"},
        "--out": {},
        "--split": {},
    })
    add("eval-gen", _cmd_eval_gen, {
        "--real": {},
        "--gen": {},
        "--ae": {},
        "--out": {},
        "--split": {},
    })
    add("vasculometry", _cmd_vasculometry, {
        "--gt": {},
        "--pred": {},
        "--ckpt": {},
        "--out": {},
        "--split": {},
    })
    add("repro", _cmd_repro, {
        "--out": {},
        "--quick": {"action": "store_true"},
    })
    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except RladError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
