"""Command line for the cinelora pipeline: prepare, base, train, merge, generate, eval.

Exit codes: 0 success, 1 operational error, 2 data rejection under ``--strict``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import checkpoint, lora
from .captions import UnknownTokenError, tokenize
from .config import ConfigError, RunConfig
from .data import (STYLE_LIBRARY, DataError, build_manifest, from_model_space, generate_corpus, ingest_clips,
                   letterbox, load_manifest, to_model_space)
from .inference import GenRequest, PlanError, generate_full
from .metrics import evaluate
from .model import VideoDiT
from .trainer import TrainingAborted, base_digest, pretrain_base, train

EXIT_OK, EXIT_ERROR, EXIT_REJECTED = 0, 1, 2


class CliError(Exception):
    pass


def _overrides(args, names: dict[str, str]) -> dict:
    out = {}
    for attr, key in names.items():
        v = getattr(args, attr, None)
        if v is not None:
            out[key] = v
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _load_config(args, names: dict[str, str]) -> RunConfig:
    return RunConfig.load(args.config, _overrides(args, names))


def _ensure_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise CliError(f"cannot write to {path}: {exc}") from None
    return path


def _write_frames(frames: np.ndarray, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for old in out_dir.glob("frame_*.png"):
        old.unlink()
    for i, fr in enumerate(from_model_space(frames)):
        Image.fromarray(fr).save(out_dir / f"frame_{i:05d}.png")


def _read_frames(frame_dir: Path) -> np.ndarray:
    paths = sorted(p for p in Path(frame_dir).iterdir() if p.suffix.lower() == ".png") if Path(
        frame_dir).is_dir() else []
    if not paths:
        raise CliError(f"no frames found in {frame_dir}")
    return to_model_space(np.stack([np.asarray(Image.open(p).convert("RGB")) for p in paths]))


def _load_model(path, cfg: RunConfig) -> VideoDiT:
    if path is None:
        return VideoDiT(cfg.model())
    if not Path(path).exists():
        raise CliError(f"checkpoint {path} not found")
    return checkpoint.load_model(path)


def _fraction_report(model: VideoDiT, aset) -> dict:
    n_train = lora.trainable_count(aset)
    n_base = model.num_parameters()
    ref_train, ref_frac = lora.reference_trainable_fraction()
    return {"trainable": n_train, "closed_form": lora.closed_form_trainable_count(aset), "base": n_base,
            "fraction": n_train / n_base, "reference_trainable": ref_train, "reference_fraction": ref_frac}


# -- subcommands -------------------------------------------------------------------------
def cmd_prepare(args) -> int:
    cfg = _load_config(args, {"seed": "seed", "n_clips": "n_clips", "ingest": "ingest_dir"})
    out = _ensure_dir(Path(args.out))
    clips = out / "clips"
    if cfg["ingest_dir"]:
        src = Path(cfg["ingest_dir"])
        if not src.is_dir():
            raise CliError(f"ingest directory {src} not found")
        ingest_clips(src, clips, cfg.model().frame_size)
    else:
        generate_corpus(clips, cfg["n_clips"], cfg["seed"], styled=cfg["styled"] and not args.neutral,
                        min_frames=cfg["min_frames"], max_frames=cfg["max_frames"], size=cfg.model().frame_size)
    manifest = build_manifest(clips, cfg["val_fraction"], cfg["seed"], out / "manifest.json",
                              cfg.train().window)
    print(f"manifest: {out / 'manifest.json'} ({len(manifest.train)} train / {len(manifest.validation)} "
          f"validation, {len(manifest.rejections)} rejected)")
    for cid, reason in manifest.rejections:
        print(f"rejected {cid}: {reason}", file=sys.stderr)
    if manifest.rejections and args.strict:
        return EXIT_REJECTED
    return EXIT_OK


def cmd_base(args) -> int:
    cfg = _load_config(args, {"seed": "seed", "steps": "base_steps", "lr": "base_lr"})
    manifest = load_manifest(args.manifest)
    model = VideoDiT(cfg.model())
    out = Path(args.out)
    _ensure_dir(out.parent)
    res = pretrain_base(model, manifest, cfg.base_train(), log_path=out.with_suffix(".log.ndjson"))
    digest = checkpoint.save_model(model, out)
    print(json.dumps({"base": str(out), "sha256": digest, "steps": res.state.step,
                      "val_history": res.val_history}))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args, {"seed": "seed", "steps": "total_steps", "lr": "lr_peak",
                              "lambda_temporal": "lambda_temporal", "eval_interval": "eval_interval",
                              "rank": "r", "alpha": "alpha"})
    tcfg = cfg.train()
    manifest = load_manifest(args.manifest)
    model = _load_model(args.base, cfg)
    out = _ensure_dir(Path(args.out))
    mcfg = cfg.model()
    aset = lora.inject(model, (mcfg.lora_encoder_range, mcfg.lora_decoder_range), tcfg.r, tcfg.alpha, tcfg.seed)
    print(json.dumps({"trainable_parameters": _fraction_report(model, aset)}))
    before = base_digest(model)
    res = train(model, aset, manifest, tcfg, log_path=out / "train_log.ndjson", checkpoint_dir=out / "state",
                resume=args.resume)
    if base_digest(model) != before:
        raise CliError("base parameters changed during adapter training")
    aset.meta = {"config_digest": cfg.digest()}
    digest = lora.save_adapters(aset, out / "adapters.lora")
    print(json.dumps({"adapters": str(out / "adapters.lora"), "sha256": digest, "steps": res.state.step,
                      "stopped_early": res.stopped_early, "best_val_metric": res.state.best_val_metric}))
    return EXIT_OK


def cmd_merge(args) -> int:
    model = checkpoint.load_model(args.base)
    aset = lora.load_adapters(args.lora, model, attach_to_model=False)
    merged = lora.merge(model, aset)
    digest = checkpoint.save_model(merged, args.output)
    print(json.dumps({"merged": str(args.output), "sha256": digest, "adapters": len(aset)}))
    return EXIT_OK


def _conditioning_frame(path: str | None, frame_size) -> np.ndarray:
    if path is None or not Path(path).is_file():
        raise CliError(f"conditioning image {path} not found")
    img = np.asarray(Image.open(path).convert("RGB"))
    if img.shape[:2] != tuple(frame_size):
        img = letterbox(img, tuple(frame_size))
    return to_model_space(img[None])[0]


def cmd_generate(args) -> int:
    cfg = _load_config(args, {"seed": "seed", "num_frames": "num_frames", "cfg": "cfg_scale", "steps": "steps",
                              "fps": "fps", "shards": "shards", "overlap": "overlap"})
    model = _load_model(args.ckpt, cfg)
    first = _conditioning_frame(args.image, model.cfg.frame_size)
    if args.lora:
        lora.load_adapters(args.lora, model)
    try:
        tokens = tokenize(args.caption)
    except UnknownTokenError as exc:
        raise CliError(str(exc)) from None
    req = GenRequest(first, tokens, cfg["num_frames"], cfg["cfg_scale"], cfg["steps"], cfg["seed"], cfg["shards"],
                     cfg["overlap"], cfg["fps"], cfg["T_diff"], cfg["flow_block"], cfg["flow_radius"])
    clip, report = generate_full(model, req, compare_single=args.compare_single)
    out = _ensure_dir(Path(args.outdir))
    _write_frames(clip, out)
    doc = report.to_json()
    doc.update(cfg_scale=req.cfg_scale, steps=req.steps, fps=req.fps, caption=args.caption,
               config_digest=cfg.digest())
    (out / "report.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    print(json.dumps({"frames": len(clip), "outdir": str(out), "shards": doc["shards"]}))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args, {})
    a = _read_frames(Path(args.a))
    b = _read_frames(Path(args.b)) if args.b else None
    if b is not None and a.shape != b.shape:
        raise CliError(f"clips differ in shape: {a.shape} vs {b.shape}")
    if args.style is not None and args.style not in STYLE_LIBRARY:
        raise CliError(f"unknown style {args.style!r}; choose from {sorted(STYLE_LIBRARY)}")
    rep = evaluate(a, b, args.style)
    doc = rep.to_json(cfg.digest())
    if args.style is not None:
        doc["style_ranking"] = {name: evaluate(a, None, name).style_distance for name in STYLE_LIBRARY}
    text = json.dumps(doc, indent=1, sort_keys=True)
    out = Path(args.out) if args.out else Path(args.a) / "report.json"
    _ensure_dir(out.parent)
    out.write_text(text + "\n")
    print(json.dumps({k: doc[k] for k in ("perceptual_proxy", "temporal_stability", "style_distance", "frames")}))
    return EXIT_OK


# -- parser --------------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cinelora", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat TOML run configuration")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
        sp.add_argument("--seed", type=int)
        return sp

    sp = common(sub.add_parser("prepare", help="render or ingest clips and write the manifest"))
    sp.add_argument("--out", required=True, help="dataset directory")
    sp.add_argument("--ingest", help="directory of clip sub-directories to letterbox and ingest")
    sp.add_argument("--n-clips", dest="n_clips", type=int)
    sp.add_argument("--neutral", action="store_true", help="render every clip unstyled")
    sp.add_argument("--strict", action="store_true", help="exit 2 if any clip is rejected")
    sp.set_defaults(func=cmd_prepare)

    sp = common(sub.add_parser("base", help="train a small base model on a manifest"))
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True, help="output checkpoint path")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--lr", type=float)
    sp.set_defaults(func=cmd_base)

    sp = common(sub.add_parser("train", help="train adapters on a frozen base"))
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--base", help="base checkpoint (default: fresh model from the config)")
    sp.add_argument("--out", required=True, help="run directory")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--lambda", dest="lambda_temporal", type=float)
    sp.add_argument("--eval-interval", dest="eval_interval", type=int)
    sp.add_argument("--rank", type=int)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--resume", action="store_true", help="continue from the run directory's last checkpoint")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("merge", help="fold adapters into the base weights")
    sp.add_argument("--base", required=True)
    sp.add_argument("--lora", required=True)
    sp.add_argument("--output", required=True)
    sp.set_defaults(func=cmd_merge)

    sp = common(sub.add_parser("generate", help="generate a clip from a first frame and a caption"))
    sp.add_argument("--ckpt", help="model checkpoint (base or merged)")
    sp.add_argument("--lora", help="optional adapter file to attach")
    sp.add_argument("--image", help="conditioning first frame")
    sp.add_argument("--caption", required=True)
    sp.add_argument("--num_frames", "--num-frames", dest="num_frames", type=int)
    sp.add_argument("--cfg", type=float)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--fps", type=int)
    sp.add_argument("--shards", type=int)
    sp.add_argument("--overlap", type=int)
    sp.add_argument("--outdir", required=True)
    sp.add_argument("--compare-single", action="store_true",
                    help="also run the single-shard reference and report the divergence")
    sp.set_defaults(func=cmd_generate)

    sp = common(sub.add_parser("eval", help="compute clip metrics"))
    sp.add_argument("--a", required=True, help="frame directory")
    sp.add_argument("--b", help="second frame directory for binary metrics")
    sp.add_argument("--style", help="style library entry for style_distance")
    sp.add_argument("--out", help="report path (default: <a>/report.json)")
    sp.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigError, DataError, PlanError, checkpoint.CheckpointError, lora.AdapterError,
            TrainingAborted, OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
