"""Command-line entry point: ``minidetr <command> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 invalid input.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .experiments import ExperimentManifest, resolve_configs, run_manifest, write_artifacts

OUT_ENV = "MINIDETR_OUT"
DEFAULT_DATASET = "synthetic:n=500,test=100,seed=0"
log = logging.getLogger("minidetr")


class InputError(ValueError):
    """Bad user input; maps to exit code 2."""


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _path(p: str | None) -> str | None:
    """Absolute path so manifests replay from any working directory."""
    if p is None:
        return None
    if not Path(p).exists():
        raise InputError(f"path not found: {p}")
    return str(Path(p).resolve())


def _dataset(spec: str) -> str:
    return spec if spec.startswith("synthetic") else _path(spec)


def _config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise InputError(f"config file not found: {path}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise InputError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(doc, dict):
        raise InputError(f"{path}: top level must be an object")
    return doc


def _common(p: argparse.ArgumentParser, dataset: bool = True, split: str = "test") -> None:
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command> or runs/<command>)")
    p.add_argument("--workers", type=int, default=1, help="inference threads; never changes results")
    if dataset:
        p.add_argument("--dataset", default=DEFAULT_DATASET,
                       help="dataset directory, COCO json, or synthetic:n=N,test=T,seed=S (default %(default)s)")
        p.add_argument("--split", choices=("all", "train", "test"), default=split,
                       help="split to use: the synthetic test=T tail, else 80/20 by index (default %(default)s)")


def _eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ignore-low-overlap", action="store_true",
                   help="drop predictions whose best IoU with any ground truth is below 0.5")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="minidetr", description="Toy DETR robustness and query-analysis harness.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train mini-DETR; writes checkpoint and loss curve")
    _common(p, split="all")
    p.add_argument("--config", help="JSON file with 'model' and 'train' sections (and optionally 'dataset')")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--query-drop-p", type=float)
    p.add_argument("--gradient-record", action="store_true")

    p = sub.add_parser("query-drop-ab", help="train base and random-query-drop arms and compare losses")
    _common(p, split="all")
    p.add_argument("--config", help="JSON file with 'model' and 'train' sections")
    p.add_argument("--epochs", type=int)
    p.add_argument("-p", "--query-drop-p", type=float, default=None, help="drop probability (default 0.15)")

    for name, hlp in (("occlusion-sweep", "mAP vs patch-occlusion ratio"),
                      ("salient-sweep", "random vs salient occlusion at equal ratios")):
        p = sub.add_parser(name, help=hlp)
        _common(p)
        _eval_flags(p)
        p.add_argument("--checkpoint")
        p.add_argument("--ratios", type=_floats, default=[0.2, 0.4, 0.6, 0.8])
        p.add_argument("--draws", type=int, default=4, help="seeded occlusion draws averaged per ratio")
        p.add_argument("--saliency", choices=("attention", "edge-energy"), default="attention")
        if name == "occlusion-sweep":
            p.add_argument("--mode", choices=("random", "salient"), default="random")
            p.add_argument("--external", action="append", default=[], metavar="NAME:RATIO=FILE",
                           help="detections file of another detector on occluded images (repeatable)")

    p = sub.add_parser("sticker-eval", help="clean vs sticker-attacked mAP with attention heatmaps")
    _common(p)
    _eval_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="JSON sticker spec: scale, location, patch_image, patch_size")
    p.add_argument("--scale", type=float)
    p.add_argument("--location", type=_ints, help="x,y of the sticker's top-left corner")
    p.add_argument("--patch-image", help="PPM/PNG sticker (default: seeded random texture)")
    p.add_argument("--heatmaps", type=int, default=4, help="images to render attention heatmaps for")

    p = sub.add_parser("corruption-benchmark", help="15 families x 5 severities mAP grid")
    _common(p)
    _eval_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--families", type=lambda s: s.split(","), help="subset of families (comma-separated)")
    p.add_argument("--pixel", type=_ints, help="row,col for the encoder-attention series (default centre)")
    p.add_argument("--attention-family", help="family for the attention series (default first family)")

    p = sub.add_parser("query-analysis", help="per-query frequency, class share, scatter and masking")
    _common(p)
    _eval_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--threshold", type=float, default=0.8, help="confidence threshold (default 0.8)")

    p = sub.add_parser("perturb", help="apply one perturbation to one image")
    _common(p, dataset=False)
    p.add_argument("--image", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--occlude", type=float, metavar="RATIO")
    g.add_argument("--sticker", action="store_true")
    g.add_argument("--corrupt", metavar="FAMILY:SEVERITY")
    p.add_argument("--mode", choices=("random", "salient"), default="random")
    p.add_argument("--region", type=_floats, help="cx,cy,w,h (normalised) for salient occlusion")
    p.add_argument("--saliency", choices=("attention", "edge-energy"), default="attention")
    p.add_argument("--checkpoint")
    p.add_argument("--scale", type=float)
    p.add_argument("--location", type=_ints)

    p = sub.add_parser("evaluate", help="score a detections file against ground truth")
    _common(p, split="all")
    _eval_flags(p)
    p.add_argument("--detections", required=True)

    p = sub.add_parser("make-dataset", help="write a synthetic shapes dataset to disk")
    _common(p, dataset=False)
    p.add_argument("-n", type=int, default=500)
    p.add_argument("--max-objects", type=int, default=3)
    p.add_argument("--image-size", type=int, default=128)

    p = sub.add_parser("replay", help="re-run an emitted manifest.json")
    p.add_argument("manifest")
    p.add_argument("--out", help="output directory (default: the manifest's own)")
    return ap


def _train_params(args) -> dict:
    cfg = _config_file(args.config)
    params = {"dataset": _dataset(args.dataset if args.dataset != DEFAULT_DATASET
                                  else cfg.get("dataset", args.dataset)),
              "model": dict(cfg.get("model", {})), "train": dict(cfg.get("train", {}))}
    overrides = {"epochs": args.epochs, "learning_rate": getattr(args, "lr", None),
                 "batch_size": getattr(args, "batch_size", None)}
    if args.command == "train":
        overrides["query_drop_p"] = args.query_drop_p
        if args.gradient_record:
            overrides["gradient_record"] = True
    params["train"].update({k: v for k, v in overrides.items() if v is not None})
    if args.command == "query-drop-ab":
        params["query_drop_p"] = args.query_drop_p if args.query_drop_p is not None else cfg.get("query_drop_p", 0.15)
    # record fully resolved configs so the manifest does not depend on library defaults
    mc, tc = resolve_configs({"model": params["model"], "train": params["train"]}, args.seed)
    params["model"] = {k: v for k, v in mc.to_dict().items() if k != "seed"}
    params["train"] = {k: v for k, v in tc.to_dict().items() if k != "seed"}
    return params


def _external(items: list[str]) -> dict:
    out: dict[str, dict[str, str]] = {}
    for item in items:
        try:
            name, rest = item.split(":", 1)
            ratio, path = rest.split("=", 1)
            float(ratio)
        except ValueError:
            raise InputError(f"--external expects NAME:RATIO=FILE, got {item!r}") from None
        out.setdefault(name, {})[ratio] = _path(path)
    return out


def build_manifest(args) -> ExperimentManifest:
    cmd = args.command
    params: dict = {}
    if hasattr(args, "dataset"):
        params["dataset"] = _dataset(args.dataset)
        params["split"] = args.split
    if getattr(args, "ignore_low_overlap", False):
        params["ignore_low_overlap"] = True
    if getattr(args, "checkpoint", None):
        params["checkpoint"] = _path(args.checkpoint)
    if cmd in ("train", "query-drop-ab"):
        params.update(_train_params(args))
    elif cmd in ("occlusion-sweep", "salient-sweep"):
        params.update(ratios=args.ratios, draws=args.draws, saliency=args.saliency)
        if cmd == "occlusion-sweep":
            params["mode"] = args.mode
            params["external"] = _external(args.external)
        elif "checkpoint" not in params:
            raise InputError("salient-sweep needs --checkpoint")
    elif cmd == "sticker-eval":
        cfg = _config_file(args.config)
        for key in ("scale", "location", "patch_image", "patch_size", "empty_alpha"):
            if key in cfg:
                params[key] = cfg[key]
        if args.scale is not None:
            params["scale"] = args.scale
        if args.location is not None:
            params["location"] = args.location
        if args.patch_image:
            params["patch_image"] = args.patch_image
        if params.get("patch_image"):
            params["patch_image"] = _path(params["patch_image"])
        params["heatmaps"] = args.heatmaps
    elif cmd == "corruption-benchmark":
        if args.families:
            params["families"] = args.families
        if args.pixel:
            params["pixel"] = args.pixel
        if args.attention_family:
            params["attention_family"] = args.attention_family
    elif cmd == "query-analysis":
        params["threshold"] = args.threshold
    elif cmd == "perturb":
        params["image"] = _path(args.image)
        if args.occlude is not None:
            spec = {"kind": "occlusion", "ratio": args.occlude, "mode": args.mode, "region": args.region}
            params["saliency"] = args.saliency
        elif args.sticker:
            spec = {"kind": "sticker", "scale": args.scale, "location": args.location}
        else:
            fam, _, sev = args.corrupt.partition(":")
            try:
                spec = {"kind": "corruption", "family": fam, "severity": int(sev)}
            except ValueError:
                raise InputError(f"--corrupt expects FAMILY:SEVERITY, got {args.corrupt!r}") from None
        params["spec"] = spec
    elif cmd == "evaluate":
        params["detections"] = _path(args.detections)
    elif cmd == "make-dataset":
        params["dataset"] = f"synthetic:n={args.n},max_objects={args.max_objects},image_size={args.image_size}"
    out = args.out or str(Path(os.environ.get(OUT_ENV, "runs")) / cmd)
    return ExperimentManifest(cmd, args.seed, params, str(Path(out).resolve()))


def run(args) -> Path:
    if args.command == "replay":
        p = Path(args.manifest)
        if not p.exists():
            raise InputError(f"manifest not found: {args.manifest}")
        manifest = ExperimentManifest.from_json(p.read_text())
        if args.out:
            manifest.output_dir = str(Path(args.out).resolve())
    else:
        manifest = build_manifest(args)
        manifest.params["workers"] = args.workers
    artifacts = run_manifest(manifest)
    return write_artifacts(artifacts, manifest, manifest.output_dir)


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)  # argparse exits with 2 on bad syntax
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        out = run(args)
    except (ValueError, FileNotFoundError) as e:
        print(f"minidetr {args.command}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # anything else is a runtime failure
        print(f"minidetr {args.command}: failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
