"""Command-line entry point.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import Optional, Sequence

import numpy as np

from apn import corpus, imageio
from apn.checkpoint import CheckpointError
from apn.config import RunConfig, dump_config, load_config
from apn.gradsuite import run_suite
from apn.model import arch_spec, build_model, count_flops, load_checkpoint, save_checkpoint
from apn.pyramid import ConfigError
from apn.synth import Dataset, synth_generate
from apn.tensor import ShapeError, Tensor, no_grad
from apn.train import TrainingError, evaluate, train

log = logging.getLogger("apn")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3


def threads() -> int:
    raw = os.environ.get("APN_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"APN_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"APN_THREADS must be a positive integer, got {raw!r}")
    return n


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    return cfg.with_overrides(
        seed=args.seed,
        out=args.out,
        variant=getattr(args, "variant", None),
        arch=getattr(args, "arch", None),
    )


def _emit(text: str) -> None:
    sys.stdout.write(text + "\n")


def _datasets(cfg: RunConfig) -> tuple[Dataset, Optional[Dataset]]:
    synth = cfg.synthetic_spec()
    if synth is not None:
        return synth_generate(synth, cfg.seed)
    train_set = imageio.read_dataset(cfg.data.path)
    val_set = imageio.read_dataset(cfg.data.val_path) if cfg.data.val_path else None
    return train_set, val_set


# --------------------------------------------------------------------------
# model commands


def cmd_build(args) -> int:
    cfg = _config(args)
    spec = cfg.model_spec()
    model = build_model(spec, seed=cfg.seed, dtype=cfg.dtype)
    n = sum(p.data.size for p in model.parameters())
    _emit(json.dumps({"spec": spec.to_dict(), "params": int(n), "seed": cfg.seed}, sort_keys=True))
    if args.out:
        os.makedirs(cfg.out, exist_ok=True)
        save_checkpoint(model, os.path.join(cfg.out, "init.ckpt"))
        with open(os.path.join(cfg.out, "config.json"), "w", encoding="utf-8") as fh:
            fh.write(dump_config(cfg) + "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    report = run_suite(seeds=[seed], ops_only=args.ops_only)
    for line in report.lines():
        _emit(line)
    name, err = report.worst()
    _emit(f"worst: {name} {err:.3e}")
    if not report.passed:
        _emit("FAILED: " + ", ".join(report.failures()))
        return EXIT_VERIFY
    _emit("all gradient checks passed")
    return EXIT_OK


def cmd_count(args) -> int:
    if args.arch is not None:
        spec = arch_spec(args.arch)
    else:
        spec = _config(args).model_spec()
    size = args.input if args.input is not None else 224
    model = build_model(spec, dtype=np.float32)
    report = count_flops(model, (size, size))
    _emit(report.to_text())
    _emit(report.to_json())
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "complexity.json"), "w", encoding="utf-8") as fh:
            fh.write(report.to_json() + "\n")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    train_set, val_set = _datasets(cfg)
    model = build_model(cfg.model_spec(), seed=cfg.seed, dtype=cfg.dtype)
    os.makedirs(cfg.out, exist_ok=True)
    with open(os.path.join(cfg.out, "config.json"), "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg) + "\n")
    result = train(model, train_set, cfg.train_config(), val_set, out_dir=cfg.out)
    summary = {"best_epoch": result.best_epoch, "best_top1": result.best_top1, "final": result.history[-1]}
    _emit(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    ckpt = args.checkpoint or os.path.join(cfg.out, "best.ckpt")
    model = load_checkpoint(ckpt, cfg.model_spec(), dtype=cfg.dtype)
    train_set, val_set = _datasets(cfg)
    dataset = train_set if args.split == "train" else val_set
    if dataset is None or len(dataset) == 0:
        raise ConfigError(f"no {args.split} split is configured")
    report = evaluate(model, dataset, cfg.train.eval_scale)
    _emit(json.dumps(report.to_dict(with_confusion=True), sort_keys=True))
    return EXIT_OK


def load_image(path: str, channels: int = 3) -> np.ndarray:
    """PGM/PPM file as a ``C x H x W`` float image in [0, 1]."""
    raw = imageio.read_pnm(path)
    scale = 255.0 if raw.dtype == np.uint8 else 65535.0
    img = raw.astype(np.float64) / scale
    img = np.repeat(img[None], channels, axis=0) if img.ndim == 2 else img.transpose(2, 0, 1)
    if img.shape[0] != channels:
        raise ShapeError(f"{path} has {img.shape[0]} channels, the model expects {channels}")
    return img


def export_masks(model, image: np.ndarray, out_dir: str) -> list[str]:
    """Run one image and write every level's masks and channel weights.

    Spatial masks become ``level<l>_spatial.pgm`` / ``level<l>_semantic.pgm``
    and channel weights ``level<l>_channels.tsv``.  Returns written paths.
    """
    _, h, w = image.shape
    model.spec.backbone.level_sizes(h, w)
    os.makedirs(out_dir, exist_ok=True)
    for att in model.attention:
        att.record = True
    model.eval()
    try:
        with no_grad():
            model(Tensor(image[None].astype(model.fc.weight.dtype)))
    finally:
        for att in model.attention:
            att.record = False
    written = []
    for level, att in enumerate(model.attention):
        masks = att.last
        for key, flow in (("xi1", "spatial"), ("xi2", "semantic")):
            if key in masks:
                path = os.path.join(out_dir, f"level{level}_{flow}.pgm")
                imageio.write_pnm(path, imageio.unit_to_u8(masks[key][0, 0]))
                written.append(path)
        if "s_spa" in masks:
            path = os.path.join(out_dir, f"level{level}_channels.tsv")
            spa, sem = masks["s_spa"].reshape(-1), masks["s_sem"].reshape(-1)
            rows = [(c, repr(float(a)), repr(float(b))) for c, (a, b) in enumerate(zip(spa, sem))]
            imageio.write_tsv(path, rows, header=("channel", "spatial", "semantic"))
            written.append(path)
    return written


def cmd_export_masks(args) -> int:
    cfg = _config(args)
    spec = cfg.model_spec()
    model = load_checkpoint(args.checkpoint, spec, dtype=cfg.dtype)
    image = load_image(args.image, spec.backbone.in_channels)
    for path in export_masks(model, image, cfg.out):
        _emit(path)
    return EXIT_OK


# --------------------------------------------------------------------------
# corpus commands


def _hash_file(path: str) -> int:
    return corpus.perceptual_hash(imageio.read_pnm(path))


def cmd_dedup(args) -> int:
    rows = imageio.read_tsv(args.input)
    base = os.path.dirname(os.path.abspath(args.input))
    paths = [os.path.join(base, row[1]) for row in rows]
    with ThreadPoolExecutor(max_workers=threads()) as pool:
        hashes = list(pool.map(_hash_file, paths))
    result = corpus.dedup([(row[0], h) for row, h in zip(rows, hashes)], args.threshold)
    report = [(k, r, d) for k, r, d in result.duplicates]
    if args.out:
        imageio.write_tsv(args.out, report, header=("kept_id", "removed_id", "hamming"))
    else:
        _emit("#kept_id\tremoved_id\thamming")
        for row in report:
            _emit("\t".join(str(v) for v in row))
    log.info("kept %d of %d", len(result.kept), len(rows))
    return EXIT_OK


def cmd_reconcile(args) -> int:
    out = []
    for row in imageio.read_tsv(args.input):
        outcome = corpus.reconcile(row[1:])
        out.append((row[0], outcome.status, outcome.label or ""))
    if args.out:
        imageio.write_tsv(args.out, out, header=("image_id", "status", "label"))
    else:
        for row in out:
            _emit("\t".join(row))
    return EXIT_OK


def cmd_species_report(args) -> int:
    rows = [tuple(r[:3]) for r in imageio.read_tsv(args.input)]
    report = corpus.species_report(rows, floor=args.floor)
    doc = {
        "classes_per_species": report.classes_per_species,
        "images_per_class": report.images_per_class,
        "below_floor": report.below_floor,
    }
    text = json.dumps(doc, sort_keys=True, ensure_ascii=False)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    _emit(text)
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = _config(args)
    spec = cfg.synthetic_spec()
    if spec is None:
        raise ConfigError("config has no synthetic data section")
    train_set, val_set = synth_generate(spec, cfg.seed)
    imageio.write_dataset(train_set, os.path.join(cfg.out, "train"))
    imageio.write_dataset(val_set, os.path.join(cfg.out, "val"))
    _emit(json.dumps({"train": train_set.digest(), "val": val_set.digest()}, sort_keys=True))
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="apn", description="Attentional pyramid networks on numpy.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, model=False):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(fn=fn)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory or file")
        if model:
            p.add_argument("--variant", help="none, ca, sca, csca, csca-theta, csca-theta-plus, ...")
            p.add_argument("--arch", help="architecture name, e.g. toy or apn-csca18")
        return p

    add("build", cmd_build, "build and initialise a model", model=True)
    p = add("gradcheck", cmd_gradcheck, "finite-difference gradient suite")
    p.add_argument("--ops-only", action="store_true", help="skip the end-to-end checks")
    p = add("count", cmd_count, "parameter and FLOP counts", model=True)
    p.add_argument("--input", type=int, help="square input size (default 224)")
    add("train", cmd_train, "train a model", model=True)
    p = add("eval", cmd_eval, "evaluate a checkpoint", model=True)
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=("train", "val"), default="val")
    p = add("export-masks", cmd_export_masks, "write attention masks for one image", model=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="PPM or PGM file")
    p = add("dedup", cmd_dedup, "perceptual-hash deduplication")
    p.add_argument("--input", required=True, help="TSV of id and image path")
    p.add_argument("--threshold", type=int, default=5)
    p = add("reconcile", cmd_reconcile, "resolve multi-annotator labels")
    p.add_argument("--input", required=True, help="TSV of image id and 2-3 labels")
    p = add("species-report", cmd_species_report, "class and species counts")
    p.add_argument("--input", required=True, help="TSV of image id, class and species")
    p.add_argument("--floor", type=int, default=0)
    add("synth", cmd_synth, "write the synthetic dataset to disk")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        threads()
        return args.fn(args)
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (OSError, CheckpointError, imageio.ImageFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ShapeError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
