"""``peac`` command-line entry point.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
``PEAC_DATA_ROOT`` supplies the default for ``--data``/``--images``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from peac import analysis
from peac.data import load_image_dir, read_image, read_labels, write_phantom_dir
from peac.geometry import GridSpecError, prepare_seed_image, resize_bilinear
from peac.pretrain import (
    CheckpointError,
    ConfigError,
    NonFiniteLossError,
    load_checkpoint,
    load_config,
    pretrain,
)
from peac.probe import extract_features, linear_probe

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DATA_ROOT_ENV = "PEAC_DATA_ROOT"

log = logging.getLogger("peac")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _data_default():
    return os.environ.get(DATA_ROOT_ENV)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="peac", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("pretrain", help="train student/teacher and write checkpoints")
    p.add_argument("--config", help="key = value file with TrainConfig fields")
    p.add_argument("--data", default=_data_default(), help="directory of training images")
    p.add_argument("--out", required=True, help="output directory for checkpoints and log")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--variant")
    p.add_argument("--grad-clip", dest="grad_clip", type=float)

    p = sub.add_parser("phantoms", help="write synthetic phantoms with label/landmark sidecars")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--noise", type=float, default=0.03)
    p.add_argument("--jitter", type=float, default=0.1)

    p = sub.add_parser("match", help="top-k best-buddy correspondences between two images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image-a", dest="image_a", required=True)
    p.add_argument("--image-b", dest="image_b", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stride", type=int, default=4)
    p.add_argument("--top", type=int, default=10)
    p.add_argument("--seed", type=int, default=analysis.KMEANS_SEED)

    p = sub.add_parser("coseg", help="zero-shot co-segmentation masks")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--images", default=_data_default())
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--out", default="coseg_masks")
    p.add_argument("--stride", type=int, default=4)
    p.add_argument("--seed", type=int, default=analysis.KMEANS_SEED)

    p = sub.add_parser("probe", help="linear probe on frozen teacher features")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", default=_data_default(), help="image directory with labels.csv")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("stability", help="grid vs similarity matching across checkpoints")
    p.add_argument("--ckpts", required=True, help="directory of ckpt_*.npz files")
    p.add_argument("--data", default=_data_default(), help="image directory (default: generated phantoms)")
    p.add_argument("--plans", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("export-embeddings", help="write a dense embedding map")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stride", type=int, default=4)
    return parser


def _require_dir(path, flag):
    if path is None:
        raise UsageError(f"{flag} is required (or set {DATA_ROOT_ENV})")
    if not Path(path).is_dir():
        raise DataError(f"{flag}: directory not found: {path}")
    return Path(path)


def _teacher(ckpt):
    return load_checkpoint(ckpt).model.teacher.eval()


def _model_image(path, side):
    if not Path(path).is_file():
        raise DataError(f"image not found: {path}")
    img = read_image(path)
    if img.shape != (side, side):
        img = resize_bilinear(img, side, side)
    return img


def cmd_pretrain(args):
    if args.config is not None and not Path(args.config).is_file():
        raise DataError(f"config file not found: {args.config}")
    data = _require_dir(args.data, "--data")
    config = load_config(
        args.config, seed=args.seed, epochs=args.epochs, max_steps=args.max_steps,
        batch_size=args.batch_size, lr=args.lr, variant=args.variant, grad_clip=args.grad_clip,
    )
    ds = load_image_dir(data)
    images = [ds[i] for i in range(len(ds))]
    print(f"# seed={config.seed} images={len(images)} variant={config.variant}")

    def progress(rec):
        log.info(json.dumps(rec))

    state, history = pretrain(config, images, out_dir=args.out, progress=progress)
    last = history[-1] if history else {}
    print(json.dumps({"seed": config.seed, "steps": state.step, "final": last}))


def cmd_phantoms(args):
    if args.count <= 0:
        raise UsageError("--count must be positive")
    out = write_phantom_dir(args.out, args.count, args.seed, args.noise, args.jitter, args.size)
    print(f"# seed={args.seed} wrote {args.count} phantoms to {out}")


def cmd_match(args):
    model = _teacher(args.ckpt)
    side = model.config.input_side
    a = _model_image(args.image_a, side)
    b = _model_image(args.image_b, side)
    ma = analysis.dense_embeddings(model, a, stride=args.stride, image_id=Path(args.image_a).name)
    mb = analysis.dense_embeddings(model, b, stride=args.stride, image_id=Path(args.image_b).name)
    pairs = analysis.top_pairs(analysis.best_buddies(ma, mb), args.top, seed=args.seed)
    analysis.write_pairs(pairs, args.out, [f"seed={args.seed}", f"ckpt={args.ckpt}", f"side={side} stride={args.stride}"])
    print(f"# seed={args.seed} wrote {len(pairs)} pairs to {args.out}")


def cmd_coseg(args):
    images_dir = _require_dir(args.images, "--images")
    model = _teacher(args.ckpt)
    ds = load_image_dir(images_dir)
    side = model.config.input_side
    images = []
    for i in range(len(ds)):
        img = ds[i]
        images.append(img if img.shape == (side, side) else resize_bilinear(img, side, side))
    masks = analysis.cosegment(images, model, args.k, stride=args.stride, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, mask in zip(ds.names, masks):
        Image.fromarray(mask.astype(np.uint8)).save(out / (Path(name).stem + "_mask.png"))
    labels = sorted({int(v) for m in masks for v in np.unique(m)})
    print(json.dumps({"seed": args.seed, "k": args.k, "masks": len(masks), "labels": labels, "out": str(out)}))


def cmd_probe(args):
    data = _require_dir(args.data, "--data")
    model = _teacher(args.ckpt)
    ds = load_image_dir(data)
    labels_map = read_labels(data)
    missing = [n for n in ds.names if n not in labels_map]
    if missing:
        raise DataError(f"labels.csv has no entry for {missing[0]} ({len(missing)} missing)")
    feats = extract_features(model, [ds[i] for i in range(len(ds))])
    y = np.array([labels_map[n] for n in ds.names])
    result = linear_probe(feats, y, seed=args.seed, checkpoint=str(args.ckpt))
    print(json.dumps({"seed": args.seed, **result.to_dict()}))


def cmd_stability(args):
    ckpt_dir = _require_dir(args.ckpts, "--ckpts")
    paths = sorted(ckpt_dir.glob("ckpt_*.npz"))
    if len(paths) < 2:
        raise DataError(f"need at least two ckpt_*.npz files in {ckpt_dir}, found {len(paths)}")
    states = [load_checkpoint(p) for p in paths]
    spec = states[0].spec
    rng = np.random.default_rng(args.seed)
    if args.data:
        ds = load_image_dir(_require_dir(args.data, "--data"))
        raw = [ds[i] for i in range(len(ds))]
    else:
        from peac.data import phantom_set

        raw, _, _ = phantom_set(16, args.seed)
    inner = [prepare_seed_image(r, spec, rng) for r in raw]
    models = {p.name: s.model.teacher.eval() for p, s in zip(paths, states)}
    report = analysis.matching_stability(models, inner, spec, n_plans=args.plans, seed=args.seed)
    print(json.dumps({"seed": args.seed, **report.to_dict()}, indent=1))


def cmd_export(args):
    model = _teacher(args.ckpt)
    img = _model_image(args.image, model.config.input_side)
    emb = analysis.dense_embeddings(model, img, stride=args.stride, image_id=Path(args.image).name)
    analysis.write_embeddings(emb, args.out)
    print(f"# G={emb.G} D={emb.grid.shape[-1]} wrote {args.out}")


COMMANDS = {
    "pretrain": cmd_pretrain,
    "phantoms": cmd_phantoms,
    "match": cmd_match,
    "coseg": cmd_coseg,
    "probe": cmd_probe,
    "stability": cmd_stability,
    "export-embeddings": cmd_export,
}


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        COMMANDS[args.command](args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except GridSpecError as exc:
        print(f"config error: invalid grid geometry: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
