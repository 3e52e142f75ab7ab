"""Command-line entry point.

Exit codes: 0 success, 2 invalid configuration, 3 shape mismatch,
4 unreadable input or output, 1 any other failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .complexity import count_params_flops
from .config import load_run_config, run_config_from_dict
from .data import generate_synthetic, load_image, load_image_set
from .errors import CheckpointError, ConfigError, DimensionError, IngestionError
from .evaluation import evaluate, split_data
from .metrics import softmax_np
from .model import HybridDenseSwin
from .train import load_checkpoint, model_from_checkpoint, predict_logits, train

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_SHAPE, EXIT_IO = 0, 1, 2, 3, 4


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    if args.out is not None:
        cfg.train.out_dir = args.out
    res = train(cfg, cfg.train.out_dir, resume=args.resume)
    last = res.history[-1] if res.history else None
    if last is not None:
        print(f"epoch {last.epoch} train_loss {last.train_loss:.4f} train_acc {last.train_acc:.4f}")
    print(f"checkpoint {Path(cfg.train.out_dir) / 'final.hdsw'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    if str(args.manifest).endswith(".hdsw"):
        data = load_image_set(args.manifest, args.split)
    else:
        data = split_data(ck, args.manifest, args.split)
    res = evaluate(ck, data, args.out)
    print(res.report.summary())
    return EXIT_OK


def cmd_predict(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    image = load_image(args.image, ck.config.model.image_size)
    model = model_from_checkpoint(ck)
    probs = softmax_np(predict_logits(model, image[None]).astype(np.float64))[0]
    top = int(np.argmax(probs))
    print(f"{ck.labels.names[top]}\t" + ",".join(f"{p:.6f}" for p in probs))
    return EXIT_OK


def cmd_inspect(args) -> int:
    if args.config is not None:
        model_cfg = load_run_config(args.config).model
    else:
        model_cfg = run_config_from_dict({"model": {"preset": args.preset}}).model
    model = HybridDenseSwin(model_cfg)
    info = count_params_flops(model)
    print(f"preset {model_cfg.preset}  input 3x{model_cfg.image_size}x{model_cfg.image_size}")
    for name, shape in info.shapes:
        print(f"{name:20s} {'x'.join(map(str, shape[1:]))}")
    for part, macs in info.parts.items():
        print(f"macs.{part:15s} {macs}")
    print(f"params {info.params}")
    print(f"macs {info.macs}")
    return EXIT_OK


def cmd_gen_synthetic(args) -> int:
    path = generate_synthetic(args.out, args.per_class, args.seed, args.size)
    print(f"manifest {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="denseswin", description="Dual-branch dense/shifted-window image classifier.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a JSON run config")
    t.add_argument("--config", type=Path, help="JSON run config (defaults: desk preset)")
    t.add_argument("--resume", type=Path, help="checkpoint to continue from")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="output directory (overrides train.out_dir)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--manifest", type=Path, required=True, help="manifest .tsv or decoded .hdsw dataset")
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.add_argument("--out", type=Path, required=True)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="classify one image")
    r.add_argument("--checkpoint", type=Path, required=True)
    r.add_argument("--image", type=Path, required=True)
    r.set_defaults(func=cmd_predict)

    i = sub.add_parser("inspect", help="print stage shapes, parameter and MAC counts")
    i.add_argument("--config", type=Path)
    i.add_argument("--preset", choices=("desk", "full"), default="desk")
    i.set_defaults(func=cmd_inspect)

    g = sub.add_parser("gen-synthetic", help="write procedural texture images and a manifest")
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--per-class", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=64)
    g.set_defaults(func=cmd_gen_synthetic)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DimensionError as e:
        print(f"shape error: {e}", file=sys.stderr)
        return EXIT_SHAPE
    except (IngestionError, CheckpointError, OSError) as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    except Exception as e:  # noqa: BLE001
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
