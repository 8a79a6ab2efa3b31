"""``tgic`` command line: train, compress, decompress, eval."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import InputError, TGICError

log = logging.getLogger("tgic")


def _cmd_train(args) -> int:
    from .trainer import TrainConfig, train

    cfg = TrainConfig.from_file(args.config)
    if args.max_steps is not None:
        cfg.max_steps = args.max_steps
    if not cfg.out:
        raise InputError("config must set out = <checkpoint path>")
    trainer = train(cfg)
    last = trainer.history[-1] if trainer.history else {}
    print(json.dumps({"checkpoint": cfg.out, "steps": trainer.step,
                      "final": {k: last.get(k) for k in ("rate_bpp", "L_R", "total")}}))
    return 0


def _cmd_compress(args) -> int:
    from .data import load_image, read_caption_arg
    from .trainer import load_codec

    codec = load_codec(args.model)
    caption = read_caption_arg(args.caption)
    image = load_image(args.image)
    res = codec.compress(image, caption)
    Path(args.out).write_bytes(res.data)
    r = res.report
    print(json.dumps({
        "out": args.out, "height": r.height, "width": r.width, "file_bytes": len(res.data),
        "file_bpp": res.file_bpp, "estimated_bpp": r.bpp, "bpp_image": r.bpp_image,
        "bpp_text": r.bpp_text, "bits_y": r.bits_y, "bits_z": r.bits_z,
    }))
    return 0


def _cmd_decompress(args) -> int:
    from .data import save_image
    from .trainer import load_codec

    codec = load_codec(args.model)
    try:
        data = Path(args.inp).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read {args.inp}: {exc}") from None
    image, caption = codec.decompress(data)
    save_image(image, args.out)
    print(json.dumps({"out": args.out, "height": image.shape[1], "width": image.shape[2],
                      "caption": caption}))
    return 0


def _cmd_eval(args) -> int:
    from .data import CaptionDataset
    from .evaluation import evaluate_dataset, write_eval_csv
    from .trainer import load_codec

    codec = load_codec(args.model)
    ds = CaptionDataset.from_manifest(args.manifest)
    result = evaluate_dataset(codec, ds, workers=args.workers)
    write_eval_csv(result, args.out)
    for name, err in result.errors.items():
        log.warning("%s: %s", name, err)
    print(json.dumps({"out": args.out, "images": len(result.records),
                      "errors": len(result.errors), "summary": result.summary()}))
    return 0


def _cmd_synth(args) -> int:
    from .data import write_synthetic_dataset

    man = write_synthetic_dataset(args.out, args.count, args.size, args.seed, args.test)
    print(json.dumps({"manifest": str(man)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tgic", description="Caption-guided learned image codec.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a codec from a key = value config file")
    t.add_argument("--config", required=True)
    t.add_argument("--max-steps", type=int, default=None, help="override the step budget")
    t.set_defaults(func=_cmd_train)

    c = sub.add_parser("compress", help="image + caption -> .tgic file")
    c.add_argument("--model", required=True)
    c.add_argument("--image", required=True)
    c.add_argument("--caption", required=True, help="caption text, or @file for its first line")
    c.add_argument("--out", required=True)
    c.set_defaults(func=_cmd_compress)

    d = sub.add_parser("decompress", help=".tgic file -> image")
    d.add_argument("--model", required=True)
    d.add_argument("--in", dest="inp", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=_cmd_decompress)

    e = sub.add_parser("eval", help="rate and PSNR for every image of a manifest")
    e.add_argument("--model", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--workers", type=int, default=1)
    e.set_defaults(func=_cmd_eval)

    s = sub.add_parser("synth", help="write a procedural bird/flower caption dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=8)
    s.add_argument("--test", type=int, default=0)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TGICError as exc:
        print(f"tgic: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
