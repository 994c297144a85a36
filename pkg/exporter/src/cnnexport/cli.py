"""Command-line interface: activation export and sparsity fine-tuning."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import torch

from .ebp import EbpParams, ebp_finetune
from .errors import ExporterError
from .export import ExportSpec, export_activations, iter_image_folder, load_image, load_model


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="cnnexport",
                     description="Bridge a trained CNN to the rule pipeline's "
                                 "file formats.")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("export", help="dump norms tables and feature maps")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--layer", required=True)
    p.add_argument("--split", action="append", required=True,
                   help="split directory name; repeatable")
    p.add_argument("--top-m", dest="top_m", type=int, default=10)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_export)

    p = sub.add_parser("ebp", help="fine-tune with the elite-kernel penalty")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="training split directory")
    p.add_argument("--layer", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--lam", type=float, default=0.005)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_ebp)
    return parser


def _cmd_export(args) -> int:
    spec = ExportSpec(
        model_path=args.model, data_dir=args.data, layer=args.layer,
        out_dir=args.out, splits=tuple(args.split), top_m=args.top_m,
        image_size=args.image_size, batch_size=args.batch_size,
    )
    written = export_activations(spec)
    for split, path in written.items():
        print(f"{split}: {path}")
    return 0


def _load_training_tensors(data_dir, image_size):
    images, class_indices = [], []
    classes = sorted(p.name for p in Path(data_dir).iterdir() if p.is_dir())
    index_of = {cls: i for i, cls in enumerate(classes)}
    for _, cls, path in iter_image_folder(Path(data_dir)):
        images.append(load_image(path, image_size))
        class_indices.append(index_of[cls])
    return torch.stack(images), class_indices, classes


def _cmd_ebp(args) -> int:
    model = load_model(args.model)
    images, class_indices, classes = _load_training_tensors(
        args.data, args.image_size
    )
    params = EbpParams(k=args.k, lam=args.lam, epochs=args.epochs,
                       lr=args.lr, seed=args.seed)
    ebp_finetune(model, args.layer, images, class_indices, len(classes), params)
    torch.save(model, args.out)
    print(f"saved: {args.out}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_help(sys.stderr)
            return 1
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ExporterError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
