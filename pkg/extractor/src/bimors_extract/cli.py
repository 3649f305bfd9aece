"""Exporter command line: generate corpora, export features and weights."""

from __future__ import annotations

import argparse
import sys

from . import export, images


def cmd_gen_images(args) -> int:
    names = args.classes.split(",")
    images.generate_corpus(args.out, names, per_class=args.per_class, seed=args.seed)
    print(f"wrote {len(names) * args.per_class} images under {args.out}")
    return 0


def _config_from_args(args) -> export.ExtractionConfig:
    return export.ExtractionConfig(
        dataset_root=getattr(args, "dataset_root", ""),
        out_dir=args.out,
        dataset_name=getattr(args, "name", "extracted"),
        image_encoder=args.image_encoder,
        captioner=args.captioner,
        caption_embedder=args.caption_embedder,
        text_encoder=args.text_encoder,
        caption_source=getattr(args, "caption_source", "bert"),
        caption_max_length=getattr(args, "caption_max_length", 10),
        device=args.device,
        seed=args.seed,
        shared_class_names=(
            getattr(args, "shared_classes", "").split("|")
            if getattr(args, "shared_classes", "")
            else []
        ),
    )


def cmd_export_features(args) -> int:
    export.run_export(_config_from_args(args), features=True, text_encoder=False)
    return 0


def cmd_export_text_encoder(args) -> int:
    export.run_export(_config_from_args(args), features=False, text_encoder=True)
    return 0


def _backbone_flags(p):
    p.add_argument("--image-encoder", default="tiny-vision")
    p.add_argument("--captioner", default="tiny-captioner")
    p.add_argument("--caption-embedder", default="tiny-bert")
    p.add_argument("--text-encoder", default="tiny-text")
    p.add_argument("--device", default="cpu")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bimors-extract",
        description="Run the frozen backbones and serialize features, weights, "
                    "and reference activations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-images", help="write a synthetic class-per-directory corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", required=True, help="comma-separated class names")
    p.add_argument("--per-class", dest="per_class", type=int, default=21)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_images)

    p = sub.add_parser("export-features", help="extract and serialize a feature dataset")
    p.add_argument("--dataset-root", dest="dataset_root", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--name", default="extracted")
    p.add_argument("--caption-source", dest="caption_source",
                   choices=["bert", "contrastive"], default="bert")
    p.add_argument("--caption-max-length", dest="caption_max_length", type=int, default=10)
    p.add_argument("--shared-classes", dest="shared_classes", default="")
    _backbone_flags(p)
    p.set_defaults(func=cmd_export_features)

    p = sub.add_parser("export-text-encoder", help="serialize encoder weights + references")
    p.add_argument("--out", required=True)
    _backbone_flags(p)
    p.set_defaults(func=cmd_export_text_encoder)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError, NotImplementedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
