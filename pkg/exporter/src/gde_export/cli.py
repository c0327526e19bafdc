"""gde-export command line: export-text and export-image subcommands."""

from __future__ import annotations

import argparse
import sys

from .exporter import ExportJob, export_image_embeddings, export_text_embeddings


def build_parser():
    parser = argparse.ArgumentParser(prog="gde-export",
                                     description="encode captions or images "
                                                 "into a GDE1 embedding file")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, input_help in (("export-text", "caption file (id<TAB>text per line)"),
                             ("export-image", "directory of images")):
        p = sub.add_parser(name)
        p.add_argument("--input", required=True, help=input_help)
        p.add_argument("--model", default="clip-ViT-B-32",
                       help="sentence-transformers checkpoint or "
                            "hashed-projection-<dim>")
        p.add_argument("--out", required=True, help="output .gde1 path")
        p.add_argument("--batch-size", type=int, default=32)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    job = ExportJob(input_path=args.input, model_id=args.model,
                    output_path=args.out, batch_size=args.batch_size)
    try:
        if args.command == "export-text":
            path = export_text_embeddings(job)
        else:
            path = export_image_embeddings(job)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
