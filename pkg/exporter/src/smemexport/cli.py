"""Exporter command line. Flags mirror the tracker CLI's naming
(--out, --manifest-style paths); every command is deterministic for fixed
inputs, so re-exports are byte-identical."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

from .features import ModelError
from .jobs import (
    ExportError,
    ExportJob,
    convert_palette_masks,
    export_embeddings,
    export_proposals,
    export_sequence,
    read_boxes_file,
)


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        gh, gw = text.lower().split("x")
        return (int(gh), int(gw))
    except ValueError as exc:
        raise ExportError(f"grid must look like 8x12, got {text!r}") from exc


def _job(args: argparse.Namespace) -> ExportJob:
    return ExportJob(
        frames_dir=Path(args.frames),
        out_dir=Path(args.out),
        model_id=args.model,
        dim=args.dim,
        grid=_parse_grid(args.grid),
        sequence_id=args.sequence,
    )


def _print_failures(failures) -> None:
    for failure in failures:
        print(f"warning: {failure}", file=sys.stderr)


def _cmd_embeddings(args: argparse.Namespace) -> int:
    report = export_embeddings(_job(args), with_patch_features=not args.keys_only)
    print(
        f"exported {report.frames} frame keys "
        f"({report.height}x{report.width}, dim {args.dim}) to {args.out}"
    )
    return 0


def _cmd_proposals(args: argparse.Namespace) -> int:
    boxes = read_boxes_file(Path(args.boxes))
    report = export_proposals(_job(args), boxes)
    _print_failures(report.failures)
    print(f"exported {len(report.proposal_entries)} proposal triples to {args.out}")
    return 0


def _cmd_convert_masks(args: argparse.Namespace) -> int:
    report = convert_palette_masks(Path(args.masks), Path(args.out))
    _print_failures(report.failures)
    print(
        f"converted {len(report.mask_rels)} palette masks "
        f"({report.height}x{report.width}) to {args.out}"
    )
    return 0


def _cmd_export(args: argparse.Namespace) -> int:
    boxes = read_boxes_file(Path(args.boxes)) if args.boxes else ()
    report = export_sequence(
        _job(args),
        palette_masks_dir=Path(args.masks) if args.masks else None,
        boxes=boxes,
        with_patch_features=not args.keys_only,
        boxes_from_masks=args.boxes_from_masks,
    )
    _print_failures(report.failures)
    manifest = _job(args).manifest_path
    if manifest.exists():
        print(f"wrote manifest {manifest}")
    else:
        print("no manifest written (masks do not cover every frame)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smemexport",
        description=(
            "Convert frames, proposal prompts, and palette masks into the "
            "tracker's interchange files."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, frames_required=True):
        p.add_argument("--frames", required=frames_required,
                       help="directory of frame images")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--model", default="builtin-gray-patch",
                       help="feature backbone identifier")
        p.add_argument("--dim", type=int, default=16, help="feature dimension")
        p.add_argument("--grid", default="8x12",
                       help="patch grid as ROWSxCOLS (default 8x12)")
        p.add_argument("--sequence", default="sequence",
                       help="sequence id recorded in the manifest")
        p.add_argument("--keys-only", action="store_true",
                       help="skip per-frame patch-feature files")

    p_emb = sub.add_parser("embeddings",
                           help="pooled frame keys (+ patch features)")
    add_common(p_emb)
    p_emb.set_defaults(func=_cmd_embeddings)

    p_prop = sub.add_parser("proposals",
                            help="three-mask proposal triples for box prompts")
    add_common(p_prop)
    p_prop.add_argument("--boxes", required=True,
                        help="text file of 'frame r0 c0 r1 c1' prompts")
    p_prop.set_defaults(func=_cmd_proposals)

    p_conv = sub.add_parser("convert-masks",
                            help="palette-indexed mask images to run-length files")
    p_conv.add_argument("--masks", required=True,
                        help="directory of palette-mode mask images")
    p_conv.add_argument("--out", required=True, help="output directory")
    p_conv.set_defaults(func=_cmd_convert_masks)

    p_all = sub.add_parser("export",
                           help="embeddings + masks + proposals + manifest")
    add_common(p_all)
    p_all.add_argument("--masks", help="directory of palette-mode mask images")
    p_all.add_argument("--boxes", help="text file of box prompts")
    p_all.add_argument("--boxes-from-masks", action="store_true",
                       dest="boxes_from_masks",
                       help="derive box prompts from the converted masks so "
                            "replayed fusion finds its proposals")
    p_all.set_defaults(func=_cmd_export)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ExportError, ModelError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
