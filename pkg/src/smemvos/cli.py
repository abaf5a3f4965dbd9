"""Command-line front end: run sequences, evaluate predictions, materialize
synthetic benchmarks, and emit the memory-scaling and component-ablation
tables as CSV.

Every subcommand is reproducible from its flags plus the seed (flag, else
the SMEM_SEED environment variable, else 0); no output embeds clocks or
hostnames, so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import formats
from .backends.files import file_source
from .backends.synthetic import NoiseParams, SUITE_NOISE, synthetic_source
from .formats import FormatError
from .masks import ObjectMask
from .metrics import MetricAlignmentError, MetricBundle, vots_bundle
from .pipeline import (
    PipelineConfig,
    RunSource,
    SequenceAborted,
    ablate,
    run_sequence,
)
from .synth import SceneValidationError, benchmark_suite, generate, scene_from_json, scene_to_json


def _seed_from(args: argparse.Namespace) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("SMEM_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise FormatError(f"SMEM_SEED must be an integer, got {env!r}") from exc
    return 0


def _mask_filename(t: int) -> str:
    return f"frame_{t:05d}.smrl"


# -- run ----------------------------------------------------------------------


def _load_source(args: argparse.Namespace) -> RunSource:
    manifest_path = Path(args.manifest)
    if args.backend == "synthetic":
        try:
            text = manifest_path.read_text()
        except FileNotFoundError:
            raise FormatError(f"scene spec not found: {manifest_path}")
        spec = scene_from_json(text)
        noise = SUITE_NOISE if args.noise == "suite" else NoiseParams()
        return synthetic_source(generate(spec), noise)
    manifest = formats.read_manifest(manifest_path)
    formats.validate_manifest(manifest)
    return file_source(manifest)


def _write_run_outputs(
    out_dir: Path, source: RunSource, result, cfg: PipelineConfig, backend: str
) -> None:
    ids = source.object_ids or list(range(1, result.num_objects + 1))
    mask_dir = out_dir / "masks"
    for t, frame_masks in enumerate(result.masks):
        formats.write_mask_file(mask_dir / _mask_filename(t), frame_masks, ids)

    header = ["frame", "memory_size"] + [f"accepted_obj{oid}" for oid in ids]
    lines = [",".join(header)]
    for t in range(result.num_frames):
        flags = [str(int(v)) for v in result.fusion_accepted[t]]
        lines.append(",".join([str(t), str(result.memory_sizes[t])] + flags))
    formats.atomic_write_bytes(
        out_dir / "trace.csv", ("\n".join(lines) + "\n").encode()
    )

    q = None
    if source.gt is not None:
        from .metrics import quality

        q = quality([result.masks], [source.gt])
    summary = [
        f"sequence = {result.sequence_id}",
        f"backend = {backend}",
        f"frames = {result.num_frames}",
        f"objects = {result.num_objects}",
        f"seed = {cfg.seed}",
        f"final_memory_size = {result.final_memory_size}",
        f"q = {formats.format_metric(q)}",
    ]
    formats.atomic_write_bytes(
        out_dir / "summary.txt", ("\n".join(summary) + "\n").encode()
    )


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = formats.read_config(args.config)
    source = _load_source(args)
    result = run_sequence(
        source.descriptor,
        source.gt_first,
        cfg,
        source.embedder,
        source.segmenter,
        source.refiner,
    )
    out_dir = Path(args.out)
    _write_run_outputs(out_dir, source, result, cfg, args.backend)
    print(f"wrote {result.num_frames} frames to {out_dir}")
    return 0


# -- eval ---------------------------------------------------------------------


def _read_sequence_dir(path: Path) -> tuple[list[list[ObjectMask]], list[int]]:
    files = sorted(path.glob("*.smrl"))
    if not files:
        raise FormatError(f"no .smrl mask files in {path}")
    frames: list[list[ObjectMask]] = []
    ids: Optional[list[int]] = None
    for f in files:
        objects = formats.read_mask_file(f)
        file_ids = [oid for oid, _ in objects]
        if ids is None:
            ids = file_ids
        elif file_ids != ids:
            raise MetricAlignmentError(
                f"{f}: object ids {file_ids} differ from {ids}"
            )
        frames.append([m for _, m in objects])
    assert ids is not None
    return frames, ids


def _read_eval_tree(root: Path) -> dict[str, tuple[list[list[ObjectMask]], list[int]]]:
    if not root.is_dir():
        raise FormatError(f"not a directory: {root}")
    if sorted(root.glob("*.smrl")):
        return {root.name: _read_sequence_dir(root)}
    subdirs = sorted(p for p in root.iterdir() if p.is_dir())
    # run output trees keep masks under a masks/ subdirectory
    if not subdirs and (root / "masks").is_dir():
        return {root.name: _read_sequence_dir(root / "masks")}
    out = {}
    for sub in subdirs:
        target = sub / "masks" if (sub / "masks").is_dir() else sub
        out[sub.name] = _read_sequence_dir(target)
    if not out:
        raise FormatError(f"no sequences found under {root}")
    return out


def _bundle_rows(
    seq_names: list[str],
    preds: list[list[list[ObjectMask]]],
    gts: list[list[list[ObjectMask]]],
    id_lists: list[list[int]],
    track_threshold: float,
    final_memory: Optional[dict[str, int]] = None,
) -> list[dict]:
    rows: list[dict] = []
    for name, pred, gt, ids in zip(seq_names, preds, gts, id_lists):
        for idx, oid in enumerate(ids):
            track_pred = [[frame[idx]] for frame in pred]
            track_gt = [[frame[idx]] for frame in gt]
            if not any(not m[0].is_empty for m in track_gt):
                continue  # never-visible track: J/F undefined
            bundle = vots_bundle([track_pred], [track_gt], track_threshold)
            rows.append(
                _bundle_row(
                    name,
                    str(oid),
                    bundle,
                    final_memory.get(name) if final_memory else None,
                )
            )
    overall = vots_bundle(preds, gts, track_threshold)
    mem = None
    if final_memory:
        mem = sum(final_memory.values()) / len(final_memory)
    rows.append(_bundle_row("overall", "all", overall, mem))
    return rows


def _bundle_row(
    sequence_id: str, object_id: str, b: MetricBundle, mem: Optional[float]
) -> dict:
    return {
        "sequence_id": sequence_id,
        "object_id": object_id,
        "Q": formats.format_metric(b.Q),
        "Acc": formats.format_metric(b.Acc),
        "Rob": formats.format_metric(b.Rob),
        "NRE": formats.format_metric(b.NRE),
        "DRE": formats.format_metric(b.DRE),
        "ADQ": formats.format_metric(b.ADQ),
        "J": formats.format_metric(b.J_mean),
        "F": formats.format_metric(b.F_mean),
        "JF": formats.format_metric(b.JF_mean),
        "final_memory_size": "" if mem is None else f"{mem:g}",
    }


def _cmd_eval(args: argparse.Namespace) -> int:
    pred_tree = _read_eval_tree(Path(args.pred))
    gt_tree = _read_eval_tree(Path(args.gt))
    if len(pred_tree) == 1 and len(gt_tree) == 1:
        # single-sequence comparison: pair regardless of directory names
        name = next(iter(gt_tree))
        pred_tree = {name: next(iter(pred_tree.values()))}
    elif sorted(pred_tree) != sorted(gt_tree):
        raise MetricAlignmentError(
            f"sequence sets differ: {sorted(pred_tree)} vs {sorted(gt_tree)}"
        )
    names = sorted(pred_tree)
    preds, gts, id_lists = [], [], []
    for name in names:
        pred_frames, pred_ids = pred_tree[name]
        gt_frames, gt_ids = gt_tree[name]
        if pred_ids != gt_ids:
            raise MetricAlignmentError(
                f"{name}: predicted object ids {pred_ids} != {gt_ids}"
            )
        preds.append(pred_frames)
        gts.append(gt_frames)
        id_lists.append(gt_ids)
    rows = _bundle_rows(names, preds, gts, id_lists, args.track_threshold)
    data = formats.results_csv_bytes(rows)
    if args.out:
        formats.atomic_write_bytes(args.out, data)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(data.decode())
    return 0


# -- synth --------------------------------------------------------------------


def _materialize(spec, out_dir: Path) -> None:
    dataset = generate(spec)
    ids = list(range(1, dataset.num_objects + 1))
    formats.atomic_write_bytes(
        out_dir / "scene.json", scene_to_json(spec).encode()
    )
    mask_rel = {}
    for t in range(dataset.length):
        rel = f"masks/{_mask_filename(t)}"
        formats.write_mask_file(out_dir / rel, dataset.gt_masks(t), ids)
        mask_rel[t] = rel
    keys = [dataset.frame_key(t) for t in range(dataset.length)]
    formats.write_embeddings_file(
        out_dir / "keys.smem", keys, "pool=foreground-mean"
    )
    manifest = formats.SequenceManifest(
        sequence_id=dataset.sequence_id,
        frames=dataset.length,
        height=dataset.height,
        width=dataset.width,
        embeddings_path="keys.smem",
        mask_paths=mask_rel,
        base_dir=out_dir,
    )
    formats.write_manifest(out_dir / "sequence.manifest", manifest)


def _suite_specs(name: str, seed: int) -> dict:
    specs = benchmark_suite(seed)
    if name == "all":
        return specs
    if name not in specs:
        raise SceneValidationError(
            [f"unknown suite name {name!r}; known: all, " + ", ".join(specs)]
        )
    return {name: specs[name]}


def _cmd_synth(args: argparse.Namespace) -> int:
    seed = _seed_from(args)
    specs = _suite_specs(args.suite, seed)
    out_root = Path(args.out)
    for name, spec in specs.items():
        _materialize(spec, out_root / name)
        print(f"materialized {name} ({spec.length} frames)")
    return 0


# -- bench-mem ------------------------------------------------------------------


def _cmd_bench_mem(args: argparse.Namespace) -> int:
    seed = _seed_from(args)
    specs = _suite_specs(args.suite, seed)
    if len(specs) != 1:
        raise SceneValidationError(["bench-mem needs a single suite name"])
    (spec,) = specs.values()
    source = synthetic_source(generate(spec), SUITE_NOISE)
    cfg = PipelineConfig(seed=seed, enable_hqtf=False)
    results = {}
    for label, smem in (("baseline", False), ("smem", True)):
        from dataclasses import replace

        results[label] = run_sequence(
            source.descriptor,
            source.gt_first,
            replace(cfg, enable_smem=smem),
            source.embedder,
            source.segmenter,
            source.refiner,
        )
    base_trace = results["baseline"].memory_sizes
    smem_trace = results["smem"].memory_sizes
    ratio = smem_trace[-1] / base_trace[-1]
    lines = ["frame,baseline_memory,smem_memory"]
    for t, (b, s) in enumerate(zip(base_trace, smem_trace)):
        lines.append(f"{t},{b},{s}")
    lines.append(f"# final_ratio = {ratio:.9f}")
    formats.atomic_write_bytes(args.out, ("\n".join(lines) + "\n").encode())
    print(f"final memory: smem={smem_trace[-1]} baseline={base_trace[-1]} "
          f"ratio={ratio:.4f}")
    return 0


# -- ablate ---------------------------------------------------------------------


def _cmd_ablate(args: argparse.Namespace) -> int:
    seed = _seed_from(args)
    specs = _suite_specs(args.suite, seed)
    sources = [
        synthetic_source(generate(spec), SUITE_NOISE)
        for spec in specs.values()
    ]
    cfg = PipelineConfig(seed=seed)
    rows = ablate(sources, cfg, workers=args.workers)
    lines = ["row,Q,Acc,Rob,NRE,DRE,ADQ,J,F,JF,mean_final_memory"]
    for row in rows:
        b = row.bundle
        values = [
            row.name,
            *(
                formats.format_metric(v)
                for v in (b.Q, b.Acc, b.Rob, b.NRE, b.DRE, b.ADQ,
                          b.J_mean, b.F_mean, b.JF_mean)
            ),
            f"{row.mean_final_memory:g}",
        ]
        lines.append(",".join(values))
        print(f"{row.name:10s} Q={b.Q:.4f} Acc={b.Acc:.4f}")
    formats.atomic_write_bytes(args.out, ("\n".join(lines) + "\n").encode())
    return 0


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smemvos",
        description=(
            "Smart-memory video object segmentation: run sequences, "
            "evaluate predictions, and reproduce the memory and component "
            "benchmarks."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="track one sequence and write outputs")
    p_run.add_argument("--manifest", required=True,
                       help="scene spec JSON (synthetic) or sequence manifest (file)")
    p_run.add_argument("--config", required=True, help="pipeline config file")
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.add_argument("--backend", choices=("synthetic", "file"),
                       default="synthetic")
    p_run.add_argument("--noise", choices=("none", "suite"), default="none",
                       help="synthetic segmenter noise profile")
    p_run.set_defaults(func=_cmd_run)

    p_eval = sub.add_parser("eval", help="score predictions against ground truth")
    p_eval.add_argument("--pred", required=True, help="prediction mask directory")
    p_eval.add_argument("--gt", required=True, help="ground-truth mask directory")
    p_eval.add_argument("--track-threshold", type=float, default=0.0,
                        dest="track_threshold",
                        help="IoU above this counts as tracked (default 0)")
    p_eval.add_argument("--out", help="write CSV here instead of stdout")
    p_eval.set_defaults(func=_cmd_eval)

    p_synth = sub.add_parser("synth", help="materialize benchmark datasets")
    p_synth.add_argument("--suite", required=True,
                         help="suite name or 'all'")
    p_synth.add_argument("--out", required=True, help="output directory")
    p_synth.add_argument("--seed", type=int, help="suite seed (default: SMEM_SEED or 0)")
    p_synth.set_defaults(func=_cmd_synth)

    p_bench = sub.add_parser("bench-mem",
                             help="paired smem-on/off memory trace")
    p_bench.add_argument("--suite", default="constant-1000")
    p_bench.add_argument("--out", required=True, help="output CSV path")
    p_bench.add_argument("--seed", type=int)
    p_bench.set_defaults(func=_cmd_bench_mem)

    p_abl = sub.add_parser("ablate", help="four-row component table")
    p_abl.add_argument("--suite", default="all")
    p_abl.add_argument("--out", required=True, help="output CSV path")
    p_abl.add_argument("--seed", type=int)
    p_abl.add_argument("--workers", type=int, default=1,
                       help="parallel sequence workers")
    p_abl.set_defaults(func=_cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (
        FormatError,
        SceneValidationError,
        MetricAlignmentError,
        SequenceAborted,
        NotImplementedError,
        ValueError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
