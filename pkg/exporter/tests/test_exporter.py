import numpy as np
import pytest
from PIL import Image

from smemexport.cli import main
from smemexport.features import ModelError, PatchExtractor
from smemexport.jobs import (
    ExportError,
    ExportJob,
    convert_palette_masks,
    export_embeddings,
    export_proposals,
    export_sequence,
    read_boxes_file,
)

# conformance is judged by the tracker package's own readers
from smemvos.backends.files import file_source
from smemvos.formats import (
    read_embeddings_file,
    read_manifest,
    read_mask_file,
    validate_manifest,
)
from smemvos.pipeline import PipelineConfig, run_sequence


def write_frames(tmp_path, n=6, h=24, w=36):
    frames_dir = tmp_path / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    for t in range(n):
        rgb = np.zeros((h, w, 3), dtype=np.uint8)
        rgb[..., 0] = np.linspace(0, 255, w, dtype=np.uint8)[None, :]
        rgb[..., 1] = np.linspace(0, 255, h, dtype=np.uint8)[:, None]
        # a moving bright square = the "object"
        c = 4 + 4 * t
        rgb[8:16, c : c + 8] = (250, 250, 20)
        Image.fromarray(rgb).save(frames_dir / f"{t:05d}.png")
    return frames_dir


def write_palette_masks(tmp_path, n=6, h=24, w=36, two_objects=False):
    masks_dir = tmp_path / "palette"
    masks_dir.mkdir(parents=True, exist_ok=True)
    arrays = []
    palette = [0, 0, 0, 255, 0, 0, 0, 255, 0] + [0] * (256 * 3 - 9)
    for t in range(n):
        indices = np.zeros((h, w), dtype=np.uint8)
        c = 4 + 4 * t
        indices[8:16, c : c + 8] = 1
        if two_objects and t % 2 == 0:
            indices[0:4, 0:6] = 2
        img = Image.fromarray(indices, mode="P")
        img.putpalette(palette)
        img.save(masks_dir / f"{t:05d}.png")
        arrays.append(indices)
    return masks_dir, arrays


class TestFeatures:
    def test_unknown_model_rejected(self):
        with pytest.raises(ModelError):
            PatchExtractor("resnet-900", 8, (4, 4))

    def test_deterministic_features(self, tmp_path):
        frames = write_frames(tmp_path, n=1)
        rgb = np.asarray(Image.open(frames / "00000.png").convert("RGB"))
        ex = PatchExtractor("builtin-gray-patch", 16, (8, 12))
        assert np.array_equal(ex.cell_features(rgb), ex.cell_features(rgb))
        assert np.array_equal(ex.frame_key(rgb), ex.frame_key(rgb))

    def test_masked_mean_empty_is_zero(self, tmp_path):
        frames = write_frames(tmp_path, n=1)
        rgb = np.asarray(Image.open(frames / "00000.png").convert("RGB"))
        ex = PatchExtractor("builtin-gray-patch", 6, (4, 6))
        got = ex.masked_mean(rgb, np.zeros(rgb.shape[:2], dtype=bool))
        assert np.array_equal(got, np.zeros(6, dtype=np.float32))


class TestExportEmbeddings:
    def test_files_pass_primary_validation(self, tmp_path):
        frames = write_frames(tmp_path, n=10)
        job = ExportJob(frames_dir=frames, out_dir=tmp_path / "out", dim=12)
        report = export_embeddings(job)
        keys, meta = read_embeddings_file(tmp_path / "out" / "keys.smem")
        assert len(keys) == 10
        assert keys[0].dim == 12
        assert "pool=gap" in meta and "model=builtin-gray-patch" in meta
        assert report.feature_rels  # patch features written
        cells, meta = read_embeddings_file(
            tmp_path / "out" / report.feature_rels[0]
        )
        assert "grid=8x12" in meta
        assert len(cells) == 8 * 12

    def test_requested_dim_matches_emitted(self, tmp_path):
        frames = write_frames(tmp_path, n=3)
        for dim in (4, 384):
            job = ExportJob(frames_dir=frames, out_dir=tmp_path / f"d{dim}", dim=dim)
            export_embeddings(job, with_patch_features=False)
            keys, _ = read_embeddings_file(tmp_path / f"d{dim}" / "keys.smem")
            assert all(k.dim == dim for k in keys)

    def test_re_export_identical_bytes(self, tmp_path):
        frames = write_frames(tmp_path)
        for name in ("a", "b"):
            export_embeddings(
                ExportJob(frames_dir=frames, out_dir=tmp_path / name)
            )
        a = (tmp_path / "a" / "keys.smem").read_bytes()
        b = (tmp_path / "b" / "keys.smem").read_bytes()
        assert a == b

    def test_unreadable_frame_fails_naming_it(self, tmp_path):
        frames = write_frames(tmp_path, n=3)
        (frames / "00001.png").write_bytes(b"not an image")
        job = ExportJob(frames_dir=frames, out_dir=tmp_path / "out")
        with pytest.raises(ExportError) as err:
            export_embeddings(job)
        assert "00001.png" in str(err.value)

    def test_empty_dir_rejected(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(ExportError):
            export_embeddings(
                ExportJob(frames_dir=tmp_path / "empty", out_dir=tmp_path / "o")
            )


class TestPaletteConversion:
    def test_lossless_round_trip(self, tmp_path):
        masks_dir, originals = write_palette_masks(tmp_path, two_objects=True)
        report = convert_palette_masks(masks_dir, tmp_path / "out")
        assert not report.failures
        for t, original in enumerate(originals):
            decoded = read_mask_file(tmp_path / "out" / report.mask_rels[t])
            rebuilt = np.zeros_like(original)
            for oid, mask in decoded:
                rebuilt[mask.bits] = oid
            assert np.array_equal(rebuilt, original)

    def test_object_ids_are_palette_indices(self, tmp_path):
        masks_dir, _ = write_palette_masks(tmp_path, two_objects=True)
        report = convert_palette_masks(masks_dir, tmp_path / "out")
        decoded = read_mask_file(tmp_path / "out" / report.mask_rels[0])
        assert [oid for oid, _ in decoded] == [1, 2]

    def test_absent_object_becomes_empty_mask(self, tmp_path):
        masks_dir, _ = write_palette_masks(tmp_path, two_objects=True)
        report = convert_palette_masks(masks_dir, tmp_path / "out")
        decoded = dict(read_mask_file(tmp_path / "out" / report.mask_rels[1]))
        assert decoded[2].is_empty  # object 2 only exists on even frames

    def test_non_palette_image_reported(self, tmp_path):
        masks_dir, _ = write_palette_masks(tmp_path)
        rgb = np.zeros((24, 36, 3), dtype=np.uint8)
        Image.fromarray(rgb).save(masks_dir / "zz_rgb.png")
        report = convert_palette_masks(masks_dir, tmp_path / "out")
        assert any("mode RGB" in f for f in report.failures)
        # the job continued: the other frames were converted
        assert len(report.mask_rels) == 6


class TestExportProposals:
    def test_three_proposals_per_box(self, tmp_path):
        frames = write_frames(tmp_path)
        job = ExportJob(frames_dir=frames, out_dir=tmp_path / "out", dim=8)
        report = export_proposals(job, [(0, 8, 4, 15, 11), (2, 8, 12, 15, 19)])
        assert len(report.proposal_entries) == 2
        for rels in report.proposal_entries.values():
            assert len(rels) == 4
            for rel in rels[:3]:
                objects = read_mask_file(tmp_path / "out" / rel)
                assert len(objects) == 1
            apps, meta = read_embeddings_file(tmp_path / "out" / rels[3])
            assert len(apps) == 3
            assert "pool=masked-mean" in meta

    def test_bad_box_reported_job_continues(self, tmp_path):
        frames = write_frames(tmp_path)
        job = ExportJob(frames_dir=frames, out_dir=tmp_path / "out")
        report = export_proposals(
            job, [(0, 0, 0, 99, 99), (1, 8, 4, 15, 11), (42, 0, 0, 1, 1)]
        )
        assert len(report.failures) == 2
        assert len(report.proposal_entries) == 1

    def test_empty_box_list(self, tmp_path):
        frames = write_frames(tmp_path)
        job = ExportJob(frames_dir=frames, out_dir=tmp_path / "out")
        report = export_proposals(job, [])
        assert report.proposal_entries == {}
        assert report.failures == []


class TestFullExport:
    def test_manifest_passes_primary_validators(self, tmp_path):
        frames = write_frames(tmp_path)
        masks_dir, _ = write_palette_masks(tmp_path)
        job = ExportJob(
            frames_dir=frames,
            out_dir=tmp_path / "out",
            sequence_id="clip",
            dim=10,
        )
        report = export_sequence(
            job,
            palette_masks_dir=masks_dir,
            boxes=[(1, 8, 8, 15, 15)],
        )
        assert not report.failures
        manifest = read_manifest(job.manifest_path)
        validate_manifest(manifest)
        assert manifest.sequence_id == "clip"
        assert manifest.frames == 6
        assert manifest.feature_paths  # patch features present
        assert manifest.proposal_entries

    def test_primary_pipeline_replays_export(self, tmp_path):
        frames = write_frames(tmp_path)
        masks_dir, _ = write_palette_masks(tmp_path)
        job = ExportJob(frames_dir=frames, out_dir=tmp_path / "out")
        export_sequence(job, palette_masks_dir=masks_dir)
        source = file_source(read_manifest(job.manifest_path))
        result = run_sequence(
            source.descriptor,
            source.gt_first,
            PipelineConfig(seed=0),
            source.embedder,
            source.segmenter,
            source.refiner,
        )
        assert result.num_frames == 6
        assert result.masks[3] == source.gt[3]  # fail-open replay

    def test_boxes_from_masks_feed_replay_fusion(self, tmp_path):
        """With derived box prompts, the tracker's file refiner finds a
        stored triple for every runtime prompt and fusion runs end to end
        (no per-object backend errors)."""
        from smemvos.fusion import fuse_frame

        frames = write_frames(tmp_path)
        masks_dir, _ = write_palette_masks(tmp_path)
        job = ExportJob(frames_dir=frames, out_dir=tmp_path / "out", dim=8)
        export_sequence(job, palette_masks_dir=masks_dir, boxes_from_masks=True)
        manifest = read_manifest(job.manifest_path)
        validate_manifest(manifest)
        source = file_source(manifest)
        frame3 = source.descriptor
        from smemvos.backends import FrameRef

        ref = FrameRef(frame3.sequence_id, 3, frame3.height, frame3.width)
        outcomes = fuse_frame(
            source.gt[3], source.refiner, source.embedder, ref, tau_fuse=0.6
        )
        assert all(o.error is None for o in outcomes)
        assert all(o.chosen_rank is not None for o in outcomes)

    def test_re_export_determinism_whole_tree(self, tmp_path):
        frames = write_frames(tmp_path)
        masks_dir, _ = write_palette_masks(tmp_path)
        trees = []
        for name in ("x", "y"):
            job = ExportJob(frames_dir=frames, out_dir=tmp_path / name)
            export_sequence(
                job, palette_masks_dir=masks_dir, boxes=[(0, 8, 4, 15, 11)]
            )
            trees.append({
                p.relative_to(tmp_path / name).as_posix(): p.read_bytes()
                for p in sorted((tmp_path / name).rglob("*"))
                if p.is_file()
            })
        assert trees[0] == trees[1]

    def test_frame_mask_count_mismatch_rejected(self, tmp_path):
        frames = write_frames(tmp_path, n=6)
        masks_dir, _ = write_palette_masks(tmp_path, n=4)
        job = ExportJob(frames_dir=frames, out_dir=tmp_path / "out")
        with pytest.raises(ExportError):
            export_sequence(job, palette_masks_dir=masks_dir)


class TestCli:
    def test_export_command(self, tmp_path, capsys):
        frames = write_frames(tmp_path)
        masks_dir, _ = write_palette_masks(tmp_path)
        boxes = tmp_path / "boxes.txt"
        boxes.write_text("0 8 4 15 11\n")
        rc = main([
            "export", "--frames", str(frames), "--masks", str(masks_dir),
            "--boxes", str(boxes), "--out", str(tmp_path / "out"),
            "--sequence", "clip", "--dim", "8",
        ])
        assert rc == 0
        manifest = read_manifest(tmp_path / "out" / "sequence.manifest")
        validate_manifest(manifest)

    def test_convert_masks_command(self, tmp_path):
        masks_dir, originals = write_palette_masks(tmp_path)
        rc = main(["convert-masks", "--masks", str(masks_dir), "--out",
                   str(tmp_path / "out")])
        assert rc == 0
        decoded = read_mask_file(tmp_path / "out" / "masks" / "frame_00000.smrl")
        rebuilt = np.zeros_like(originals[0])
        for oid, mask in decoded:
            rebuilt[mask.bits] = oid
        assert np.array_equal(rebuilt, originals[0])

    def test_missing_frames_dir_errors(self, tmp_path, capsys):
        rc = main(["embeddings", "--frames", str(tmp_path / "ghost"),
                   "--out", str(tmp_path / "out")])
        assert rc == 2
        assert "ghost" in capsys.readouterr().err

    def test_boxes_file_parsing(self, tmp_path):
        path = tmp_path / "boxes.txt"
        path.write_text("0 1 2 3 4\n\n5 6 7 8 9\n")
        assert read_boxes_file(path) == [(0, 1, 2, 3, 4), (5, 6, 7, 8, 9)]
        path.write_text("0 1 2\n")
        with pytest.raises(ExportError):
            read_boxes_file(path)

    def test_help_lists_flags(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["export", "--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        for flag in ("--frames", "--masks", "--boxes", "--out", "--model",
                     "--dim", "--grid"):
            assert flag in out
