import glob
import hashlib
import os

import numpy as np
import pytest

from patchcraft_denoise.core.scnn import ScnnModel
from patchcraft_denoise.core.tcnn import TcnnModel
from patchcraft_denoise.utils.checkpoint import CheckpointMismatchError, read_manifest, save_checkpoint
from patchcraft_denoise.utils.data_types import FrameSequence, NoiseSpec
from patchcraft_denoise.utils.synthetic import make_clip
from patchcraft_denoise.utils.tensor_file import read_tensor
from patchcraft_denoise.utils.videoio import add_noise, write_sequence
from patchcraft_denoise.workflow.config import PipelineConfig
from patchcraft_denoise.workflow.runner import PipelineRunner

TINY_TRAINING = [
    "synthetic.frames=3", "synthetic.height=16", "synthetic.width=16",
    "spatial_train.steps=3", "spatial_train.steps_per_epoch=2", "spatial_train.batch=1",
    "spatial_train.crop=8", "spatial_train.clips=1",
    "temporal_train.steps=2", "temporal_train.batch=1", "temporal_train.crop=8", "temporal_train.clips=1",
]


def _noisy_clip(frames=3, size=16, seed=0):
    clean = make_clip(seed, "translate", frames, size, size, 1)
    return clean, add_noise(clean, NoiseSpec(sigma=25, seed=seed))


def _scnn_checkpoint(config, path):
    model = ScnnModel(config.scnn, seed=1, zero_last=False)
    save_checkpoint(path, model.bank, "scnn", config.scnn_identity())
    return path


def _tree_digest(path):
    sha = hashlib.sha256()
    for name in sorted(os.listdir(path)):
        with open(os.path.join(path, name), "rb") as f:
            sha.update(name.encode("utf-8") + f.read())
    return sha.hexdigest()


@pytest.mark.integration
class TestDenoise:

    def test_single_frame_modes_agree(self, tmp_path, desk_config):
        checkpoint = _scnn_checkpoint(desk_config(), str(tmp_path / "scnn"))
        _, noisy = _noisy_clip(frames=1)
        scnn3, _ = PipelineRunner(desk_config("mode=scnn3")).denoise(noisy, checkpoint)
        scnn0, _ = PipelineRunner(desk_config("mode=scnn0")).denoise(noisy, checkpoint)
        np.testing.assert_array_equal(scnn0.frames, scnn3.frames)

    def test_zero_initialized_tcnn_keeps_spatial_output(self, tmp_path, desk_config):
        config = desk_config()
        checkpoint = _scnn_checkpoint(config, str(tmp_path / "scnn"))
        tcnn_path = str(tmp_path / "tcnn")
        save_checkpoint(tcnn_path, TcnnModel(config.tcnn).bank, "tcnn", config.tcnn_identity())
        _, noisy = _noisy_clip()
        pacnet, _ = PipelineRunner(desk_config("mode=pacnet")).denoise(noisy, checkpoint, tcnn_path)
        scnn3, _ = PipelineRunner(desk_config("mode=scnn3")).denoise(noisy, checkpoint)
        np.testing.assert_array_equal(pacnet.frames, scnn3.frames)

    def test_deterministic_across_workers(self, tmp_path, desk_config):
        checkpoint = _scnn_checkpoint(desk_config(), str(tmp_path / "scnn"))
        _, noisy = _noisy_clip()
        single, _ = PipelineRunner(desk_config("mode=scnn3", "workers=1")).denoise(noisy, checkpoint)
        again, _ = PipelineRunner(desk_config("mode=scnn3", "workers=1")).denoise(noisy, checkpoint)
        pooled, _ = PipelineRunner(desk_config("mode=scnn3", "workers=3")).denoise(noisy, checkpoint)
        np.testing.assert_array_equal(single.frames, again.frames)
        np.testing.assert_array_equal(single.frames, pooled.frames)

    def test_cache_reuse_is_bit_identical(self, tmp_path, desk_config):
        checkpoint = _scnn_checkpoint(desk_config(), str(tmp_path / "scnn"))
        _, noisy = _noisy_clip()
        cache = f"cache_dir={tmp_path / 'cache'}"
        first_runner = PipelineRunner(desk_config("mode=scnn3", cache))
        first, _ = first_runner.denoise(noisy, checkpoint)
        assert (first_runner.cache.hits, first_runner.cache.misses) == (0, 3)

        second_runner = PipelineRunner(desk_config("mode=scnn3", cache))
        second, _ = second_runner.denoise(noisy, checkpoint)
        assert (second_runner.cache.hits, second_runner.cache.misses) == (3, 0)
        np.testing.assert_array_equal(first.frames, second.frames)

    def test_corrupted_cache_entry_is_recomputed(self, tmp_path, desk_config):
        checkpoint = _scnn_checkpoint(desk_config(), str(tmp_path / "scnn"))
        _, noisy = _noisy_clip()
        cache_dir = tmp_path / "cache"
        first, _ = PipelineRunner(desk_config("mode=scnn3", f"cache_dir={cache_dir}")).denoise(noisy, checkpoint)

        victim = sorted(glob.glob(str(cache_dir / "*.pos.pct")))[0]
        with open(victim, "r+b") as f:
            f.seek(-4, os.SEEK_END)
            f.write(b"\x00\x00\x80\x7f")

        runner = PipelineRunner(desk_config("mode=scnn3", f"cache_dir={cache_dir}"))
        second, _ = runner.denoise(noisy, checkpoint)
        assert (runner.cache.hits, runner.cache.corrupted) == (2, 1)
        np.testing.assert_array_equal(first.frames, second.frames)

    def test_checkpoint_mismatch_rejected_before_compute(self, tmp_path, desk_config):
        checkpoint = _scnn_checkpoint(desk_config(), str(tmp_path / "scnn"))
        _, noisy = _noisy_clip()
        runner = PipelineRunner(desk_config("mode=scnn3", "scnn.m=5"))
        with pytest.raises(CheckpointMismatchError):
            runner.denoise(noisy, checkpoint)
        assert "search" not in runner.timings

    def test_pacnet_requires_tcnn(self, tmp_path, desk_config):
        checkpoint = _scnn_checkpoint(desk_config(), str(tmp_path / "scnn"))
        _, noisy = _noisy_clip()
        with pytest.raises(CheckpointMismatchError):
            PipelineRunner(desk_config("mode=pacnet")).denoise(noisy, checkpoint)

    def test_channel_mismatch(self, tmp_path, desk_config):
        checkpoint = _scnn_checkpoint(desk_config(), str(tmp_path / "scnn"))
        noisy = FrameSequence(np.zeros((1, 3, 16, 16), dtype=np.float32))
        with pytest.raises(ValueError):
            PipelineRunner(desk_config("mode=scnn3")).denoise(noisy, checkpoint)

    def test_report_and_outputs(self, tmp_path, desk_config):
        config = desk_config("mode=scnn3")
        checkpoint = _scnn_checkpoint(config, str(tmp_path / "scnn"))
        clean, noisy = _noisy_clip()
        runner = PipelineRunner(config)
        denoised, report = runner.denoise(noisy, checkpoint, clean=clean)
        assert len(report.frame_psnr) == len(report.noisy_psnr) == 3
        assert report.average_psnr == pytest.approx(np.mean(report.frame_psnr))
        assert {"load", "search", "patchcraft", "scnn"} <= set(report.timings)
        assert report.config["mode"] == "scnn3"

        runner.write_outputs(denoised, report, str(tmp_path / "denoised"))
        assert len(os.listdir(tmp_path / "denoised")) == 3
        with open(os.path.join(config.output_dir, "psnr.csv"), encoding="utf-8") as f:
            assert f.readline().strip() == "frame,psnr,noisy_psnr"
            assert len(f.readlines()) == 3
        assert os.path.exists(os.path.join(config.output_dir, "report.md"))
        assert os.path.exists(os.path.join(config.output_dir, "run.log"))

    def test_report_is_identical_across_reruns(self, tmp_path, desk_config):
        config = desk_config("mode=scnn3")
        checkpoint = _scnn_checkpoint(config, str(tmp_path / "scnn"))
        clean, noisy = _noisy_clip()
        contents = []
        for attempt in range(2):
            runner = PipelineRunner(config)
            denoised, report = runner.denoise(noisy, checkpoint, clean=clean)
            runner.write_outputs(denoised, report, str(tmp_path / f"denoised_{attempt}"))
            with open(os.path.join(config.output_dir, "report.md"), "rb") as f:
                contents.append(f.read())
        assert contents[0] == contents[1]
        with open(os.path.join(config.output_dir, "timings.md"), encoding="utf-8") as f:
            timings = f.read()
        assert "生成时间" in timings and "| search |" in timings

    def test_augment_to_dir(self, tmp_path, desk_config):
        _, noisy = _noisy_clip()
        paths = PipelineRunner(desk_config()).augment_to_dir(noisy, str(tmp_path / "aug"))
        assert [os.path.basename(p) for p in paths] == ["aug_00000.pct", "aug_00001.pct", "aug_00002.pct"]
        aug = read_tensor(paths[1])
        assert aug.shape == (5, 10, 1, 16, 16)
        np.testing.assert_array_equal(aug[0, 0], noisy[1])


@pytest.mark.integration
class TestTraining:

    def test_spatial_then_temporal(self, desk_config):
        runner = PipelineRunner(desk_config(*TINY_TRAINING))
        clips = runner.training_clips()
        assert len(clips) == 1 and clips[0].frames.shape == (3, 1, 16, 16)

        _, records, scnn_path = runner.train_spatial(clips)
        assert [r.step for r in records] == [1, 2, 3]
        manifest = read_manifest(scnn_path)
        assert (manifest["network"], manifest["step"], manifest["epoch"]) == ("scnn", 3, 2)
        with open(os.path.join(runner.config.output_dir, "scnn_loss.csv"), encoding="utf-8") as f:
            assert len(f.readlines()) == 4

        before = _tree_digest(scnn_path)
        _, records, tcnn_path = runner.train_temporal(clips, scnn_path)
        assert len(records) == 2
        assert _tree_digest(scnn_path) == before
        manifest = read_manifest(tcnn_path)
        assert (manifest["network"], manifest["step"]) == ("tcnn", 2)
        runner.load_tcnn(tcnn_path)

    def test_noisy_clip_seeds(self, desk_config):
        runner = PipelineRunner(desk_config())
        clean, _ = _noisy_clip()
        assert not np.array_equal(runner.noisy_clip(clean, 0).frames, runner.noisy_clip(clean, 1).frames)
        np.testing.assert_array_equal(runner.noisy_clip(clean, 1).frames, runner.noisy_clip(clean, 1).frames)

    def test_temporal_training_data_is_disjoint(self, desk_config):
        runner = PipelineRunner(desk_config("spatial_train.clips=2"))
        spatial = runner.training_clips(count=2)
        temporal = runner.training_clips(count=2, temporal=True)
        for a in spatial:
            for b in temporal:
                assert not np.array_equal(a.frames, b.frames)
        clean, _ = _noisy_clip()
        assert not np.array_equal(runner.noisy_clip(clean, 0).frames, runner.noisy_clip(clean, 0, temporal=True).frames)

    def test_temporal_pass_uses_only_window_frames(self, desk_config):
        runner = PipelineRunner(desk_config())
        model = TcnnModel(runner.config.tcnn, seed=2, zero_last=False)
        rng = np.random.default_rng(6)
        noisy = rng.random((7, 1, 8, 8)).astype(np.float32)
        spatial = rng.random((7, 1, 8, 8)).astype(np.float32)
        base = runner.temporal_pass(noisy, spatial, model)
        noisy[[0, 1, 5, 6]] = rng.random((4, 1, 8, 8))
        spatial[[0, 1, 5, 6]] = rng.random((4, 1, 8, 8))
        again = runner.temporal_pass(noisy, spatial, model)
        # 时间半径为1, 帧3的窗口为 [2, 3, 4]
        np.testing.assert_array_equal(again[3], base[3])
        assert not np.array_equal(again[1], base[1])

    def test_training_clips_from_directory(self, tmp_path, desk_config):
        data = tmp_path / "data"
        clean, _ = _noisy_clip()
        write_sequence(clean, str(data / "a"))
        write_sequence(clean, str(data / "b.pct"))
        clips = PipelineRunner(desk_config()).training_clips(str(data))
        assert len(clips) == 2
        np.testing.assert_array_equal(clips[1].frames, clean.frames)

    def test_empty_training_directory(self, tmp_path, desk_config):
        empty = tmp_path / "empty"
        empty.mkdir()
        with pytest.raises(FileNotFoundError):
            PipelineRunner(desk_config()).training_clips(str(empty))


class TestParamReport:

    def test_desk_closed_form_matches_enumeration(self, desk_config):
        rows, summary = PipelineRunner(desk_config()).param_report()
        assert len(rows) == 5 + 1 + 4
        assert all(row["closed_form"] == row["enumerated"] for row in rows)
        assert all(item["closed_form"] == item["enumerated"] for item in summary)

    def test_full_counts(self, tmp_path):
        config = PipelineConfig.resolve("full", None, [f"output_dir={tmp_path / 'out'}"])
        _, summary = PipelineRunner(config).param_report()
        by_module = {item["module"]: item for item in summary}
        assert by_module["S-CNN"]["closed_form"] == 1_351_959
        assert by_module["T-CNN"]["closed_form"] == 1_422_099
        assert by_module["total"]["closed_form"] == 2_774_058
        assert all(item["within"] for item in summary)
