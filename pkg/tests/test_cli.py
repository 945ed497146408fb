import os

import pytest

from patchcraft_denoise.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from patchcraft_denoise.utils.synthetic import make_clip
from patchcraft_denoise.utils.videoio import read_sequence, write_sequence

SMALL = ["--set", "synthetic.frames=3", "--set", "synthetic.height=16", "--set", "synthetic.width=16"]


class TestCli:

    def test_psnr_of_identical_sequences(self, tmp_path, capsys):
        path = str(tmp_path / "clip")
        write_sequence(make_clip(0, "translate", 2, 8, 8), path)
        assert main(["psnr", "--clean", path, "--test", path]) == EXIT_OK
        out = capsys.readouterr().out
        assert "# 生效配置" in out
        assert "noise.sigma = 25.0" in out
        assert "frame 1: inf dB" in out
        assert "mean: inf dB" in out

    def test_params_full_preset(self, tmp_path, capsys):
        assert main(["params", "--preset", "full", "--output-dir", str(tmp_path)]) == EXIT_OK
        out = capsys.readouterr().out
        assert "# 生效配置" in out
        assert "1,351,959" in out
        assert "1,422,099" in out
        assert os.path.exists(tmp_path / "params.txt")

    def test_unknown_flag(self, capsys):
        assert main(["params", "--depth", "3"]) == EXIT_USAGE

    def test_missing_command(self, capsys):
        assert main([]) == EXIT_USAGE

    @pytest.mark.parametrize("assignment", ["scnn.depth=3", "n=four", "window.Ts"])
    def test_bad_override(self, tmp_path, assignment, capsys):
        assert main(["params", "--output-dir", str(tmp_path), "--set", assignment]) == EXIT_USAGE
        assert "配置错误" in capsys.readouterr().err

    def test_missing_input(self, tmp_path, capsys):
        code = main(["psnr", "--clean", str(tmp_path / "absent.pct"), "--test", str(tmp_path / "absent.pct")])
        assert code == EXIT_DATA

    def test_malformed_frame(self, tmp_path, capsys):
        clip = tmp_path / "clip"
        clip.mkdir()
        (clip / "frame_00000.pgm").write_bytes(b"P5\n4 4\n255\n\x00")
        assert main(["psnr", "--clean", str(clip), "--test", str(clip)]) == EXIT_DATA

    def test_make_synthetic(self, tmp_path):
        output = tmp_path / "synthetic"
        assert main(["make-synthetic", "--output", str(output), "--count", "2", "--output-dir", str(tmp_path),
                     *SMALL]) == EXIT_OK
        assert sorted(os.listdir(output)) == ["clip_000", "clip_001"]
        assert read_sequence(str(output / "clip_001")).frames.shape == (3, 1, 16, 16)


@pytest.mark.integration
class TestCliWorkflow:

    def test_train_then_denoise(self, tmp_path, capsys):
        work = str(tmp_path / "work")
        tiny = SMALL + ["--set", "spatial_train.steps=2", "--set", "spatial_train.batch=1",
                        "--set", "spatial_train.crop=8", "--set", "spatial_train.clips=1"]
        assert main(["train-spatial", "--output-dir", work, *tiny]) == EXIT_OK
        checkpoint = os.path.join(work, "scnn")
        assert os.path.exists(os.path.join(checkpoint, "manifest.json"))

        clean = str(tmp_path / "clean")
        write_sequence(make_clip(5, "translate", 3, 16, 16), clean)
        output = str(tmp_path / "denoised")
        code = main(["denoise", "--input", clean, "--output", output, "--scnn", checkpoint, "--mode", "scnn0",
                     "--add-noise", "--output-dir", work, *tiny])
        assert code == EXIT_OK
        assert "平均PSNR" in capsys.readouterr().out
        assert read_sequence(output).frames.shape == (3, 1, 16, 16)
        assert os.path.exists(os.path.join(work, "psnr.csv"))

    def test_pacnet_without_tcnn_is_data_error(self, tmp_path):
        work = str(tmp_path / "work")
        tiny = SMALL + ["--set", "spatial_train.steps=1", "--set", "spatial_train.batch=1",
                        "--set", "spatial_train.crop=8", "--set", "spatial_train.clips=1"]
        assert main(["train-spatial", "--output-dir", work, *tiny]) == EXIT_OK
        clean = str(tmp_path / "clean")
        write_sequence(make_clip(5, "translate", 3, 16, 16), clean)
        code = main(["denoise", "--input", clean, "--output", str(tmp_path / "out"),
                     "--scnn", os.path.join(work, "scnn"), "--mode", "pacnet", "--output-dir", work])
        assert code == EXIT_DATA

    def test_mismatched_checkpoint_is_data_error(self, tmp_path):
        work = str(tmp_path / "work")
        tiny = SMALL + ["--set", "spatial_train.steps=1", "--set", "spatial_train.batch=1",
                        "--set", "spatial_train.crop=8", "--set", "spatial_train.clips=1"]
        assert main(["train-spatial", "--output-dir", work, *tiny]) == EXIT_OK
        clean = str(tmp_path / "clean")
        write_sequence(make_clip(5, "translate", 3, 16, 16), clean)
        code = main(["denoise", "--input", clean, "--output", str(tmp_path / "out"),
                     "--scnn", os.path.join(work, "scnn"), "--mode", "scnn3", "--set", "scnn.m=5",
                     "--output-dir", work])
        assert code == EXIT_DATA
