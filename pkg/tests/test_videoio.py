import math
import os

import numpy as np
import pytest

from patchcraft_denoise.utils.data_types import FrameSequence, NoiseSpec
from patchcraft_denoise.utils.videoio import (
    PnmFormatError, add_noise, decode_pnm, encode_pnm, frame_noise, list_frame_files, psnr, quantize, read_ppm,
    read_sequence, sequence_psnr, write_ppm, write_sequence)


class TestPnm:

    def test_decode_p6_with_comment(self):
        data = b"P6\n# made by hand\n2 1\n255\n" + bytes([0, 128, 255, 10, 20, 30])
        frame = decode_pnm(data)
        assert frame.shape == (3, 1, 2)
        assert frame.dtype == np.float32
        np.testing.assert_allclose(frame[:, 0, 0], np.array([0, 128, 255]) / 255.0, rtol=1e-6)
        np.testing.assert_allclose(frame[:, 0, 1], np.array([10, 20, 30]) / 255.0, rtol=1e-6)

    def test_decode_p5(self):
        frame = decode_pnm(b"P5 2 2 255\n" + bytes([1, 2, 3, 4]))
        assert frame.shape == (1, 2, 2)
        assert quantize(frame).tolist() == [[[1, 2], [3, 4]]]

    def test_encode_header(self):
        payload = encode_pnm(np.zeros((3, 3, 4), dtype=np.float32))
        assert payload.startswith(b"P6\n4 3\n255\n")
        assert len(payload) == len(b"P6\n4 3\n255\n") + 36

    def test_quantize_clamps_and_rounds(self):
        values = np.array([-0.2, 0.0, 1.3, 1.0, 0.5 / 255.0 + 1e-9])
        assert quantize(values).tolist() == [0, 0, 255, 255, 1]

    def test_byte_values_survive_file_io(self, tmp_path):
        levels = np.arange(256, dtype=np.float32).reshape(1, 16, 16) / 255.0
        path = str(tmp_path / "frame.pgm")
        write_ppm(levels, path)
        assert quantize(read_ppm(path)).ravel().tolist() == list(range(256))

    @pytest.mark.parametrize("data", [
        b"P3\n1 1\n255\n000",
        b"P6\n1 1\n65535\n" + bytes(6),
        b"P6\n1 1\n255\n" + bytes(2),
        b"P6\n1 x\n255\n" + bytes(3),
        b"P6\n1 1",
    ])
    def test_malformed(self, data):
        with pytest.raises(PnmFormatError):
            decode_pnm(data)


class TestSequenceIo:

    def test_directory_round_trip_and_order(self, tmp_path):
        frames = np.stack([np.full((3, 2, 2), k / 255.0, dtype=np.float32) for k in (10, 20, 30)])
        directory = str(tmp_path / "clip")
        write_sequence(FrameSequence(frames), directory)
        with open(os.path.join(directory, "notes.txt"), "w") as f:
            f.write("ignored")
        assert [os.path.basename(p) for p in list_frame_files(directory)] == \
            ["frame_00000.ppm", "frame_00001.ppm", "frame_00002.ppm"]
        np.testing.assert_allclose(read_sequence(directory).frames, frames, atol=1e-6)

    def test_tensor_file_sequence(self, tmp_path):
        frames = np.random.default_rng(0).random((2, 1, 3, 3)).astype(np.float32)
        path = str(tmp_path / "clip.pct")
        write_sequence(FrameSequence(frames), path)
        np.testing.assert_array_equal(read_sequence(path).frames, frames)

    def test_empty_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_sequence(str(tmp_path))


class TestNoise:

    def test_deterministic_per_frame(self):
        a = frame_noise((3, 4, 4), seed=7, frame_index=2)
        np.testing.assert_array_equal(a, frame_noise((3, 4, 4), seed=7, frame_index=2))
        assert not np.array_equal(a, frame_noise((3, 4, 4), seed=7, frame_index=3))
        assert not np.array_equal(a, frame_noise((3, 4, 4), seed=8, frame_index=2))

    def test_frame_noise_independent_of_sequence_length(self):
        spec = NoiseSpec(sigma=25, seed=3)
        long = add_noise(FrameSequence(np.full((4, 1, 6, 6), 0.5, dtype=np.float32)), spec)
        short = add_noise(FrameSequence(np.full((2, 1, 6, 6), 0.5, dtype=np.float32)), spec)
        np.testing.assert_array_equal(long.frames[:2], short.frames)

    def test_standard_deviation_and_mean(self):
        # 4*3*288*288 ≈ 1e6 个样本
        clean = FrameSequence(np.full((4, 3, 288, 288), 0.5, dtype=np.float32))
        noise = add_noise(clean, NoiseSpec(sigma=25, seed=0)).frames.astype(np.float64) - 0.5
        assert np.std(noise) == pytest.approx(25 / 255, rel=0.01)
        assert abs(np.mean(noise)) < 5e-4

    def test_psnr_decreases_with_sigma(self):
        clean = FrameSequence(np.full((2, 3, 64, 64), 0.5, dtype=np.float32))
        sigmas = [5, 15, 25, 50]
        values = [sequence_psnr(clean, add_noise(clean, NoiseSpec(sigma=s, seed=1)))[1] for s in sigmas]
        assert all(a > b for a, b in zip(values, values[1:]))
        for sigma, value in zip(sigmas, values):
            assert value == pytest.approx(20 * math.log10(255 / sigma), abs=0.1)

    def test_zero_sigma_is_identity(self):
        clean = FrameSequence(np.random.default_rng(0).random((2, 1, 4, 4)).astype(np.float32))
        np.testing.assert_array_equal(add_noise(clean, NoiseSpec(sigma=0)).frames, clean.frames)

    def test_clipped_range(self):
        clean = FrameSequence(np.random.default_rng(0).random((2, 3, 16, 16)).astype(np.float32))
        noisy = add_noise(clean, NoiseSpec(sigma=50, clipped=True)).frames
        assert noisy.min() >= 0.0 and noisy.max() <= 1.0
        unclipped = add_noise(clean, NoiseSpec(sigma=50)).frames
        assert unclipped.min() < 0.0 or unclipped.max() > 1.0


class TestPsnr:

    def test_identical_is_infinite(self):
        frame = np.random.default_rng(0).random((3, 4, 4))
        assert math.isinf(psnr(frame, frame.copy()))

    def test_known_value(self):
        assert psnr(np.zeros((1, 2, 2)), np.full((1, 2, 2), 0.1)) == pytest.approx(20.0)

    def test_sequence_mean(self):
        clean = FrameSequence(np.zeros((2, 1, 2, 2), dtype=np.float32))
        test = FrameSequence(np.stack([np.full((1, 2, 2), 0.1), np.full((1, 2, 2), 0.01)]).astype(np.float32))
        values, mean = sequence_psnr(clean, test)
        assert values == pytest.approx([20.0, 40.0], rel=1e-5)
        assert mean == pytest.approx(30.0, rel=1e-5)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((1, 2, 2)), np.zeros((1, 2, 3)))
