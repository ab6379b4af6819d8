import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flickerlab.video import (
    ClipLoadError,
    VideoClip,
    load_clip,
    partition_gops,
    psnr,
    psnr_from_mse,
    save_clip,
    write_ppm,
)


def test_clip_validation():
    with pytest.raises(ValueError):
        VideoClip(np.zeros((2, 4, 4, 1)))
    with pytest.raises(ValueError):
        VideoClip(np.full((1, 4, 4, 3), 1.5))
    with pytest.raises(ValueError):
        VideoClip(np.zeros((0, 4, 4, 3)))
    clip = VideoClip(np.zeros((3, 4, 5, 3)))
    assert (clip.T, clip.height, clip.width, clip.channels) == (3, 4, 5, 3)
    assert not clip.frames.flags.writeable


def test_psnr_examples():
    a = np.zeros((4, 4, 3))
    assert psnr(a, a) == 99.0
    assert psnr(a, np.full_like(a, 0.5)) == pytest.approx(10 * math.log10(4), abs=1e-12)
    assert psnr(a, np.full_like(a, 0.5)) == pytest.approx(6.0206, abs=1e-4)
    assert psnr_from_mse(0.01) == pytest.approx(20.0, abs=1e-12)
    with pytest.raises(ValueError):
        psnr(a, np.zeros((4, 5, 3)))


def test_psnr_on_clips():
    x = VideoClip(np.full((2, 4, 4, 3), 0.25))
    y = VideoClip(np.full((2, 4, 4, 3), 0.35))
    assert psnr(x, y) == pytest.approx(20.0, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_psnr_symmetric_and_monotone(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((3, 8, 8, 3)), rng.random((3, 8, 8, 3))
    assert psnr(a, b) == psnr(b, a)
    # pulling b towards a lowers the MSE, so PSNR must rise
    closer = a + 0.5 * (b - a)
    assert psnr(a, closer) > psnr(a, b)


def test_partition_examples():
    assert [len(g) for g in partition_gops(30, 10)] == [10, 10, 10]
    assert [len(g) for g in partition_gops(10, 10)] == [10]
    assert [len(g) for g in partition_gops(25, 10)] == [10, 10, 5]
    with pytest.raises(ValueError):
        partition_gops(10, 0)


def test_partition_exhaustive_cover():
    for T in range(1, 101):
        for G in range(1, T + 1):
            gops = partition_gops(T, G)
            assert len(gops) == -(-T // G)
            covered = [t for g in gops for t in g.frame_indices]
            assert covered == list(range(T))
            assert all(len(g) == G for g in gops[:-1]) and 1 <= len(gops[-1]) <= G
            assert [g.index for g in gops] == list(range(len(gops)))


def test_round_trip_exhaustive_8bit(tmp_path):
    levels = np.arange(256, dtype=np.float64) / 255.0
    frame = np.stack([levels.reshape(16, 16)] * 3, axis=-1)
    clip = VideoClip(np.stack([frame, frame[::-1]]), fps=25.0, label=2)
    save_clip(clip, tmp_path / "c")
    loaded = load_clip(tmp_path / "c")
    assert np.array_equal(loaded.frames, clip.frames)
    assert loaded.label == 2 and loaded.fps == 25.0
    # manifest file path works as well as the directory
    assert np.array_equal(load_clip(tmp_path / "c" / "manifest.json").frames, clip.frames)


def test_save_quantises_by_rounding(tmp_path):
    clip = VideoClip(np.array([0.5, 1.0, 0.0]).reshape(1, 1, 1, 3))
    save_clip(clip, tmp_path)
    raw = (tmp_path / "frame_0000.ppm").read_bytes()
    assert raw[-3:] == bytes([128, 255, 0])
    assert load_clip(tmp_path).frames[0, 0, 0, 0] == pytest.approx(128 / 255)


def test_load_ten_frames(tmp_path):
    clip = VideoClip(np.random.default_rng(0).integers(0, 256, (10, 64, 64, 3)) / 255.0)
    save_clip(clip, tmp_path)
    loaded = load_clip(tmp_path)
    assert loaded.T == 10 and loaded.width == 64 and loaded.height == 64


def test_load_errors(tmp_path):
    with pytest.raises(ClipLoadError):
        load_clip(tmp_path / "missing")
    write_ppm(tmp_path / "a.ppm", np.zeros((4, 4, 3), np.uint8))
    write_ppm(tmp_path / "b.ppm", np.zeros((4, 5, 3), np.uint8))
    manifest = {"width": 4, "height": 4, "fps": 30, "frames": ["a.ppm", "b.ppm"]}
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(ClipLoadError, match="dimension mismatch"):
        load_clip(tmp_path)
    (tmp_path / "bad.ppm").write_bytes(b"P5\n4 4\n255\n" + bytes(16))
    manifest["frames"] = ["bad.ppm"]
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(ClipLoadError, match="magic"):
        load_clip(tmp_path)
    manifest["frames"] = ["nope.ppm"]
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(ClipLoadError, match="missing"):
        load_clip(tmp_path)


def test_ppm_header_with_comment(tmp_path):
    (tmp_path / "f.ppm").write_bytes(b"P6\n# made by hand\n1 1\n255\n" + bytes([255, 0, 51]))
    (tmp_path / "manifest.json").write_text(json.dumps({"width": 1, "height": 1, "fps": 30, "frames": ["f.ppm"]}))
    px = load_clip(tmp_path).frames[0, 0, 0]
    assert np.allclose(px, [1.0, 0.0, 0.2])
