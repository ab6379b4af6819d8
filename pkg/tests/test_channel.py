import json

import numpy as np
import pytest

from flickerlab.channel import ChannelConfig, quantize_levels, realize, simulate_capture
from flickerlab.perturbation import apply_flicker
from flickerlab.video import VideoClip


def test_config_validation():
    for bad in (dict(levels=1), dict(gain=0), dict(camera_fps=0), dict(max_updates_per_second=0), dict(baseline=300)):
        with pytest.raises(ValueError):
            ChannelConfig(**bad)


def test_zero_maps_to_baseline():
    for cfg in (ChannelConfig(), ChannelConfig(levels=7, gain=0.1, latency_jitter_frames=5, seed=3)):
        assert not realize(np.zeros((20, 3)), cfg).values.any()


def test_hold_span():
    assert ChannelConfig(camera_fps=30, max_updates_per_second=10).hold_frames == 3
    assert ChannelConfig(camera_fps=30, max_updates_per_second=7).hold_frames == 5
    assert ChannelConfig(camera_fps=30, max_updates_per_second=60).hold_frames == 1


def test_quantisation_error_bound(rng):
    cfg = ChannelConfig(levels=16, gain=0.25, max_updates_per_second=30, latency_jitter_frames=0)
    v = rng.uniform(-0.25, 0.25, size=(500, 3))
    out = realize(v, cfg).values
    assert np.abs(out - v).max() <= cfg.gain / (cfg.levels - 1) + 1e-12
    # every value sits on the level grid
    k = out / cfg.level_step
    assert np.allclose(k, np.round(k), atol=1e-9)


def test_quantisation_is_idempotent(rng):
    cfg = ChannelConfig(levels=32, max_updates_per_second=30, latency_jitter_frames=0)
    once = realize(rng.uniform(-0.3, 0.3, size=(40, 3)), cfg).values
    assert np.array_equal(realize(once, cfg).values, once)
    assert np.array_equal(quantize_levels(once, cfg) * cfg.level_step, once)


def test_hold_and_jitter(rng):
    cfg = ChannelConfig(latency_jitter_frames=2, seed=11)
    v = rng.uniform(-0.2, 0.2, size=(30, 3))
    r = realize(v, cfg)
    jitter = r.log["jitter_frames"]
    assert -2 <= jitter <= 2
    unshifted = np.roll(r.values, -jitter, axis=0)
    spans = unshifted.reshape(10, 3, 3)
    assert np.all(spans == spans[:, :1])
    assert realize(v, cfg).log == r.log  # jitter drawn from the seed, once
    json.loads(r.to_json())


def test_simulate_capture_equivalence(rng):
    clip = VideoClip(rng.random((6, 8, 8, 3)))
    assert np.array_equal(simulate_capture(clip, np.zeros((6, 3))).frames, clip.frames)
    r = realize(rng.uniform(-0.2, 0.2, (6, 3)), ChannelConfig())
    assert np.array_equal(simulate_capture(clip, r).frames, apply_flicker(clip, r.values, 0).frames)
    short = realize(rng.uniform(-0.2, 0.2, (4, 3)), ChannelConfig())
    assert np.array_equal(simulate_capture(clip, short).frames, apply_flicker(clip, short.values, 0).frames)
    with pytest.raises(ValueError):
        simulate_capture(clip, np.zeros((9, 3)))
    with pytest.raises(ValueError):
        simulate_capture(clip, np.zeros((6, 2)))
