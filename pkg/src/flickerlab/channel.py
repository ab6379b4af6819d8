"""Bulb-to-camera channel: what an RGB bulb filmed by a camera can actually show.

The commanded flicker is quantised to the bulb's colour levels, held for as
many camera frames as the bulb's command rate requires, then shifted by a
fixed latency.  The light model is purely additive around a baseline level.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .perturbation import FlickerPerturbation, _values, apply_flicker
from .video import VideoClip


@dataclass(frozen=True)
class ChannelConfig:
    """Bulb and camera parameters.

    The update rate and jitter defaults are placeholders: no measured latency
    figures exist for consumer Wi-Fi bulbs.
    """

    levels: int = 256
    gain: float = 0.25  # peak offset per channel, normalised pixel units
    baseline: int | None = None  # bulb level meaning "no offset"; (levels - 1) // 2 by default
    max_updates_per_second: float = 10.0
    camera_fps: float = 30.0
    latency_jitter_frames: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError("levels must be >= 2")
        if self.gain <= 0:
            raise ValueError("gain must be > 0")
        if self.camera_fps <= 0 or self.max_updates_per_second <= 0:
            raise ValueError("camera_fps and max_updates_per_second must be > 0")
        if self.baseline is not None and not 0 <= self.baseline < self.levels:
            raise ValueError("baseline must be one of the bulb levels")
        if self.latency_jitter_frames < 0:
            raise ValueError("latency_jitter_frames must be >= 0")

    @property
    def level_step(self) -> float:
        return 2.0 * self.gain / (self.levels - 1)

    @property
    def hold_frames(self) -> int:
        # small tolerance so 30 / 10 is not pushed to 4 by rounding
        return max(1, math.ceil(self.camera_fps / self.max_updates_per_second - 1e-9))

    @property
    def baseline_level(self) -> int:
        return (self.levels - 1) // 2 if self.baseline is None else int(self.baseline)


@dataclass(frozen=True)
class RealizedPerturbation:
    values: np.ndarray  # (T, C) offsets the camera actually sees
    log: dict = field(default_factory=dict)

    def as_perturbation(self) -> FlickerPerturbation:
        return FlickerPerturbation(self.values)

    def to_json(self) -> str:
        return json.dumps({"values": self.values.tolist(), "log": self.log}, indent=2)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())


def quantize_levels(values: np.ndarray, config: ChannelConfig) -> np.ndarray:
    """Nearest commanded level, relative to the baseline (so 0 means no offset)."""
    v = np.clip(values, -config.gain, config.gain)
    base = config.baseline_level
    return np.clip(np.round(v / config.level_step), -base, config.levels - 1 - base)


def draw_jitter(config: ChannelConfig) -> int:
    rng = np.random.default_rng(config.seed)
    return int(rng.integers(-config.latency_jitter_frames, config.latency_jitter_frames + 1))


def realize(delta, config: ChannelConfig = ChannelConfig()) -> RealizedPerturbation:
    """Quantise, rate-limit and delay a commanded flicker sequence."""
    v = _values(delta)
    T = v.shape[0]
    rel_levels = quantize_levels(v, config)
    hold = config.hold_frames
    starts = np.arange(0, T, hold)
    held = rel_levels[(np.arange(T) // hold) * hold]
    jitter = draw_jitter(config)
    # a positive jitter delays the light: frame t shows the command for t - jitter
    shifted = np.roll(held, jitter, axis=0)
    values = shifted * config.level_step
    log = {
        "config": asdict(config),
        "commanded_levels": (rel_levels + config.baseline_level).tolist(),
        "hold_frames": hold,
        "hold_starts": starts.tolist(),
        "jitter_frames": jitter,
    }
    return RealizedPerturbation(values, log)


def simulate_capture(clip: VideoClip, realized) -> VideoClip:
    """Film ``clip`` under the realised light; shorter sequences repeat cyclically."""
    values = realized.values if isinstance(realized, RealizedPerturbation) else _values(realized)
    if values.shape[1] != clip.channels:
        raise ValueError(f"realized sequence has {values.shape[1]} channels, clip has {clip.channels}")
    if values.shape[0] > clip.T:
        raise ValueError(f"realized sequence of length {values.shape[0]} is longer than the clip ({clip.T})")
    return apply_flicker(clip, values, 0)
