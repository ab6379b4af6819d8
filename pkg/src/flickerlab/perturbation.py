"""Flicker perturbations: one colour offset per frame, added to every pixel.

The regularisers are quadratic forms over a cyclic time index, so their
gradients are available in closed form and never need to be probed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .video import CHANNELS, VideoClip


@dataclass(frozen=True)
class FlickerPerturbation:
    """``values`` has shape (T, C): row t is the colour offset of frame t."""

    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] < 1:
            raise ValueError(f"expected (T, C) values, got shape {values.shape}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, T: int, C: int = 3) -> "FlickerPerturbation":
        return cls(np.zeros((T, C)))

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def C(self) -> int:
        return self.values.shape[1]

    def linf(self) -> float:
        return float(np.abs(self.values).max(initial=0.0))

    def to_dict(self, epsilon: float | None = None) -> dict:
        return {
            "T": self.T,
            "C": self.C,
            "epsilon": self.linf() if epsilon is None else float(epsilon),
            "values": self.values.tolist(),
        }

    def save(self, path: str | Path, epsilon: float | None = None) -> None:
        Path(path).write_text(json.dumps(self.to_dict(epsilon), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "FlickerPerturbation":
        data = json.loads(Path(path).read_text())
        delta = cls(np.asarray(data["values"], dtype=np.float64).reshape(int(data["T"]), int(data["C"])))
        return delta


def _values(delta) -> np.ndarray:
    return delta.values if isinstance(delta, FlickerPerturbation) else np.asarray(delta, dtype=np.float64)


def gamma_shift(delta, tau: int):
    """Cyclic temporal shift: ``result[t] = delta[(t + tau) mod T]``."""
    shifted = np.roll(_values(delta), -int(tau), axis=0)
    return FlickerPerturbation(shifted) if isinstance(delta, FlickerPerturbation) else shifted


def tile_offsets(delta, T: int, tau: int = 0) -> np.ndarray:
    """The (T, C) offsets actually added to a T-frame clip (cyclic reuse of Delta)."""
    v = _values(delta)
    idx = (np.arange(T) + int(tau)) % v.shape[0]
    return v[idx]


def apply_offsets(frames: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    return np.clip(frames + offsets[:, None, None, :], 0.0, 1.0)


def apply_flicker(clip: VideoClip, delta, tau: int = 0) -> VideoClip:
    """Add the shifted, cyclically tiled flicker to every pixel and clamp to [0, 1]."""
    v = _values(delta)
    if v.shape[1] != clip.channels:
        raise ValueError(f"perturbation has {v.shape[1]} channels, clip has {clip.channels}")
    return clip.with_frames(apply_offsets(clip.frames, tile_offsets(v, clip.T, tau)))


def _norm(v: np.ndarray) -> float:
    # fixed 1 / (3T) normalisation, whatever the channel count
    return float(CHANNELS * v.shape[0])


def r_thick(delta) -> float:
    v = _values(delta)
    return float(np.sum(v * v) / _norm(v))


def _first_diff(v: np.ndarray) -> np.ndarray:
    return np.roll(v, -1, axis=0) - v


def _second_diff(v: np.ndarray) -> np.ndarray:
    return np.roll(v, 1, axis=0) - 2.0 * v + np.roll(v, -1, axis=0)


def r_rough(delta) -> float:
    """Energy of the first and second cyclic temporal differences, per entry."""
    v = _values(delta)
    if v.shape[0] < 2:
        raise ValueError("roughness needs at least two frames")
    d1, d2 = _first_diff(v), _second_diff(v)
    return float((np.sum(d1 * d1) + np.sum(d2 * d2)) / _norm(v))


def reg_gradient(delta, zeta: float) -> np.ndarray:
    """Exact gradient of ``zeta * (r_thick + r_rough)``; shape (T, C)."""
    v = _values(delta)
    if v.shape[0] < 2:
        raise ValueError("roughness needs at least two frames")
    d1 = _first_diff(v)
    # adjoint of the forward difference is the backward difference, negated
    g_first = np.roll(d1, 1, axis=0) - d1
    g_second = _second_diff(_second_diff(v))  # the second difference is self-adjoint
    return (2.0 * zeta / _norm(v)) * (v + g_first + g_second)


def project_linf(delta, epsilon: float):
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    clipped = np.clip(_values(delta), -epsilon, epsilon)
    return FlickerPerturbation(clipped) if isinstance(delta, FlickerPerturbation) else clipped


def sample_uniform(T: int, C: int, epsilon: float, seed) -> FlickerPerturbation:
    """Random-noise baseline with i.i.d. entries on [-epsilon, epsilon]."""
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    rng = np.random.default_rng(seed)
    return FlickerPerturbation(rng.uniform(-epsilon, epsilon, size=(T, C)))
