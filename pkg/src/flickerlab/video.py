"""Video container, PPM/manifest I/O and quality metrics.

A clip is stored on disk as a directory holding one binary PPM (P6,
maxval 255) per frame plus a JSON manifest::

    {"width": 64, "height": 64, "fps": 30, "frames": ["f000.ppm", ...], "label": 2}
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PSNR_CAP = 99.0
CHANNELS = 3
MANIFEST_NAME = "manifest.json"


class ClipLoadError(ValueError):
    """Raised when a manifest or one of its frame files cannot be parsed."""


@dataclass(frozen=True)
class VideoClip:
    """T frames of H x W x C pixels in [0, 1], stored as a (T, H, W, C) array."""

    frames: np.ndarray
    fps: float = 30.0
    label: int | None = None

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 4 or frames.shape[-1] != CHANNELS:
            raise ValueError(f"expected (T, H, W, {CHANNELS}) frames, got {frames.shape}")
        if frames.shape[0] < 1:
            raise ValueError("a clip needs at least one frame")
        if frames.size and (frames.min() < 0.0 or frames.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    @property
    def channels(self) -> int:
        return self.frames.shape[3]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.frames.shape

    def with_frames(self, frames: np.ndarray) -> "VideoClip":
        return VideoClip(frames, fps=self.fps, label=self.label)


@dataclass(frozen=True)
class GopView:
    """Frames ``start .. stop-1`` (0-based clip indices) of GOP number ``index``."""

    index: int
    start: int
    stop: int

    @property
    def frame_indices(self) -> range:
        return range(self.start, self.stop)

    def __len__(self) -> int:
        return self.stop - self.start


def partition_gops(T: int | VideoClip, G: int) -> list[GopView]:
    """Split ``T`` frames into consecutive groups of ``G``; the last may be short."""
    if isinstance(T, VideoClip):
        T = T.T
    if G < 1:
        raise ValueError(f"GOP size must be >= 1, got {G}")
    return [GopView(g, s, min(s + G, T)) for g, s in enumerate(range(0, T, G))]


def psnr(reference, test) -> float:
    """PSNR in dB with peak 1.0, capped at 99 dB for identical inputs."""
    a = reference.frames if isinstance(reference, VideoClip) else np.asarray(reference, dtype=np.float64)
    b = test.frames if isinstance(test, VideoClip) else np.asarray(test, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return psnr_from_mse(float(np.mean((a - b) ** 2)))


def psnr_from_mse(mse: float) -> float:
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


# --- PPM / manifest I/O -------------------------------------------------------


def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        ch = data[pos : pos + 1]
        if ch == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ClipLoadError("truncated PPM header")
    return data[start:pos], pos


def read_ppm(path: str | Path) -> np.ndarray:
    """Read a binary P6 PPM with maxval 255 into an (H, W, 3) uint8 array."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError as exc:
        raise ClipLoadError(f"missing frame file: {path}") from exc
    try:
        magic, pos = _read_token(data, 0)
        if magic != b"P6":
            raise ClipLoadError(f"{path}: not a binary PPM (magic {magic!r})")
        fields = []
        for _ in range(3):
            tok, pos = _read_token(data, pos)
            fields.append(int(tok))
    except ValueError as exc:
        if isinstance(exc, ClipLoadError):
            raise
        raise ClipLoadError(f"{path}: malformed PPM header") from exc
    width, height, maxval = fields
    if maxval != 255:
        raise ClipLoadError(f"{path}: maxval must be 255, got {maxval}")
    if width <= 0 or height <= 0:
        raise ClipLoadError(f"{path}: bad dimensions {width}x{height}")
    pos += 1  # single whitespace byte after maxval
    expected = width * height * 3
    raster = data[pos : pos + expected]
    if len(raster) != expected:
        raise ClipLoadError(f"{path}: expected {expected} raster bytes, found {len(raster)}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3)


def write_ppm(path: str | Path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8)
    height, width, _ = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(pixels).tobytes())


def to_uint8(frames: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(frames) * 255.0), 0, 255).astype(np.uint8)


def _manifest_path(path: Path) -> Path:
    return path / MANIFEST_NAME if path.is_dir() else path


def load_clip(path: str | Path) -> VideoClip:
    """Load a clip from a manifest file (or a directory containing ``manifest.json``)."""
    manifest_path = _manifest_path(Path(path))
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError as exc:
        raise ClipLoadError(f"missing manifest: {manifest_path}") from exc
    except json.JSONDecodeError as exc:
        raise ClipLoadError(f"{manifest_path}: invalid JSON ({exc})") from exc
    try:
        width, height = int(manifest["width"]), int(manifest["height"])
        names = list(manifest["frames"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ClipLoadError(f"{manifest_path}: missing or invalid manifest field ({exc})") from exc
    if not names:
        raise ClipLoadError(f"{manifest_path}: manifest lists no frames")

    frames = []
    for name in names:
        img = read_ppm(manifest_path.parent / name)
        if img.shape[:2] != (height, width):
            raise ClipLoadError(
                f"{name}: dimension mismatch, got {img.shape[1]}x{img.shape[0]}, "
                f"manifest says {width}x{height}"
            )
        frames.append(img)
    label = manifest.get("label")
    return VideoClip(
        np.stack(frames).astype(np.float64) / 255.0,
        fps=float(manifest.get("fps", 30.0)),
        label=None if label is None else int(label),
    )


def save_clip(clip: VideoClip, path: str | Path) -> Path:
    """Write ``clip`` as PPM frames plus ``manifest.json`` into directory ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    pixels = to_uint8(clip.frames)
    names = []
    for t, frame in enumerate(pixels):
        name = f"frame_{t:04d}.ppm"
        write_ppm(out / name, frame)
        names.append(name)
    manifest = {"width": clip.width, "height": clip.height, "fps": clip.fps, "frames": names}
    if clip.label is not None:
        manifest["label"] = int(clip.label)
    manifest_path = out / MANIFEST_NAME
    manifest_path.write_text(json.dumps(manifest, indent=2))
    return manifest_path
