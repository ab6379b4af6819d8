"""Desk-scale motion-compensated block codec.

GOP-structured: the first frame of every GOP is intra coded (blockwise DCT of
the pixels), every following frame is predicted from the previously decoded
frame by exhaustive SAD block matching and only the residual is transform
coded.  Rate is the order-0 exp-Golomb length of every emitted symbol.

Internally pixels live on the 0..255 scale so the quantiser step reads like a
classical codec's; frames whose size is not a multiple of the block size are
edge padded for coding and cropped afterwards.

``mode="smooth"`` replaces hard rounding by the identity and the exp-Golomb
length by a log surrogate.  It exists only so the attack can take finite
differences of an objective without quantisation plateaus.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numba import njit

from .video import VideoClip, partition_gops, psnr_from_mse

SCALE = 255.0
LAMBDAS = (256, 512, 1024, 2048)


@dataclass(frozen=True)
class CodecConfig:
    G: int = 10
    lam: float = 256.0
    block_size: int = 8
    search_radius: int = 4
    mode: str = "hard"

    def __post_init__(self):
        if self.G < 1:
            raise ValueError("GOP size must be >= 1")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if self.block_size < 1:
            raise ValueError("block size must be >= 1")
        if self.search_radius < 0:
            raise ValueError("search radius must be >= 0")
        if self.mode not in ("hard", "smooth"):
            raise ValueError(f"mode must be 'hard' or 'smooth', got {self.mode!r}")

    @property
    def q(self) -> float:
        """Quantiser step on the 0..255 coefficient scale: 16 at lambda=256."""
        return 16.0 * math.sqrt(256.0 / self.lam)

    def replace(self, **changes) -> "CodecConfig":
        fields_ = {k: getattr(self, k) for k in ("G", "lam", "block_size", "search_radius", "mode")}
        fields_.update(changes)
        return CodecConfig(**fields_)


@dataclass(frozen=True)
class MotionField:
    """Integer (dx, dy) per block; ``vectors`` has shape (blocks_y, blocks_x, 2)."""

    vectors: np.ndarray

    @property
    def blocks_y(self) -> int:
        return self.vectors.shape[0]

    @property
    def blocks_x(self) -> int:
        return self.vectors.shape[1]


@dataclass
class FrameBitstream:
    frame_type: str
    motion_bits: float
    residual_bits: float
    symbols: np.ndarray
    motion: MotionField | None = None
    mode: str = "hard"

    @property
    def total_bits(self) -> float:
        return self.motion_bits + self.residual_bits

    def summary(self) -> dict:
        return {
            "type": self.frame_type,
            "motion_bits": self.motion_bits,
            "residual_bits": self.residual_bits,
            "total_bits": self.total_bits,
        }


@dataclass
class CodedClip:
    frames: list[FrameBitstream]
    decoded: VideoClip
    frame_mse: np.ndarray  # per-frame MSE against the distortion reference
    bpp: float
    psnr: float

    @property
    def frame_bits(self) -> np.ndarray:
        return np.array([f.total_bits for f in self.frames], dtype=np.float64)

    @property
    def frame_types(self) -> list[str]:
        return [f.frame_type for f in self.frames]

    def summary(self) -> dict:
        return {
            "frames": [f.summary() for f in self.frames],
            "clip": {"bpp": self.bpp, "psnr": self.psnr},
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2)


# --- transform, quantiser, rate model -----------------------------------------


@lru_cache(maxsize=None)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II basis; row k holds the k-th cosine."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.sqrt(2.0 / n) * np.cos(np.pi * (2 * i + 1) * k / (2 * n))
    m[0] /= np.sqrt(2.0)
    m.setflags(write=False)
    return m


def transform_block(block: np.ndarray, direction: str = "forward") -> np.ndarray:
    """Orthonormal 2-D DCT over the last two axes (batched over leading axes)."""
    block = np.asarray(block, dtype=np.float64)
    if block.ndim < 2 or block.shape[-1] != block.shape[-2]:
        raise ValueError(f"expected square blocks in the last two axes, got {block.shape}")
    m = dct_matrix(block.shape[-1])
    if direction == "forward":
        return _sandwich(block, m)
    if direction == "inverse":
        return _sandwich(block, m.T)
    raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")


def _sandwich(x: np.ndarray, m: np.ndarray) -> np.ndarray:
    # m @ x @ m.T as two flat GEMMs; much faster than broadcast matmul
    n = x.shape[-1]
    a = (x.reshape(-1, n) @ m.T).reshape(x.shape)
    a = a.swapaxes(-1, -2).reshape(-1, n) @ m.T
    return a.reshape(x.shape).swapaxes(-1, -2)


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(coeffs, q: float, mode: str = "hard"):
    """Reconstructed coefficient values after quantisation with step ``q``."""
    if not q > 0:
        raise ValueError(f"quantiser step must be positive, got {q}")
    if mode == "hard":
        return q * round_half_away(np.asarray(coeffs, dtype=np.float64) / q)
    if mode == "smooth":
        return np.asarray(coeffs, dtype=np.float64)
    raise ValueError(f"mode must be 'hard' or 'smooth', got {mode!r}")


def symbol_bits(v):
    """Order-0 exp-Golomb code length of signed integer symbol(s) ``v``."""
    v = np.asarray(v, dtype=np.int64)
    u = np.where(v > 0, 2 * v - 1, -2 * v)
    # frexp exponent of u+1 is floor(log2(u+1)) + 1, exact for integers
    _, exp = np.frexp((u + 1).astype(np.float64))
    bits = 2 * (exp.astype(np.int64) - 1) + 1
    return int(bits) if bits.ndim == 0 else bits


def smooth_rate(coeffs, q: float) -> float:
    """Differentiable stand-in for the summed exp-Golomb length of ``coeffs / q``."""
    if not q > 0:
        raise ValueError(f"quantiser step must be positive, got {q}")
    c = np.abs(np.asarray(coeffs, dtype=np.float64))
    return float(np.sum(2.0 * np.log2(1.0 + 2.0 * c / q) + 1.0))


# --- block matching / motion compensation -------------------------------------


@lru_cache(maxsize=None)
def search_offsets(radius: int) -> np.ndarray:
    """All (dy, dx) in the window, ordered by tie-break priority."""
    cand = [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    cand.sort(key=lambda d: (abs(d[0]) + abs(d[1]), d[0], d[1]))
    return np.array(cand, dtype=np.int64).reshape(-1, 2)


@njit(cache=True, inline="always")
def _clamp(v, hi):
    return 0 if v < 0 else (hi if v > hi else v)


@njit(cache=True)
def _luma(frame, S):
    # channel sum, edge padded by S on every side
    H, W, C = frame.shape
    out = np.empty((H + 2 * S, W + 2 * S))
    for y in range(H + 2 * S):
        sy = _clamp(y - S, H - 1)
        for x in range(W + 2 * S):
            sx = _clamp(x - S, W - 1)
            acc = 0.0
            for c in range(C):
                acc += frame[sy, sx, c]
            out[y, x] = acc
    return out


@njit(cache=True)
def _match_blocks(ref, target, B, S, offsets):
    # Motion search runs on luma (channel sums).  Candidates arrive in
    # tie-break order, so only a strictly smaller SAD replaces the current
    # best and a partial sum that already reaches it can stop early.
    H, W, _ = target.shape
    lr = _luma(ref, S)
    lt = _luma(target, 0)
    nby = H // B
    nbx = W // B
    out = np.zeros((nby, nbx, 2), dtype=np.int64)
    for by in range(nby):
        for bx in range(nbx):
            ty = by * B
            tx = bx * B
            best = np.inf
            best_k = 0
            for k in range(offsets.shape[0]):
                ry = ty + S + offsets[k, 0]
                rx = tx + S + offsets[k, 1]
                sad = 0.0
                for i in range(B):
                    for j in range(B):
                        sad += abs(lt[ty + i, tx + j] - lr[ry + i, rx + j])
                    if sad >= best:
                        break
                if sad < best:
                    best = sad
                    best_k = k
            out[by, bx, 0] = offsets[best_k, 1]
            out[by, bx, 1] = offsets[best_k, 0]
    return out


@njit(cache=True)
def _compensate(ref, vectors, B):
    H, W, C = ref.shape
    out = np.empty_like(ref)
    for by in range(vectors.shape[0]):
        for bx in range(vectors.shape[1]):
            for i in range(B):
                ry = _clamp(by * B + vectors[by, bx, 1] + i, H - 1)
                for j in range(B):
                    rx = _clamp(bx * B + vectors[by, bx, 0] + j, W - 1)
                    for c in range(C):
                        out[by * B + i, bx * B + j, c] = ref[ry, rx, c]
    return out


@njit(cache=True)
def _vector_bits(vectors):
    total = 0
    for by in range(vectors.shape[0]):
        for bx in range(vectors.shape[1]):
            for k in range(2):
                v = vectors[by, bx, k]
                u = (2 * v - 1 if v > 0 else -2 * v) + 1
                n = 0
                while u > 1:
                    u >>= 1
                    n += 1
                total += 2 * n + 1
    return total


@njit(cache=True, fastmath=True)
def _channel_smooth_bits(target, pred, c, B, m, q):
    # smooth_rate of the blockwise DCT of channel c of (target - pred)
    H, W, _ = target.shape
    r = np.empty((B, B))
    tmp = np.empty((B, B))
    bits = 0.0
    scale = 2.0 / q
    for by in range(H // B):
        for bx in range(W // B):
            for i in range(B):
                for j in range(B):
                    r[i, j] = target[by * B + i, bx * B + j, c] - pred[by * B + i, bx * B + j, c]
            for k in range(B):
                for j in range(B):
                    acc = 0.0
                    for i in range(B):
                        acc += m[k, i] * r[i, j]
                    tmp[k, j] = acc
            for k in range(B):
                for l in range(B):
                    acc = 0.0
                    for j in range(B):
                        acc += tmp[k, j] * m[l, j]
                    bits += np.log2(1.0 + scale * abs(acc))
    return 2.0 * bits + H * W


def _pad_to_blocks(frame: np.ndarray, B: int) -> np.ndarray:
    h, w = frame.shape[:2]
    ph, pw = -h % B, -w % B
    if ph == 0 and pw == 0:
        return frame
    return np.pad(frame, ((0, ph), (0, pw), (0, 0)), mode="edge")


def block_match(reference: np.ndarray, target: np.ndarray, config: CodecConfig) -> MotionField:
    """Exhaustive SAD search per block; out-of-frame reads are edge clamped.

    Frames are (H, W, C) arrays on any consistent scale; the SAD is taken on
    the channel sum.  Ties go to the smallest |dx|+|dy|, then the smallest
    dy, then the smallest dx.
    """
    reference = np.asarray(reference, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if reference.shape != target.shape:
        raise ValueError(f"shape mismatch: {reference.shape} vs {target.shape}")
    B, S = config.block_size, config.search_radius
    ref = np.ascontiguousarray(_pad_to_blocks(reference, B))
    tgt = np.ascontiguousarray(_pad_to_blocks(target, B))
    return MotionField(_match_blocks(ref, tgt, B, S, search_offsets(S)))


def motion_compensate(reference: np.ndarray, motion: MotionField, config: CodecConfig) -> np.ndarray:
    """Block-copy prediction of the (padded) frame, cropped to the reference size."""
    reference = np.asarray(reference, dtype=np.float64)
    B, S = config.block_size, config.search_radius
    padded = _pad_to_blocks(reference, B)
    grid = (padded.shape[0] // B, padded.shape[1] // B)
    if (motion.blocks_y, motion.blocks_x) != grid:
        raise ValueError(f"motion grid {motion.vectors.shape[:2]} does not match block grid {grid}")
    if np.abs(motion.vectors).max(initial=0) > S:
        raise ValueError("motion vector exceeds the search radius")
    pred = _compensate(np.ascontiguousarray(padded), np.ascontiguousarray(motion.vectors, dtype=np.int64), B)
    return pred[: reference.shape[0], : reference.shape[1]]


# --- frame / clip coding ------------------------------------------------------


def _to_blocks(x: np.ndarray, B: int) -> np.ndarray:
    h, w, c = x.shape
    return x.reshape(h // B, B, w // B, B, c).transpose(0, 2, 4, 1, 3)


def _from_blocks(blocks: np.ndarray) -> np.ndarray:
    nby, nbx, c, B, _ = blocks.shape
    return blocks.transpose(0, 3, 1, 4, 2).reshape(nby * B, nbx * B, c)


def decode_frame(bitstream: FrameBitstream, refs: list[np.ndarray], config: CodecConfig, shape) -> np.ndarray:
    """Reconstruct a frame in [0, 1] from its symbols and the reference buffer."""
    B = config.block_size
    h, w = shape[:2]
    if bitstream.frame_type == "I":
        pred = 0.0
    else:
        if not refs:
            raise ValueError("P-frame decode needs a reference frame")
        ref = _pad_to_blocks(refs[-1] * SCALE, B)
        pred = _compensate(ref, bitstream.motion.vectors, B)
    coeffs = bitstream.symbols * config.q
    recon = pred + _from_blocks(transform_block(coeffs, "inverse"))
    return np.clip(recon[:h, :w] / SCALE, 0.0, 1.0)


def encode_frame(frame: np.ndarray, refs: list[np.ndarray], config: CodecConfig) -> tuple[FrameBitstream, np.ndarray]:
    """Code one (H, W, C) frame; an empty ``refs`` buffer makes it an I-frame.

    Returns the bitstream and the decoded frame, which is exactly what
    :func:`decode_frame` produces from that bitstream.
    """
    B, S, q = config.block_size, config.search_radius, config.q
    x = _pad_to_blocks(np.asarray(frame, dtype=np.float64) * SCALE, B)
    if refs:
        ref = np.ascontiguousarray(_pad_to_blocks(refs[-1] * SCALE, B))
        vectors = _match_blocks(ref, np.ascontiguousarray(x), B, S, search_offsets(S))
        pred = _compensate(ref, vectors, B)
        motion, motion_bits, frame_type = MotionField(vectors), int(_vector_bits(vectors)), "P"
    else:
        pred, motion, motion_bits, frame_type = 0.0, None, 0, "I"

    coeffs = transform_block(_to_blocks(x - pred, B), "forward")
    if config.mode == "hard":
        symbols = round_half_away(coeffs / q)
        residual_bits = int(symbol_bits(symbols).sum())
    else:
        symbols = coeffs / q
        residual_bits = smooth_rate(coeffs, q)
    bitstream = FrameBitstream(frame_type, motion_bits, residual_bits, symbols, motion, config.mode)
    return bitstream, decode_frame(bitstream, refs, config, frame.shape)


@dataclass
class SmoothFrameCost:
    """Per-channel breakdown of a frame's smooth-mode bit cost."""

    vectors: np.ndarray | None
    motion_bits: float
    channel_bits: np.ndarray

    @property
    def total(self) -> float:
        total = self.motion_bits
        for b in self.channel_bits:  # fixed order keeps partial recomputes bit-exact
            total += b
        return total


def smooth_frame_cost(
    frame: np.ndarray,
    ref: np.ndarray | None,
    config: CodecConfig,
    base: SmoothFrameCost | None = None,
    channel: int | None = None,
) -> SmoothFrameCost:
    """Smooth-mode bit cost of one frame without building a bitstream.

    ``ref=None`` codes an I-frame.  When ``base`` is the cost of a frame that
    differs from this one only in ``channel`` (target or reference), the other
    channels are reused whenever the motion field comes out unchanged.
    """
    B, S = config.block_size, config.search_radius
    m, q = dct_matrix(B), config.q
    x = np.ascontiguousarray(_pad_to_blocks(frame * SCALE, B))
    if ref is None:
        vectors, motion_bits, pred = None, 0.0, np.zeros_like(x)
    else:
        r = np.ascontiguousarray(_pad_to_blocks(ref * SCALE, B))
        vectors = _match_blocks(r, x, B, S, search_offsets(S))
        motion_bits = float(_vector_bits(vectors))
        pred = _compensate(r, vectors, B)
    reuse = (
        base is not None
        and channel is not None
        and (vectors is None) == (base.vectors is None)
        and (vectors is None or np.array_equal(vectors, base.vectors))
    )
    if reuse:
        bits = base.channel_bits.copy()
        bits[channel] = _channel_smooth_bits(x, pred, channel, B, m, q)
    else:
        bits = np.array([_channel_smooth_bits(x, pred, c, B, m, q) for c in range(x.shape[2])])
    return SmoothFrameCost(vectors, motion_bits, bits)


def encode_gop(frames: np.ndarray, config: CodecConfig) -> tuple[list[FrameBitstream], np.ndarray]:
    """Code consecutive frames as one GOP, starting from an empty buffer."""
    refs: list[np.ndarray] = []
    streams, decoded = [], np.empty_like(frames, dtype=np.float64)
    for t, frame in enumerate(frames):
        bs, y = encode_frame(frame, refs, config)
        streams.append(bs)
        decoded[t] = y
        refs = [y]  # only the latest decode is ever referenced
    return streams, decoded


def encode_clip(clip: VideoClip, config: CodecConfig, reference: VideoClip | None = None) -> CodedClip:
    """Encode and decode ``clip``; distortion is measured against ``reference``.

    Leaving ``reference`` unset measures against the clip itself.
    """
    reference = clip if reference is None else reference
    if reference.shape != clip.shape:
        raise ValueError(f"shape mismatch: {clip.shape} vs reference {reference.shape}")
    streams: list[FrameBitstream] = []
    decoded = np.empty(clip.shape, dtype=np.float64)
    for gop in partition_gops(clip.T, config.G):
        s, y = encode_gop(clip.frames[gop.start : gop.stop], config)
        streams.extend(s)
        decoded[gop.start : gop.stop] = y
    frame_mse = np.mean((decoded - reference.frames) ** 2, axis=(1, 2, 3))
    total_bits = sum(s.total_bits for s in streams)
    return CodedClip(
        frames=streams,
        decoded=clip.with_frames(decoded),
        frame_mse=frame_mse,
        bpp=total_bits / (clip.T * clip.width * clip.height),
        psnr=psnr_from_mse(float(frame_mse.mean())),
    )


def decode_clip(streams: list[FrameBitstream], config: CodecConfig, shape) -> np.ndarray:
    """Decode a full list of frame bitstreams; the buffer resets at every I-frame."""
    out = np.empty(shape, dtype=np.float64)
    refs: list[np.ndarray] = []
    for t, bs in enumerate(streams):
        if bs.frame_type == "I":
            refs = []
        out[t] = decode_frame(bs, refs, config, shape[1:])
        refs = [out[t]]
    return out
