"""Synthetic motion-direction dataset and a softmax classifier on frame differences.

Classes: 0 = left, 1 = right, 2 = up, 3 = down.  Every clip shows a bright
textured square gliding over a static textured background.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .video import VideoClip, load_clip, save_clip

NUM_CLASSES = 4
CLASS_NAMES = ("left", "right", "up", "down")
DIRECTIONS = ((-1, 0), (1, 0), (0, -1), (0, 1))  # (dx, dy) per class


@dataclass(frozen=True)
class SyntheticDatasetConfig:
    num_clips: int = 100  # per class
    width: int = 64
    height: int = 64
    T: int = 16
    object_size: int = 12
    speed: int = 2
    noise: float = 0.01
    seed: int = 0
    fps: float = 30.0
    background_range: tuple[float, float] = (0.15, 0.5)
    object_range: tuple[float, float] = (0.4, 0.65)

    def validate(self) -> None:
        if self.num_clips < 1:
            raise ValueError("num_clips must be >= 1")
        if self.speed < 1:
            raise ValueError("speed must be >= 1")
        if self.T < 2:
            raise ValueError("clips need at least two frames")
        travel = self.object_size + self.speed * (self.T - 1)
        if self.object_size < 1 or travel > min(self.width, self.height):
            raise ValueError(
                f"object of size {self.object_size} moving {self.speed} px/frame for "
                f"{self.T} frames does not fit in {self.width}x{self.height}"
            )
        if self.noise < 0:
            raise ValueError("noise level must be >= 0")
        for lo, hi in (self.background_range, self.object_range):
            if not 0.0 <= lo <= hi <= 1.0:
                raise ValueError(f"intensity range ({lo}, {hi}) must lie inside [0, 1]")


def _texture(rng: np.random.Generator, h: int, w: int, low: float, high: float) -> np.ndarray:
    """Smooth colour texture built from a few random low-frequency sinusoids."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.empty((h, w, 3))
    for c in range(3):
        acc = np.zeros((h, w))
        for _ in range(3):
            fy, fx = rng.uniform(0.5, 3.0, size=2) * 2 * np.pi / max(h, w)
            acc += np.sin(fy * yy + fx * xx + rng.uniform(0, 2 * np.pi))
        acc = (acc - acc.min()) / max(acc.max() - acc.min(), 1e-12)
        out[..., c] = low + (high - low) * acc
    return out


def make_clip(config: SyntheticDatasetConfig, label: int, index: int) -> VideoClip:
    """Clip ``index`` of class ``label``; depends only on (seed, label, index)."""
    rng = np.random.default_rng([config.seed, label, index])
    H, W, T, s, v = config.height, config.width, config.T, config.object_size, config.speed
    background = _texture(rng, H, W, *config.background_range)
    obj = _texture(rng, s, s, *config.object_range)
    dx, dy = DIRECTIONS[label]
    travel = v * (T - 1)
    # choose a start so the whole path stays inside the frame
    def start_range(d, extent):
        lo, hi = (travel, extent - s) if d < 0 else (0, extent - s - (travel if d > 0 else 0))
        return int(rng.integers(lo, hi + 1))

    x0, y0 = start_range(dx, W), start_range(dy, H)
    frames = np.empty((T, H, W, 3))
    for t in range(T):
        frame = background.copy()
        x, y = x0 + dx * v * t, y0 + dy * v * t
        frame[y : y + s, x : x + s] = obj
        frames[t] = frame
    if config.noise > 0:
        frames += rng.normal(0.0, config.noise, size=frames.shape)
    return VideoClip(np.clip(frames, 0.0, 1.0), fps=config.fps, label=label)


def iter_dataset(config: SyntheticDatasetConfig) -> Iterator[VideoClip]:
    config.validate()
    for i in range(config.num_clips):
        for label in range(NUM_CLASSES):
            yield make_clip(config, label, i)


def gen_dataset(config: SyntheticDatasetConfig, out_dir: str | Path | None = None) -> list[VideoClip]:
    """Generate the labelled clip set; optionally write it as manifests + PPM."""
    clips = list(iter_dataset(config))
    if out_dir is not None:
        write_dataset(clips, out_dir, config)
    return clips


def write_dataset(clips: Sequence[VideoClip], out_dir: str | Path, config=None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, clip in enumerate(clips):
        name = f"clip_{i:04d}"
        save_clip(clip, out / name)
        entries.append({"manifest": f"{name}/manifest.json", "label": clip.label})
    index = {"clips": entries}
    if config is not None:
        index["config"] = asdict(config)
    (out / "index.json").write_text(json.dumps(index, indent=2))
    return out


def load_dataset(path: str | Path) -> list[VideoClip]:
    path = Path(path)
    index = json.loads((path / "index.json").read_text())
    return [load_clip(path / e["manifest"]) for e in index["clips"]]


# --- features and model -----------------------------------------------------


def _bin_edges(n: int, d: int) -> np.ndarray:
    return (np.arange(d) * n) // d


def pool_frames(frames: np.ndarray, grid: int) -> np.ndarray:
    """Box means of every frame and channel over a grid x grid partition: (T, C, grid, grid)."""
    frames = np.asarray(frames)
    H, W = frames.shape[1:3]
    ry, rx = _bin_edges(H, grid), _bin_edges(W, grid)
    sums = np.add.reduceat(np.add.reduceat(frames, ry, axis=1), rx, axis=2)
    counts = np.outer(np.diff(np.append(ry, H)), np.diff(np.append(rx, W)))
    return np.moveaxis(sums / counts[None, :, :, None], -1, 1)


def features_from_pools(pools: np.ndarray) -> np.ndarray:
    """Features from pooled frames; pooling and channel averaging commute with differencing."""
    means = pools.mean(axis=1)
    return (means[1:] - means[:-1]).reshape(-1)


def extract_features(clip, grid: int = 8) -> np.ndarray:
    """Channel-averaged frame differences, box-downsampled to grid x grid, concatenated."""
    frames = clip.frames if isinstance(clip, VideoClip) else np.asarray(clip)
    if frames.shape[0] < 2:
        raise ValueError("feature extraction needs at least two frames")
    return features_from_pools(pool_frames(frames, grid))


def softmax(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ClassifierModel:
    grid: int
    T: int
    weights: np.ndarray  # (K, (T-1) * grid * grid)
    bias: np.ndarray  # (K,)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        n_feat = (self.T - 1) * self.grid * self.grid
        if self.weights.shape != (self.bias.shape[0], n_feat):
            raise ValueError(f"weights {self.weights.shape} inconsistent with bias {self.bias.shape} and {n_feat} features")

    @property
    def K(self) -> int:
        return self.bias.shape[0]

    @property
    def trained(self) -> bool:
        return bool(self.metadata.get("trained", False))

    def probabilities(self, clip) -> np.ndarray:
        frames = clip.frames if isinstance(clip, VideoClip) else np.asarray(clip)
        if frames.shape[0] != self.T:
            raise ValueError(f"model expects {self.T} frames, clip has {frames.shape[0]}")
        return self.probabilities_from_features(extract_features(frames, self.grid))

    def probabilities_from_features(self, features: np.ndarray) -> np.ndarray:
        return softmax(self.weights @ features + self.bias)

    def to_dict(self) -> dict:
        return {
            "feature_spec": {"grid": self.grid, "T": self.T},
            "weights": self.weights.tolist(),
            "bias": self.bias.tolist(),
            "metadata": self.metadata,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "ClassifierModel":
        d = json.loads(Path(path).read_text())
        spec = d["feature_spec"]
        return cls(spec["grid"], spec["T"], d["weights"], d["bias"], d.get("metadata", {}))


def predict(model: ClassifierModel, clip) -> np.ndarray:
    """Class probabilities; ``argmax`` of the result is the predicted class."""
    return model.probabilities(clip)


def _cross_entropy(W, b, X, Y, l2):
    P = softmax(X @ W.T + b)
    n = X.shape[0]
    loss = -np.mean(np.log(P[np.arange(n), Y] + 1e-300)) + 0.5 * l2 * np.sum(W * W)
    return loss, P


def train(
    clips: Sequence[VideoClip],
    grid: int = 8,
    epochs: int = 300,
    lr: float = 20.0,
    l2: float = 1e-4,
    seed: int = 0,
) -> ClassifierModel:
    """Full-batch gradient descent on the softmax cross-entropy.

    A step that would raise the loss is rejected and the learning rate halved,
    so the per-epoch loss trace never increases.
    """
    labels = np.array([c.label for c in clips])
    if len(clips) == 0 or np.any(labels == None):  # noqa: E711
        raise ValueError("training needs labelled clips")
    labels = labels.astype(np.int64)
    if len(np.unique(labels)) < 2:
        raise ValueError("training needs at least two classes")
    T = clips[0].T
    X = np.stack([extract_features(c, grid) for c in clips])
    Y = labels
    K = NUM_CLASSES
    rng = np.random.default_rng(seed)
    W = rng.normal(0.0, 0.01, size=(K, X.shape[1]))
    b = np.zeros(K)
    onehot = np.eye(K)[Y]
    loss, P = _cross_entropy(W, b, X, Y, l2)
    trace = [loss]
    for _ in range(epochs):
        G = (P - onehot) / X.shape[0]
        gW = G.T @ X + l2 * W
        gb = G.sum(axis=0)
        while True:
            W_new, b_new = W - lr * gW, b - lr * gb
            new_loss, new_P = _cross_entropy(W_new, b_new, X, Y, l2)
            if new_loss <= loss or lr < 1e-12:
                break
            lr *= 0.5
        if new_loss <= loss:
            W, b, loss, P = W_new, b_new, new_loss, new_P
        trace.append(loss)
    meta = {"trained": True, "epochs": epochs, "lr": lr, "l2": l2, "seed": seed, "loss_trace": trace}
    return ClassifierModel(grid, T, W, b, meta)


def accuracy(model: ClassifierModel, clips: Sequence[VideoClip]) -> float:
    hits = [int(np.argmax(predict(model, c))) == c.label for c in clips]
    return float(np.mean(hits))


def evaluate_asr(
    model: ClassifierModel,
    clean_decoded: Sequence[VideoClip],
    adversarial_decoded: Sequence[VideoClip],
    labels: Sequence[int],
    target: int | Sequence[int] | None = None,
    denominator: str = "correct",
) -> dict:
    """Attack success rate over paired clean / adversarial decoded clips.

    Untargeted success is a changed (wrong) prediction, targeted success a
    prediction equal to the target.  With ``denominator="correct"`` only clips
    classified correctly when clean are counted; ``"all"`` counts every clip.
    """
    if not model.trained:
        raise ValueError("model is not trained")
    n = len(labels)
    if target is not None and np.isscalar(target):
        target = [int(target)] * n
    clean_pred = np.array([int(np.argmax(predict(model, c))) for c in clean_decoded])
    adv_pred = np.array([int(np.argmax(predict(model, c))) for c in adversarial_decoded])
    labels = np.asarray(labels)
    correct = clean_pred == labels
    if denominator == "correct":
        mask = correct
    elif denominator == "all":
        mask = np.ones(n, dtype=bool)
    else:
        raise ValueError(f"unknown denominator {denominator!r}")
    if not mask.any():
        raise ValueError("no correctly classified clips: ASR undefined")
    if target is None:
        success = adv_pred != labels
    else:
        success = adv_pred == np.asarray(target)
    return {
        "asr": float(success[mask].mean()),
        "clean_accuracy": float(correct.mean()),
        "adversarial_accuracy": float((adv_pred == labels).mean()),
        "count": int(mask.sum()),
    }
