"""Experiment runners: R-D sweeps, universal-attack evaluation, ASR tables,
attack-onset traces and convergence logs.

Every runner takes an :class:`ExperimentSpec`, returns its rows, and (when the
spec names an output directory) writes ``<name>.csv`` plus a ``<name>.json``
sidecar holding the resolved spec.  Per-clip seeds come from a stable hash of
the experiment seed and the clip index, so results never depend on run order.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from dataclasses import asdict, dataclass, replace
from importlib import metadata
from pathlib import Path
from typing import Sequence

import numpy as np

from .attack import AttackConfig, ClipObjective, attack_offline, attack_universal
from .channel import ChannelConfig, realize, simulate_capture
from .classifier import (
    NUM_CLASSES,
    ClassifierModel,
    SyntheticDatasetConfig,
    accuracy,
    evaluate_asr,
    gen_dataset,
    load_dataset,
    make_clip,
    train,
)
from .codec import LAMBDAS, CodecConfig, encode_clip
from .perturbation import apply_flicker, sample_uniform, tile_offsets
from .video import VideoClip, psnr

EPSILONS = (0.04, 0.12, 0.16, 0.2)
KINDS = ("rd-sweep", "universal", "asr-table", "convergence", "onset-trace", "transfer")
OUTPUT_ENV = "FLICKERLAB_OUTPUT"


def suite_config(seed: int = 0, num_clips: int = 40) -> SyntheticDatasetConfig:
    """The desk-scale evaluation suite: 64x64 clips of 30 frames."""
    if num_clips % NUM_CLASSES:
        raise ValueError(f"suite size must be a multiple of {NUM_CLASSES}")
    return SyntheticDatasetConfig(num_clips=num_clips // NUM_CLASSES, T=30, speed=1, seed=seed)


def sub_seed(seed: int, *keys) -> int:
    """Stable 63-bit seed derived from ``seed`` and any printable keys."""
    text = ":".join(str(k) for k in (seed, *keys))
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "big") >> 1


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


@dataclass
class ExperimentSpec:
    kind: str = "rd-sweep"
    dataset: str | None = None  # directory written by gen-dataset; None generates the suite
    lambdas: tuple[float, ...] = LAMBDAS
    epsilons: tuple[float, ...] = EPSILONS
    mode: str = "compression"
    channel: ChannelConfig | None = None
    output_dir: str | None = None
    seed: int = 0
    num_clips: int = 40
    G: int = 10
    iterations: int = 30
    universal_iterations: int = 300
    zeta: float = 0.1
    train_fraction: float = 0.8
    onset: int = 75
    onset_frames: int = 120
    model: str | None = None  # classifier JSON; trained from scratch when absent

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        self.lambdas = tuple(float(x) for x in self.lambdas)
        self.epsilons = tuple(float(x) for x in self.epsilons)
        if self.kind == "rd-sweep" and not self.lambdas:
            raise ValueError("rd-sweep needs at least one lambda")
        if any(e < 0 for e in self.epsilons):
            raise ValueError("epsilon values must be >= 0")
        if self.output_dir is None:
            self.output_dir = os.environ.get(OUTPUT_ENV)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambdas"], d["epsilons"] = list(self.lambdas), list(self.epsilons)
        return d

    def codec(self, lam: float | None = None) -> CodecConfig:
        return CodecConfig(G=self.G, lam=self.lambdas[0] if lam is None else lam)

    def attack_config(self, **changes) -> AttackConfig:
        base = dict(
            lam=self.lambdas[0],
            epsilon=self.epsilons[-1] if self.epsilons else 0.2,
            iterations=self.iterations,
            universal_iterations=self.universal_iterations,
            zeta=self.zeta,
            mode=self.mode,
            seed=self.seed,
        )
        base.update(changes)
        return AttackConfig(**base)


@dataclass(frozen=True)
class RdPoint:
    lam: float
    epsilon: float
    bpp_clean: float
    psnr_clean: float
    bpp_adv: float
    psnr_adv: float
    bpp_noise: float
    psnr_noise: float

    def __post_init__(self):
        for name in ("bpp_clean", "bpp_adv", "bpp_noise"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("psnr_clean", "psnr_adv", "psnr_noise"):
            if getattr(self, name) > 99.0:
                raise ValueError(f"{name} above the PSNR cap")


# --- output ---------------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def rows_to_csv(rows: Sequence[dict]) -> str:
    if not rows:
        raise ValueError("no rows to write")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = list(rows[0])
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(row[k]) for k in header])
    return buf.getvalue()


def write_outputs(spec: ExperimentSpec, name: str, rows: Sequence[dict], extra: dict | None = None) -> Path | None:
    """Write ``name.csv`` and its JSON sidecar; no-op without an output directory."""
    if spec.output_dir is None:
        return None
    out = Path(spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{name}.csv"
    path.write_text(rows_to_csv(rows))
    sidecar = {"spec": spec.to_dict(), "library_version": _version(), "csv": path.name}
    if extra:
        sidecar.update(extra)
    (out / f"{name}.json").write_text(json.dumps(sidecar, indent=2, default=_json_default))
    return path


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


# --- data -----------------------------------------------------------------------


def load_suite(spec: ExperimentSpec) -> list[VideoClip]:
    clips = load_dataset(spec.dataset) if spec.dataset else gen_dataset(suite_config(spec.seed, spec.num_clips))
    if not clips:
        raise ValueError("dataset is empty")
    return clips


def split_suite(clips: Sequence[VideoClip], train_fraction: float) -> tuple[list[VideoClip], list[VideoClip]]:
    n_train = int(round(len(clips) * train_fraction))
    if not 0 < n_train < len(clips):
        raise ValueError(f"train fraction {train_fraction} leaves an empty split")
    return list(clips[:n_train]), list(clips[n_train:])


# --- R-D sweep ------------------------------------------------------------------


def rd_clip_results(spec: ExperimentSpec, clips: Sequence[VideoClip], lam: float, eps: float) -> list[dict]:
    """Offline attack and uniform-noise baseline on every clip at one (lam, eps)."""
    codec = spec.codec(lam)
    out = []
    for i, clip in enumerate(clips):
        config = spec.attack_config(lam=lam, epsilon=eps, mode="compression", seed=sub_seed(spec.seed, "attack", i))
        objective = ClipObjective(clip, config, codec)
        report = attack_offline(clip, config, codec, objective=objective)
        noise = sample_uniform(clip.T, clip.channels, eps, sub_seed(spec.seed, "noise", i))
        noisy = objective.evaluate(noise)
        out.append(
            {
                "clip": i,
                "bpp_clean": report.clean_bpp,
                "psnr_clean": report.clean_psnr,
                "bpp_adv": report.adv_bpp,
                "psnr_adv": report.adv_psnr,
                "bpp_noise": noisy.coded.bpp,
                "psnr_noise": noisy.coded.psnr,
                "objective_adv": report.trace[-1].total,
                "objective_noise": noisy.loss.total,
            }
        )
    return out


def run_rd_sweep(spec: ExperimentSpec, clips: Sequence[VideoClip] | None = None) -> list[RdPoint]:
    """Mean clean / attacked / noise (bpp, PSNR) per (lam, eps), sorted by (lam, eps)."""
    clips = load_suite(spec) if clips is None else list(clips)
    if not clips:
        raise ValueError("dataset is empty")
    points, per_clip = [], []
    for lam in sorted(spec.lambdas):
        for eps in sorted(spec.epsilons):
            results = rd_clip_results(spec, clips, lam, eps)
            per_clip.extend({"lam": lam, "epsilon": eps, **r} for r in results)
            means = {k: float(np.mean([r[k] for r in results])) for k in results[0] if k != "clip"}
            points.append(
                RdPoint(lam, eps, *(means[k] for k in ("bpp_clean", "psnr_clean", "bpp_adv", "psnr_adv", "bpp_noise", "psnr_noise")))
            )
    if spec.output_dir is not None:
        write_outputs(spec, "rd_sweep", [asdict(p) for p in points], {"clips": len(clips)})
        write_outputs(spec, "rd_sweep_clips", per_clip)
    return points


# --- universal attack -----------------------------------------------------------


def run_universal(spec: ExperimentSpec, clips: Sequence[VideoClip] | None = None, model: ClassifierModel | None = None) -> dict:
    """Train a G-frame flicker on one split, evaluate it on the other.

    Rows are (tau, objective and PSNR drop of the universal flicker and of the
    uniform-noise baseline), averaged over the held-out clips.
    """
    clips = load_suite(spec) if clips is None else list(clips)
    train_set, held_out = split_suite(clips, spec.train_fraction)
    lam = spec.lambdas[0]
    eps = spec.epsilons[-1]
    codec = spec.codec(lam)
    config = spec.attack_config(lam=lam, epsilon=eps, seed=sub_seed(spec.seed, "universal"))
    report = attack_universal(train_set, config, codec, model)
    delta = report.delta.values
    rows = []
    for tau in range(spec.G):
        uni_obj, noise_obj, uni_drop, noise_drop = [], [], [], []
        for i, clip in enumerate(held_out):
            objective = ClipObjective(clip, config, codec, model)
            noise = sample_uniform(spec.G, clip.channels, eps, sub_seed(spec.seed, "universal-noise", i))
            u, n = objective.evaluate(delta, tau), objective.evaluate(noise.values, tau)
            uni_obj.append(u.loss.total)
            noise_obj.append(n.loss.total)
            uni_drop.append(objective.clean.psnr - u.coded.psnr)
            noise_drop.append(objective.clean.psnr - n.coded.psnr)
        rows.append(
            {
                "tau": tau,
                "objective_universal": float(np.mean(uni_obj)),
                "objective_noise": float(np.mean(noise_obj)),
                "psnr_drop_universal": float(np.mean(uni_drop)),
                "psnr_drop_noise": float(np.mean(noise_drop)),
            }
        )
    write_outputs(
        spec,
        "universal",
        rows,
        {"delta": report.delta.to_dict(eps), "train_clips": len(train_set), "held_out_clips": len(held_out), "trace": report.trace},
    )
    return {"rows": rows, "delta": report.delta, "trace": report.trace}


# --- ASR table ------------------------------------------------------------------


def classifier_datasets(seed: int) -> tuple[list[VideoClip], list[VideoClip]]:
    """Training set (default generator config) and a disjoint held-out set."""
    train_set = gen_dataset(SyntheticDatasetConfig(seed=seed))
    test_set = gen_dataset(SyntheticDatasetConfig(num_clips=10, seed=seed + 1))
    return train_set, test_set


def run_asr_table(
    spec: ExperimentSpec,
    victim: ClassifierModel | None = None,
    surrogate: ClassifierModel | None = None,
    data: tuple[Sequence[VideoClip], Sequence[VideoClip]] | None = None,
) -> list[dict]:
    """Offline targeted / untargeted ASR against the victim, plus online transfer.

    The online row uses a universal flicker trained against a surrogate with a
    coarser feature grid and a different seed, then evaluated on the victim.
    A uniform-noise row gives the baseline flip rate.
    """
    train_set, test_set = classifier_datasets(spec.seed) if data is None else (list(data[0]), list(data[1]))
    if victim is None:
        victim = ClassifierModel.load(spec.model) if spec.model else train(train_set, grid=8, seed=spec.seed)
    if surrogate is None:
        surrogate = train(train_set, grid=6, seed=spec.seed + 1)
    lam, eps = spec.lambdas[0], spec.epsilons[-1]
    codec = spec.codec(lam)
    labels = [c.label for c in test_set]
    clean = [encode_clip(c, codec).decoded for c in test_set]
    clean_acc = accuracy(victim, clean)

    def base_config(i, **changes):
        return spec.attack_config(lam=lam, epsilon=eps, mode="classification", seed=sub_seed(spec.seed, "asr", i), **changes)

    untargeted, targeted, targets = [], [], []
    for i, clip in enumerate(test_set):
        objective = ClipObjective(clip, base_config(i), codec, victim)
        report = attack_offline(clip, base_config(i), codec, victim, objective=objective)
        untargeted.append(objective.evaluate(report.delta.values).coded.decoded)
        target = (objective.clean_prediction + 1) % NUM_CLASSES
        targets.append(target)
        config = base_config(i, target=target)
        report = attack_offline(clip, config, codec, victim)
        targeted.append(ClipObjective(clip, config, codec, victim).evaluate(report.delta.values).coded.decoded)

    # online: universal flicker crafted on the surrogate, replayed at a random offset
    uni_config = spec.attack_config(lam=lam, epsilon=eps, mode="classification", seed=sub_seed(spec.seed, "online"))
    universal = attack_universal(train_set[: 8 * NUM_CLASSES], uni_config, codec, surrogate).delta
    rng = np.random.default_rng(sub_seed(spec.seed, "online-tau"))
    online = [encode_clip(apply_flicker(c, universal, int(rng.integers(spec.G))), codec, c).decoded for c in test_set]
    noise = [
        encode_clip(apply_flicker(c, sample_uniform(c.T, c.channels, eps, sub_seed(spec.seed, "asr-noise", i))), codec, c).decoded
        for i, c in enumerate(test_set)
    ]

    rows = []
    for name, surrogate_name, adv, target in (
        ("offline-targeted", "none", targeted, targets),
        ("offline-untargeted", "none", untargeted, None),
        ("online-untargeted", "grid6", online, None),
        ("uniform-noise", "none", noise, None),
    ):
        res = evaluate_asr(victim, clean, adv, labels, target=target)
        rows.append({"attack": name, "surrogate": surrogate_name, "asr": res["asr"], "clean_acc": clean_acc, "count": res["count"]})
    write_outputs(spec, "asr_table", rows, {"universal_delta": universal.to_dict(eps)})
    return rows


# --- onset trace ----------------------------------------------------------------


def onset_clip(spec: ExperimentSpec) -> VideoClip:
    """A long single clip; the frame grows so the object path still fits."""
    T, size, speed = spec.onset_frames, 8, 1
    side = max(64, -(-(size + speed * (T - 1)) // 8) * 8)
    config = SyntheticDatasetConfig(num_clips=1, width=side, height=side, T=T, object_size=size, speed=speed, seed=spec.seed)
    return make_clip(config, 0, 0)


def run_onset_trace(spec: ExperimentSpec, clip: VideoClip | None = None, delta=None) -> list[dict]:
    """Per-frame bits and PSNR with the flicker switched on from ``spec.onset``.

    ``delta`` defaults to a universal-style G-frame flicker found offline on the
    first GOP and replayed cyclically; with a channel config it is realised
    through the simulated bulb first.
    """
    clip = onset_clip(spec) if clip is None else clip
    if not 0 <= spec.onset < clip.T:
        raise ValueError(f"onset frame {spec.onset} outside a clip of {clip.T} frames")
    lam, eps = spec.lambdas[0], spec.epsilons[-1]
    codec = spec.codec(lam)
    if delta is None:
        head = clip.with_frames(clip.frames[: spec.G])
        config = spec.attack_config(lam=lam, epsilon=eps, mode="compression", seed=sub_seed(spec.seed, "onset"))
        delta = attack_offline(head, config, codec).delta.values
    values = tile_offsets(getattr(delta, "values", delta), clip.T, 0)
    if spec.channel is not None:
        values = realize(values, spec.channel).values
    values = values.copy()
    values[: spec.onset] = 0.0
    attacked = simulate_capture(clip, values)
    clean = encode_clip(clip, codec, clip)
    coded = encode_clip(attacked, codec, clip)
    rows = []
    for t in range(clip.T):
        rows.append(
            {
                "frame": t,
                "frame_type": coded.frames[t].frame_type,
                "bits": int(coded.frames[t].total_bits),
                "psnr": psnr(clip.frames[t], coded.decoded.frames[t]),
                "clean_bits": int(clean.frames[t].total_bits),
                "clean_psnr": psnr(clip.frames[t], clean.decoded.frames[t]),
                "attacked": int(t >= spec.onset),
            }
        )
    write_outputs(spec, "onset_trace", rows)
    return rows


# --- channel comparison ---------------------------------------------------------


def run_channel_comparison(spec: ExperimentSpec, clips: Sequence[VideoClip] | None = None) -> list[dict]:
    """Ideal versus bulb-realised offline attack on each suite clip."""
    clips = load_suite(spec) if clips is None else list(clips)
    channel = spec.channel or ChannelConfig(seed=spec.seed)
    lam, eps = spec.lambdas[0], spec.epsilons[-1]
    codec = spec.codec(lam)
    rows = []
    for i, clip in enumerate(clips):
        config = spec.attack_config(lam=lam, epsilon=eps, mode="compression", seed=sub_seed(spec.seed, "attack", i))
        objective = ClipObjective(clip, config, codec)
        report = attack_offline(clip, config, codec, objective=objective)
        realized = realize(report.delta, replace(channel, seed=sub_seed(channel.seed, "channel", i)))
        ev = objective.evaluate(realized.values)
        rows.append(
            {
                "clip": i,
                "psnr_clean": report.clean_psnr,
                "psnr_ideal": report.adv_psnr,
                "psnr_realized": ev.coded.psnr,
                "bpp_clean": report.clean_bpp,
                "bpp_ideal": report.adv_bpp,
                "bpp_realized": ev.coded.bpp,
                "objective_ideal": report.trace[-1].total,
                "objective_realized": ev.loss.total,
            }
        )
    write_outputs(spec, "channel", rows, {"channel": asdict(channel)})
    return rows


# --- convergence ----------------------------------------------------------------


def run_convergence(spec: ExperimentSpec, clip: VideoClip | None = None, model: ClassifierModel | None = None) -> list[dict]:
    """Accepted-iteration log of PSNR, bpp, class probability, thickness and roughness."""
    clip = load_suite(spec)[0] if clip is None else clip
    lam, eps = spec.lambdas[0], spec.epsilons[-1]
    codec = spec.codec(lam)
    if spec.mode != "compression" and model is None:
        if spec.model is None:
            raise ValueError(f"{spec.mode} mode needs a classifier model")
        model = ClassifierModel.load(spec.model)
    config = spec.attack_config(lam=lam, epsilon=eps, seed=sub_seed(spec.seed, "convergence"))
    report = attack_offline(clip, config, codec, model)
    rows = []
    for i, (loss, m) in enumerate(zip(report.trace, report.trace_metrics)):
        rows.append(
            {
                "iteration": i,
                "psnr": m["psnr"],
                "bpp": m["bpp"],
                "probability": m["probability"],
                "thickness": loss.thick,
                "roughness": loss.rough,
                "total": loss.total,
            }
        )
    write_outputs(spec, "convergence", rows, {"delta": report.delta.to_dict(eps)})
    return rows
