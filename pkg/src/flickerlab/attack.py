"""Flicker attacks on the codec (and optionally a downstream classifier).

The attacked objective is

    total = mean_g comp(g) + beta * class_margin + zeta * (thick + rough)

where ``comp(g) = -sum_{t in GOP g} (bits_t / (W*H) + lam * mse_t)`` is the
negated rate-distortion cost of GOP ``g`` under attack (rate in bits per
pixel, distortion the MSE of the decoded adversarial frame against the clean
frame).  Minimising ``total`` therefore raises both rate and distortion.

Gradients are central finite differences of a *smooth* version of the
objective (no quantisation, log-rate) in which every frame decodes
losslessly.  Each frame's cost then depends only on its own offset and on the
previous frame's, so a probe on entry ``(t, c)`` re-codes just frames ``t``
and ``t + 1``.  Acceptance and reporting use the real (hard) codec.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .classifier import ClassifierModel, features_from_pools, pool_frames, predict
from .codec import CodecConfig, CodedClip, SmoothFrameCost, encode_clip, smooth_frame_cost
from .perturbation import (
    FlickerPerturbation,
    apply_offsets,
    project_linf,
    r_rough,
    r_thick,
    reg_gradient,
    tile_offsets,
)
from .video import VideoClip, partition_gops

MODES = ("compression", "joint", "classification")


@dataclass(frozen=True)
class AttackConfig:
    lam: float = 256.0
    beta: float | None = None  # None: auto-balance against the comp term at delta = 0
    zeta: float = 0.1
    epsilon: float = 0.2
    iterations: int = 100
    step_size: float | None = None  # None: epsilon / 10
    fd_step: float = 0.01
    mode: str = "compression"
    target: int | None = None
    seed: int = 0
    batch_size: int = 4
    universal_iterations: int = 300
    update: str = "sweep"  # "sweep": frame-by-frame signed steps; "jacobi": all entries at once
    min_step_ratio: float = 1e-2  # stop once the step falls below this fraction of epsilon

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.iterations < 1 or self.universal_iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError("step size must be positive")
        if not self.fd_step > 0:
            raise ValueError("finite-difference step must be positive")
        if self.epsilon < 0 or self.zeta < 0 or (self.beta is not None and self.beta < 0):
            raise ValueError("epsilon, beta and zeta must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.update not in ("sweep", "jacobi"):
            raise ValueError(f"update must be 'sweep' or 'jacobi', got {self.update!r}")
        if not self.min_step_ratio > 0:
            raise ValueError("min_step_ratio must be positive")

    @property
    def step(self) -> float:
        return self.epsilon / 10.0 if self.step_size is None else self.step_size

    @property
    def uses_classifier(self) -> bool:
        return self.mode != "compression"

    def replace(self, **changes) -> "AttackConfig":
        d = asdict(self)
        d.update(changes)
        return AttackConfig(**d)


@dataclass(frozen=True)
class LossBreakdown:
    comp: float  # GOP-averaged comp term (0 in classification mode)
    cls: float  # classification margin (0 in compression mode)
    thick: float
    rough: float
    beta: float
    zeta: float

    @property
    def total(self) -> float:
        return self.comp + self.beta * self.cls + self.zeta * (self.thick + self.rough)

    def as_row(self) -> dict:
        return {"comp": self.comp, "class": self.cls, "thick": self.thick, "rough": self.rough, "total": self.total}


@dataclass
class Evaluation:
    """A hard-mode objective evaluation plus the coded clip behind it."""

    loss: LossBreakdown
    coded: CodedClip
    probabilities: np.ndarray | None

    @property
    def prediction(self) -> int | None:
        return None if self.probabilities is None else int(np.argmax(self.probabilities))


@dataclass
class AttackReport:
    delta: FlickerPerturbation
    epsilon: float
    trace: list[LossBreakdown]
    trace_metrics: list[dict]
    clean_bpp: float
    clean_psnr: float
    adv_bpp: float
    adv_psnr: float
    clean_prediction: int | None = None
    adv_prediction: int | None = None
    beta: float = 0.0
    accepted: int = 0
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "delta": self.delta.to_dict(self.epsilon),
            "clean": {"bpp": self.clean_bpp, "psnr": self.clean_psnr, "prediction": self.clean_prediction},
            "adversarial": {"bpp": self.adv_bpp, "psnr": self.adv_psnr, "prediction": self.adv_prediction},
            "beta": self.beta,
            "accepted_iterations": self.accepted,
            "trace": [t.as_row() for t in self.trace],
            "wall_time": self.wall_time,
            **self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def trace_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["iteration", "comp", "class", "thick", "rough", "total"])
        for i, t in enumerate(self.trace):
            writer.writerow([i, repr(t.comp), repr(t.cls), repr(t.thick), repr(t.rough), repr(t.total)])
        return buf.getvalue()


def class_margin(probs: np.ndarray, reference_class: int, target: int | None = None) -> float:
    """Untargeted: p[ref] - max_{c != ref} p[c].  Targeted: max_{c != t} p[c] - p[t]."""
    others = np.delete(probs, reference_class if target is None else target)
    if target is None:
        return float(probs[reference_class] - others.max())
    return float(others.max() - probs[target])


def estimate_gradient(objective: Callable[[np.ndarray], float], delta, h: float) -> np.ndarray:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` for every entry."""
    if not h > 0:
        raise ValueError("finite-difference step must be positive")
    x = np.array(delta.values if isinstance(delta, FlickerPerturbation) else delta, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        vals = []
        for sign in (1.0, -1.0):
            probe = x.copy()
            probe[idx] += sign * h
            v = objective(probe)
            if not math.isfinite(v):
                raise FloatingPointError(f"objective is {v} at probe {idx} {'+' if sign > 0 else '-'}h")
            vals.append(v)
        grad[idx] = (vals[0] - vals[1]) / (2.0 * h)
    return grad


class ClipObjective:
    """The attack objective for one clean clip.

    Perturbations may be shorter than the clip (universal mode); they are
    tiled cyclically with offset ``tau``.
    """

    def __init__(
        self,
        clip: VideoClip,
        config: AttackConfig,
        codec: CodecConfig,
        model: ClassifierModel | None = None,
        beta: float | None = None,
    ):
        if config.uses_classifier and model is None:
            raise ValueError(f"{config.mode} mode needs a classifier model")
        if config.uses_classifier and not model.trained:
            raise ValueError("classifier model is not trained")
        self.clip = clip
        self.config = config
        self.hard = codec.replace(lam=config.lam, mode="hard")
        self.smooth = codec.replace(lam=config.lam, mode="smooth")
        self.model = model if config.uses_classifier else None
        self.gops = partition_gops(clip.T, codec.G)
        self.gop_start = np.zeros(clip.T, dtype=bool)
        self.gop_start[[g.start for g in self.gops]] = True
        self.pixels = clip.width * clip.height

        self.clean = encode_clip(clip, self.hard, clip)
        self.clean_prediction = None
        if self.model is not None:
            self.clean_probabilities = predict(self.model, self.clean.decoded)
            self.clean_prediction = int(np.argmax(self.clean_probabilities))
        self.beta = 0.0
        if config.mode == "joint":
            self.beta = beta if beta is not None else config.beta
        elif config.mode == "classification":
            self.beta = 1.0 if config.beta is None else config.beta
        if self.beta is None:
            self.beta = self._balanced_beta()

    # -- pieces ---------------------------------------------------------------

    def _margin(self, decoded_frames: np.ndarray) -> float:
        probs = predict(self.model, decoded_frames)
        return class_margin(probs, self.clean_prediction, self.config.target)

    def comp_from_coded(self, coded: CodedClip) -> float:
        per_frame = coded.frame_bits / self.pixels + self.config.lam * coded.frame_mse
        return -float(np.mean([per_frame[g.start : g.stop].sum() for g in self.gops]))

    def comp_loss(self, delta, g: int, rate_mode: str = "hard", tau: int = 0) -> float:
        """Negated rate + lam * distortion of GOP ``g`` under the perturbation."""
        if not 0 <= g < len(self.gops):
            raise IndexError(f"GOP index {g} outside 0..{len(self.gops) - 1}")
        gop = self.gops[g]
        if rate_mode == "hard":
            coded = encode_clip(self.perturbed(delta, tau), self.hard, self.clip)
            terms = coded.frame_bits / self.pixels + self.config.lam * coded.frame_mse
            return -float(terms[gop.start : gop.stop].sum())
        if rate_mode == "smooth":
            frames = apply_offsets(self.clip.frames, self.offsets(delta, tau))
            return -float(sum(self._smooth_term(frames, t) for t in gop.frame_indices))
        raise ValueError(f"rate mode must be 'hard' or 'smooth', got {rate_mode!r}")

    def _balanced_beta(self) -> float:
        comp0 = abs(self.comp_from_coded(self.clean))
        cls0 = abs(self._margin(self.clean.decoded.frames))
        return comp0 / max(cls0, 1e-3)

    def offsets(self, delta, tau: int = 0) -> np.ndarray:
        v = delta.values if isinstance(delta, FlickerPerturbation) else np.asarray(delta)
        if v.shape[1] != self.clip.channels:
            raise ValueError(f"perturbation has {v.shape[1]} channels, clip has {self.clip.channels}")
        return tile_offsets(v, self.clip.T, tau)

    def perturbed(self, delta, tau: int = 0) -> VideoClip:
        return self.clip.with_frames(apply_offsets(self.clip.frames, self.offsets(delta, tau)))

    def _regularizers(self, v: np.ndarray) -> tuple[float, float]:
        return r_thick(v), (r_rough(v) if v.shape[0] >= 2 else 0.0)

    # -- hard objective -------------------------------------------------------

    def evaluate(self, delta, tau: int = 0) -> Evaluation:
        v = delta.values if isinstance(delta, FlickerPerturbation) else np.asarray(delta, dtype=np.float64)
        coded = encode_clip(self.perturbed(v, tau), self.hard, self.clip)
        comp = self.comp_from_coded(coded) if self.config.mode != "classification" else 0.0
        probs, cls = None, 0.0
        if self.model is not None:
            probs = predict(self.model, coded.decoded)
            cls = class_margin(probs, self.clean_prediction, self.config.target)
        thick, rough = self._regularizers(v)
        loss = LossBreakdown(comp, cls, thick, rough, self.beta, self.config.zeta)
        return Evaluation(loss, coded, probs)

    # -- smooth objective -----------------------------------------------------

    def _smooth_cost(self, frames, t, base=None, channel=None) -> SmoothFrameCost:
        ref = None if self.gop_start[t] else frames[t - 1]
        return smooth_frame_cost(frames[t], ref, self.smooth, base, channel)

    def _frame_term(self, frames, t, cost: SmoothFrameCost) -> float:
        mse = float(np.mean((frames[t] - self.clip.frames[t]) ** 2))
        return cost.total / self.pixels + self.config.lam * mse

    def _smooth_term(self, frames, t) -> float:
        return self._frame_term(frames, t, self._smooth_cost(frames, t))

    def smooth_total(self, delta, tau: int = 0) -> float:
        """The smooth objective, evaluated in full (slow path, used for checks)."""
        v = np.asarray(delta.values if isinstance(delta, FlickerPerturbation) else delta, dtype=np.float64)
        frames = apply_offsets(self.clip.frames, self.offsets(v, tau))
        comp = 0.0
        if self.config.mode != "classification":
            comp = -sum(self._smooth_term(frames, t) for t in range(self.clip.T)) / len(self.gops)
        cls = self._margin(frames) if self.model is not None else 0.0
        thick, rough = self._regularizers(v)
        return LossBreakdown(comp, cls, thick, rough, self.beta, self.config.zeta).total

    def _frame_row_gradient(self, frames, offsets, costs, t, h) -> np.ndarray:
        """Central differences of the smooth comp term w.r.t. offset row ``t``.

        Only frames ``t`` and ``t + 1`` (same GOP) depend on that row; the
        others cancel in the difference, so they are never re-coded.
        """
        C = offsets.shape[1]
        has_next = t + 1 < self.clip.T and not self.gop_start[t + 1]
        saved = frames[t].copy()
        row = np.zeros(C)
        for c in range(C):
            vals = []
            for sign in (1.0, -1.0):
                frames[t, :, :, c] = np.clip(self.clip.frames[t, :, :, c] + offsets[t, c] + sign * h, 0.0, 1.0)
                total = self._frame_term(frames, t, self._smooth_cost(frames, t, costs[t], c))
                if has_next:
                    total += self._frame_term(frames, t + 1, self._smooth_cost(frames, t + 1, costs[t + 1], c))
                frames[t] = saved
                if not math.isfinite(total):
                    raise FloatingPointError(f"objective is {total} at probe ({t}, {c})")
                vals.append(total)
            row[c] = -(vals[0] - vals[1]) / (2.0 * h * len(self.gops))
        return row

    def _comp_offset_gradient(self, offsets: np.ndarray, h: float) -> tuple[np.ndarray, float]:
        """Gradient of the smooth comp term w.r.t. the per-frame offsets."""
        frames = apply_offsets(self.clip.frames, offsets)
        costs = [self._smooth_cost(frames, t) for t in range(self.clip.T)]
        value = -sum(self._frame_term(frames, t, costs[t]) for t in range(self.clip.T)) / len(self.gops)
        grad = np.stack([self._frame_row_gradient(frames, offsets, costs, t, h) for t in range(self.clip.T)])
        return grad, value

    def _class_gradient(self, v: np.ndarray, tau: int, h: float) -> tuple[np.ndarray, float]:
        """Central differences of ``beta * margin`` on the perturbed (undecoded) frames.

        Features depend on each frame only through its pooled channel means, so
        a probe re-pools one channel of the frames that reuse the probed entry.
        """
        model, clean = self.model, self.clip.frames
        offsets = self.offsets(v, tau)
        pools = pool_frames(apply_offsets(clean, offsets), model.grid)

        def value(p):
            probs = model.probabilities_from_features(features_from_pools(p))
            return self.beta * class_margin(probs, self.clean_prediction, self.config.target)

        base = value(pools)
        uses = (np.arange(self.clip.T) + int(tau)) % v.shape[0]
        grad = np.zeros_like(v)
        for j in range(v.shape[0]):
            frames_j = np.flatnonzero(uses == j)
            if frames_j.size == 0:
                continue
            for c in range(v.shape[1]):
                vals = []
                for sign in (1.0, -1.0):
                    probe = pools.copy()
                    shifted = np.clip(clean[frames_j, :, :, c] + v[j, c] + sign * h, 0.0, 1.0)
                    probe[frames_j, c] = pool_frames(shifted[..., None], model.grid)[:, 0]
                    vals.append(value(probe))
                if not all(math.isfinite(x) for x in vals):
                    raise FloatingPointError(f"objective is non-finite at probe ({j}, {c})")
                grad[j, c] = (vals[0] - vals[1]) / (2.0 * h)
        return grad, base

    def sweep(self, delta: np.ndarray, step: float, epsilon: float) -> np.ndarray:
        """One pass of frame-by-frame signed descent on the smooth objective.

        Row ``t`` is stepped using a gradient that already sees the updated
        rows ``< t``; the classifier part is taken once at the start of the
        pass.  Requires a full-length perturbation (offline mode).
        """
        h = self.config.fd_step
        v = np.array(delta, dtype=np.float64)
        T = self.clip.T
        if v.shape[0] != T:
            raise ValueError("sweep updates need one offset row per frame")
        with_comp = self.config.mode != "classification"
        frames = apply_offsets(self.clip.frames, v)
        costs = [self._smooth_cost(frames, t) for t in range(T)] if with_comp else []
        cls_grad = self._class_gradient(v, 0, h)[0] if self.model is not None else np.zeros_like(v)
        for t in range(T):
            g = cls_grad[t] + reg_gradient(v, self.config.zeta)[t]
            if with_comp:
                g = g + self._frame_row_gradient(frames, v, costs, t, h)
            row = np.clip(v[t] - step * np.sign(g), -epsilon, epsilon)
            if np.array_equal(row, v[t]):
                continue
            v[t] = row
            if not with_comp:
                continue
            frames[t] = np.clip(self.clip.frames[t] + row, 0.0, 1.0)
            costs[t] = self._smooth_cost(frames, t)
            if t + 1 < T and not self.gop_start[t + 1]:
                costs[t + 1] = self._smooth_cost(frames, t + 1)
        return v

    def smooth_gradient(self, delta, tau: int = 0, h: float | None = None) -> tuple[np.ndarray, float]:
        """Finite-difference gradient of the smooth objective, minus regularisers.

        Returns ``(gradient, smooth value of the probed part)``.  The
        regulariser gradient is exact and added by the caller.
        """
        h = self.config.fd_step if h is None else h
        v = np.array(delta.values if isinstance(delta, FlickerPerturbation) else delta, dtype=np.float64)
        P = v.shape[0]
        grad = np.zeros_like(v)
        value = 0.0
        if self.config.mode != "classification":
            g_off, value = self._comp_offset_gradient(self.offsets(v, tau), h)
            # fold clip-frame gradients back onto the (possibly shorter) perturbation
            idx = (np.arange(self.clip.T) + tau) % P
            np.add.at(grad, idx, g_off)
        if self.model is not None:
            g_cls, v_cls = self._class_gradient(v, tau, h)
            grad += g_cls
            value += v_cls
        return grad, value


def _report(objective: ClipObjective, delta: np.ndarray, final: Evaluation, trace, metrics, accepted, t0, epsilon):
    return AttackReport(
        delta=FlickerPerturbation(delta),
        epsilon=epsilon,
        trace=trace,
        trace_metrics=metrics,
        clean_bpp=objective.clean.bpp,
        clean_psnr=objective.clean.psnr,
        adv_bpp=final.coded.bpp,
        adv_psnr=final.coded.psnr,
        clean_prediction=objective.clean_prediction,
        adv_prediction=final.prediction,
        beta=objective.beta,
        accepted=accepted,
        wall_time=time.perf_counter() - t0,
    )


def _metrics_row(ev: Evaluation, objective: ClipObjective) -> dict:
    row = {"psnr": ev.coded.psnr, "bpp": ev.coded.bpp, "probability": float("nan")}
    if ev.probabilities is not None:
        ref = objective.clean_prediction if objective.config.target is None else objective.config.target
        row["probability"] = float(ev.probabilities[ref])
    return row


def attack_offline(
    clip: VideoClip,
    config: AttackConfig,
    codec: CodecConfig,
    model: ClassifierModel | None = None,
    objective: ClipObjective | None = None,
) -> AttackReport:
    """Per-clip attack: signed-gradient L-inf descent with monotone acceptance.

    Each iteration moves every entry by ``step`` against the sign of the
    smooth gradient and clamps to the budget, either all at once
    (``update="jacobi"``) or frame by frame (``"sweep"``, the default).  The
    new iterate is kept only if the hard objective does not increase; a
    rejected iterate halves the step size.
    """
    t0 = time.perf_counter()
    objective = objective or ClipObjective(clip, config, codec, model)
    eps = config.epsilon
    delta = np.zeros((clip.T, clip.channels))
    current = objective.evaluate(delta)
    trace, metrics = [current.loss], [_metrics_row(current, objective)]
    step, accepted = config.step, 0
    for _ in range(config.iterations):
        if eps == 0 or step < eps * config.min_step_ratio:
            break
        if config.update == "sweep":
            candidate = objective.sweep(delta, step, eps)
        else:
            grad, _ = objective.smooth_gradient(delta)
            grad += reg_gradient(delta, config.zeta)
            candidate = project_linf(delta - step * np.sign(grad), eps)
        if np.array_equal(candidate, delta):
            step *= 0.5
            continue
        ev = objective.evaluate(candidate)
        if ev.loss.total <= current.loss.total:
            delta, current = candidate, ev
            trace.append(ev.loss)
            metrics.append(_metrics_row(ev, objective))
            accepted += 1
        else:
            step *= 0.5
    return _report(objective, delta, current, trace, metrics, accepted, t0, eps)


@dataclass
class UniversalReport:
    delta: FlickerPerturbation
    epsilon: float
    trace: list[float]
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return {"delta": self.delta.to_dict(self.epsilon), "trace": self.trace, "wall_time": self.wall_time}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def attack_universal(
    train_set: Sequence[VideoClip],
    config: AttackConfig,
    codec: CodecConfig,
    model: ClassifierModel | None = None,
) -> UniversalReport:
    """Train one G-frame flicker over a clip set with random temporal offsets.

    Every step draws a minibatch of clips and one offset per clip, averages
    the smooth gradients of the tiled perturbation, takes a signed step and
    projects.  The trace holds the minibatch mean of the smooth objective.
    """
    if not train_set:
        raise ValueError("universal attack needs a nonempty training set")
    t0 = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    G, C = codec.G, train_set[0].channels
    objectives = [ClipObjective(c, config, codec, model) for c in train_set]
    if config.mode == "joint" and config.beta is None:
        # one shared weight, balanced over the whole training set
        beta = float(np.mean([o.beta for o in objectives]))
        for o in objectives:
            o.beta = beta
    delta = np.zeros((G, C))
    trace = []
    batch = min(config.batch_size, len(objectives))
    for _ in range(config.universal_iterations):
        picks = rng.choice(len(objectives), size=batch, replace=False)
        taus = rng.integers(0, G, size=batch)
        grad = np.zeros_like(delta)
        value = 0.0
        for i, tau in zip(picks, taus):
            g, v = objectives[i].smooth_gradient(delta, int(tau))
            grad += g / batch
            value += v / batch
        reg = config.zeta * (r_thick(delta) + r_rough(delta))
        trace.append(value + reg)
        grad += reg_gradient(delta, config.zeta)
        delta = project_linf(delta - config.step * np.sign(grad), config.epsilon)
    return UniversalReport(FlickerPerturbation(delta), config.epsilon, trace, time.perf_counter() - t0)
