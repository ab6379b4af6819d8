import csv
import io

import numpy as np
import pytest

from conftest import textured_frame
from flickerlab.attack import (
    AttackConfig,
    ClipObjective,
    LossBreakdown,
    attack_offline,
    attack_universal,
    class_margin,
    estimate_gradient,
)
from flickerlab.classifier import SyntheticDatasetConfig, gen_dataset, train
from flickerlab.codec import CodecConfig, encode_clip
from flickerlab.perturbation import r_rough, r_thick, reg_gradient
from flickerlab.video import VideoClip

CODEC = CodecConfig(G=4)


def moving_clip(T=8, size=16, seed=0):
    base = textured_frame(size + T, size + T, seed=seed)
    frames = np.stack([base[t // 2 : t // 2 + size, t : t + size] for t in range(T)])
    return VideoClip(frames)


@pytest.fixture(scope="module")
def clip():
    return moving_clip()


@pytest.fixture(scope="module")
def tiny_model():
    cfg = SyntheticDatasetConfig(num_clips=6, width=16, height=16, T=8, object_size=4, speed=1, seed=2)
    clips = gen_dataset(cfg)
    return clips, train(clips, grid=4, epochs=100)


def test_config_validation():
    for bad in (
        dict(mode="both"),
        dict(iterations=0),
        dict(step_size=0.0),
        dict(fd_step=0.0),
        dict(epsilon=-0.1),
        dict(zeta=-1),
        dict(update="random"),
    ):
        with pytest.raises(ValueError):
            AttackConfig(**bad)
    assert AttackConfig(epsilon=0.2).step == pytest.approx(0.02)


def test_loss_breakdown_recombines():
    b = LossBreakdown(comp=-12.5, cls=0.3, thick=0.01, rough=0.02, beta=4.0, zeta=0.1)
    assert b.total == pytest.approx(-12.5 + 1.2 + 0.003, abs=1e-12)
    row = b.as_row()
    assert abs(row["comp"] + 4.0 * row["class"] + 0.1 * (row["thick"] + row["rough"]) - row["total"]) < 1e-9


def test_comp_loss_at_zero(clip):
    obj = ClipObjective(clip, AttackConfig(lam=256), CODEC)
    coded = encode_clip(clip, CODEC.replace(lam=256), clip)
    pixels = clip.width * clip.height
    for g, (start, stop) in enumerate([(0, 4), (4, 8)]):
        expected = -(coded.frame_bits[start:stop].sum() / pixels + 256 * coded.frame_mse[start:stop].sum())
        assert obj.comp_loss(np.zeros((8, 3)), g) == pytest.approx(expected, rel=1e-12)
    with pytest.raises(IndexError):
        obj.comp_loss(np.zeros((8, 3)), 2)
    with pytest.raises(ValueError):
        obj.comp_loss(np.zeros((8, 3)), 0, rate_mode="fuzzy")


def test_comp_is_linear_in_lambda(clip):
    coded = encode_clip(clip, CODEC, clip)
    one = ClipObjective(clip, AttackConfig(lam=256), CODEC).comp_from_coded(coded)
    two = ClipObjective(clip, AttackConfig(lam=512), CODEC).comp_from_coded(coded)
    rate = -np.mean([coded.frame_bits[s : s + 4].sum() for s in (0, 4)]) / (clip.width * clip.height)
    assert (two - rate) == pytest.approx(2 * (one - rate), rel=1e-12)


def test_total_objective_weighting(clip):
    obj = ClipObjective(clip, AttackConfig(zeta=0.0), CODEC)
    zero = obj.evaluate(np.zeros((8, 3))).loss
    assert zero.total == pytest.approx(zero.comp, abs=1e-12)
    assert zero.total == pytest.approx(np.mean([obj.comp_loss(np.zeros((8, 3)), g) for g in range(2)]), rel=1e-12)
    ev = ClipObjective(clip, AttackConfig(zeta=0.5), CODEC).evaluate(np.zeros((8, 3)))
    assert ev.loss.total == pytest.approx(zero.comp, rel=1e-12)
    d = np.random.default_rng(0).uniform(-0.1, 0.1, (8, 3))
    loss = ClipObjective(clip, AttackConfig(zeta=0.5), CODEC).evaluate(d).loss
    assert loss.thick == pytest.approx(r_thick(d)) and loss.rough == pytest.approx(r_rough(d))
    assert loss.total == pytest.approx(loss.comp + 0.5 * (loss.thick + loss.rough), abs=1e-9)


def test_mode_requires_model(clip):
    with pytest.raises(ValueError):
        ClipObjective(clip, AttackConfig(mode="joint"), CODEC)
    with pytest.raises(ValueError):
        ClipObjective(clip, AttackConfig(mode="classification"), CODEC)


def test_class_margin_definitions():
    p = np.array([0.1, 0.6, 0.2, 0.1])
    assert class_margin(p, 1) == pytest.approx(0.4)
    assert class_margin(p, 2) < 0  # reference no longer on top
    assert class_margin(p, 0, target=1) < 0  # prediction equals the target
    assert class_margin(p, 1, target=2) > 0


def test_estimate_gradient_examples(rng):
    v = rng.normal(size=(5, 3))
    assert np.allclose(estimate_gradient(lambda x: float(np.sum(x**2)), v, 0.01), 2 * v, atol=1e-12)
    assert not estimate_gradient(lambda x: 3.0, v, 0.01).any()
    reg = estimate_gradient(lambda x: 0.2 * (r_thick(x) + r_rough(x)), v, 1e-3)
    assert np.abs(reg - reg_gradient(v, 0.2)).max() < 1e-6
    with pytest.raises(FloatingPointError, match="probe"):
        estimate_gradient(lambda x: float("nan") if x[2, 1] > v[2, 1] else 0.0, v, 0.01)


@pytest.mark.parametrize("P,tau", [(8, 0), (4, 3)])
def test_local_probes_match_generic_gradient(clip, P, tau):
    obj = ClipObjective(clip, AttackConfig(zeta=0.0), CODEC)
    v = np.random.default_rng(P).uniform(-0.1, 0.1, (P, 3))
    fast, value = obj.smooth_gradient(v, tau)
    slow = estimate_gradient(lambda x: obj.smooth_total(x, tau), v, obj.config.fd_step)
    assert value == pytest.approx(obj.smooth_total(v, tau), rel=1e-12)
    assert np.abs(fast - slow).max() <= 1e-8 * np.abs(slow).max()


def test_class_gradient_matches_generic(tiny_model):
    clips, model = tiny_model
    c = clips[1]
    for target in (None, 3):
        obj = ClipObjective(c, AttackConfig(mode="classification", target=target, zeta=0.0), CODEC, model)
        v = np.random.default_rng(4).uniform(-0.2, 0.2, (8, 3))
        fast, _ = obj.smooth_gradient(v)
        slow = estimate_gradient(lambda x: obj.smooth_total(x), v, obj.config.fd_step)
        assert np.abs(fast - slow).max() < 1e-10


def test_zero_budget_is_identity(clip):
    rep = attack_offline(clip, AttackConfig(epsilon=0.0, iterations=5), CODEC)
    assert not rep.delta.values.any()
    assert rep.adv_bpp == rep.clean_bpp and rep.adv_psnr == rep.clean_psnr


@pytest.mark.parametrize("update", ["sweep", "jacobi"])
def test_offline_attack_contract(clip, update):
    cfg = AttackConfig(epsilon=0.1, iterations=6, update=update)
    rep = attack_offline(clip, cfg, CODEC)
    totals = [t.total for t in rep.trace]
    assert all(b <= a for a, b in zip(totals, totals[1:]))
    assert len(rep.trace) == rep.accepted + 1
    assert rep.delta.linf() <= 0.1
    assert rep.trace[-1].comp <= rep.trace[0].comp
    assert rep.adv_bpp > rep.clean_bpp and rep.adv_psnr < rep.clean_psnr
    again = attack_offline(clip, cfg, CODEC)
    assert np.array_equal(again.delta.values, rep.delta.values)
    assert again.trace == rep.trace
    rows = list(csv.reader(io.StringIO(rep.trace_csv())))
    assert rows[0] == ["iteration", "comp", "class", "thick", "rough", "total"]
    assert len(rows) == len(rep.trace) + 1


def test_joint_mode_balances_beta(tiny_model):
    clips, model = tiny_model
    obj = ClipObjective(clips[0], AttackConfig(mode="joint"), CODEC, model)
    comp0 = abs(obj.comp_from_coded(obj.clean))
    cls0 = abs(obj._margin(obj.clean.decoded.frames))
    assert 0.1 <= obj.beta * max(cls0, 1e-3) / comp0 <= 10
    rep = attack_offline(clips[0], AttackConfig(mode="joint", iterations=3, epsilon=0.1), CODEC, model)
    assert rep.clean_prediction is not None and rep.delta.linf() <= 0.1


def test_universal_attack(clip):
    with pytest.raises(ValueError):
        attack_universal([], AttackConfig(), CODEC)
    train_set = [moving_clip(seed=s) for s in range(3)]
    cfg = AttackConfig(epsilon=0.1, universal_iterations=4, batch_size=2, seed=7)
    rep = attack_universal(train_set, cfg, CODEC)
    assert rep.delta.values.shape == (CODEC.G, 3)
    assert rep.delta.linf() <= 0.1 and len(rep.trace) == 4
    again = attack_universal(train_set, cfg, CODEC)
    assert np.array_equal(again.delta.values, rep.delta.values)
