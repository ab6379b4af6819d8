import csv
import json

import numpy as np
import pytest

from flickerlab.classifier import SyntheticDatasetConfig, gen_dataset, make_clip, train
from flickerlab.harness import (
    ExperimentSpec,
    RdPoint,
    onset_clip,
    rows_to_csv,
    run_channel_comparison,
    run_convergence,
    run_onset_trace,
    run_rd_sweep,
    run_universal,
    split_suite,
    sub_seed,
    suite_config,
)

TINY = SyntheticDatasetConfig(num_clips=2, width=16, height=16, T=8, object_size=4, speed=1, seed=3)


@pytest.fixture(scope="module")
def tiny_clips():
    return gen_dataset(TINY)


def tiny_spec(tmp_path, **changes):
    base = dict(lambdas=(256.0,), epsilons=(0.0, 0.2), G=4, iterations=3, universal_iterations=3, output_dir=str(tmp_path))
    base.update(changes)
    return ExperimentSpec(**base)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_spec_validation(monkeypatch, tmp_path):
    with pytest.raises(ValueError):
        ExperimentSpec(kind="nonsense")
    with pytest.raises(ValueError):
        ExperimentSpec(lambdas=())
    with pytest.raises(ValueError):
        ExperimentSpec(epsilons=(0.1, -0.1))
    monkeypatch.setenv("FLICKERLAB_OUTPUT", str(tmp_path))
    assert ExperimentSpec().output_dir == str(tmp_path)
    assert ExperimentSpec(output_dir="elsewhere").output_dir == "elsewhere"


def test_default_spec_shape():
    spec = ExperimentSpec(output_dir=None)
    assert len(spec.lambdas) * len(spec.epsilons) == 16
    cfg = suite_config()
    assert cfg.num_clips * 4 == 40 and (cfg.width, cfg.height, cfg.T) == (64, 64, 30)
    with pytest.raises(ValueError):
        suite_config(num_clips=10)


def test_sub_seed_stable():
    assert sub_seed(0, "attack", 3) == sub_seed(0, "attack", 3)
    assert len({sub_seed(0, "attack", i) for i in range(100)}) == 100
    assert sub_seed(0, "a") != sub_seed(1, "a")
    assert 0 <= sub_seed(7, "x") < 2**63


def test_rd_point_invariants():
    RdPoint(256, 0.2, 1.0, 30.0, 1.5, 20.0, 1.2, 25.0)
    with pytest.raises(ValueError):
        RdPoint(256, 0.2, 0.0, 30.0, 1.5, 20.0, 1.2, 25.0)
    with pytest.raises(ValueError):
        RdPoint(256, 0.2, 1.0, 120.0, 1.5, 20.0, 1.2, 25.0)


def test_csv_round_trips_floats():
    rows = [{"a": 0.1 + 0.2, "b": 3, "c": "I"}]
    text = rows_to_csv(rows)
    parsed = list(csv.DictReader(text.splitlines()))
    assert float(parsed[0]["a"]) == 0.1 + 0.2
    with pytest.raises(ValueError):
        rows_to_csv([])


def test_split_suite(tiny_clips):
    train_set, held = split_suite(list(range(40)), 0.8)
    assert len(train_set) == 32 and held == list(range(32, 40))
    with pytest.raises(ValueError):
        split_suite(tiny_clips, 1.0)


def test_rd_sweep_outputs(tmp_path, tiny_clips):
    spec = tiny_spec(tmp_path, lambdas=(1024.0, 256.0))
    points = run_rd_sweep(spec, tiny_clips)
    assert [(p.lam, p.epsilon) for p in points] == [(256, 0), (256, 0.2), (1024, 0), (1024, 0.2)]
    for p in points:
        if p.epsilon == 0:
            assert (p.bpp_adv, p.psnr_adv) == (p.bpp_clean, p.psnr_clean)
            assert (p.bpp_noise, p.psnr_noise) == (p.bpp_clean, p.psnr_clean)
    rows = read_csv(tmp_path / "rd_sweep.csv")
    assert list(rows[0]) == ["lam", "epsilon", "bpp_clean", "psnr_clean", "bpp_adv", "psnr_adv", "bpp_noise", "psnr_noise"]
    assert len(rows) == 4 and len(read_csv(tmp_path / "rd_sweep_clips.csv")) == 4 * len(tiny_clips)
    sidecar = json.loads((tmp_path / "rd_sweep.json").read_text())
    assert sidecar["spec"]["lambdas"] == [1024.0, 256.0] and "library_version" in sidecar
    with pytest.raises(ValueError):
        run_rd_sweep(spec, [])


def test_rd_sweep_reproducible(tmp_path, tiny_clips):
    run_rd_sweep(tiny_spec(tmp_path / "a"), tiny_clips)
    run_rd_sweep(tiny_spec(tmp_path / "b"), tiny_clips)
    for name in ("rd_sweep.csv", "rd_sweep_clips.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_universal_rows(tmp_path, tiny_clips):
    spec = tiny_spec(tmp_path, epsilons=(0.2,), train_fraction=0.75)
    result = run_universal(spec, tiny_clips)
    assert [r["tau"] for r in result["rows"]] == list(range(4))
    assert result["delta"].values.shape == (4, 3) and result["delta"].linf() <= 0.2
    sidecar = json.loads((tmp_path / "universal.json").read_text())
    assert sidecar["train_clips"] == 6 and sidecar["held_out_clips"] == 2


def test_onset_trace(tmp_path):
    clip = make_clip(SyntheticDatasetConfig(num_clips=1, width=32, height=32, T=16, object_size=6, speed=1, seed=1), 2, 0)
    spec = tiny_spec(tmp_path, onset=9)
    rows = run_onset_trace(spec, clip)
    assert len(rows) == 16 and read_csv(tmp_path / "onset_trace.csv")[0].keys() >= {"frame", "bits", "psnr", "frame_type"}
    before, after = rows[:9], rows[9:]
    assert all(r["bits"] == r["clean_bits"] and r["psnr"] == r["clean_psnr"] for r in before)
    assert np.mean([r["psnr"] for r in after]) < np.mean([r["psnr"] for r in before])
    assert [r["frame_type"] for r in rows[:5]] == ["I", "P", "P", "P", "I"]
    assert rows[0]["clean_bits"] > rows[1]["clean_bits"]
    with pytest.raises(ValueError):
        run_onset_trace(tiny_spec(tmp_path, onset=16), clip)


def test_onset_clip_geometry():
    clip = onset_clip(ExperimentSpec(output_dir=None))
    assert clip.T == 120 and clip.width % 8 == 0 and clip.width >= 8 + 119


def test_channel_comparison(tmp_path, tiny_clips):
    rows = run_channel_comparison(tiny_spec(tmp_path, epsilons=(0.2,)), tiny_clips[:2])
    assert len(rows) == 2
    assert all(r["psnr_realized"] < r["psnr_clean"] for r in rows)
    assert json.loads((tmp_path / "channel.json").read_text())["channel"]["levels"] == 256


def test_convergence_log(tmp_path, tiny_clips):
    spec = tiny_spec(tmp_path, kind="convergence", epsilons=(0.2,), iterations=5)
    rows = run_convergence(spec, tiny_clips[0])
    first = rows[0]
    assert first["thickness"] == 0.0 and first["roughness"] == 0.0
    clean = run_rd_sweep(tiny_spec(tmp_path / "c", epsilons=(0.0,)), tiny_clips[:1])[0]
    assert (first["psnr"], first["bpp"]) == (clean.psnr_clean, clean.bpp_clean)
    totals = [r["total"] for r in rows]
    assert all(b <= a for a, b in zip(totals, totals[1:]))
    assert rows[-1]["thickness"] <= 0.2**2 + 1e-12
    with pytest.raises(ValueError):
        run_convergence(tiny_spec(tmp_path, kind="convergence", mode="joint"), tiny_clips[0])


def test_convergence_with_model(tmp_path, tiny_clips):
    model = train(tiny_clips, grid=4, epochs=50)
    spec = tiny_spec(tmp_path, kind="convergence", mode="joint", epsilons=(0.2,))
    rows = run_convergence(spec, tiny_clips[0], model)
    assert all(0.0 <= r["probability"] <= 1.0 for r in rows)
