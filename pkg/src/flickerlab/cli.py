"""Command-line entry point: ``flickerlab <subcommand> ...``.

Failures print a one-line JSON error object to stderr and exit with status 1
(status 2 for usage errors, as argparse does).  Outputs go to ``--out`` or,
when omitted, to the directory named by ``FLICKERLAB_OUTPUT`` (default ``.``).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

from .attack import MODES, AttackConfig, attack_offline, attack_universal
from .channel import ChannelConfig, realize, simulate_capture
from .classifier import ClassifierModel, SyntheticDatasetConfig, accuracy, gen_dataset, load_dataset, train
from .codec import CodecConfig, encode_clip
from .harness import (
    OUTPUT_ENV,
    ExperimentSpec,
    run_asr_table,
    run_convergence,
    run_onset_trace,
    run_rd_sweep,
    run_universal,
)
from .perturbation import FlickerPerturbation
from .video import load_clip, save_clip


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUTPUT_ENV) or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, default=str))


def _codec(args) -> CodecConfig:
    return CodecConfig(G=args.gop, lam=args.lam)


def _attack_config(args, **changes) -> AttackConfig:
    fields = dict(
        lam=args.lam,
        beta=args.beta,
        zeta=args.zeta,
        epsilon=args.epsilon,
        iterations=args.iterations,
        mode=args.mode,
        target=args.target,
        seed=args.seed,
    )
    fields.update(changes)
    return AttackConfig(**fields)


def _model(args) -> ClassifierModel | None:
    return ClassifierModel.load(args.model) if getattr(args, "model", None) else None


def cmd_gen_dataset(args) -> dict:
    config = SyntheticDatasetConfig(
        num_clips=args.num_clips, width=args.width, height=args.height, T=args.frames,
        object_size=args.object_size, speed=args.speed, noise=args.noise, seed=args.seed,
    )
    out = _out_dir(args)
    clips = gen_dataset(config, out)
    return {"clips": len(clips), "output": str(out)}


def cmd_train_classifier(args) -> dict:
    clips = load_dataset(args.dataset)
    model = train(clips, grid=args.grid, epochs=args.epochs, lr=args.lr, seed=args.seed)
    path = _out_dir(args) / "model.json"
    model.save(path)
    return {"model": str(path), "train_accuracy": accuracy(model, clips), "final_loss": model.metadata["loss_trace"][-1]}


def cmd_encode(args) -> dict:
    clip = load_clip(args.clip)
    coded = encode_clip(clip, _codec(args))
    out = _out_dir(args)
    save_clip(coded.decoded, out / "decoded")
    (out / "coded.json").write_text(coded.to_json())
    return {"bpp": coded.bpp, "psnr": coded.psnr, "output": str(out)}


def cmd_attack_offline(args) -> dict:
    clip = load_clip(args.clip)
    report = attack_offline(clip, _attack_config(args), _codec(args), _model(args))
    out = _out_dir(args)
    report.delta.save(out / "delta.json", args.epsilon)
    (out / "report.json").write_text(report.to_json())
    (out / "trace.csv").write_text(report.trace_csv())
    return {"clean": [report.clean_bpp, report.clean_psnr], "adversarial": [report.adv_bpp, report.adv_psnr], "output": str(out)}


def cmd_attack_universal(args) -> dict:
    clips = load_dataset(args.dataset)
    config = _attack_config(args, universal_iterations=args.steps)
    report = attack_universal(clips, config, _codec(args), _model(args))
    out = _out_dir(args)
    report.delta.save(out / "universal_delta.json", args.epsilon)
    (out / "universal_report.json").write_text(report.to_json())
    return {"final_objective": report.trace[-1], "output": str(out)}


def _spec(args, kind: str) -> ExperimentSpec:
    return ExperimentSpec(
        kind=kind,
        dataset=args.dataset,
        lambdas=tuple(args.lambdas),
        epsilons=tuple(args.epsilons),
        mode=args.mode,
        output_dir=str(_out_dir(args)),
        seed=args.seed,
        num_clips=args.num_clips,
        iterations=args.iterations,
        universal_iterations=args.steps,
        model=getattr(args, "model", None),
        channel=ChannelConfig(seed=args.seed) if getattr(args, "channel", False) else None,
    )


def cmd_rd_sweep(args) -> dict:
    points = run_rd_sweep(_spec(args, "rd-sweep"))
    return {"rows": [asdict(p) for p in points]}


def cmd_universal(args) -> dict:
    result = run_universal(_spec(args, "universal"))
    return {"rows": result["rows"]}


def cmd_asr_table(args) -> dict:
    return {"rows": run_asr_table(_spec(args, "asr-table"))}


def cmd_onset_trace(args) -> dict:
    spec = _spec(args, "onset-trace")
    spec.onset, spec.onset_frames = args.onset, args.frames
    clip = load_clip(args.clip) if args.clip else None
    delta = FlickerPerturbation.load(args.delta).values if args.delta else None
    rows = run_onset_trace(spec, clip, delta)
    return {"frames": len(rows), "output": spec.output_dir}


def cmd_convergence(args) -> dict:
    spec = _spec(args, "convergence")
    clip = load_clip(args.clip) if args.clip else None
    rows = run_convergence(spec, clip)
    return {"iterations": len(rows), "final": rows[-1]}


def cmd_simulate_channel(args) -> dict:
    delta = FlickerPerturbation.load(args.delta)
    config = ChannelConfig(
        levels=args.levels, gain=args.gain, max_updates_per_second=args.updates_per_second,
        camera_fps=args.camera_fps, latency_jitter_frames=args.jitter, seed=args.seed,
    )
    realized = realize(delta, config)
    out = _out_dir(args)
    realized.save(out / "realized.json")
    result = {"hold_frames": realized.log["hold_frames"], "jitter_frames": realized.log["jitter_frames"], "output": str(out)}
    if args.clip:
        clip = load_clip(args.clip)
        captured = simulate_capture(clip, realized)
        save_clip(captured, out / "captured")
        coded = encode_clip(captured, CodecConfig(G=args.gop, lam=args.lam), clip)
        result.update(bpp=coded.bpp, psnr=coded.psnr)
    return result


def _add_common(p, attack: bool = False, experiment: bool = False) -> None:
    p.add_argument("--out", help=f"output directory (default: ${OUTPUT_ENV} or .)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lam", type=float, default=256.0, help="codec rate-distortion weight")
    p.add_argument("--gop", type=int, default=10, help="frames per GOP")
    if attack or experiment:
        p.add_argument("--epsilon", type=float, default=0.2)
        p.add_argument("--iterations", type=int, default=100 if attack else 30)
        p.add_argument("--mode", choices=MODES, default="compression")
        p.add_argument("--zeta", type=float, default=0.1)
        p.add_argument("--steps", type=int, default=300, help="universal training steps")
    if attack:
        p.add_argument("--beta", type=float, default=None)
        p.add_argument("--target", type=int, default=None, help="target class (targeted attack)")
        p.add_argument("--model", help="classifier JSON")
    if experiment:
        p.add_argument("--dataset", help="dataset directory (default: generate the suite)")
        p.add_argument("--num-clips", type=int, default=40)
        p.add_argument("--lambdas", type=float, nargs="+", default=[256.0, 512.0, 1024.0, 2048.0])
        p.add_argument("--epsilons", type=float, nargs="+", default=[0.04, 0.12, 0.16, 0.2])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flickerlab", description="Flicker attacks on a toy video codec and classifier.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-dataset", help="write a synthetic labelled clip set")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-clips", type=int, default=100, help="clips per class")
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--object-size", type=int, default=12)
    p.add_argument("--speed", type=int, default=2)
    p.add_argument("--noise", type=float, default=0.01)
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("train-classifier", help="train the softmax classifier on a dataset")
    p.add_argument("dataset")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid", type=int, default=8)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--lr", type=float, default=20.0)
    p.set_defaults(func=cmd_train_classifier)

    p = sub.add_parser("encode", help="encode and decode one clip")
    p.add_argument("clip", help="clip manifest or directory")
    _add_common(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("attack-offline", help="per-clip flicker attack")
    p.add_argument("clip")
    _add_common(p, attack=True)
    p.set_defaults(func=cmd_attack_offline)

    p = sub.add_parser("attack-universal", help="train one G-frame flicker over a dataset")
    p.add_argument("dataset")
    _add_common(p, attack=True)
    p.set_defaults(func=cmd_attack_universal)

    for name, func, helptext in (
        ("rd-sweep", cmd_rd_sweep, "rate-distortion sweep over lambda and epsilon"),
        ("universal", cmd_universal, "train and evaluate a universal flicker"),
        ("asr-table", cmd_asr_table, "attack success rates against the classifier"),
    ):
        p = sub.add_parser(name, help=helptext)
        _add_common(p, experiment=True)
        p.add_argument("--model", help="victim classifier JSON (trained when absent)")
        p.set_defaults(func=func)

    p = sub.add_parser("onset-trace", help="per-frame trace with the attack switched on mid-clip")
    _add_common(p, experiment=True)
    p.add_argument("--clip", help="clip to use (default: a generated long clip)")
    p.add_argument("--delta", help="perturbation JSON (default: found offline)")
    p.add_argument("--onset", type=int, default=75)
    p.add_argument("--frames", type=int, default=120)
    p.add_argument("--channel", action="store_true", help="pass the flicker through the simulated bulb")
    p.set_defaults(func=cmd_onset_trace)

    p = sub.add_parser("convergence", help="per-iteration metrics of one offline attack")
    _add_common(p, experiment=True)
    p.add_argument("--clip")
    p.add_argument("--model")
    p.set_defaults(func=cmd_convergence)

    p = sub.add_parser("simulate-channel", help="realise a perturbation through the bulb model")
    p.add_argument("delta", help="perturbation JSON")
    p.add_argument("--clip", help="optionally film and encode this clip under the realised light")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--levels", type=int, default=256)
    p.add_argument("--gain", type=float, default=0.25)
    p.add_argument("--updates-per-second", type=float, default=10.0)
    p.add_argument("--camera-fps", type=float, default=30.0)
    p.add_argument("--jitter", type=int, default=2)
    p.add_argument("--lam", type=float, default=256.0)
    p.add_argument("--gop", type=int, default=10)
    p.set_defaults(func=cmd_simulate_channel)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = args.func(args)
    except Exception as exc:  # report every failure as machine-readable JSON
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}), file=sys.stderr)
        return 1
    _print(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
