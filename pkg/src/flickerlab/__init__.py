"""Flicker attacks on a toy motion-compensated video codec and a linear video classifier."""

from .attack import AttackConfig, AttackReport, ClipObjective, attack_offline, attack_universal
from .channel import ChannelConfig, realize, simulate_capture
from .classifier import ClassifierModel, SyntheticDatasetConfig, evaluate_asr, gen_dataset, predict, train
from .codec import CodecConfig, decode_clip, encode_clip
from .perturbation import FlickerPerturbation, apply_flicker, r_rough, r_thick, reg_gradient
from .video import VideoClip, load_clip, psnr, save_clip

__all__ = [
    "AttackConfig",
    "AttackReport",
    "ChannelConfig",
    "ClassifierModel",
    "ClipObjective",
    "CodecConfig",
    "FlickerPerturbation",
    "SyntheticDatasetConfig",
    "VideoClip",
    "apply_flicker",
    "attack_offline",
    "attack_universal",
    "decode_clip",
    "encode_clip",
    "evaluate_asr",
    "gen_dataset",
    "load_clip",
    "predict",
    "psnr",
    "r_rough",
    "r_thick",
    "realize",
    "reg_gradient",
    "save_clip",
    "simulate_capture",
    "train",
]
