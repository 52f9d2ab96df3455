"""Transformer speech codec with cross-scale residual vector quantization."""

from .csrvq import CodecConfig, CodecModel, EncodedPayload, VQConfig, decode, encode, sample_streams, set_bypass
from .dsp import MelScaleSet, StftConfig, istft, stft
from .training import TrainConfig, run_schedule, synth_corpus
from .transformer import ArchConfig

__all__ = ["ArchConfig", "CodecConfig", "CodecModel", "EncodedPayload", "MelScaleSet", "StftConfig",
           "TrainConfig", "VQConfig", "decode", "encode", "istft", "run_schedule", "sample_streams",
           "set_bypass", "stft", "synth_corpus"]
