"""Tensor math, reverse-mode gradients, the captioning model and its persistence."""

from .autograd import Tensor, backward, no_grad
from .checkpoint import load_checkpoint, save_checkpoint
from .model import (
    DecoderSpec,
    EncoderSpec,
    ParamStore,
    decode_teacher_forced,
    encode,
    greedy_decode,
    init_params,
    preprocess,
    spec_dict,
)
from .vocab import BOS, EOS, PAD, UNK, Vocabulary, build_vocabulary, tokenize

__all__ = [
    "Tensor", "backward", "no_grad",
    "load_checkpoint", "save_checkpoint",
    "DecoderSpec", "EncoderSpec", "ParamStore",
    "decode_teacher_forced", "encode", "greedy_decode", "init_params", "preprocess", "spec_dict",
    "BOS", "EOS", "PAD", "UNK", "Vocabulary", "build_vocabulary", "tokenize",
]
