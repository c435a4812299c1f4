"""Encoder + CTC head + decoder-only model wired through CTC prompts."""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .decoder import DecoderOnlyModel
from .encoder import (
    CtcHead,
    Downsampler,
    Encoder,
    compress_average,
    compress_remove,
    ctc_greedy_decode,
    greedy_path,
)
from .layers import LayerConfig, Module

COMPRESSIONS = ("remove", "average", "downsample")


@dataclass
class ModelConfig:
    feat_dim: int = 80
    subsample: int = 4
    model_dim: int = 256
    heads: int = 4
    ff_dim: int = 2048
    encoder_blocks: int = 12
    decoder_blocks: int = 6
    dropout_rate: float = 0.0
    conv_kernel: int = 15
    compression: str = "remove"
    downsample_factor: int = 2
    lm_blocks: int = 2
    init_seed: int = 0

    def __post_init__(self):
        if self.compression not in COMPRESSIONS:
            raise ValueError(f"compression must be one of {COMPRESSIONS}, got {self.compression!r}")
        self.encoder_layers()
        self.decoder_layers()

    def encoder_layers(self):
        return LayerConfig(self.model_dim, self.heads, self.ff_dim, self.encoder_blocks,
                           self.dropout_rate)

    def decoder_layers(self):
        return LayerConfig(self.model_dim, self.heads, self.ff_dim, self.decoder_blocks,
                           self.dropout_rate)

    def lm_layers(self):
        return LayerConfig(self.model_dim, self.heads, self.ff_dim, self.lm_blocks,
                           self.dropout_rate)


class CtcPromptASR(Module):
    def __init__(self, vocab_size, config):
        rng = np.random.default_rng(config.init_seed)
        self.config = config
        self.vocab_size = vocab_size
        d = config.model_dim
        self.encoder = Encoder(config.feat_dim, config.encoder_layers(), rng,
                               subsample=config.subsample, conv_kernel=config.conv_kernel)
        self.ctc_head = CtcHead(d, vocab_size + 1, rng)
        self.downsampler = (
            Downsampler(d, config.downsample_factor, rng)
            if config.compression == "downsample" else None
        )
        self.decoder = DecoderOnlyModel(vocab_size, config.decoder_layers(), rng, prompt_dim=d)

    def encode(self, features, rng=None):
        """Returns encoder frames and CTC log-posteriors."""
        h = self.encoder(features, rng=rng)
        return h, self.ctc_head(h)

    def compress(self, h, path, mode=None):
        mode = mode or self.config.compression
        if mode == "remove":
            return compress_remove(h, path)
        if mode == "average":
            return compress_average(h, path)
        if mode == "downsample":
            return self.downsampler(h)
        if mode == "full":
            return h
        raise ValueError(f"unknown compression mode {mode!r}")

    def prompt(self, h, log_probs, mode=None):
        """Returns (prompt embeddings, greedy path)."""
        path = greedy_path(log_probs)
        return self.decoder.map_prompt(self.compress(h, path, mode)), path

    def ctc_transcribe(self, features):
        with ad.no_grad():
            _, lp = self.encode(features)
        return ctc_greedy_decode(greedy_path(lp))


def build_external_lm(vocab_size, config, seed=None):
    rng = np.random.default_rng(config.init_seed if seed is None else seed)
    lm = DecoderOnlyModel(vocab_size, config.lm_layers(), rng)
    lm.model_config = config
    return lm
