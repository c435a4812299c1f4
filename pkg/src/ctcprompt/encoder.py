"""Audio encoder, CTC head/loss and CTC-driven prompt compression."""

import numpy as np

from . import autodiff as ad
from .autodiff import InfeasibleTargetError, Tensor, ctc_feasible
from .layers import (
    ConvSubsample,
    InputTooShortError,
    LayerNorm,
    Linear,
    Module,
    TransformerBlock,
    _param,
    positional_encoding,
    xavier,
)
from .tokenizer import BLANK

__all__ = [
    "Encoder",
    "CtcHead",
    "Downsampler",
    "InfeasibleTargetError",
    "ctc_loss",
    "ctc_feasible",
    "greedy_path",
    "ctc_greedy_decode",
    "compress_remove",
    "compress_average",
    "compress_downsample",
]


class Encoder(Module):
    """Strided-conv subsampling, sinusoidal positions, bidirectional blocks."""

    def __init__(self, feat_dim, config, rng, subsample=4, conv_kernel=0):
        self.config = config
        self.subsample = ConvSubsample(feat_dim, config.model_dim, subsample, rng)
        self.blocks = [
            TransformerBlock(config, rng, conv_kernel=conv_kernel) for _ in range(config.blocks)
        ]
        self.ln_out = LayerNorm(config.model_dim)

    def output_length(self, n_frames):
        return self.subsample.output_length(n_frames)

    def __call__(self, features, rng=None):
        x = features if isinstance(features, Tensor) else Tensor(features)
        x = self.subsample(x)
        x = ad.add(x, Tensor(positional_encoding(x.shape[0], self.config.model_dim)))
        allowed = np.ones((x.shape[0], x.shape[0]), dtype=bool)
        for block in self.blocks:
            x = block(x, allowed, rng=rng)
        return self.ln_out(x)


class CtcHead(Module):
    def __init__(self, model_dim, num_classes, rng):
        self.proj = Linear(model_dim, num_classes, rng)

    def __call__(self, h):
        """Per-frame log-distribution over blank + vocabulary."""
        return ad.log_softmax(self.proj(h))


def ctc_loss(log_probs, target, blank=BLANK):
    """-log P(target | log_probs) over every CTC alignment."""
    return ad.ctc_loss(log_probs, list(target), blank=blank)


def greedy_path(log_probs):
    """Per-frame argmax; ties go to the lowest class index, so blank wins."""
    data = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    return np.argmax(data, axis=-1).astype(np.int64)


def ctc_greedy_decode(path, blank=BLANK):
    """Collapse repeats, then drop blanks."""
    out, prev = [], None
    for label in np.asarray(path).tolist():
        if label != prev and label != blank:
            out.append(label)
        prev = label
    return out


def compress_remove(h, path, blank=BLANK):
    """Keep encoder frames whose greedy label is not blank, in order."""
    keep = np.flatnonzero(np.asarray(path) != blank)
    return ad.embedding_lookup(h, keep)


def run_pooling_matrix(path, blank=BLANK):
    """Rows average each run of consecutive identical non-blank labels."""
    path = np.asarray(path)
    runs, start = [], None
    for t, label in enumerate(path.tolist()):
        if start is not None and label != path[start]:
            runs.append((start, t))
            start = None
        if start is None and label != blank:
            start = t
    if start is not None:
        runs.append((start, len(path)))
    pool = np.zeros((len(runs), len(path)))
    for r, (lo, hi) in enumerate(runs):
        pool[r, lo:hi] = 1.0 / (hi - lo)
    return pool


def compress_average(h, path, blank=BLANK):
    """Mean-pool each run of identical non-blank predictions into one frame."""
    return ad.matmul(Tensor(run_pooling_matrix(path, blank)), h)


class Downsampler(Module):
    """Extra strided convolution shortening the encoder output by ``factor``."""

    def __init__(self, model_dim, factor, rng):
        if factor < 1:
            raise ValueError(f"downsample factor must be >= 1, got {factor}")
        self.factor = factor
        self.weight = _param(
            xavier(rng, factor * model_dim, model_dim, (factor, model_dim, model_dim))
        )
        self.bias = _param(np.zeros(model_dim))

    def __call__(self, h):
        if h.shape[0] < self.factor:
            raise InputTooShortError(
                f"compress_downsample: {h.shape[0]} frames shorter than stride {self.factor}"
            )
        return ad.add(ad.conv1d_strided(h, self.weight, stride=self.factor), self.bias)


def compress_downsample(downsampler, h):
    return downsampler(h)
