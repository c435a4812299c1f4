"""Decoder-only transformer conditioned on audio prompts.

ASR input layout is ``[<aud>, prompt_1..prompt_tau, <sos>, y_1..y_i]`` under a
single causal mask and one continuous sinusoidal position sequence.  LM mode
drops ``<aud>`` and the prompt: ``[<sos>, y_1..y_i]``.  Both modes share every
weight.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import (
    Embedding,
    KVCache,
    LayerNorm,
    Linear,
    Module,
    TransformerBlock,
    causal_mask,
    positional_encoding,
)
from .tokenizer import EOS_CLASS


class DecoderState:
    """Key/value caches for a batch of prefixes sharing one length."""

    def __init__(self, caches, length, logprobs):
        self.caches = caches
        self.length = length
        self.logprobs = logprobs  # [batch, classes] for the next token

    @property
    def batch(self):
        return self.logprobs.shape[0]

    def select(self, index):
        index = np.asarray(index, dtype=np.int64)
        return DecoderState(
            [c.select(index) for c in self.caches], self.length, self.logprobs[index]
        )


class DecoderOnlyModel(Module):
    def __init__(self, vocab_size, config, rng, prompt_dim=None):
        d = config.model_dim
        self.vocab_size = vocab_size
        self.config = config
        self.embed = Embedding(vocab_size + 4, d, rng)
        self.prompt_proj = Linear(prompt_dim or d, d, rng)
        self.blocks = [TransformerBlock(config, rng) for _ in range(config.blocks)]
        self.ln_out = LayerNorm(d)
        self.head = Linear(d, vocab_size + 1, rng)

    @property
    def sos(self):
        return self.vocab_size + 1

    @property
    def eos(self):
        return self.vocab_size + 2

    @property
    def aud(self):
        return self.vocab_size + 3

    @property
    def num_classes(self):
        return self.vocab_size + 1

    def map_prompt(self, frames):
        """Linear map from encoder space into the decoder embedding space."""
        return self.prompt_proj(frames)

    def _context(self, prompt, lm):
        if lm:
            return []
        parts = [self.embed([self.aud])]
        if prompt is not None and prompt.shape[0]:
            parts.append(prompt)
        return parts

    def _run(self, x, start=0, caches=None, rng=None):
        """Causal stack over ``x`` ([L, d] or [B, L, d]) placed at positions start..."""
        length = x.shape[-2]
        x = ad.add(x, Tensor(positional_encoding(length, self.config.model_dim, start)))
        allowed = causal_mask(length, start + length)
        for i, block in enumerate(self.blocks):
            x = block(x, allowed, None if caches is None else caches[i], rng=rng)
        return ad.log_softmax(self.head(self.ln_out(x)))

    def token_logprobs(self, prompt, inputs, lm=False, rng=None):
        """Log-distributions predicted after each id in ``inputs`` (a Tensor [n, C])."""
        parts = self._context(prompt, lm) + [self.embed(inputs)]
        x = ad.concat(parts, axis=0) if len(parts) > 1 else parts[0]
        out = self._run(x, rng=rng)
        n = len(inputs)
        return ad.slice_(out, out.shape[0] - n, out.shape[0])

    def teacher_forced_nll(self, prompt, target, lm=False, rng=None):
        """Summed -log p over ``target`` + <eos>; returns (loss, n_predictions).

        ``target`` holds character ids only; prompt positions never contribute.
        """
        target = list(target)
        inputs = [self.sos] + target
        classes = target + [EOS_CLASS]
        lp = self.token_logprobs(prompt, inputs, lm=lm, rng=rng)
        return ad.scale(ad.reduce_sum(ad.pick(lp, classes)), -1.0), len(classes)

    def pseudo_prompt(self, target):
        """Ground-truth token embeddings standing in for an audio prompt."""
        return self.embed(list(target))

    def _check_prefix(self, prefix):
        prefix = list(prefix)
        if not prefix or prefix[0] != self.sos:
            raise ValueError("prefix must begin with <sos>")
        return prefix

    def next_token_logprobs(self, prompt, prefix):
        prefix = self._check_prefix(prefix)
        with ad.no_grad():
            return self.token_logprobs(prompt, prefix).data[-1]

    def lm_logprobs(self, prefix):
        prefix = self._check_prefix(prefix)
        with ad.no_grad():
            return self.token_logprobs(None, prefix, lm=True).data[-1]

    def sequence_logprob(self, prompt, y, lm=False):
        """log p(y) with ``y`` = character ids terminated by the <eos> id."""
        y = list(y)
        if not y or y[-1] != self.eos:
            raise ValueError("sequence must end with <eos>")
        body = y[:-1]
        with ad.no_grad():
            lp = self.token_logprobs(prompt, [self.sos] + body, lm=lm).data
        return float(lp[np.arange(len(y)), body + [EOS_CLASS]].sum())

    # -- incremental decoding ------------------------------------------------

    def start(self, prompt=None, lm=False):
        """Prefill ``[<aud>, prompt, <sos>]`` (or ``[<sos>]``) for one hypothesis."""
        parts = self._context(prompt, lm) + [self.embed([self.sos])]
        with ad.no_grad():
            x = ad.concat(parts, axis=0) if len(parts) > 1 else parts[0]
            x = ad.reshape(x, (1,) + x.shape)
            caches = [KVCache() for _ in self.blocks]
            out = self._run(x, 0, caches)
        return DecoderState(caches, x.shape[1], out.data[:, -1])

    def step(self, state, tokens):
        """Feed one character id per batch row; returns the advanced state."""
        tokens = np.asarray(tokens, dtype=np.int64)
        caches = [state_cache.select(slice(None)) for state_cache in state.caches]
        with ad.no_grad():
            x = ad.reshape(self.embed(tokens), (len(tokens), 1, self.config.model_dim))
            out = self._run(x, state.length, caches)
        return DecoderState(caches, state.length + 1, out.data[:, -1])
