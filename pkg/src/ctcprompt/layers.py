"""Transformer building blocks on top of :mod:`ctcprompt.autodiff`."""

import contextlib
import math
from contextvars import ContextVar
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


class InputTooShortError(ShapeError):
    """Sequence shorter than a layer's receptive field."""


@dataclass
class LayerConfig:
    model_dim: int = 256
    heads: int = 4
    ff_dim: int = 2048
    blocks: int = 6
    dropout_rate: float = 0.0

    def __post_init__(self):
        if min(self.model_dim, self.heads, self.ff_dim, self.blocks) < 1:
            raise ValueError(f"layer sizes must be positive: {self}")
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1): {self.dropout_rate}")


class Module:
    """Parameter container; parameters are discovered in attribute order."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self):
        return sum(p.data.size for p in self.parameters())


def _param(array):
    return Tensor(array, requires_grad=True)


def xavier(rng, fan_in, fan_out, shape=None):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


def dropout(x, rate, rng):
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return ad.mul(x, Tensor(keep))


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng, bias=True):
        self.weight = _param(xavier(rng, in_dim, out_dim))
        self.bias = _param(np.zeros(out_dim)) if bias else None

    def __call__(self, x):
        y = ad.matmul(x, self.weight)
        return ad.add(y, self.bias) if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gamma = _param(np.ones(dim))
        self.beta = _param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x):
        return ad.layer_norm(x, self.gamma, self.beta, self.eps)


class Embedding(Module):
    def __init__(self, num, dim, rng):
        self.table = _param(rng.standard_normal((num, dim)))

    def __call__(self, ids):
        return ad.embedding_lookup(self.table, np.asarray(ids, dtype=np.int64))


def positional_encoding(length, model_dim, offset=0):
    """Sinusoidal table: column 2i is sin(t / 10000^(2i/d)), column 2i+1 its cosine."""
    if length < 0:
        raise ValueError(f"negative length {length}")
    pos = np.arange(offset, offset + length, dtype=np.float64)[:, None]
    two_i = np.arange(0, model_dim, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, two_i / model_dim)
    table = np.zeros((length, model_dim))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : model_dim // 2])
    return table


def causal_mask(n_query, n_key=None):
    """Allowed-attention matrix; query i sits at key position n_key - n_query + i."""
    n_key = n_query if n_key is None else n_key
    offset = n_key - n_query
    return np.arange(n_key)[None, :] <= (np.arange(n_query)[:, None] + offset)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

_key_reads = ContextVar("key_reads", default=None)


class KeyReadCounter:
    """Counts (query, key) pairs read by attention while active."""

    def __init__(self):
        self.reads = 0
        self.calls = 0


@contextlib.contextmanager
def count_key_reads():
    counter = KeyReadCounter()
    token = _key_reads.set(counter)
    try:
        yield counter
    finally:
        _key_reads.reset(token)


def scaled_dot_attention(q, k, v, allowed):
    """q: [..., h, Lq, dh], k/v: [..., h, Lk, dh], allowed: bool [Lq, Lk].

    Returns the attended values and the attention weights.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"attention: shapes {q.shape}, {k.shape}, {v.shape} are incompatible")
    allowed = np.asarray(allowed, dtype=bool)
    if allowed.shape != (q.shape[-2], k.shape[-2]):
        raise ShapeError(
            f"attention: mask {allowed.shape} does not match {(q.shape[-2], k.shape[-2])}"
        )
    counter = _key_reads.get()
    if counter is not None:
        counter.reads += int(allowed.sum()) * int(np.prod(q.shape[:-3], dtype=np.int64))
        counter.calls += 1
    nd = k.ndim
    kt = ad.transpose(k, tuple(range(nd - 2)) + (nd - 1, nd - 2))
    scores = ad.scale(ad.matmul(q, kt), 1.0 / math.sqrt(q.shape[-1]))
    weights = ad.softmax(ad.masked_fill(scores, ~allowed))
    return ad.matmul(weights, v), weights


class KVCache:
    """Projected keys/values of one attention layer, [batch, heads, length, dh]."""

    def __init__(self):
        self.k = None
        self.v = None

    def select(self, index):
        out = KVCache()
        if self.k is not None:
            out.k, out.v = self.k[index], self.v[index]
        return out


class MultiHeadAttention(Module):
    def __init__(self, model_dim, heads, rng):
        if model_dim % heads:
            raise ValueError(f"model_dim {model_dim} not divisible by heads {heads}")
        self.heads = heads
        self.q_proj = Linear(model_dim, model_dim, rng)
        self.k_proj = Linear(model_dim, model_dim, rng)
        self.v_proj = Linear(model_dim, model_dim, rng)
        self.out_proj = Linear(model_dim, model_dim, rng)

    def _split(self, x):
        *lead, length, dim = x.shape
        x = ad.reshape(x, (*lead, length, self.heads, dim // self.heads))
        n = x.ndim
        return ad.transpose(x, tuple(range(n - 3)) + (n - 2, n - 3, n - 1))

    def _merge(self, x):
        n = x.ndim
        x = ad.transpose(x, tuple(range(n - 3)) + (n - 2, n - 3, n - 1))
        *lead, length, heads, dh = x.shape
        return ad.reshape(x, (*lead, length, heads * dh))

    def __call__(self, query, key, value, allowed, cache=None):
        if query.shape[-1] != key.shape[-1] or key.shape[:-1] != value.shape[:-1]:
            raise ShapeError(
                f"multi_head_attention: shapes {query.shape}, {key.shape}, {value.shape} "
                "are incompatible"
            )
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))
        if cache is not None:
            if cache.k is not None:
                k = ad.concat([Tensor(cache.k), k], axis=-2)
                v = ad.concat([Tensor(cache.v), v], axis=-2)
            cache.k, cache.v = k.data, v.data
        out, _ = scaled_dot_attention(q, k, v, allowed)
        return self.out_proj(self._merge(out))


class FeedForward(Module):
    def __init__(self, model_dim, ff_dim, rng):
        self.w_in = Linear(model_dim, ff_dim, rng)
        self.w_out = Linear(ff_dim, model_dim, rng)

    def __call__(self, x, rate=0.0, rng=None):
        return self.w_out(dropout(ad.relu(self.w_in(x)), rate, rng))


class DepthwiseConvModule(Module):
    """Same-padded per-channel convolution over time followed by a pointwise map."""

    def __init__(self, model_dim, kernel, rng):
        if kernel % 2 != 1:
            raise ValueError(f"depthwise kernel must be odd, got {kernel}")
        self.kernel = kernel
        self.weight = _param(rng.uniform(-1.0, 1.0, size=(kernel, model_dim)) / kernel)
        self.pointwise = Linear(model_dim, model_dim, rng)

    def __call__(self, x):
        length, dim = x.shape
        pad = Tensor(np.zeros((self.kernel // 2, dim)))
        xp = ad.concat([pad, x, pad], axis=0)
        acc = None
        for k in range(self.kernel):
            w_k = ad.reshape(ad.slice_(self.weight, k, k + 1), (dim,))
            term = ad.mul(ad.slice_(xp, k, k + length), w_k)
            acc = term if acc is None else ad.add(acc, term)
        return self.pointwise(ad.relu(acc))


class TransformerBlock(Module):
    """Pre-norm block: self-attention, optional convolution module, feed-forward."""

    def __init__(self, config, rng, conv_kernel=0):
        d = config.model_dim
        self.dropout_rate = config.dropout_rate
        self.ln_attn = LayerNorm(d)
        self.attn = MultiHeadAttention(d, config.heads, rng)
        self.conv = None
        if conv_kernel:
            self.ln_conv = LayerNorm(d)
            self.conv = DepthwiseConvModule(d, conv_kernel, rng)
        self.ln_ff = LayerNorm(d)
        self.ff = FeedForward(d, config.ff_dim, rng)

    def __call__(self, x, allowed, cache=None, rng=None):
        rate = self.dropout_rate
        h = self.ln_attn(x)
        x = ad.add(x, dropout(self.attn(h, h, h, allowed, cache), rate, rng))
        if self.conv is not None:
            x = ad.add(x, dropout(self.conv(self.ln_conv(x)), rate, rng))
        return ad.add(x, dropout(self.ff(self.ln_ff(x), rate, rng), rate, rng))


class ConvSubsample(Module):
    """Stack of kernel-2 stride-2 convolutions; output length floor(T / rate)."""

    def __init__(self, feat_dim, model_dim, rate, rng):
        if rate not in (2, 4):
            raise ValueError(f"subsampling rate must be 2 or 4, got {rate}")
        self.rate = rate
        self.weights = []
        self.biases = []
        in_dim = feat_dim
        for _ in range(int(math.log2(rate))):
            self.weights.append(_param(xavier(rng, 2 * in_dim, model_dim, (2, in_dim, model_dim))))
            self.biases.append(_param(np.zeros(model_dim)))
            in_dim = model_dim

    def named_parameters(self, prefix=""):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"{prefix}conv{i}.weight", w
            yield f"{prefix}conv{i}.bias", b

    def output_length(self, n_frames):
        return n_frames // self.rate

    def __call__(self, x):
        if x.shape[0] < self.rate:
            raise InputTooShortError(
                f"conv_subsample: {x.shape[0]} frames shorter than receptive field {self.rate}"
            )
        for w, b in zip(self.weights, self.biases):
            x = ad.relu(ad.add(ad.conv1d_strided(x, w, stride=2), b))
        return x
