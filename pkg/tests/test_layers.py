import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctcprompt import autodiff as ad
from ctcprompt.autodiff import Tensor
from ctcprompt.layers import (
    ConvSubsample,
    InputTooShortError,
    KVCache,
    LayerConfig,
    MultiHeadAttention,
    TransformerBlock,
    causal_mask,
    count_key_reads,
    positional_encoding,
    scaled_dot_attention,
)

import gradcases


def test_single_key_attention_returns_its_value():
    rng = np.random.default_rng(0)
    q = Tensor(rng.standard_normal((1, 3, 4)))
    k = Tensor(rng.standard_normal((1, 1, 4)))
    v = Tensor(rng.standard_normal((1, 1, 4)))
    out, w = scaled_dot_attention(q, k, v, np.ones((3, 1), dtype=bool))
    np.testing.assert_array_equal(w.data, 1.0)
    np.testing.assert_allclose(out.data, np.broadcast_to(v.data, (1, 3, 4)), atol=1e-15)


def test_attention_rows_sum_to_one_and_respect_mask():
    rng = np.random.default_rng(1)
    q, k, v = (Tensor(rng.standard_normal((2, 5, 3))) for _ in range(3))
    allowed = causal_mask(5)
    _, w = scaled_dot_attention(q, k, v, allowed)
    np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(w.data[:, ~allowed] == 0.0)


def test_causal_mask_offsets():
    m = causal_mask(2, 4)
    np.testing.assert_array_equal(m, [[1, 1, 1, 0], [1, 1, 1, 1]])
    np.testing.assert_array_equal(causal_mask(3), np.tril(np.ones((3, 3), dtype=bool)))


def test_block_is_causal():
    rng = np.random.default_rng(2)
    block = TransformerBlock(LayerConfig(8, 2, 16, 1), rng)
    x = rng.standard_normal((6, 8))
    y = x.copy()
    y[4:] += rng.standard_normal((2, 8))
    a = block(Tensor(x), causal_mask(6)).data
    b = block(Tensor(y), causal_mask(6)).data
    np.testing.assert_allclose(a[:4], b[:4], atol=1e-12)
    assert not np.allclose(a[4:], b[4:])


def test_kv_cache_matches_full_pass():
    rng = np.random.default_rng(3)
    att = MultiHeadAttention(8, 2, rng)
    x = rng.standard_normal((1, 5, 8))
    full = att(Tensor(x), Tensor(x), Tensor(x), causal_mask(5)).data
    cache = KVCache()
    parts = [att(Tensor(x[:, :3]), Tensor(x[:, :3]), Tensor(x[:, :3]), causal_mask(3), cache).data]
    for t in range(3, 5):
        xt = Tensor(x[:, t:t + 1])
        parts.append(att(xt, xt, xt, causal_mask(1, t + 1), cache).data)
    np.testing.assert_allclose(np.concatenate(parts, axis=1), full, atol=1e-12)


def test_key_read_counter():
    rng = np.random.default_rng(4)
    q = Tensor(rng.standard_normal((3, 2, 4, 2)))
    with count_key_reads() as counter:
        scaled_dot_attention(q, q, q, causal_mask(4))
    # (query, key) pairs per batch row; heads share a read
    assert counter.reads == 3 * 10 and counter.calls == 1


@settings(max_examples=60, deadline=None)
@given(st.sampled_from([2, 4]), st.integers(0, 60))
def test_subsample_length(rate, extra):
    n = rate + extra
    sub = ConvSubsample(3, 4, rate, np.random.default_rng(0))
    out = sub(Tensor(np.random.default_rng(n).standard_normal((n, 3))))
    assert out.shape == (n // rate, 4) == (sub.output_length(n), 4)


@pytest.mark.parametrize("rate", [2, 4])
def test_subsample_rejects_short_input(rate):
    sub = ConvSubsample(3, 4, rate, np.random.default_rng(0))
    with pytest.raises(InputTooShortError):
        sub(Tensor(np.ones((rate - 1, 3))))


def test_positional_encoding_values():
    pe = positional_encoding(3, 4)
    np.testing.assert_allclose(pe[0], [0.0, 1.0, 0.0, 1.0], atol=1e-15)
    np.testing.assert_allclose(pe[2], [np.sin(2), np.cos(2), np.sin(0.02), np.cos(0.02)],
                               atol=1e-15)
    np.testing.assert_array_equal(positional_encoding(2, 4, offset=1), pe[1:])


def test_layer_config_validation():
    with pytest.raises(ValueError):
        LayerConfig(model_dim=10, heads=3)
    with pytest.raises(ValueError):
        LayerConfig(dropout_rate=1.0)


@pytest.mark.parametrize("name", sorted(gradcases.LAYER_CASES))
def test_layer_gradients(name):
    errors = [gradcases.run_case(gradcases.LAYER_CASES[name], d, base_seed=7) for d in range(5)]
    assert max(errors) < 1e-4, errors


def test_dropout_only_with_rng():
    from ctcprompt.layers import dropout
    x = Tensor(np.ones((50, 4)))
    assert dropout(x, 0.5, None) is x
    y = dropout(x, 0.5, np.random.default_rng(0)).data
    assert set(np.unique(y)) <= {0.0, 2.0}
