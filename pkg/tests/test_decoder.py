import numpy as np
import pytest

from ctcprompt import autodiff as ad
from ctcprompt.autodiff import Tensor
from ctcprompt.tokenizer import EOS_CLASS


def _prompt(rng, n, d=8):
    return Tensor(rng.standard_normal((n, d)))


def test_cached_decoding_matches_full_recompute(tiny_decoder, rng):
    dec = tiny_decoder
    prompt = dec.map_prompt(_prompt(rng, 4))
    tokens = [2, 1, 3, 3]
    full = dec.token_logprobs(prompt, [dec.sos] + tokens).data
    state = dec.start(prompt)
    np.testing.assert_allclose(state.logprobs[0], full[0], atol=1e-9)
    for i, tok in enumerate(tokens, start=1):
        state = dec.step(state, [tok])
        np.testing.assert_allclose(state.logprobs[0], full[i], atol=1e-9)


def test_batched_steps_match_single_rows(tiny_decoder, rng):
    dec = tiny_decoder
    prompt = dec.map_prompt(_prompt(rng, 3))
    state = dec.start(prompt).select([0, 0, 0])
    state = dec.step(state, [1, 2, 3])
    state = dec.step(state.select([2, 0]), [1, 1])
    for row, prefix in enumerate(([3, 1], [1, 1])):
        ref = dec.next_token_logprobs(prompt, [dec.sos] + prefix)
        np.testing.assert_allclose(state.logprobs[row], ref, atol=1e-9)


def test_step_does_not_mutate_parent_state(tiny_decoder, rng):
    dec = tiny_decoder
    state = dec.start(dec.map_prompt(_prompt(rng, 2)))
    before = [c.k.copy() for c in state.caches]
    dec.step(state, [1])
    for b, c in zip(before, state.caches):
        np.testing.assert_array_equal(b, c.k)


def test_outputs_are_normalised_and_causal(tiny_decoder, rng):
    dec = tiny_decoder
    prompt = dec.map_prompt(_prompt(rng, 3))
    a = dec.token_logprobs(prompt, [dec.sos, 1, 2, 3]).data
    b = dec.token_logprobs(prompt, [dec.sos, 1, 3, 1]).data
    np.testing.assert_allclose(np.exp(a).sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(a[:2], b[:2], atol=1e-12)
    assert a.shape == (4, dec.num_classes)


def test_prompt_influences_prediction_but_not_lm_mode(tiny_decoder, rng):
    dec = tiny_decoder
    p1, p2 = dec.map_prompt(_prompt(rng, 3)), dec.map_prompt(_prompt(rng, 3))
    assert not np.allclose(dec.next_token_logprobs(p1, [dec.sos]),
                           dec.next_token_logprobs(p2, [dec.sos]))
    lm = dec.lm_logprobs([dec.sos, 2])
    np.testing.assert_array_equal(lm, dec.token_logprobs(None, [dec.sos, 2], lm=True).data[-1])


def test_empty_prompt_is_allowed(tiny_decoder):
    dec = tiny_decoder
    empty = Tensor(np.zeros((0, 8)))
    a = dec.next_token_logprobs(empty, [dec.sos])
    b = dec.next_token_logprobs(None, [dec.sos])
    np.testing.assert_array_equal(a, b)


def test_teacher_forced_nll_equals_negative_sequence_logprob(tiny_decoder, rng):
    dec = tiny_decoder
    prompt = dec.map_prompt(_prompt(rng, 2))
    target = [1, 3, 2]
    nll, n = dec.teacher_forced_nll(prompt, target)
    assert n == 4
    assert abs(nll.item() + dec.sequence_logprob(prompt, target + [dec.eos])) < 1e-12


def test_sequence_logprob_of_empty_hypothesis(tiny_decoder, rng):
    dec = tiny_decoder
    prompt = dec.map_prompt(_prompt(rng, 2))
    expected = dec.next_token_logprobs(prompt, [dec.sos])[EOS_CLASS]
    assert dec.sequence_logprob(prompt, [dec.eos]) == pytest.approx(expected, abs=1e-12)


def test_prefix_and_terminator_checks(tiny_decoder):
    dec = tiny_decoder
    with pytest.raises(ValueError):
        dec.next_token_logprobs(None, [1, 2])
    with pytest.raises(ValueError):
        dec.lm_logprobs([])
    with pytest.raises(ValueError):
        dec.sequence_logprob(None, [1, 2])


def test_special_ids(tiny_decoder):
    dec = tiny_decoder
    assert (dec.sos, dec.eos, dec.aud, dec.num_classes) == (4, 5, 6, 4)
    assert dec.embed.table.shape[0] == 7


def test_pseudo_prompt_is_token_embeddings(tiny_decoder):
    dec = tiny_decoder
    np.testing.assert_array_equal(dec.pseudo_prompt([2, 1]).data, dec.embed.table.data[[2, 1]])


def test_gradients_reach_prompt(tiny_decoder, rng):
    dec = tiny_decoder
    raw = Tensor(rng.standard_normal((3, 8)), requires_grad=True)
    nll, _ = dec.teacher_forced_nll(dec.map_prompt(raw), [1, 2])
    nll.backward()
    assert np.any(raw.grad != 0)
    with ad.no_grad():
        assert not dec.teacher_forced_nll(dec.map_prompt(raw), [1])[0].requires_grad
