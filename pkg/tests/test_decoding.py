import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctcprompt.autodiff import Tensor
from ctcprompt.decoder import DecoderOnlyModel
from ctcprompt.decoding import (
    CtcPrefixScorer,
    FusionWeights,
    beam_search,
    ctc_prefix_score,
    error_counts,
    greedy_decode,
    greedy_key_reads,
    profile_decode_cost,
    recognize,
    score_hypothesis,
    wer,
    wer_report,
)
from ctcprompt.layers import LayerConfig, count_key_reads
from ctcprompt.model import CtcPromptASR, ModelConfig

import oracles
from conftest import TINY


def _lm(seed=9):
    return DecoderOnlyModel(3, LayerConfig(8, 2, 16, 1), np.random.default_rng(seed))


def _case(seed, dec):
    rng = np.random.default_rng(seed)
    prompt = dec.map_prompt(Tensor(rng.standard_normal((int(rng.integers(1, 4)), 8))))
    posterior = oracles.random_log_probs(rng, int(rng.integers(2, 6)), 4, 2.0)
    return prompt, posterior


# -- CTC prefix scores ---------------------------------------------------------


def test_uniform_two_frame_complete_score_is_one_third():
    lp = np.log(np.full((2, 3), 1 / 3))
    assert abs(ctc_prefix_score([1], lp, complete=True) - math.log(1 / 3)) < 1e-12
    assert ctc_prefix_score([], lp) == 0.0


def test_prefix_longer_than_frames_is_impossible():
    lp = np.log(np.full((2, 3), 1 / 3))
    assert ctc_prefix_score([1, 2, 1], lp) == -math.inf
    assert ctc_prefix_score([1, 1], lp) == -math.inf


@pytest.mark.parametrize("seed", range(20))
def test_prefix_scores_match_enumeration(seed):
    rng = np.random.default_rng(seed)
    t = int(rng.integers(1, 6))
    lp = oracles.random_log_probs(rng, t, 3, 1.5)
    for prefix in oracles.all_sequences(2, 3):
        expected = oracles.ctc_prefix_log_prob(lp, prefix)
        got = ctc_prefix_score(prefix, lp)
        assert got == pytest.approx(expected, abs=1e-9) or got == expected == -math.inf
        full = oracles.ctc_log_likelihood(lp, prefix)
        got = ctc_prefix_score(prefix, lp, complete=True)
        assert got == pytest.approx(full, abs=1e-9) or got == full == -math.inf


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.integers(1, 3), max_size=3))
def test_prefix_mass_is_conserved(seed, prefix):
    rng = np.random.default_rng(seed)
    lp = oracles.random_log_probs(rng, int(rng.integers(1, 7)), 4)
    scorer = CtcPrefixScorer(lp)
    state = scorer.prefix_state(prefix)
    children = scorer.extend(state, np.arange(1, 4))
    total = math.exp(scorer.final(state)) + sum(math.exp(c.score) for c in children)
    assert abs(total - math.exp(state.score)) < 1e-9


def test_full_frame_total_probability_is_one():
    lp = oracles.random_log_probs(np.random.default_rng(3), 4, 3)
    total = sum(math.exp(ctc_prefix_score(s, lp, complete=True))
                for s in oracles.all_sequences(2, 4))
    assert abs(total - 1.0) < 1e-9


# -- beam search ------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(12))
def test_exhaustive_search_matches_brute_force(tiny_decoder, seed):
    prompt, posterior = _case(seed, tiny_decoder)
    lm = _lm()
    w = FusionWeights(ctc_weight=0.4, lm_weight=0.6, length_penalty=0.5, beam=None)
    got = beam_search(tiny_decoder, prompt, posterior, lm, w, max_len=4)
    tokens, score = oracles.brute_force_decode(tiny_decoder, prompt, posterior, lm, w, 4)
    assert got.tokens == tokens
    assert got.combined == pytest.approx(score, abs=1e-9)


def test_reported_score_matches_full_recompute(tiny_decoder):
    prompt, posterior = _case(100, tiny_decoder)
    lm = _lm()
    w = FusionWeights(beam=3)
    res = beam_search(tiny_decoder, prompt, posterior, lm, w)
    for hyp in res.nbest:
        full = score_hypothesis(tiny_decoder, prompt, hyp.tokens, posterior, lm, w)
        assert hyp.combined == pytest.approx(full, abs=1e-9)


def test_zero_weights_reproduce_decoder_scores(tiny_decoder):
    prompt, posterior = _case(7, tiny_decoder)
    w = FusionWeights(ctc_weight=0.0, lm_weight=0.0, length_penalty=0.0, beam=4)
    fused = beam_search(tiny_decoder, prompt, posterior, _lm(), w)
    plain = beam_search(tiny_decoder, prompt, None, None, w)
    assert fused.tokens == plain.tokens
    for hyp in fused.nbest:
        own = tiny_decoder.sequence_logprob(prompt, list(hyp.tokens) + [tiny_decoder.eos])
        assert abs(hyp.combined - own) < 1e-9


def test_beam_one_without_fusion_is_greedy(tiny_decoder):
    w = FusionWeights(ctc_weight=0.0, lm_weight=0.0, length_penalty=0.0, beam=1)
    for seed in range(6):
        prompt, _ = _case(seed, tiny_decoder)
        assert beam_search(tiny_decoder, prompt, None, None, w).tokens == \
            greedy_decode(tiny_decoder, prompt)


def test_length_cap_forces_eos(tiny_decoder):
    prompt, _ = _case(1, tiny_decoder)
    w = FusionWeights(ctc_weight=0.0, lm_weight=0.0, length_penalty=50.0, beam=2)
    res = beam_search(tiny_decoder, prompt, None, None, w, max_len=3)
    assert len(res.tokens) == 3


def test_ctc_fusion_follows_a_confident_posterior(tiny_decoder):
    # a near one-hot posterior spelling "3 1" dominates an untrained decoder
    lp = np.full((4, 4), math.log(1e-6))
    for t, c in enumerate([3, 0, 1, 0]):
        lp[t, c] = 0.0
    lp -= np.log(np.exp(lp).sum(axis=1, keepdims=True))
    prompt, _ = _case(2, tiny_decoder)
    w = FusionWeights(ctc_weight=5.0, lm_weight=0.0, length_penalty=0.0, beam=4)
    assert beam_search(tiny_decoder, prompt, lp, None, w).tokens == [3, 1]


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000))
def test_lm_weight_raises_lm_score_of_winner(seed):
    dec = DecoderOnlyModel(3, LayerConfig(8, 2, 16, 1), np.random.default_rng(seed), prompt_dim=8)
    prompt, _ = _case(seed, dec)
    lm = _lm(seed + 1)
    low = beam_search(dec, prompt, None, lm, FusionWeights(0.0, 0.1, 0.0, beam=None), max_len=3)
    high = beam_search(dec, prompt, None, lm, FusionWeights(0.0, 2.0, 0.0, beam=None), max_len=3)
    # exhaustive argmax of dec + w * lm is monotone in w for the lm term
    assert high.lm_score >= low.lm_score - 1e-12


def test_fusion_weight_validation():
    with pytest.raises(ValueError):
        FusionWeights(beam=0)
    with pytest.raises(ValueError):
        FusionWeights(ctc_weight=-0.1)


# -- WER ----------------------------------------------------------------------------


@pytest.mark.parametrize("refs, hyps, expected", [
    (["a b c"], ["a b c"], 0.0),
    (["a b", "c d"], ["a b", "x"], 50.0),
    (["a b c"], ["b"], 200 / 3),
])
def test_wer_examples(refs, hyps, expected):
    assert wer(refs, hyps) == pytest.approx(expected, abs=1e-12)


def test_wer_errors():
    with pytest.raises(ValueError):
        wer([], [])
    with pytest.raises(ValueError):
        wer(["a"], [])
    with pytest.raises(ValueError):
        wer([""], ["a"])


def test_error_breakdown():
    r = wer_report(["a b c d"], ["a x c d e"])
    assert (r.substitutions, r.deletions, r.insertions, r.ref_words) == (1, 0, 1, 4)
    assert error_counts(["a", "b"], []) == (0, 2, 0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from("abc"), max_size=7), st.lists(st.sampled_from("abc"), max_size=7))
def test_error_counts_sum_to_levenshtein(ref, hyp):
    s, d, i = error_counts(ref, hyp)
    assert s + d + i == oracles.levenshtein(ref, hyp)
    assert len(ref) - s - d == len(hyp) - s - i


# -- cost accounting ----------------------------------------------------------------


def test_greedy_key_read_formula_matches_counter(tiny_decoder):
    prompt, _ = _case(4, tiny_decoder)
    w = FusionWeights(ctc_weight=0.0, lm_weight=0.0, length_penalty=0.0, beam=1)
    with count_key_reads() as counter:
        res = beam_search(tiny_decoder, prompt, None, None, w)
    expected = greedy_key_reads(prompt.shape[0], len(res.tokens), len(tiny_decoder.blocks))
    assert counter.reads == expected


def test_greedy_key_reads_grow_with_prompt():
    assert greedy_key_reads(0, 0, 1) == 3
    assert greedy_key_reads(2, 1, 2) == 2 * (10 + 5)
    assert greedy_key_reads(5, 3, 2) > greedy_key_reads(4, 3, 2)


def test_compressed_profile_is_never_costlier(tiny_model):
    rng = np.random.default_rng(0)
    utts = [rng.standard_normal((int(n), 6)) for n in rng.integers(8, 16, size=3)]
    w = FusionWeights(ctc_weight=0.0, lm_weight=0.0, length_penalty=0.0, beam=1, max_len=3)
    comp = profile_decode_cost(tiny_model, utts, "compressed", weights=w)
    full = profile_decode_cost(tiny_model, utts, "uncompressed", weights=w)
    assert all(t <= f for t, f in zip(comp.taus, full.frames))
    blocks = len(tiny_model.decoder.blocks)
    for rep in (comp, full):
        assert rep.key_reads == sum(greedy_key_reads(t, n, blocks)
                                    for t, n in zip(rep.taus, rep.out_lens))
    assert comp.rtf > 0
    with pytest.raises(ValueError):
        profile_decode_cost(tiny_model, utts, "other")


def test_no_blank_frames_costs_the_same(tiny_model):
    # a head that never predicts blank keeps every frame, so both modes see tau = T'
    model = CtcPromptASR(3, ModelConfig(**TINY))
    model.ctc_head.proj.bias.data[0] = -100.0
    model.ctc_head.proj.bias.data[1] = 100.0
    utts = [np.random.default_rng(1).standard_normal((10, 6))]
    w = FusionWeights(ctc_weight=0.0, lm_weight=0.0, length_penalty=0.0, beam=1, max_len=2)
    comp = profile_decode_cost(model, utts, "compressed", weights=w)
    full = profile_decode_cost(model, utts, "uncompressed", weights=w)
    assert comp.taus == full.taus == full.frames
    assert comp.key_reads == full.key_reads


def test_recognize_reports_lengths(tiny_model):
    feats = np.random.default_rng(2).standard_normal((12, 6))
    res = recognize(tiny_model, feats, None, FusionWeights(lm_weight=0.0, beam=2, max_len=3))
    assert res.frames == 6 and 0 <= res.prompt_len <= 6
