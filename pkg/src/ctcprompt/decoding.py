"""Label-synchronous beam search with CTC prefix and external-LM fusion."""

import time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from . import autodiff as ad
from .encoder import ctc_greedy_decode, greedy_path
from .layers import count_key_reads
from .tokenizer import BLANK, EOS_CLASS

NEG_INF = -np.inf


@dataclass
class FusionWeights:
    ctc_weight: float = 0.4
    lm_weight: float = 0.6
    length_penalty: float = 1.0
    beam: int = 10
    max_len: int = 0
    n_best: int = 10

    def __post_init__(self):
        if self.beam is not None and self.beam < 1:
            raise ValueError(f"beam must be >= 1 (or None for exhaustive), got {self.beam}")
        if self.ctc_weight < 0 or self.lm_weight < 0:
            raise ValueError("fusion weights must be non-negative")


# ---------------------------------------------------------------------------
# CTC prefix scores
# ---------------------------------------------------------------------------


class CtcPrefixState:
    __slots__ = ("r_n", "r_b", "last", "score")

    def __init__(self, r_n, r_b, last, score):
        self.r_n, self.r_b, self.last, self.score = r_n, r_b, last, score


class CtcPrefixScorer:
    """Prefix log-probabilities under a CTC posterior, extended one label at a time.

    ``score`` of a state is log P(CTC output starts with the prefix); ``final``
    is log P(CTC output equals the prefix).
    """

    def __init__(self, log_probs, blank=BLANK):
        data = log_probs.data if isinstance(log_probs, ad.Tensor) else log_probs
        self.log_probs = np.ascontiguousarray(data, dtype=np.float64)
        self.blank = blank

    def initial(self):
        n = self.log_probs.shape[0]
        return CtcPrefixState(np.full(n, NEG_INF), np.cumsum(self.log_probs[:, self.blank]),
                              -1, 0.0)

    def extend(self, state, labels):
        labels = np.asarray(labels, dtype=np.int64)
        new_n, new_b, psi = _kernels.ctc_prefix_extend(
            self.log_probs, state.r_n, state.r_b, state.last, state.last < 0, labels, self.blank
        )
        return [CtcPrefixState(new_n[k], new_b[k], int(c), float(psi[k]))
                for k, c in enumerate(labels)]

    def final(self, state):
        return float(np.logaddexp(state.r_n[-1], state.r_b[-1]))

    def prefix_state(self, prefix):
        state = self.initial()
        for label in prefix:
            state = self.extend(state, [label])[0]
        return state


def ctc_prefix_score(prefix, log_probs, complete=False):
    """log P(CTC output begins with ``prefix``), or equals it when ``complete``."""
    scorer = CtcPrefixScorer(log_probs)
    state = scorer.prefix_state(list(prefix))
    return scorer.final(state) if complete else state.score


# ---------------------------------------------------------------------------
# beam search
# ---------------------------------------------------------------------------


@dataclass
class BeamHypothesis:
    tokens: tuple
    decoder_score: float
    ctc_prefix_score: float
    lm_score: float
    combined: float
    finished: bool = False


@dataclass
class DecodeResult:
    tokens: list
    combined: float
    decoder_score: float
    ctc_score: float
    lm_score: float
    nbest: list = field(default_factory=list)
    steps: int = 0
    prompt_len: int = 0
    frames: int = 0


def combine(weights, dec, ctc, lm, length):
    # a zero weight drops its term outright so that 0 * -inf cannot poison the sum
    score = dec + weights.length_penalty * length
    if weights.ctc_weight:
        score += weights.ctc_weight * ctc
    if weights.lm_weight:
        score += weights.lm_weight * lm
    return score


def _sort_key(h):
    return (-h.combined, h.tokens + ((EOS_CLASS,) if h.finished else ()))


def beam_search(decoder, prompt, posterior=None, lm=None, weights=None, max_len=None):
    """Returns the best finished hypothesis under the fused score.

    ``weights.beam=None`` keeps every hypothesis (exhaustive search up to the
    length cap).  Hypotheses end only on <eos>; at the cap <eos> is forced.
    """
    weights = weights or FusionWeights()
    vocab = decoder.vocab_size
    tau = 0 if prompt is None else prompt.shape[0]
    if max_len is None:
        max_len = weights.max_len or 2 * (tau + 5)
    scorer = CtcPrefixScorer(posterior) if posterior is not None else None
    chars = np.arange(1, vocab + 1)
    use_lm = lm is not None and weights.lm_weight > 0

    dec_state = decoder.start(prompt)
    lm_state = lm.start(lm=True) if use_lm else None
    live = [BeamHypothesis((), 0.0, 0.0, 0.0, 0.0)]
    ctc_states = [scorer.initial() if scorer else None]
    finished = []
    steps = 0
    for i in range(max_len + 1):
        steps += 1
        cands = []  # (hyp, parent, ctc_state)
        for b, hyp in enumerate(live):
            dec_lp = dec_state.logprobs[b]
            lm_lp = lm_state.logprobs[b] if use_lm else np.zeros(vocab + 1)
            ctc_eos = scorer.final(ctc_states[b]) if scorer else 0.0
            d = hyp.decoder_score + float(dec_lp[EOS_CLASS])
            l_ = hyp.lm_score + float(lm_lp[EOS_CLASS])
            n = len(hyp.tokens)
            cands.append((BeamHypothesis(hyp.tokens, d, ctc_eos, l_,
                                         combine(weights, d, ctc_eos, l_, n), True), b, None))
            if i == max_len:
                continue
            ext = scorer.extend(ctc_states[b], chars) if scorer else [None] * vocab
            for k, c in enumerate(chars):
                d = hyp.decoder_score + float(dec_lp[c])
                l_ = hyp.lm_score + float(lm_lp[c])
                ctc = ext[k].score if scorer else 0.0
                cands.append((BeamHypothesis(hyp.tokens + (int(c),), d, ctc, l_,
                                             combine(weights, d, ctc, l_, n + 1)), b, ext[k]))
        cands.sort(key=lambda x: _sort_key(x[0]))
        if weights.beam is not None:
            cands = cands[:weights.beam]
        finished.extend(h for h, _, _ in cands if h.finished)
        survivors = [(h, b, s) for h, b, s in cands if not h.finished]
        if not survivors:
            break
        if finished and _can_stop(finished, survivors, weights, max_len):
            break
        parents = [b for _, b, _ in survivors]
        tokens = [h.tokens[-1] for h, _, _ in survivors]
        dec_state = decoder.step(dec_state.select(parents), tokens)
        if use_lm:
            lm_state = lm.step(lm_state.select(parents), tokens)
        live = [h for h, _, _ in survivors]
        ctc_states = [s for _, _, s in survivors]
    finished.sort(key=_sort_key)
    best = finished[0]
    return DecodeResult(list(best.tokens), best.combined, best.decoder_score,
                        best.ctc_prefix_score, best.lm_score, finished[:weights.n_best], steps)


def _can_stop(finished, live, weights, max_len):
    """No live descendant can beat the best finished hypothesis.

    Decoder and LM log-probs only decrease along a path and a CTC prefix score
    bounds every completion, so a live score plus the largest possible length
    bonus is an upper bound.
    """
    best = max(h.combined for h in finished)
    bonus = max(weights.length_penalty, 0.0)
    bound = max(h.combined + bonus * (max_len - len(h.tokens)) for h, _, _ in live)
    return best > bound


def score_hypothesis(decoder, prompt, tokens, posterior=None, lm=None, weights=None):
    """Fused score of one complete hypothesis by direct full recomputation."""
    weights = weights or FusionWeights()
    y = list(tokens) + [decoder.eos]
    dec = decoder.sequence_logprob(prompt, y)
    ctc = 0.0
    if posterior is not None:
        data = posterior.data if isinstance(posterior, ad.Tensor) else posterior
        if ad.ctc_feasible(data.shape[0], tokens):
            with ad.no_grad():
                ctc = -ad.ctc_loss(ad.Tensor(data), list(tokens)).item()
        else:
            ctc = NEG_INF
    lm_score = 0.0
    if lm is not None and weights.lm_weight > 0:
        lm_score = lm.sequence_logprob(None, y, lm=True)
    return combine(weights, dec, ctc, lm_score, len(tokens))


def greedy_decode(decoder, prompt, max_len=None):
    """Argmax decoding of the decoder alone."""
    tau = 0 if prompt is None else prompt.shape[0]
    max_len = 2 * (tau + 5) if max_len is None else max_len
    state = decoder.start(prompt)
    out = []
    for _ in range(max_len):
        c = int(np.argmax(state.logprobs[0]))
        if c == EOS_CLASS:
            break
        out.append(c)
        state = decoder.step(state, [c])
    return out


# ---------------------------------------------------------------------------
# recognition, WER, cost profiling
# ---------------------------------------------------------------------------


def recognize(model, features, lm=None, weights=None, compression=None):
    """Encode, compress, and beam-search one utterance; no gradients."""
    weights = weights or FusionWeights()
    with ad.no_grad():
        h, lp = model.encode(features)
        prompt, _ = model.prompt(h, lp, compression)
        posterior = lp if weights.ctc_weight > 0 else None
        result = beam_search(model.decoder, prompt, posterior, lm, weights)
    result.prompt_len, result.frames = prompt.shape[0], h.shape[0]
    return result


def error_counts(ref_words, hyp_words):
    """(substitutions, deletions, insertions) of a minimum edit alignment."""
    vocab = {}
    ref = np.array([vocab.setdefault(w, len(vocab)) for w in ref_words], dtype=np.int64)
    hyp = np.array([vocab.setdefault(w, len(vocab)) for w in hyp_words], dtype=np.int64)
    table = _kernels.edit_table(ref, hyp)
    i, j = len(ref), len(hyp)
    sub = dele = ins = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and table[i, j] == table[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            sub += int(ref[i - 1] != hyp[j - 1])
            i, j = i - 1, j - 1
        elif i > 0 and table[i, j] == table[i - 1, j] + 1:
            dele += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return sub, dele, ins


def edit_distance(ref_words, hyp_words):
    return sum(error_counts(ref_words, hyp_words))


@dataclass
class WerReport:
    wer: float
    substitutions: int
    deletions: int
    insertions: int
    ref_words: int


def wer_report(refs, hyps):
    if len(refs) == 0:
        raise ValueError("empty reference set")
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references but {len(hyps)} hypotheses")
    s = d = i = n = 0
    for ref, hyp in zip(refs, hyps):
        rw, hw = ref.split(), hyp.split()
        a, b, c = error_counts(rw, hw)
        s, d, i, n = s + a, d + b, i + c, n + len(rw)
    if n == 0:
        raise ValueError("references contain no words")
    return WerReport(100.0 * (s + d + i) / n, s, d, i, n)


def wer(refs, hyps):
    """Word error rate in percent."""
    return wer_report(refs, hyps).wer


@dataclass
class CostReport:
    mode: str
    utterances: int
    key_reads: int
    decode_seconds: float
    total_seconds: float
    audio_seconds: float
    mean_tau: float
    mean_frames: float
    mean_output_len: float
    hypotheses: list = field(default_factory=list)
    taus: list = field(default_factory=list)
    frames: list = field(default_factory=list)
    out_lens: list = field(default_factory=list)

    @property
    def rtf(self):
        return self.total_seconds / self.audio_seconds if self.audio_seconds else float("nan")


def profile_decode_cost(model, utterances, mode="compressed", lm=None, weights=None,
                        frame_shift=0.01, warmup=True):
    """Decode ``(features, ...)`` items, counting decoder attention key reads.

    ``mode`` is ``compressed`` (the model's own prompt compression) or
    ``uncompressed`` (every encoder frame becomes a prompt row).
    """
    if mode not in ("compressed", "uncompressed"):
        raise ValueError(f"mode must be 'compressed' or 'uncompressed', got {mode!r}")
    weights = weights or FusionWeights()
    compression = None if mode == "compressed" else "full"
    if warmup and len(utterances):
        recognize(model, utterances[0], lm, weights, compression)  # JIT compile, caches
    reads = 0
    dec_time = total_time = 0.0
    taus, frames, lens, hyps = [], [], [], []
    audio = 0.0
    for features in utterances:
        t0 = time.perf_counter()
        with ad.no_grad():
            h, lp = model.encode(features)
            prompt, _ = model.prompt(h, lp, compression)
        posterior = lp if weights.ctc_weight > 0 else None
        t1 = time.perf_counter()
        with count_key_reads() as counter:
            result = beam_search(model.decoder, prompt, posterior, lm, weights)
        t2 = time.perf_counter()
        reads += counter.reads
        dec_time += t2 - t1
        total_time += t2 - t0
        taus.append(prompt.shape[0])
        frames.append(h.shape[0])
        lens.append(len(result.tokens))
        hyps.append(result.tokens)
        audio += features.shape[0] * frame_shift
    return CostReport(mode, len(taus), reads, dec_time, total_time, audio,
                      float(np.mean(taus)), float(np.mean(frames)), float(np.mean(lens)), hyps,
                      taus, frames, lens)


def greedy_key_reads(prompt_len, output_len, blocks):
    """Exact key-read count of greedy decoding that emits ``output_len`` tokens + <eos>.

    Prefill covers ``<aud>, prompt, <sos>``; each emitted token adds one query
    that reads every earlier position.
    """
    first = prompt_len + 2
    prefill = first * (first + 1) // 2
    steps = sum(first + j for j in range(1, output_len + 1))
    return blocks * (prefill + steps)


def ctc_greedy_transcribe(model, features):
    with ad.no_grad():
        _, lp = model.encode(features)
    return ctc_greedy_decode(greedy_path(lp))
