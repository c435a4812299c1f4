"""Independent brute-force references used to freeze expected values.

Nothing here calls the dynamic programs under test: every quantity is
obtained by enumerating frame-level paths or token sequences directly.
"""

import itertools

import numpy as np


def collapse(path, blank=0):
    out, prev = [], None
    for label in path:
        if label != prev and label != blank:
            out.append(label)
        prev = label
    return tuple(out)


def all_paths(n_frames, n_classes):
    """Every frame-label path as an int array [n_paths, n_frames]."""
    return np.array(list(itertools.product(range(n_classes), repeat=n_frames)), dtype=np.int64)


def path_log_probs(log_probs):
    paths = all_paths(*log_probs.shape)
    frames = np.arange(log_probs.shape[0])
    return paths, log_probs[frames[None, :], paths].sum(axis=1)


def _logsumexp(values):
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return -np.inf
    m = values.max()
    if m == -np.inf:
        return -np.inf
    return float(m + np.log(np.exp(values - m).sum()))


def ctc_log_likelihood(log_probs, labels, blank=0):
    """log P(labels) by summing every path that collapses to ``labels``."""
    paths, scores = path_log_probs(log_probs)
    target = tuple(labels)
    keep = [i for i, p in enumerate(paths) if collapse(p.tolist(), blank) == target]
    return _logsumexp(scores[keep])


def ctc_prefix_log_prob(log_probs, prefix, blank=0):
    """log P(collapsed output starts with ``prefix``)."""
    paths, scores = path_log_probs(log_probs)
    prefix = tuple(prefix)
    n = len(prefix)
    keep = [i for i, p in enumerate(paths) if collapse(p.tolist(), blank)[:n] == prefix]
    return _logsumexp(scores[keep])


def occupancy(log_probs, labels, blank=0):
    """Posterior expected count of each (frame, class) among valid paths."""
    paths, scores = path_log_probs(log_probs)
    target = tuple(labels)
    keep = [i for i, p in enumerate(paths) if collapse(p.tolist(), blank) == target]
    w = np.exp(scores[keep] - _logsumexp(scores[keep]))
    occ = np.zeros_like(log_probs)
    for weight, p in zip(w, paths[keep]):
        occ[np.arange(len(p)), p] += weight
    return occ


def levenshtein(a, b):
    """Plain recursive-table edit distance on Python sequences."""
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i]
        for j, y in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def all_sequences(vocab, max_len):
    """Every character-id sequence of length 0..max_len over ids 1..vocab."""
    for n in range(max_len + 1):
        yield from itertools.product(range(1, vocab + 1), repeat=n)


def random_log_probs(rng, n_frames, n_classes, sharpness=1.0):
    logits = rng.standard_normal((n_frames, n_classes)) * sharpness
    return logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))


def labeling_log_probs(log_probs, blank=0):
    """{labeling: log P(labeling)} over every labeling with non-zero mass."""
    paths, scores = path_log_probs(log_probs)
    groups = {}
    for p, s in zip(paths.tolist(), scores):
        groups.setdefault(collapse(p, blank), []).append(s)
    return {k: _logsumexp(v) for k, v in groups.items()}


def brute_force_decode(decoder, prompt, log_probs, lm, weights, max_len):
    """Argmax of the fused score over every sequence up to ``max_len`` tokens.

    Decoder and LM terms come from full (uncached) recomputation; the CTC term
    from path enumeration.  Ties go to the lexicographically smaller sequence
    with <eos> (class 0) appended.
    """
    vocab = decoder.vocab_size
    table = labeling_log_probs(log_probs) if log_probs is not None else None
    best = None
    for seq in all_sequences(vocab, max_len):
        y = list(seq) + [decoder.eos]
        score = decoder.sequence_logprob(prompt, y)
        if table is not None and weights.ctc_weight > 0:
            score += weights.ctc_weight * table.get(seq, -np.inf)
        if lm is not None and weights.lm_weight > 0:
            score += weights.lm_weight * lm.sequence_logprob(None, y, lm=True)
        score += weights.length_penalty * len(seq)
        key = (-score, seq + (0,))
        if best is None or key < best[0]:
            best = (key, seq, score)
    return list(best[1]), best[2]
