"""Dynamic-programming kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``CTCPROMPT_DISABLE_NUMBA`` is unset (or ``0``).  Both paths are
always importable so tests and the benchmark can compare them directly.
"""

import os

import numpy as np

NEG_INF = -np.inf

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False


def _numba_disabled():
    return os.environ.get("CTCPROMPT_DISABLE_NUMBA", "0").lower() not in ("", "0", "false", "no")


USE_NUMBA = HAS_NUMBA and not _numba_disabled()


def _njit(fn):
    if not HAS_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


def extend_with_blanks(labels, blank=0):
    """Interleave ``labels`` with blanks: [b, l1, b, l2, ..., b]."""
    labels = np.asarray(labels, dtype=np.int64)
    ext = np.full(2 * len(labels) + 1, blank, dtype=np.int64)
    ext[1::2] = labels
    return ext


# ---------------------------------------------------------------------------
# CTC forward-backward (log space)
# ---------------------------------------------------------------------------


def _lse2(a, b):
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a > b:
        return a + np.log1p(np.exp(b - a))
    return b + np.log1p(np.exp(a - b))


_lse2_nb = _njit(_lse2)


def _ctc_alpha_beta_loops(log_probs, ext):
    n_frames = log_probs.shape[0]
    n_states = ext.shape[0]
    alpha = np.full((n_frames, n_states), NEG_INF)
    beta = np.full((n_frames, n_states), NEG_INF)
    alpha[0, 0] = log_probs[0, ext[0]]
    if n_states > 1:
        alpha[0, 1] = log_probs[0, ext[1]]
    for t in range(1, n_frames):
        for s in range(n_states):
            acc = alpha[t - 1, s]
            if s >= 1:
                acc = _lse2_nb(acc, alpha[t - 1, s - 1])
            if s >= 2 and ext[s] != ext[0] and ext[s] != ext[s - 2]:
                acc = _lse2_nb(acc, alpha[t - 1, s - 2])
            if acc != NEG_INF:
                alpha[t, s] = acc + log_probs[t, ext[s]]
    beta[n_frames - 1, n_states - 1] = 0.0
    if n_states > 1:
        beta[n_frames - 1, n_states - 2] = 0.0
    for t in range(n_frames - 2, -1, -1):
        for s in range(n_states):
            acc = beta[t + 1, s] + log_probs[t + 1, ext[s]]
            if s + 1 < n_states:
                acc = _lse2_nb(acc, beta[t + 1, s + 1] + log_probs[t + 1, ext[s + 1]])
            if s + 2 < n_states and ext[s + 2] != ext[0] and ext[s + 2] != ext[s]:
                acc = _lse2_nb(acc, beta[t + 1, s + 2] + log_probs[t + 1, ext[s + 2]])
            beta[t, s] = acc
    return alpha, beta


_ctc_alpha_beta_nb = _njit(_ctc_alpha_beta_loops)


def ctc_alpha_beta_numpy(log_probs, ext):
    """Vectorised over lattice states; loops over frames only."""
    n_frames = log_probs.shape[0]
    n_states = ext.shape[0]
    # a transition s-2 -> s is allowed for non-blank states whose label differs
    skip = np.zeros(n_states, dtype=bool)
    skip[2:] = (ext[2:] != ext[0]) & (ext[2:] != ext[:-2])
    emit = log_probs[:, ext]
    alpha = np.full((n_frames, n_states), NEG_INF)
    beta = np.full((n_frames, n_states), NEG_INF)
    alpha[0, : min(2, n_states)] = emit[0, : min(2, n_states)]
    with np.errstate(invalid="ignore"):
        for t in range(1, n_frames):
            prev = alpha[t - 1]
            acc = prev.copy()
            acc[1:] = np.logaddexp(acc[1:], prev[:-1])
            acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
            alpha[t] = acc + emit[t]
        beta[n_frames - 1, max(0, n_states - 2):] = 0.0
        for t in range(n_frames - 2, -1, -1):
            nxt = beta[t + 1] + emit[t + 1]
            acc = nxt.copy()
            acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
            acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
            beta[t] = acc
    return alpha, beta


def ctc_alpha_beta(log_probs, ext):
    """Log-space forward and backward variables over the blank-extended lattice.

    ``alpha[t, s]`` includes the emission at frame ``t``; ``beta[t, s]`` covers
    frames ``t+1..T-1`` only, so ``alpha + beta`` is the log occupancy.
    """
    log_probs = np.ascontiguousarray(log_probs, dtype=np.float64)
    ext = np.ascontiguousarray(ext, dtype=np.int64)
    if USE_NUMBA:
        return _ctc_alpha_beta_nb(log_probs, ext)
    return ctc_alpha_beta_numpy(log_probs, ext)


# ---------------------------------------------------------------------------
# CTC prefix scoring (label-synchronous joint decoding)
# ---------------------------------------------------------------------------


def _ctc_prefix_extend_loops(log_probs, r_n, r_b, last, empty, cands, blank):
    n_frames = log_probs.shape[0]
    n_cands = cands.shape[0]
    new_n = np.full((n_cands, n_frames), NEG_INF)
    new_b = np.full((n_cands, n_frames), NEG_INF)
    psi = np.full(n_cands, NEG_INF)
    for k in range(n_cands):
        c = cands[k]
        if empty:
            new_n[k, 0] = log_probs[0, c]
        acc = new_n[k, 0]
        for t in range(1, n_frames):
            # parent mass that may be followed by c without merging into a repeat
            if c == last:
                phi_prev = r_b[t - 1]
            else:
                phi_prev = _lse2_nb(r_b[t - 1], r_n[t - 1])
            new_n[k, t] = _lse2_nb(new_n[k, t - 1], phi_prev) + log_probs[t, c]
            new_b[k, t] = _lse2_nb(new_b[k, t - 1], new_n[k, t - 1]) + log_probs[t, blank]
            acc = _lse2_nb(acc, phi_prev + log_probs[t, c])
        psi[k] = acc
    return new_n, new_b, psi


_ctc_prefix_extend_nb = _njit(_ctc_prefix_extend_loops)


def ctc_prefix_extend_numpy(log_probs, r_n, r_b, last, empty, cands, blank):
    n_frames = log_probs.shape[0]
    cands = np.asarray(cands, dtype=np.int64)
    n_cands = cands.shape[0]
    new_n = np.full((n_cands, n_frames), NEG_INF)
    new_b = np.full((n_cands, n_frames), NEG_INF)
    emit = log_probs[:, cands].T  # [K, T]
    same = cands == last
    with np.errstate(invalid="ignore"):
        phi = np.where(same[:, None], r_b[None, :], np.logaddexp(r_b, r_n)[None, :])
        if empty:
            new_n[:, 0] = emit[:, 0]
        acc = new_n[:, 0].copy()
        for t in range(1, n_frames):
            new_n[:, t] = np.logaddexp(new_n[:, t - 1], phi[:, t - 1]) + emit[:, t]
            new_b[:, t] = np.logaddexp(new_b[:, t - 1], new_n[:, t - 1]) + log_probs[t, blank]
            acc = np.logaddexp(acc, phi[:, t - 1] + emit[:, t])
    return new_n, new_b, acc


def ctc_prefix_extend(log_probs, r_n, r_b, last, empty, cands, blank=0):
    """Extend one prefix by every label in ``cands``.

    Returns the non-blank / blank ending forward variables of each extension
    and its prefix log-probability.
    """
    log_probs = np.ascontiguousarray(log_probs, dtype=np.float64)
    r_n = np.ascontiguousarray(r_n, dtype=np.float64)
    r_b = np.ascontiguousarray(r_b, dtype=np.float64)
    cands = np.ascontiguousarray(cands, dtype=np.int64)
    if USE_NUMBA:
        return _ctc_prefix_extend_nb(log_probs, r_n, r_b, int(last), bool(empty), cands, int(blank))
    return ctc_prefix_extend_numpy(log_probs, r_n, r_b, int(last), bool(empty), cands, int(blank))


# ---------------------------------------------------------------------------
# Levenshtein distance
# ---------------------------------------------------------------------------


def _edit_table_loops(ref, hyp):
    n, m = ref.shape[0], hyp.shape[0]
    table = np.zeros((n + 1, m + 1), dtype=np.int64)
    for i in range(n + 1):
        table[i, 0] = i
    for j in range(m + 1):
        table[0, j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = table[i - 1, j - 1] + (0 if ref[i - 1] == hyp[j - 1] else 1)
            best = min(table[i - 1, j] + 1, table[i, j - 1] + 1)
            table[i, j] = min(sub, best)
    return table


_edit_table_nb = _njit(_edit_table_loops)


def edit_table_numpy(ref, hyp):
    n, m = len(ref), len(hyp)
    table = np.zeros((n + 1, m + 1), dtype=np.int64)
    table[0] = np.arange(m + 1)
    for i in range(1, n + 1):
        # substitution/deletion are vectorisable; insertion is a running min
        row = np.empty(m + 1, dtype=np.int64)
        row[0] = i
        diag = table[i - 1, :-1] + (hyp != ref[i - 1])
        up = table[i - 1, 1:] + 1
        cand = np.minimum(diag, up)
        # row[j] = min(cand[j-1], row[j-1] + 1) == min_k<=j (cand[k-1] + j - k)
        offs = np.arange(1, m + 1)
        running = np.minimum.accumulate(np.concatenate(([i], cand)) - np.arange(m + 1))
        row[1:] = running[1:] + offs
        table[i] = row
    return table


def edit_table(ref, hyp):
    """Full Levenshtein table between two integer sequences."""
    ref = np.ascontiguousarray(ref, dtype=np.int64)
    hyp = np.ascontiguousarray(hyp, dtype=np.int64)
    if USE_NUMBA:
        return _edit_table_nb(ref, hyp)
    return edit_table_numpy(ref, hyp)
