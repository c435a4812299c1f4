"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat N] [--end-to-end]

Each kernel is run once untimed so JIT compilation is excluded, then timed
with ``timeit``.  Outputs of both paths are checked for agreement first.
``--end-to-end`` additionally decodes a small synthetic set in two child
processes, one with ``CTCPROMPT_DISABLE_NUMBA=1``.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from ctcprompt import _kernels as K


def _log_softmax(x):
    return x - np.log(np.exp(x).sum(axis=1, keepdims=True))


def cases(rng):
    lp = _log_softmax(rng.standard_normal((200, 30)))
    ext = K.extend_with_blanks(rng.integers(1, 30, size=60))
    r_n = np.full(200, -np.inf)
    r_b = np.cumsum(lp[:, 0])
    cands = np.arange(1, 30)
    ref = rng.integers(0, 50, size=300)
    hyp = rng.integers(0, 50, size=300)
    yield ("ctc_alpha_beta T=200 L=60", K._ctc_alpha_beta_nb, K.ctc_alpha_beta_numpy, (lp, ext))
    yield ("ctc_prefix_extend T=200 C=29", K._ctc_prefix_extend_nb, K.ctc_prefix_extend_numpy,
           (lp, r_n, r_b, -1, True, cands, 0))
    yield ("edit_table 300x300", K._edit_table_nb, K.edit_table_numpy, (ref, hyp))


def _agree(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return all(np.allclose(x, y, atol=1e-9, equal_nan=True) for x, y in zip(a, b))


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    print(f"{'kernel':<30} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8}")
    for name, fast, slow, args in cases(rng):
        if not _agree(fast(*args), slow(*args)):
            raise SystemExit(f"{name}: numba and numpy paths disagree")
        t_fast = min(timeit.repeat(lambda: fast(*args), number=1, repeat=repeat)) * 1e3
        t_slow = min(timeit.repeat(lambda: slow(*args), number=1, repeat=repeat)) * 1e3
        print(f"{name:<30} {t_fast:>10.3f} {t_slow:>10.3f} {t_slow / t_fast:>7.1f}x")


_CHILD = """
import time, numpy as np
from ctcprompt.data import SyntheticConfig, gen_synthetic
from ctcprompt.model import CtcPromptASR, ModelConfig
from ctcprompt.decoding import FusionWeights, recognize
c = gen_synthetic(SyntheticConfig(feat_dim=8, n_utts=1, n_test=12, frames_per_token_mean=3))
m = CtcPromptASR(c.tokenizer.vocab_size, ModelConfig(feat_dim=8, model_dim=16, heads=2, ff_dim=32,
                 encoder_blocks=1, decoder_blocks=1, subsample=2))
w = FusionWeights(ctc_weight=0.4, lm_weight=0.0, beam=4)
recognize(m, c.test[0].features, None, w)
t = time.perf_counter()
for u in c.test:
    recognize(m, u.features, None, w)
print(time.perf_counter() - t)
"""


def bench_end_to_end():
    times = {}
    for label, flag in (("numba", "0"), ("numpy", "1")):
        env = dict(os.environ, CTCPROMPT_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", _CHILD], env=env, capture_output=True,
                             text=True, check=True).stdout
        times[label] = float(out.strip().split()[-1])
    print(f"decode 12 utterances: numba {times['numba']:.3f}s, numpy {times['numpy']:.3f}s")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--end-to-end", action="store_true")
    args = parser.parse_args()
    if not K.HAS_NUMBA:
        raise SystemExit("numba is not installed")
    bench_kernels(args.repeat)
    if args.end_to_end:
        bench_end_to_end()


if __name__ == "__main__":
    main()
