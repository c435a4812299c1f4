"""Decoder-only speech recognition with CTC-compressed audio prompts.

Everything runs on a small numpy reverse-mode autodiff engine; the dynamic
programs (CTC forward-backward, CTC prefix scoring, edit distance) are
compiled with numba when it is available.
"""

__version__ = "0.1.0"
