"""Synthetic paired/text-only corpora, feature files and manifests."""

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .tokenizer import Tokenizer

FEATURE_MAGIC = b"CTCPFEAT"
_HEADER = struct.Struct("<8sII")  # magic, frame count, feature dim -> 16 bytes
LETTERS = "abcdefghijklmnopqrstuvwxyz"


class ManifestError(ValueError):
    pass


class FeatureFileError(ValueError):
    pass


@dataclass
class SyntheticConfig:
    vocab_size: int = 8
    feat_dim: int = 80
    frames_per_token_mean: float = 5.0
    frames_per_token_std: float = 1.0
    noise_std: float = 0.5
    gap_frames_mean: float = 0.0
    gap_frames_std: float = 1.0
    n_utts: int = 100
    n_test: int = 50
    text_only_multiplier: int = 9
    n_words: int = 24
    word_len_min: int = 2
    word_len_max: int = 4
    sentence_words_min: int = 2
    sentence_words_max: int = 4
    successors: int = 3
    confusion: float = 0.0
    data_seed: int = 0

    def __post_init__(self):
        if not 2 <= self.vocab_size <= len(LETTERS):
            raise ValueError(f"vocab_size must be in [2, {len(LETTERS)}], got {self.vocab_size}")
        if self.frames_per_token_mean < 2:
            raise ValueError("frames_per_token_mean must be >= 2")
        if self.gap_frames_mean < 0:
            raise ValueError("gap_frames_mean must be non-negative")
        if self.noise_std < 0 or self.frames_per_token_std < 0 or self.gap_frames_std < 0:
            raise ValueError("standard deviations must be non-negative")
        if self.n_utts < 1 or self.n_test < 0 or self.text_only_multiplier < 0:
            raise ValueError("n_utts must be positive; n_test and multiplier non-negative")
        if not 1 <= self.word_len_min <= self.word_len_max:
            raise ValueError("invalid word length range")
        if not 1 <= self.sentence_words_min <= self.sentence_words_max:
            raise ValueError("invalid sentence length range")
        if not 0.0 <= self.confusion < 1.0:
            raise ValueError("confusion must lie in [0, 1)")


@dataclass
class Utterance:
    utt_id: str
    transcript: str
    features: np.ndarray = None

    @property
    def frames(self):
        return 0 if self.features is None else self.features.shape[0]


@dataclass
class Corpus:
    tokenizer: Tokenizer
    train: list = field(default_factory=list)
    text: list = field(default_factory=list)
    test: list = field(default_factory=list)
    templates: np.ndarray = None
    lexicon: list = field(default_factory=list)


class SentenceSource:
    """Bigram word chain over a random lexicon: the structure text data teaches."""

    def __init__(self, config, rng):
        letters = LETTERS[: config.vocab_size]
        words = set()
        n_possible = sum(
            config.vocab_size ** n for n in range(config.word_len_min, config.word_len_max + 1)
        )
        target = min(config.n_words, n_possible)
        while len(words) < target:
            n = rng.integers(config.word_len_min, config.word_len_max + 1)
            words.add("".join(rng.choice(list(letters), size=n)))
        self.words = sorted(words)
        k = min(config.successors, len(self.words))
        self.next_words = [rng.choice(len(self.words), size=k, replace=False)
                           for _ in self.words]
        self.config = config

    def sample(self, rng):
        cfg = self.config
        n = rng.integers(cfg.sentence_words_min, cfg.sentence_words_max + 1)
        w = rng.integers(len(self.words))
        out = [self.words[w]]
        for _ in range(n - 1):
            w = self.next_words[w][rng.integers(len(self.next_words[w]))]
            out.append(self.words[w])
        return " ".join(out)


def make_templates(config, n_chars, rng):
    templates = rng.standard_normal((n_chars, config.feat_dim))
    if config.confusion > 0:
        # pair up letters (a,b), (c,d), ... so each pair shares most of its template
        for i in range(0, config.vocab_size - 1, 2):
            mix = 0.5 * (templates[i] + templates[i + 1])
            templates[i] = config.confusion * mix + (1 - config.confusion) * templates[i]
            templates[i + 1] = config.confusion * mix + (1 - config.confusion) * templates[i + 1]
    return templates


def render(ids, templates, config, rng):
    """k noisy copies of each token's template, k drawn per token.

    With ``gap_frames_mean > 0`` each token is followed by a few noisy
    all-zero (silence) frames, the acoustic counterpart of CTC blanks.
    """
    chunks = []
    for i in ids:
        k = max(2, int(round(rng.normal(config.frames_per_token_mean,
                                        config.frames_per_token_std))))
        noise = rng.standard_normal((k, config.feat_dim)) * config.noise_std
        chunks.append(templates[i - 1] + noise)
        if config.gap_frames_mean > 0:
            g = max(0, int(round(rng.normal(config.gap_frames_mean, config.gap_frames_std))))
            chunks.append(rng.standard_normal((g, config.feat_dim)) * config.noise_std)
    if not chunks:
        return np.zeros((0, config.feat_dim))
    return np.concatenate(chunks, axis=0)


def gen_synthetic(config):
    """Deterministic paired train/test sets plus a larger text-only pool."""
    rng = np.random.default_rng(config.data_seed)
    tokenizer = Tokenizer(LETTERS[: config.vocab_size] + " ")
    source = SentenceSource(config, rng)
    templates = make_templates(config, tokenizer.vocab_size, rng)
    corpus = Corpus(tokenizer, templates=templates, lexicon=list(source.words))

    def paired(prefix, n):
        out = []
        for k in range(n):
            text = source.sample(rng)
            feats = render(tokenizer.tokenize(text), templates, config, rng)
            out.append(Utterance(f"{prefix}{k:05d}", text, feats))
        return out

    corpus.train = paired("train", config.n_utts)
    corpus.test = paired("test", config.n_test)
    corpus.text = [
        Utterance(f"text{k:06d}", source.sample(rng))
        for k in range(config.n_utts * config.text_only_multiplier)
    ]
    return corpus


# ---------------------------------------------------------------------------
# feature files
# ---------------------------------------------------------------------------


def write_features(path, features):
    features = np.ascontiguousarray(features, dtype="<f8")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(FEATURE_MAGIC, features.shape[0], features.shape[1]))
        f.write(features.tobytes())


def read_features(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise FeatureFileError(f"{path}: truncated header")
    magic, n_frames, dim = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise FeatureFileError(f"{path}: bad magic {magic!r}")
    body = raw[_HEADER.size:]
    if len(body) != n_frames * dim * 8:
        raise FeatureFileError(
            f"{path}: expected {n_frames * dim * 8} payload bytes, found {len(body)}"
        )
    return np.frombuffer(body, dtype="<f8").reshape(n_frames, dim).astype(np.float64)


# ---------------------------------------------------------------------------
# manifests: utt_id <TAB> feature path <TAB> frames <TAB> transcript
# ---------------------------------------------------------------------------

MANIFEST_HEADER = "utt_id\tfeature_path\tframes\ttranscript"


def write_manifest(path, utterances, feature_dir=None):
    """Writes records; paired utterances get their features under ``feature_dir``."""
    base = os.path.dirname(os.path.abspath(path))
    lines = [MANIFEST_HEADER]
    for utt in utterances:
        rel = ""
        if utt.features is not None:
            os.makedirs(feature_dir, exist_ok=True)
            fpath = os.path.join(feature_dir, f"{utt.utt_id}.feat")
            write_features(fpath, utt.features)
            rel = os.path.relpath(fpath, base)
        lines.append(f"{utt.utt_id}\t{rel}\t{utt.frames}\t{utt.transcript}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def read_manifest(path, load_features=True):
    base = os.path.dirname(os.path.abspath(path))
    with open(path, encoding="utf-8") as f:
        lines = f.read().split("\n")
    if not lines or lines[0] != MANIFEST_HEADER:
        raise ManifestError(f"{path}: missing manifest header")
    out, seen = [], set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        cols = line.split("\t")
        if len(cols) != 4:
            raise ManifestError(f"{path}:{lineno}: expected 4 columns, got {len(cols)}")
        utt_id, rel, frames, transcript = cols
        if utt_id in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate utt_id {utt_id!r}")
        seen.add(utt_id)
        features = None
        if rel:
            fpath = os.path.join(base, rel)
            if not os.path.isfile(fpath):
                raise ManifestError(f"{path}:{lineno}: missing feature file {rel}")
            if load_features:
                features = read_features(fpath)
                if features.shape[0] != int(frames):
                    raise ManifestError(
                        f"{path}:{lineno}: frame count {frames} != file's {features.shape[0]}"
                    )
        elif int(frames) != 0:
            raise ManifestError(f"{path}:{lineno}: text-only record with frame count {frames}")
        out.append(Utterance(utt_id, transcript, features))
    return out


def write_corpus(corpus, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    feats = os.path.join(out_dir, "feats")
    write_manifest(os.path.join(out_dir, "train.tsv"), corpus.train, feats)
    write_manifest(os.path.join(out_dir, "test.tsv"), corpus.test, feats)
    write_manifest(os.path.join(out_dir, "text.tsv"), corpus.text)
    with open(os.path.join(out_dir, "vocab.txt"), "w", encoding="utf-8") as f:
        f.write(corpus.tokenizer.to_text() + "\n")


def read_tokenizer(data_dir):
    with open(os.path.join(data_dir, "vocab.txt"), encoding="utf-8") as f:
        return Tokenizer.from_text(f.read().rstrip("\n"))


def load_corpus(data_dir):
    return Corpus(
        read_tokenizer(data_dir),
        train=read_manifest(os.path.join(data_dir, "train.tsv")),
        text=read_manifest(os.path.join(data_dir, "text.tsv")),
        test=read_manifest(os.path.join(data_dir, "test.tsv")),
    )
