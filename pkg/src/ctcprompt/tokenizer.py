"""Character tokenizer and the shared id layout.

Input ids: 0 is the CTC blank, 1..V are characters, then <sos>, <eos>, <aud>.
Decoder output classes reuse slot 0 for <eos> (blank is never a decoder
target), so output class c >= 1 is character id c.
"""

BLANK = 0
EOS_CLASS = 0


class OutOfVocabularyError(ValueError):
    pass


class Tokenizer:
    def __init__(self, chars):
        chars = list(chars)
        if len(set(chars)) != len(chars) or any(len(c) != 1 for c in chars):
            raise ValueError(f"tokenizer characters must be distinct single characters: {chars!r}")
        self.chars = chars
        self._ids = {c: i + 1 for i, c in enumerate(chars)}

    @property
    def vocab_size(self):
        return len(self.chars)

    @property
    def sos(self):
        return self.vocab_size + 1

    @property
    def eos(self):
        return self.vocab_size + 2

    @property
    def aud(self):
        return self.vocab_size + 3

    @property
    def num_embeddings(self):
        return self.vocab_size + 4

    @property
    def num_classes(self):
        """CTC classes (blank + characters) == decoder classes (<eos> + characters)."""
        return self.vocab_size + 1

    def tokenize(self, text):
        bad = sorted({c for c in text if c not in self._ids})
        if bad:
            raise OutOfVocabularyError(f"out-of-vocabulary characters: {''.join(bad)!r}")
        return [self._ids[c] for c in text]

    def detokenize(self, ids):
        out = []
        for i in ids:
            if not 1 <= i <= self.vocab_size:
                raise ValueError(f"id {i} is not a character id")
            out.append(self.chars[i - 1])
        return "".join(out)

    def to_text(self):
        return "".join(self.chars)

    @classmethod
    def from_text(cls, text):
        return cls(list(text))

    def __eq__(self, other):
        return isinstance(other, Tokenizer) and other.chars == self.chars

    def __repr__(self):
        return f"Tokenizer({self.to_text()!r})"
