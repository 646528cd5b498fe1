"""Whitespace tokenizer over the closed caption vocabulary."""

from . import corpus

PAD = "<pad>"
PLACEHOLDER_TOKEN = "*"


class Tokenizer:
    def __init__(self, vocab=None, max_len=16):
        self.vocab = list(vocab) if vocab is not None else corpus.build_vocabulary()
        self.index = {w: i for i, w in enumerate(self.vocab)}
        self.max_len = max_len
        self.pad_id = self.index[PAD]
        self.placeholder_id = self.index[PLACEHOLDER_TOKEN]

    def __len__(self):
        return len(self.vocab)

    def encode(self, text):
        """Lowercase, split on whitespace, pad to max_len. '{}' maps to '*'."""
        words = text.lower().split()
        ids = []
        for w in words:
            if w == corpus.PLACEHOLDER:
                w = PLACEHOLDER_TOKEN
            if w not in self.index:
                raise ValueError(f"word not in vocabulary: {w!r}")
            ids.append(self.index[w])
        if len(ids) > self.max_len:
            raise ValueError(f"caption longer than {self.max_len} tokens")
        ids += [self.pad_id] * (self.max_len - len(ids))
        return ids

    def decode(self, ids):
        return " ".join(self.vocab[i] for i in ids if i != self.pad_id)
