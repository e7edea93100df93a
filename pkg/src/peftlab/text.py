"""Word-level tokenizer and a hashed bag-of-words prompt embedder."""

import string
import zlib

import numpy as np

PAD, BOS, EOS, MEDVQA, UNK = "<pad>", "<bos>", "<eos>", "<MedVQA>", "<unk>"
SPECIALS = (PAD, BOS, EOS, MEDVQA, UNK)
PAD_ID, BOS_ID, EOS_ID, MEDVQA_ID, UNK_ID = range(len(SPECIALS))

_STRIP = string.punctuation


def _norm_word(word):
    if word in SPECIALS:
        return word
    return word.lower().rstrip(_STRIP)


def tokenize(text):
    """Lowercase, split on whitespace, strip trailing punctuation.

    Special tokens pass through untouched; words that reduce to nothing are
    dropped.
    """
    words = (_norm_word(w) for w in text.split())
    return [w for w in words if w]


def normalize(text):
    return " ".join(tokenize(text))


def detokenize(tokens):
    return " ".join(t for t in tokens if t not in (PAD, BOS, EOS))


class Tokenizer:
    """Maps words to ids. Ids 0-4 are the fixed specials, then sorted words."""

    def __init__(self, words=()):
        vocab = sorted(set(words) - set(SPECIALS))
        self.itos = list(SPECIALS) + vocab
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    @classmethod
    def from_texts(cls, texts):
        words = set()
        for t in texts:
            words.update(tokenize(t))
        return cls(words)

    @classmethod
    def from_vocab_file(cls, path):
        with open(path, encoding="utf-8") as fh:
            itos = [line.rstrip("\n") for line in fh if line.strip()]
        if tuple(itos[: len(SPECIALS)]) != SPECIALS:
            raise ValueError(f"{path}: vocabulary must start with {SPECIALS}")
        tok = cls()
        tok.itos = itos
        tok.stoi = {w: i for i, w in enumerate(itos)}
        return tok

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.itos) + "\n")

    def __len__(self):
        return len(self.itos)

    def encode(self, text_or_tokens):
        tokens = tokenize(text_or_tokens) if isinstance(text_or_tokens, str) else text_or_tokens
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def decode(self, ids):
        return [self.itos[i] for i in ids]

    def encode_question(self, text):
        """Token ids of a question, guaranteed to start with the <MedVQA> id."""
        ids = self.encode(text)
        if not ids or ids[0] != MEDVQA_ID:
            ids = [MEDVQA_ID] + ids
        return ids

    def encode_answer(self, text):
        return self.encode(text) + [EOS_ID]


class PromptEmbedder:
    """Mean of per-word Gaussian vectors; each vector is seeded by (seed, crc32(word)).

    No vocabulary is needed, and the same prompt always maps to the same
    embedding for a given seed.
    """

    def __init__(self, dim=32, seed=0):
        self.dim = dim
        self.seed = seed
        self._cache = {}

    def word_vector(self, word):
        vec = self._cache.get(word)
        if vec is None:
            rng = np.random.default_rng([self.seed, zlib.crc32(word.encode("utf-8"))])
            vec = rng.normal(0.0, 1.0, self.dim)
            self._cache[word] = vec
        return vec

    def __call__(self, prompt):
        words = tokenize(prompt)
        if not words:
            return np.zeros(self.dim)
        return np.mean([self.word_vector(w) for w in words], axis=0)

    def batch(self, prompts):
        return np.stack([self(p) for p in prompts])
