"""Synthetic sequence tasks and a character language-modelling corpus.

Ids 0, 1, 2 are reserved for pad, begin and end of sequence. Every split is
padded to one fixed width so attention maps pooled over queries have the same
length in every batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..model import BOS, EOS, PAD

N_SPECIAL = 3


@dataclass
class Split:
    src: np.ndarray | None
    tgt_in: np.ndarray
    tgt_out: np.ndarray

    def __len__(self):
        return len(self.tgt_in)

    def batches(self, batch_size, rng=None):
        """Yield ``(src, tgt_in, tgt_out)``; shuffled when ``rng`` is given."""
        n = len(self)
        order = rng.permutation(n) if rng is not None else np.arange(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            src = None if self.src is None else self.src[idx]
            yield src, self.tgt_in[idx], self.tgt_out[idx]

    def first_batch(self, batch_size):
        return next(self.batches(batch_size))


@dataclass
class TaskData:
    train: Split
    valid: Split
    test: Split
    vocab_size: int
    kind: str
    itos: list | None = None


def _split_811(n):
    n_train = int(round(n * 0.8))
    n_valid = int(round(n * 0.1))
    return slice(0, n_train), slice(n_train, n_train + n_valid), slice(n_train + n_valid, n)


def _seq2seq(tc, transform):
    rng = np.random.default_rng(tc.seed)
    n, L = tc.n_samples, tc.max_len
    src = np.full((n, L), PAD, dtype=np.int64)
    tgt_in = np.full((n, L + 1), PAD, dtype=np.int64)
    tgt_out = np.full((n, L + 1), PAD, dtype=np.int64)
    lengths = rng.integers(tc.min_len, tc.max_len + 1, size=n)
    for i, length in enumerate(lengths):
        seq = rng.integers(N_SPECIAL, tc.vocab_size, size=length)
        out = transform(seq)
        src[i, :length] = seq
        tgt_in[i, 0] = BOS
        tgt_in[i, 1:length + 1] = out
        tgt_out[i, :length] = out
        tgt_out[i, length] = EOS
    parts = [Split(src[s], tgt_in[s], tgt_out[s]) for s in _split_811(n)]
    return parts


def generate_copy_task(tc):
    """Target equals source."""
    train, valid, test = _seq2seq(tc, lambda s: s)
    return TaskData(train, valid, test, tc.vocab_size, "copy")


def generate_reverse_task(tc):
    """Target is the source read backwards."""
    train, valid, test = _seq2seq(tc, lambda s: s[::-1])
    return TaskData(train, valid, test, tc.vocab_size, "reverse")


def load_char_lm(tc):
    """Next-character prediction over fixed windows of a plain-text file."""
    with open(tc.corpus_path, encoding="utf-8") as fh:
        text = fh.read()
    chars = sorted(set(text))
    itos = ["<pad>", "<bos>", "<eos>"] + chars
    stoi = {c: i for i, c in enumerate(itos)}
    ids = np.array([stoi[c] for c in text], dtype=np.int64)
    w = tc.context + 1
    n = len(ids) // w
    if n < 10:
        raise ValueError(f"{tc.corpus_path}: too short for context {tc.context}")
    chunks = ids[: n * w].reshape(n, w)
    splits = [Split(None, chunks[s, :-1].copy(), chunks[s, 1:].copy()) for s in _split_811(n)]
    return TaskData(*splits, vocab_size=len(itos), kind="char-lm", itos=itos)


def build_task(tc):
    tc.validate()
    if tc.kind == "copy":
        return generate_copy_task(tc)
    if tc.kind == "reverse":
        return generate_reverse_task(tc)
    return load_char_lm(tc)
