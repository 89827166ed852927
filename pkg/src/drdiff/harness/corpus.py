"""Token corpora: ingestion, vocabularies and fixed-length training windows."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..numerics import Rng


class CorpusError(ValueError):
    pass


@dataclass
class Corpus:
    vocab: dict[str, int]
    sequences: list[list[int]]

    def __post_init__(self):
        if not self.sequences:
            raise CorpusError("corpus has no sequences")
        size = len(self.vocab)
        for i, seq in enumerate(self.sequences):
            if not seq:
                raise CorpusError(f"sequence {i} is empty")
            bad = [t for t in seq if not 0 <= t < size]
            if bad:
                raise CorpusError(f"sequence {i}: id {bad[0]} outside vocabulary of size {size}")

    @property
    def size(self) -> int:
        return len(self.vocab)

    def id_to_token(self) -> list[str]:
        inv = [""] * self.size
        for tok, i in self.vocab.items():
            inv[i] = tok
        return inv

    def detokenize(self, ids) -> str:
        inv = self.id_to_token()
        return " ".join(inv[int(i)] for i in ids)

    def vocab_text(self) -> str:
        """Sidecar vocabulary format: one token per line, line number is the id."""
        return "".join(tok + "\n" for tok in self.id_to_token())

    def windows(self, n: int) -> np.ndarray:
        """All sequences concatenated and cut into non-overlapping windows of ``n`` ids."""
        flat = np.fromiter((t for seq in self.sequences for t in seq), dtype=np.int64)
        count = flat.size // n
        if count == 0:
            raise CorpusError(f"corpus holds {flat.size} tokens, fewer than one window of {n}")
        return flat[: count * n].reshape(count, n)


def _lines(path: Path) -> list[str]:
    if not path.is_file():
        raise CorpusError(f"no such file: {path}")
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise CorpusError(f"{path} is empty")
    return lines


def ingest(path, vocab_path=None) -> Corpus:
    """Read a corpus; blank lines are skipped.

    Without ``vocab_path`` every line is whitespace-tokenized and ids are
    assigned in first-seen order. With it, lines hold integer ids and the
    vocabulary file lists one token per line (line number = id).
    """
    lines = _lines(Path(path))
    if vocab_path is None:
        vocab: dict[str, int] = {}
        seqs = [[vocab.setdefault(tok, len(vocab)) for tok in ln.split()] for ln in lines]
        return Corpus(vocab, seqs)
    vocab_file = Path(vocab_path)
    if not vocab_file.is_file():
        raise CorpusError(f"no such vocabulary file: {vocab_file}")
    tokens = vocab_file.read_text(encoding="utf-8").splitlines()
    vocab = {}
    for i, tok in enumerate(tokens):
        if tok in vocab:
            raise CorpusError(f"duplicate vocabulary entry {tok!r}")
        vocab[tok] = i
    try:
        seqs = [[int(x) for x in ln.split()] for ln in lines]
    except ValueError as exc:
        raise CorpusError(f"pre-tokenized corpus must hold integers: {exc}") from None
    return Corpus(vocab, seqs)


def synthetic_corpus(vocab: int, count: int, length: int, rng: Rng) -> Corpus:
    """Deterministic stand-in corpus: each line repeats a short random motif.

    Used when no corpus path is configured so every subcommand can run on a
    fresh checkout.
    """
    if vocab < 2:
        raise CorpusError("synthetic corpus needs a vocabulary of at least 2")
    seqs = []
    for _ in range(count):
        period = int(rng.integers(2, 9))
        motif = rng.integers(0, vocab, period)
        seqs.append([int(x) for x in np.resize(motif, length)])
    return Corpus({f"w{i}": i for i in range(vocab)}, seqs)
