"""Synthetic corpora with memorizable sequences.

Text comes from a seeded order-2 Markov source: every token has ``K``
successor candidates, and which candidate gets which probability rotates
with the token two steps back. Each sequence also carries a random
"identifier" span of uniformly drawn tokens, which a model can only
predict by memorizing that particular sequence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ROLES = ("train", "forget", "retain", "validation", "heldout")
SUCCESSOR_PROBS = (0.6, 0.2, 0.12, 0.08)


@dataclass(frozen=True)
class MarkovSource:
    successors: np.ndarray  # (V, K) candidate next tokens per previous token
    probs: np.ndarray  # (K,) probabilities before rotation

    @classmethod
    def seeded(cls, vocab: int, seed: int, probs=SUCCESSOR_PROBS) -> "MarkovSource":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4D4B]))
        k = len(probs)
        succ = np.stack([rng.choice(vocab, size=k, replace=False) for _ in range(vocab)])
        return cls(succ, np.asarray(probs, dtype=np.float64))

    @property
    def vocab(self) -> int:
        return self.successors.shape[0]

    def slot_probs(self, prev2: int) -> np.ndarray:
        """Probability of each successor slot given the token two steps back."""
        k = len(self.probs)
        return self.probs[(np.arange(k) - prev2) % k]

    def sample_next(self, prev2: int, prev1: int, rng) -> int:
        cdf = np.cumsum(self.slot_probs(prev2))
        slot = min(int(np.searchsorted(cdf, rng.random(), side="right")), len(cdf) - 1)
        return int(self.successors[prev1, slot])


@dataclass
class Corpus:
    sequences: np.ndarray  # (N, T) int64
    role: str
    id_spans: np.ndarray | None = None  # (N, 2) start/stop of identifier spans

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown corpus role {self.role!r}")
        self.sequences = np.asarray(self.sequences, dtype=np.int64)

    def __len__(self):
        return len(self.sequences)

    def __iter__(self):
        return iter(self.sequences)

    def __getitem__(self, i):
        return self.sequences[i]


@dataclass
class Corpora:
    train: Corpus
    validation: Corpus
    heldout: Corpus
    source: MarkovSource
    forget_idx: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    @property
    def forget(self) -> Corpus:
        return Corpus(self.train.sequences[self._fi()], "forget")

    @property
    def retain(self) -> Corpus:
        mask = np.ones(len(self.train), dtype=bool)
        mask[self._fi()] = False
        return Corpus(self.train.sequences[mask], "retain")

    def _fi(self):
        if self.forget_idx is None:
            raise ValueError("no forget set has been selected")
        return self.forget_idx

    def with_forget(self, idx) -> "Corpora":
        return Corpora(self.train, self.validation, self.heldout, self.source,
                       np.sort(np.asarray(idx, dtype=np.int64)), self.extras)


def _sample_sequence(source: MarkovSource, seq_len: int, id_len: int, rng):
    V = source.vocab
    start = int(rng.integers(2, seq_len - id_len + 1))
    seq = [int(t) for t in rng.integers(0, V, size=2)]
    while len(seq) < seq_len:
        if len(seq) == start:
            seq.extend(int(t) for t in rng.integers(0, V, size=id_len))
        else:
            seq.append(source.sample_next(seq[-2], seq[-1], rng))
    return seq[:seq_len], (start, start + id_len)


def gen_corpus(seed: int, n_train: int, n_val: int, seq_len: int, vocab: int,
               n_heldout: int | None = None, id_len: int = 6) -> Corpora:
    """Deterministic train / validation / heldout corpora, pairwise disjoint."""
    if vocab < 8:
        raise ValueError("vocabulary must have at least 8 tokens")
    n_heldout = n_val if n_heldout is None else n_heldout
    if min(n_train, n_val, n_heldout) < 1 or seq_len < 4:
        raise ValueError("corpus sizes must be positive and seq_len at least 4")
    id_len = min(id_len, seq_len - 2)
    source = MarkovSource.seeded(vocab, seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x434F]))
    seen: set[tuple] = set()
    parts = []
    for role, count in (("train", n_train), ("validation", n_val), ("heldout", n_heldout)):
        seqs, spans = [], []
        while len(seqs) < count:
            s, span = _sample_sequence(source, seq_len, id_len, rng)
            key = tuple(s)
            if key in seen:
                continue
            seen.add(key)
            seqs.append(s)
            spans.append(span)
        parts.append(Corpus(np.array(seqs), role, np.array(spans)))
    return Corpora(parts[0], parts[1], parts[2], source)


def select_forget(corpus: Corpus, k: int, seed: int) -> tuple[Corpus, Corpus, np.ndarray]:
    """Uniform sample of ``k`` sequences without replacement.

    Returns the forget corpus, the remaining sequences and the selected
    indices (sorted) into ``corpus``.
    """
    n = len(corpus)
    if not 1 <= k <= n:
        raise ValueError(f"cannot select {k} of {n} sequences")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4647]))
    idx = np.sort(rng.choice(n, size=k, replace=False))
    mask = np.ones(n, dtype=bool)
    mask[idx] = False
    return Corpus(corpus.sequences[idx], "forget"), Corpus(corpus.sequences[mask], "retain"), idx
