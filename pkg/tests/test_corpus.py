import numpy as np
import pytest

from unlearnlab.corpus import Corpus, MarkovSource, gen_corpus, select_forget


class TestGenCorpus:
    def test_deterministic(self):
        a, b = gen_corpus(5, 20, 4, 16, 32), gen_corpus(5, 20, 4, 16, 32)
        np.testing.assert_array_equal(a.train.sequences, b.train.sequences)
        np.testing.assert_array_equal(a.heldout.sequences, b.heldout.sequences)
        assert not np.array_equal(a.train.sequences, gen_corpus(6, 20, 4, 16, 32).train.sequences)

    def test_disjoint_roles(self):
        c = gen_corpus(0, 200, 50, 8, 8)
        train = {tuple(s) for s in c.train}
        val = {tuple(s) for s in c.validation}
        held = {tuple(s) for s in c.heldout}
        assert len(train) == 200
        assert not (train & val) and not (train & held) and not (val & held)

    def test_shapes_and_range(self):
        c = gen_corpus(1, 10, 3, 20, 16)
        assert c.train.sequences.shape == (10, 20)
        assert c.train.sequences.min() >= 0 and c.train.sequences.max() < 16

    def test_errors(self):
        with pytest.raises(ValueError):
            gen_corpus(0, 10, 2, 16, 7)
        with pytest.raises(ValueError):
            gen_corpus(0, 0, 2, 16, 32)
        with pytest.raises(ValueError):
            Corpus(np.zeros((1, 3)), "test")

    def test_transition_frequencies(self):
        src = MarkovSource.seeded(16, 9)
        rng = np.random.default_rng(0)
        counts = {}
        prev2, prev1 = 0, 1
        for _ in range(100_000):
            nxt = src.sample_next(prev2, prev1, rng)
            slot = int(np.flatnonzero(src.successors[prev1] == nxt)[0])
            key = prev2 % len(src.probs)
            counts.setdefault(key, np.zeros(len(src.probs)))[slot] += 1
            prev2, prev1 = prev1, nxt
        for key, row in counts.items():
            np.testing.assert_allclose(row / row.sum(), src.slot_probs(key), atol=0.05)


class TestSelectForget:
    def test_all(self):
        c = Corpus(np.arange(20).reshape(10, 2), "train")
        f, rest, idx = select_forget(c, 10, 0)
        assert len(f) == 10 and len(rest) == 0
        np.testing.assert_array_equal(idx, np.arange(10))

    def test_deterministic_and_partition(self):
        c = Corpus(np.arange(40).reshape(20, 2), "train")
        f1, r1, i1 = select_forget(c, 5, 3)
        f2, _, i2 = select_forget(c, 5, 3)
        np.testing.assert_array_equal(i1, i2)
        assert len(f1) + len(r1) == 20
        assert not ({tuple(s) for s in f1} & {tuple(s) for s in r1})

    def test_too_many(self):
        with pytest.raises(ValueError):
            select_forget(Corpus(np.zeros((3, 2)), "train"), 4, 0)

    def test_uniform_selection(self):
        c = Corpus(np.arange(20).reshape(10, 2), "train")
        hits = np.zeros(10)
        trials = 10_000
        for seed in range(trials):
            hits[select_forget(c, 3, seed)[2]] += 1
        p = 0.3
        sigma = np.sqrt(trials * p * (1 - p))
        assert np.all(np.abs(hits - trials * p) < 3 * sigma)
