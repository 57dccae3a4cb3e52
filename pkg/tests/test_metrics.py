import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import ScriptedModel, el_n_loop, ma_loop, ngram_overlap_loop
from unlearnlab import metrics as mt
from unlearnlab import model as md
from unlearnlab.metrics import MetricReport, SetStats


def echo_model(vocab=10):
    # repeats the token two back: a short-period memorizer
    return ScriptedModel(lambda p: p[-2] if len(p) > 1 else (p[-1] + 1) % vocab, vocab)


def counter_model(vocab=10):
    return ScriptedModel(lambda p: (p[-1] + 1) % vocab, vocab)


HAND = [
    # (a, b, n, expected)
    ([0, 1, 2, 3, 4, 5, 6, 7, 8, 9], [0, 1, 2, 3, 4, 5, 6, 7, 8, 9], 4, 1.0),
    ([0, 1, 2, 3, 4, 5, 6, 7, 8, 9], [9, 8, 7, 6, 5, 4, 3, 2, 1, 0], 2, 0.0),
    ([1, 1, 1, 1, 1, 1, 1, 1, 1, 1], [2, 1, 1, 3, 3, 3, 3, 3, 3, 3], 2, 1.0),
    ([0, 1, 2, 3, 4, 0, 1, 2, 7, 7], [5, 0, 1, 2, 6, 6, 6, 6, 6, 6], 3, 2 / 8),
    ([3, 4, 5, 3, 4, 5, 9, 9, 9, 9], [3, 4, 0, 0, 0, 0, 0, 0, 0, 0], 2, 2 / 9),
]


class TestNgramOverlap:
    @pytest.mark.parametrize("a,b,n,expected", HAND)
    def test_hand_cases(self, a, b, n, expected):
        assert mt.ngram_overlap(a, b, n) == expected
        assert ngram_overlap_loop(a, b, n) == expected

    def test_short_sequences(self):
        assert mt.ngram_overlap([1, 2], [1, 2], 3) == 0.0
        with pytest.raises(ValueError):
            mt.ngram_overlap([1], [1], 0)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(0, 4), min_size=0, max_size=12),
           st.lists(st.integers(0, 4), min_size=0, max_size=12), st.integers(1, 4))
    def test_property_matches_loop(self, a, b, n):
        v = mt.ngram_overlap(a, b, n)
        assert v == ngram_overlap_loop(a, b, n)
        assert 0.0 <= v <= 1.0


class TestElMa:
    @pytest.mark.parametrize("make", [echo_model, counter_model])
    def test_scripted_matches_loop(self, make):
        m = make()
        x = [3, 4, 3, 4, 5, 6, 7, 1, 2, 3]
        for n in (1, 2, 3, 4):
            assert mt.el_n(m, None, x, n) == el_n_loop(m.next_token, x, n)
        assert mt.ma(m, None, x) == ma_loop(m.next_token, x)

    def test_counter_frozen(self):
        x = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9]
        m = counter_model()
        assert mt.el_n(m, None, x, 4) == 1.0
        assert mt.ma(m, None, x) == 1.0
        assert mt.ma(m, None, [0, 1, 5, 6, 0, 0, 0, 0, 0, 0]) == 2 / 9

    def test_echo_frozen(self):
        # echo continues "3 4" as 3 4 3 4 ...
        x = [3, 4, 3, 4, 3, 4, 0, 0, 0, 0]
        assert mt.el_n(echo_model(), None, x, 2) == el_n_loop(echo_model().next_token, x, 2)
        # hits at t = 1..5 and 8, 9 (the trailing zeros echo themselves)
        assert mt.ma(echo_model(), None, x) == 7 / 9

    def test_too_short(self):
        with pytest.raises(ValueError):
            mt.el_n(counter_model(), None, [1, 2, 3], 3)
        with pytest.raises(ValueError):
            mt.ma(counter_model(), None, [1])

    def test_transformer_matches_loop(self, tiny_params, rng):
        x = rng.integers(0, 23, 10)

        def nxt(p):
            return int(np.argmax(md.forward(tiny_params, None, np.array(p))[-1]))

        assert mt.el_n(tiny_params, None, x, 3) == el_n_loop(nxt, x, 3)
        assert mt.ma(tiny_params, None, x) == ma_loop(nxt, x)

    def test_set_stats_batch_path_equals_single(self, tiny_params, rng):
        xs = rng.integers(0, 23, (5, 10))
        s = mt.set_stats(tiny_params, None, xs, 2)
        assert s.el == pytest.approx(np.mean([mt.el_n(tiny_params, None, x, 2) for x in xs]), abs=1e-15)
        assert s.ma == pytest.approx(np.mean([mt.ma(tiny_params, None, x) for x in xs]), abs=1e-15)

    def test_threads_do_not_change_results(self, tiny_params, rng, monkeypatch):
        xs = rng.integers(0, 23, (10, 10))
        one = mt.set_stats(tiny_params, None, xs, 2)
        monkeypatch.setenv("ULAB_THREADS", "3")
        assert mt.worker_count() == 3
        assert mt.set_stats(tiny_params, None, xs, 2) == one


class TestPerplexity:
    def test_uniform_model(self):
        m = ScriptedModel(lambda p: 0, 4)
        m.logits = lambda x: np.zeros((len(x), 4))
        assert mt.perplexity(m, None, [[0, 1, 2], [3, 2, 1, 0]]) == pytest.approx(4.0, rel=1e-14)

    def test_token_weighted(self):
        # two sequences with different lengths: mean over tokens, not sequences
        logits = {3: np.log([[0.5, 0.5]] * 3), 2: np.log([[0.9, 0.1]] * 2)}
        m = ScriptedModel(lambda p: 0, 2)
        m.logits = lambda x: logits[len(x)]
        nll = (2 * math.log(2) - math.log(0.9)) / 3
        assert mt.perplexity(m, None, [[0, 0, 0], [0, 0]]) == pytest.approx(math.exp(nll), rel=1e-14)

    def test_empty(self):
        with pytest.raises(ValueError):
            mt.perplexity(counter_model(), None, [])


class TestStopping:
    @pytest.mark.parametrize("el,ma,expected", [
        (0.1, 0.2, True),    # both at or below
        (0.3, 0.2, False),   # EL above
        (0.1, 0.5, False),   # MA above
        (0.3, 0.5, False),   # both above
    ])
    def test_quadrants(self, el, ma, expected):
        assert mt.stopping_criterion(SetStats(el, ma, 4), SetStats(0.2, 0.4, 4)) is expected

    def test_ties_count_as_unlearned(self):
        assert mt.stopping_criterion(SetStats(0.2, 0.4, 4), SetStats(0.2, 0.4, 4))

    def test_order_mismatch(self):
        with pytest.raises(ValueError):
            mt.stopping_criterion(SetStats(0, 0, 4), SetStats(0, 0, 10))

    def test_report_consistency(self):
        MetricReport(1, 4, 0.1, 0.2, 3.0, 4.0, 0.2, 0.3, True)
        with pytest.raises(ValueError):
            MetricReport(1, 4, 0.1, 0.2, 3.0, 4.0, 0.2, 0.3, False)
