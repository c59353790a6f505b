import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_distance, naive_distance

from deskasr.metrics import compute_cer, corpus_error_rate, edit_distance, prf, token_divergence


def test_cer_examples():
    assert compute_cer([1, 2, 3], [1, 2, 3]) == 0
    assert compute_cer(["a", "b", "c"], ["a", "b", "d"]) == pytest.approx(1 / 3)
    assert compute_cer([1], []) == 1
    assert compute_cer([1], [2, 3, 4]) == 3
    with pytest.raises(ValueError):
        compute_cer([], [1])


seqs = st.lists(st.integers(0, 3), max_size=12)


@settings(max_examples=500)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=12), seqs)
def test_cer_matches_oracle(ref, hyp):
    assert compute_cer(ref, hyp) == brute_distance(ref, hyp) / len(ref)


@given(st.lists(st.integers(0, 2), max_size=5), st.lists(st.integers(0, 2), max_size=5))
def test_oracles_agree(a, b):
    assert brute_distance(a, b) == naive_distance(tuple(a), tuple(b)) == edit_distance(a, b)


@given(seqs, seqs, seqs)
def test_edit_distance_metric(a, b, c):
    assert edit_distance(a, b) == edit_distance(b, a)
    assert edit_distance(a, c) <= edit_distance(a, b) + edit_distance(b, c)
    assert abs(len(a) - len(b)) <= edit_distance(a, b) <= max(len(a), len(b))


def test_corpus_rates():
    assert corpus_error_rate([[1, 2], [3, 4]], [[1, 2], [3]]) == 25.0
    with pytest.raises(ValueError):
        corpus_error_rate([[]], [[]])
    assert token_divergence([[1, 2, 3, 4]], [[1, 2, 3, 5]]) == 25.0
    assert prf(3, 1, 1) == pytest.approx((75.0, 75.0, 75.0))
    assert prf(0, 0, 0) == (0.0, 0.0, 0.0)
