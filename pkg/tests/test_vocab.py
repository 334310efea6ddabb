import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmm.core import Tensor, ops
from cmm.model import make_choice_vector
from cmm.vocab import VocabularyTable, allowed_mask, mask_logits, merge_vocab


def table(*sets, total=6):
    return VocabularyTable.from_lists(total, sets)


def test_merge_examples():
    assert merge_vocab(table({1, 2}, {3, 4}), make_choice_vector({0, 1}, 2)) == {1, 2, 3, 4}
    assert merge_vocab(table({1, 2}, {2, 3}), make_choice_vector({0, 1}, 2)) == {1, 2, 3}
    assert merge_vocab(table({1, 2}, {2, 3}), make_choice_vector({0}, 2)) == {1, 2}


def test_table_invariants():
    with pytest.raises(ValueError):
        table({1}, set())
    with pytest.raises(ValueError):
        table({6})
    t = table({0, 5}, {1})
    assert t.blank_id == 6 and t.language_of(5) == [0]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sets(st.integers(0, 9), min_size=1), min_size=2, max_size=5), st.data())
def test_merge_is_monotone(sets, data):
    t = VocabularyTable.from_lists(10, sets)
    n = len(sets)
    small = data.draw(st.sets(st.integers(0, n - 1), min_size=1))
    big = small | data.draw(st.sets(st.integers(0, n - 1)))
    a = merge_vocab(t, make_choice_vector(small, n))
    b = merge_vocab(t, make_choice_vector(big, n))
    assert a <= b and len(b) <= t.total_size


def test_mask_logits_examples(rng):
    logits = rng.normal(size=4)
    np.testing.assert_array_equal(mask_logits(logits, {0, 1, 2}, 3), logits)
    out = mask_logits(logits, {1}, 3)
    assert out[0] == out[2] == ops.MASK_VALUE
    assert out[1] == logits[1] and out[3] == logits[3]
    with pytest.raises(ValueError):
        mask_logits(logits, set(), 3)


def test_masked_mass_is_exactly_zero(rng):
    for _ in range(20):
        logits = rng.normal(scale=30.0, size=(1, 8))
        keep = allowed_mask({0, 4}, 7)
        p = ops.softmax(Tensor(mask_logits(logits, {0, 4}, 7))).data[0]
        assert np.all(p[~keep] == 0.0)
        assert abs(p.sum() - 1.0) < 1e-12


def test_allowed_mask_keeps_blank():
    m = allowed_mask({2}, 4)
    np.testing.assert_array_equal(m, [False, False, True, False, True])
