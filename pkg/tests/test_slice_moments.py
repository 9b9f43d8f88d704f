from __future__ import annotations

from fractions import Fraction
from itertools import combinations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from pap_sos.slice_moments import (
    Partition,
    SliceMomentTable,
    UnsupportedInstance,
    e_coeff,
    e_float,
    e_scaled,
    identity_lhs_scaled,
    moment_bound,
    partitions,
    slice_moment_bruteforce,
)


def _naive(n, root, k):
    # average of x_1...x_k over the slice, straight from the definition
    neg = (n - root) // 2
    vals = []
    for S in combinations(range(n), neg):
        vals.append((-1) ** sum(1 for i in S if i < k))
    return Fraction(sum(vals), len(vals))


@pytest.mark.parametrize("n,root", [(4, 2), (9, 3), (16, 4)])
def test_bruteforce_against_definition(n, root):
    for k in range(0, min(n, 6) + 1):
        assert slice_moment_bruteforce(n, k) == _naive(n, root, k)


def test_known_values():
    assert e_coeff(4, 1) == Fraction(1, 2)
    assert e_coeff(9, 2) == 0
    assert e_coeff(16, 2) == 0
    assert e_coeff(4, 0) == 1


def test_partitions_count():
    assert [len(partitions(k)) for k in range(8)] == [1, 1, 2, 3, 5, 7, 11, 15]
    assert Partition((1, 3, 2)).parts == (3, 2, 1)
    assert Partition((3, 1)).transpose().parts == (2, 1, 1)


@given(st.integers(2, 40))
def test_e2_vanishes(n):
    assert e_scaled(n, 2) == 0


def test_odd_k_needs_square_n():
    with pytest.raises(ValueError):
        e_coeff(5, 3)
    assert e_float(5, 3) == pytest.approx(float(e_scaled(5, 3)) * 5 ** -1.5)
    with pytest.raises(UnsupportedInstance):
        slice_moment_bruteforce(5, 2)


@pytest.mark.parametrize("n", [4, 5, 9, 12, 16, 25])
def test_identity_exact(n):
    for k in range(0, min(n, 6) + 1):
        assert identity_lhs_scaled(n, k) == Fraction(n) ** k


def test_large_n_closed_form_branch():
    # n = 25 uses the binomial sum
    for k in range(7):
        assert e_coeff(25, k) == slice_moment_bruteforce(25, k)


def test_table_check():
    t = SliceMomentTable.build(16, 6)
    assert t.check()
    assert all(abs(float(v)) <= moment_bound(16, k) for k, v in t.values.items() if k)
