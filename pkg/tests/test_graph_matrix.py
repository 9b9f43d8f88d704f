from __future__ import annotations

import itertools
import math
import random
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pap_sos.graph_matrix import (
    CI,
    SQ,
    BudgetExceeded,
    HermiteTable,
    IndexSpace,
    Shape,
    ShapeError,
    composable,
    enumerate_shapes,
    expand_improper,
    lambda_coeff,
    lex_rank,
    min_vertex_separator,
    multiply_decompose,
    norm_bound,
    realize,
    realize_by_labelings,
    shape_in_calL,
    trivial_shape,
)
from pap_sos.hermite_basis import hermite_eval


def brute_realize(shape: Shape, data: np.ndarray, rows: IndexSpace, cols: IndexSpace) -> np.ndarray:
    """Sum over every injective labeling, each ribbon counted aut(shape) times."""
    m, n = data.shape
    M = np.zeros((rows.size, cols.size))
    sq, ci = shape.squares, shape.circles
    for ls in itertools.permutations(range(n), len(sq)):
        smap = dict(zip(sq, ls))
        for lc in itertools.permutations(range(m), len(ci)):
            cmap = dict(zip(ci, lc))
            val = 1.0
            for s, c, l in shape.edges:
                val *= hermite_eval(l, data[cmap[c], smap[s]])
            A = [smap[x[1]] for x in shape.U if x[0] == SQ]
            B = [smap[x[1]] for x in shape.V if x[0] == SQ]
            M[rows.position(A), cols.position(B)] += val
    return M / shape.aut()


def _random_shape(rng: random.Random) -> Shape:
    ns, nc = rng.randint(1, 4), rng.randint(0, 2)
    sq, ci = list(range(ns)), list(range(nc))
    edges = []
    for s in sq:
        for c in ci:
            if rng.random() < 0.5:
                edges.append((s, c, rng.randint(1, 3)))
    U = [(SQ, s) for s in rng.sample(sq, rng.randint(0, min(2, ns)))]
    V = [(SQ, s) for s in rng.sample(sq, rng.randint(0, min(2, ns)))]
    return Shape(tuple(sq), tuple(ci), tuple(U), tuple(V), tuple(edges))


def _relabel(shape: Shape, rng: random.Random) -> Shape:
    sp = list(shape.squares)
    cp = list(shape.circles)
    rng.shuffle(sp)
    rng.shuffle(cp)
    return shape._apply(dict(zip(shape.squares, [x + 10 for x in sp])), dict(zip(shape.circles, [x + 5 for x in cp])))


def test_shape_validation():
    with pytest.raises(ShapeError):
        Shape((0,), (0,), ((SQ, 3),), (), ())
    with pytest.raises(ShapeError):
        Shape((0, 0), (), (), (), ())
    with pytest.raises(ShapeError):
        Shape((0,), (0,), (), (), ((0, 1, 1),))
    s = Shape.build([0, 1], [0], ["s0"], ["s1"], [(0, 0, 1), (1, 0, 1)])
    assert s.num_edges == 2
    assert s.degree((CI, 0)) == 2
    assert Shape.from_json(s.to_json()).key == s.key


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_canonical_key_invariant_under_relabeling(seed):
    rng = random.Random(seed)
    s = _random_shape(rng)
    t = _relabel(s, rng)
    assert s.key == t.key
    assert s.aut() == t.aut()
    assert s.canonical().key == s.key


def test_aut_counts():
    # two W circles hanging off the same square pair
    s = Shape.build([0, 1], [0, 1], ["s0"], ["s1"], [(0, 0, 1), (1, 0, 1), (0, 1, 1), (1, 1, 1)])
    assert s.aut() == 2
    assert trivial_shape(2).aut() == 2
    assert trivial_shape(2).aut(ordered=True) == 1
    assert trivial_shape(2).is_trivial()


def test_catalog_unique_and_filtered():
    cat = enumerate_shapes(8, 4, "calL", max_u=2, max_v=2)
    keys = cat.keys()
    assert len(keys) == len(set(keys)) == 26
    assert all(shape_in_calL(s) for s in cat)
    assert len(enumerate_shapes(8, 3, "calL", max_u=2, max_v=2)) == 3
    with pytest.raises(ValueError):
        enumerate_shapes(4, 2, "nope")


@pytest.mark.parametrize("seed", range(6))
def test_realize_matches_brute_force(seed):
    rng = random.Random(seed)
    data = np.random.default_rng(seed).standard_normal((3, 5))
    space = IndexSpace.subsets(5, 2)
    for _ in range(5):
        s = _random_shape(rng)
        ref = brute_realize(s, data, space, space)
        assert np.allclose(realize(s, data, space, space).matrix, ref, atol=1e-10)
        assert np.allclose(realize_by_labelings(s, data, space, space), ref, atol=1e-10)


def test_two_realizers_agree_on_catalog_sample():
    shapes = enumerate_shapes(6, 3, "all", max_u=2, max_v=2)
    table = HermiteTable(np.random.default_rng(4).standard_normal((4, 6)))
    space = IndexSpace.subsets(6, 2)
    for s in random.Random(1).sample(list(shapes), 80):
        a = realize(s, table, space, space).matrix
        b = realize_by_labelings(s, table, space, space)
        assert np.abs(a - b).max() <= 1e-9 * max(1.0, np.abs(a).max())


def test_realize_transpose():
    rng = random.Random(3)
    data = np.random.default_rng(1).standard_normal((3, 5))
    space = IndexSpace.subsets(5, 2)
    for _ in range(8):
        s = _random_shape(rng)
        assert np.allclose(realize(s.transpose(), data, space, space).matrix, realize(s, data, space, space).matrix.T)


def test_trivial_shape_is_identity_block():
    space = IndexSpace.subsets(4, 2)
    M = realize(trivial_shape(1), np.ones((2, 4)), space, space).matrix
    blk = space.block_slice(1)
    assert np.allclose(M[blk, blk], np.eye(4))
    assert np.allclose(M[space.block_slice(0), :], 0)


def test_lex_rank():
    combos = np.array(list(itertools.combinations(range(6), 3)))
    assert np.array_equal(lex_rank(combos, 6), np.arange(len(combos)))


def test_index_space_positions():
    space = IndexSpace(4, 2, [(1, 1), (0, 0)])
    assert space.size == 8 + 1
    assert space.position([2], [1]) == 5
    assert space.position([]) == 8


def test_ribbon_symmetry_coefficient_two():
    # an improper shape whose doubled edge collapses; two ribbons map onto each realization
    left = Shape.build([0, 1], [0, 1], ["s0"], ["s1"], [(0, 0, 1), (0, 0, 1), (0, 1, 2), (1, 0, 2), (1, 1, 2)])
    ex = dict((g.key, c) for g, c in expand_improper(left))
    assert 2 in ex.values()
    data = np.random.default_rng(0).standard_normal((4, 5))
    space = IndexSpace.subsets(5, 1)
    lhs = realize(left, data, space, space).matrix
    rhs = sum(float(c) * realize(g, data, space, space).matrix for g, c in expand_improper(left))
    assert np.allclose(lhs, rhs)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_expand_improper_pointwise(seed):
    rng = random.Random(seed)
    s = _random_shape(rng)
    if not s.circles:
        return
    extra = [(rng.choice(s.squares), rng.choice(s.circles), rng.randint(1, 2)) for _ in range(2)]
    imp = Shape(s.squares, s.circles, s.U, s.V, s.edges + tuple(extra))
    data = np.random.default_rng(seed).standard_normal((3, 4))
    space = IndexSpace.subsets(4, 2)
    lhs = realize(imp, data, space, space).matrix
    rhs = sum(float(c) * realize(g, data, space, space).matrix for g, c in expand_improper(imp))
    assert np.allclose(lhs, rhs, atol=1e-9)
    assert all(g.is_proper() for g, _ in expand_improper(imp))


def test_multiply_decompose_random_pairs_from_full_catalog():
    import sys
    from pathlib import Path

    sys.path.insert(0, str(Path(__file__).parent))
    from catalog_products import catalog, check_products

    shapes = catalog()
    rng = random.Random(0)
    pairs = [(A, B) for A in shapes for B in shapes if composable(A, B)]
    res = check_products(pairs=rng.sample(pairs, 200))
    assert res["worst"] <= 1e-9


def test_multiply_requires_composable():
    a = trivial_shape(1)
    b = trivial_shape(2)
    with pytest.raises(ShapeError):
        multiply_decompose(a, b)


def test_lambda_coeff_values():
    trivial = trivial_shape(1)
    assert lambda_coeff(trivial, "gaussian", 9) == Fraction(1, 9)
    star = Shape.build([0, 1, 2, 3], [0], ["s0", "s1"], ["s2", "s3"], [(i, 0, 1) for i in range(4)])
    # h_4(1) = -2, |U|+|V|+|E| = 8
    assert lambda_coeff(star, "gaussian", 4) == Fraction(-2, 4 ** 4)
    assert lambda_coeff(Shape.build([0], [], ["s0"], [], []), "gaussian", 4) == 0


def test_separator_and_bound():
    star = Shape.build([0, 1, 2, 3], [0], ["s0", "s1"], ["s2", "s3"], [(i, 0, 1) for i in range(4)])
    sep, w = min_vertex_separator(star, 64, 64 ** 1.3)
    assert sep == ((CI, 0),)
    assert w == pytest.approx(1.3)
    assert norm_bound(star, 64, 64 ** 1.3) > norm_bound(star, 64, 64 ** 1.3, log_exponent_budget=0)


def test_budget_exceeded():
    s = Shape.build([0, 1], [], ["s0", "s1"], ["s0", "s1"], [])
    with pytest.raises(BudgetExceeded):
        realize(s, np.ones((1, 2000)), work_budget=10)


def test_spectral_norm_matches_svd():
    from pap_sos.graph_matrix import spectral_norm

    rng = np.random.default_rng(2)
    for shape in [(30, 20), (700, 650)]:
        M = rng.standard_normal(shape)
        assert spectral_norm(M) == pytest.approx(np.linalg.norm(M, 2), rel=1e-8)
    assert spectral_norm(np.zeros((0, 3))) == 0.0
