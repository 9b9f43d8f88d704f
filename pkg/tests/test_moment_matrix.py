from __future__ import annotations

import json

import numpy as np
import pytest

from pap_sos.graph_matrix import IndexSpace, enumerate_shapes
from pap_sos.moment_matrix import (
    EXAMPLE_M,
    EXAMPLE_X,
    MomentMatrix,
    assemble,
    assemble_graph_sum,
    block_psd_certify,
    is_psd,
    min_eigenvalue,
    non_spider_mass,
    nullspace_shift_tests,
)
from pap_sos.pseudocalibration import PseudoExpectation, build_pe, sample_instance


def test_assemble_entries_follow_reduction_rule():
    pe = PseudoExpectation(3, 2, 0, {(): 1.0, (0, 1): 0.2, (1, 2): -0.1, (0, 2): 0.05, (1,): 0.3})
    M = assemble(pe, 2)
    sp = M.space
    i0, i1 = sp.position([0]), sp.position([1])
    assert M.matrix[i0, i0] == pytest.approx(1 / 3)
    assert M.matrix[i0, i1] == pytest.approx(0.2)
    assert M.matrix[sp.position([]), i1] == pytest.approx(0.3)
    assert np.allclose(M.matrix, M.matrix.T)
    with pytest.raises(ValueError):
        assemble(pe, 4)


@pytest.mark.parametrize("n,m,D,T", [(5, 3, 2, 4), (6, 3, 4, 2), (5, 4, 4, 4)])
def test_direct_and_graph_sum_assembly_agree(n, m, D, T):
    inst = sample_instance(n, m, "gaussian", 3)
    A = assemble(build_pe(inst, D, T), D).matrix
    B = assemble_graph_sum(inst, D, T).matrix
    assert np.abs(A - B).max() <= 1e-9 * np.abs(A).max()


def test_boolean_assembly_agree():
    inst = sample_instance(4, 3, "boolean", 3)
    A = assemble(build_pe(inst, 2, 4), 2).matrix
    B = assemble_graph_sum(inst, 2, 4).matrix
    assert np.allclose(A, B, atol=1e-12)


def test_min_eigenvalue_and_psd():
    assert min_eigenvalue(np.diag([3.0, 1.0, 2.0])) == pytest.approx(1.0)
    assert is_psd(np.eye(3))
    assert not is_psd(np.diag([1.0, -1e-3]))
    with pytest.raises(ValueError):
        min_eigenvalue(np.array([[0.0, 1.0], [0.0, 0.0]]))


def test_block_certificate():
    space = IndexSpace.subsets(4, 1)
    eta = 0.5
    M = np.diag([1.0] + [eta ** 2] * 4)
    assert block_psd_certify(M, eta, 2, space)
    M[0, 1:] = M[1:, 0] = 0.4
    assert not block_psd_certify(M, eta, 2, space)
    assert block_psd_certify(np.eye(3), 1.0, 2)


def test_shift_propositions():
    rep = nullspace_shift_tests(100, seed=1)
    assert rep.passed
    assert rep.example_rescaled_psd
    assert np.array_equal(EXAMPLE_M @ EXAMPLE_X, np.zeros(3, dtype=np.int64))


def test_non_spider_mass():
    cat = enumerate_shapes(8, 4, "calL", max_u=2, max_v=2)
    assert non_spider_mass([], 64, 64 ** 1.3, 0.1, 1, 1) == 0
    assert 0 < non_spider_mass(cat, 64, 64 ** 1.3, 0.1, 1, 1) < 1


def test_save_roundtrip(tmp_path):
    pe = build_pe(sample_instance(4, 2, "gaussian", 0), 2, 4)
    M = assemble(pe, 2)
    M.save(str(tmp_path / "mm"), m=2, seed=0)
    raw = np.fromfile(tmp_path / "mm.bin", dtype="<f8").reshape(M.matrix.shape)
    assert np.array_equal(raw, M.matrix)
    meta = json.loads((tmp_path / "mm.json").read_text())
    assert meta["ordering"] == "graded-lex"
    assert isinstance(M, MomentMatrix)
    assert len(M.to_csv().splitlines()) == M.matrix.shape[0]
