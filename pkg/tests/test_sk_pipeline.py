from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pap_sos import sk_pipeline as sk
from pap_sos.pseudocalibration import PseudoExpectation


def test_goe_symmetric_and_seeded():
    a = sk.sample_goe(30, 5)
    assert np.array_equal(a.W, a.W.T)
    assert np.array_equal(a.W, sk.sample_goe(30, 5).W)
    # off-diagonal variance 1, diagonal variance 2
    big = sk.sample_goe(400, 0).W
    off = big[np.triu_indices(400, 1)]
    assert off.var() == pytest.approx(1.0, rel=0.02)
    assert np.diag(big).var() == pytest.approx(2.0, rel=0.2)
    with pytest.raises(ValueError):
        sk.sample_goe(1)


def test_semicircle_quantile():
    assert sk.semicircle_quantile(0.5) == pytest.approx(0.0, abs=1e-12)
    assert sk.semicircle_quantile(1e-9) == pytest.approx(2.0, abs=1e-3)
    assert sk.semicircle_quantile(0.25) == -sk.semicircle_quantile(0.75)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 0.99))
def test_semicircle_quantile_tail_mass(frac):
    from scipy.integrate import quad

    t = sk.semicircle_quantile(frac)
    mass, _ = quad(lambda x: math.sqrt(4 - x * x) / (2 * math.pi), t, 2)
    assert mass == pytest.approx(frac, abs=1e-8)


def test_pbv_columns_are_scaled_orthonormal():
    goe = sk.sample_goe(60, 2)
    pbv = sk.pbv_from_eigenspace(goe, 8, seed=2)
    # columns of A are √n times orthonormal vectors
    assert np.allclose(pbv.A.T @ pbv.A, 60 * np.eye(8))
    assert np.allclose(pbv.Pi @ pbv.Pi, pbv.Pi)
    assert np.trace(pbv.Pi) == pytest.approx(8)
    assert pbv.lambda_max >= pbv.lambda_p >= pbv.lambda_min
    with pytest.raises(ValueError):
        sk.pbv_from_eigenspace(goe, 0)


def test_rotation_leaves_projection_unchanged():
    goe = sk.sample_goe(40, 1)
    a = sk.pbv_from_eigenspace(goe, 5, seed=1)
    b = sk.pbv_from_eigenspace(goe, 5, rotate=False)
    assert np.allclose(a.A @ a.A.T, b.A @ b.A.T)


def test_pushforward_preserves_constraint():
    p = 3
    A = np.array([[1.0, 1.0, 1.0], [1.0, -1.0, 1.0]])
    # v uniform on {±1/√3}^3: E[v_i v_j] = 0, so <v, d_u>^2 has mean |d_u|^2 / 3 = 1
    pe = PseudoExpectation(p, 2, 0, {(): 1.0})
    pushed = sk.pushforward_pe(pe, A)
    assert np.allclose(np.diag(pushed.second), 1.0)
    assert pushed.second[0, 1] == pytest.approx(1 / 3)
    bad = PseudoExpectation(p, 2, 0, {(): 1.0, (0, 1): 0.3})
    with pytest.raises(ValueError):
        sk.pushforward_pe(bad, A)
    mix = pushed.combine(pushed, 0.3)
    assert np.allclose(mix.second, pushed.second)


def test_small_run_certificate_chain():
    rep = sk.run_sk(60, seed=3)
    assert rep.p == math.ceil(60 ** 0.67)
    assert rep.normalized_norm == pytest.approx(1.0, abs=1e-6)
    assert rep.chain_ok
    assert rep.constraint_residual <= 1e-8
    js = rep.to_json()
    assert js["seeds"] == [3]
    assert js["semicircle_lambda_p"] > 0
    with pytest.raises(NotImplementedError):
        sk.run_sk(20, D=4)
