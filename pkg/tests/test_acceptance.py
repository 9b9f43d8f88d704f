"""Acceptance criteria 1-12.

Each test records one PASS/FAIL line per criterion (or per part of a criterion) and
then asserts it, so a failing criterion fails its test.  The summary lines are printed
at the end of the pytest run.  Tests marked ``slow`` hold the large-n and statistical
parts; select them with ``-m slow`` or skip them with ``-m "not slow"``.
"""
from __future__ import annotations

import itertools
import math
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from conftest import VERDICTS
from pap_sos import spider_web as sw
from pap_sos.cli import RunConfig, psd_trial
from pap_sos.constraint_projection import (
    build_Nk,
    build_Q,
    project,
    projector_error,
    qq_min_structured,
    qq_spectrum,
    verify_annihilation,
)
from pap_sos.graph_matrix import (
    HermiteTable,
    Shape,
    enumerate_shapes,
    expand_improper,
    norm_bound,
    realize,
    spectral_norm,
    trivial_shape,
)
from pap_sos.hermite_basis import (
    CellMultiIndex,
    coefficient_bound,
    hermite_at_one,
    hermite_eval,
    hermite_matrix,
    hermite_one_bound_check,
    linearize_product,
)
from pap_sos.moment_matrix import EXAMPLE_M, EXAMPLE_X, assemble, assemble_graph_sum, nullspace_shift_tests
from pap_sos.pseudocalibration import (
    boolean_planted_oracle,
    build_pe,
    enumerate_alphas,
    odd_columns,
    planted_fourier_coeff,
    sample_instance,
    sample_planted,
    truncation_window_check,
)
from pap_sos.sk_pipeline import run_sk
from pap_sos.slice_moments import e_coeff, e_scaled, identity_lhs_scaled, moment_bound, slice_moment_bruteforce

sys.path.insert(0, str(Path(__file__).parent))


def record(k: int, ok: bool, detail: str) -> None:
    ok = bool(ok)
    VERDICTS.setdefault(k, []).append((ok, detail))
    print(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, f"criterion {k}: {detail}"


def _integer_partitions(total: int, largest: int | None = None):
    largest = total if largest is None else largest
    if total == 0:
        yield ()
        return
    for first in range(min(total, largest), 0, -1):
        for rest in _integer_partitions(total - first, first):
            yield (first,) + rest


def _label_multisets(max_total: int):
    for total in range(1, max_total + 1):
        yield from _integer_partitions(total)


# ---------------------------------------------------------------- 1


def test_criterion_01_slice_moments():
    t0 = time.time()
    e2 = all(e_scaled(n, 2) == 0 for n in range(2, 65))
    exact = ident = bound = True
    checked = 0
    for n in (4, 9, 16):
        # (n)_k vanishes past k = n, so n = 4 stops at k = 4
        for k in range(0, min(6, n) + 1):
            e = e_coeff(n, k)
            exact &= e == slice_moment_bruteforce(n, k)
            ident &= identity_lhs_scaled(n, k) == Fraction(n) ** k
            if k:
                bound &= abs(float(e)) <= moment_bound(n, k)
            checked += 1
    # the bound over a wider range of even k and square n
    for n in (25, 36, 49, 64):
        for k in range(1, 9):
            bound &= abs(float(e_scaled(n, k)) * n ** (-k / 2)) <= moment_bound(n, k)
    secs = time.time() - t0
    ok = e2 and exact and ident and bound and secs < 60
    record(1, ok, f"e2=0:{e2} exact:{exact} identity:{ident} bound:{bound} ({checked} (n,k) pairs, {secs:.1f}s)")


# ---------------------------------------------------------------- 2


def test_criterion_02_hermite_algebra():
    t0 = time.time()
    h2 = hermite_at_one(2) == 0
    table = hermite_one_bound_check(20)
    points = [Fraction(p, q) for p, q in itertools.product(range(-2, 3), range(1, 6))]
    assert len(points) == 25
    pointwise = coeff = True
    count = 0
    for labels in _label_multisets(12):
        lc = linearize_product(labels)
        cb = coefficient_bound(labels)
        coeff &= all(abs(c) <= cb for _, c in lc)
        for x in points:
            pointwise &= lc.evaluate(x) == math.prod(hermite_eval(l, x) for l in labels)
        count += 1
    secs = time.time() - t0
    ok = h2 and table and pointwise and coeff and secs < 60
    record(2, ok, f"h2(1)=0:{h2} |h_k(1)|<=k^k:{table} linearization:{pointwise} "
                  f"coefficient bound:{coeff} ({count} label multisets x 25 points, {secs:.1f}s)")


# ---------------------------------------------------------------- 3


def test_criterion_03_boolean_oracle():
    n, m, D, T = 4, 2, 2, 3
    t0 = time.time()
    formula, oracle = {}, {}
    for alpha in enumerate_alphas(n, m, T, binary=True):
        I = odd_columns(alpha)
        if len(I) > D:
            continue
        formula[(I, alpha)] = planted_fourier_coeff(I, alpha, n, m, "boolean")
        oracle[(I, alpha)] = boolean_planted_oracle(n, m, I, alpha)
    coeff_ok = formula == oracle
    # Ẽ[v^I](d) = Σ_α c(I, α) χ_α(d) for every d in {±1}^{m x n}, in exact arithmetic
    cells = [(u, i) for u in range(m) for i in range(n)]
    by_I: dict = {}
    for (I, alpha), c in oracle.items():
        by_I.setdefault(I, []).append((alpha, c, formula[(I, alpha)]))
    values_ok = True
    evaluated = 0
    for signs in itertools.product((1, -1), repeat=len(cells)):
        d = dict(zip(cells, signs))
        for I, terms in by_I.items():
            ex = sum((c * math.prod(d[cell] for cell in alpha.cells) for alpha, c, _ in terms), Fraction(0))
            fo = sum((f * math.prod(d[cell] for cell in alpha.cells) for alpha, _, f in terms), Fraction(0))
            values_ok &= ex == fo
            evaluated += 1
    # the library's floating-point Ẽ agrees with the exact sums
    float_ok = True
    for seed in range(3):
        inst = sample_instance(n, m, "boolean", seed)
        pe = build_pe(inst, D, T)
        d = {(u, i): int(inst.data[u, i]) for u, i in cells}
        for I, terms in by_I.items():
            ex = sum((c * math.prod(d[cell] for cell in alpha.cells) for alpha, c, _ in terms), Fraction(0))
            float_ok &= abs(pe[I] - float(ex)) <= 1e-12
    secs = time.time() - t0
    ok = coeff_ok and values_ok and float_ok and secs < 300
    record(3, ok, f"boolean n=4 m=2 D=2 T=3: {len(oracle)} coefficients equal:{coeff_ok}, "
                  f"{evaluated} exact Ẽ values equal:{values_ok}, build_pe agrees:{float_ok} ({secs:.1f}s)")


def test_criterion_03_gaussian_monte_carlo():
    n, samples = 3, 10 ** 6
    t0 = time.time()
    ps = sample_planted(n, samples, "gaussian", 0)
    v = ps.v
    H = hermite_matrix(ps.instance.data, 4)
    worst = 0.0
    tested = 0
    for total in range(1, 5):
        for combo in itertools.combinations_with_replacement(range(n), total):
            alpha = CellMultiIndex({(0, i): combo.count(i) for i in set(combo)})
            I = odd_columns(alpha)
            exact = float(planted_fourier_coeff(I, alpha, n, 1) * alpha.factorial())
            # v^I h_α(d_u) is invariant under the planted sign flips, so one v suffices
            x = np.prod([v[i] for i in I]) * np.prod([H[c][:, i] for (_, i), c in alpha.cells.items()], axis=0)
            se = x.std() / math.sqrt(samples)
            z = abs(x.mean() - exact) / se if se > 0 else (0.0 if x.mean() == exact else math.inf)
            worst = max(worst, z)
            tested += 1
    secs = time.time() - t0
    ok = worst <= 3 and secs < 300
    record(3, ok, f"gaussian n=3 Monte Carlo, 10^6 samples: {tested} multi-indices with |α_u|<=4, "
                  f"worst |z|={worst:.2f} ({secs:.1f}s)")


# ---------------------------------------------------------------- 4


def test_criterion_04_truncation_window():
    n, m, D = 3, 2, 2
    reps = {T: truncation_window_check(n, m, D, T, "gaussian") for T in (2, 3, 4)}
    window = reps[4].in_window and all(2 <= s <= 6 for s in reps[4].support_sizes)
    l2 = [reps[T].l2 for T in (2, 3, 4)]
    decreasing = all(b < a for a, b in zip(l2, l2[1:]))
    record(4, window and decreasing,
           f"support sizes at T=4: {reps[4].support_sizes} in [2,6]:{window}; "
           f"residual l2 over T=2,3,4: {', '.join(f'{x:.4f}' for x in l2)} strictly decreasing:{decreasing}")


# ---------------------------------------------------------------- 5


def test_criterion_05_assembly_and_ribbon_symmetry():
    inst = sample_instance(8, 6, "gaussian", 0)
    A = assemble(build_pe(inst, 4, 4), 4).matrix
    B = assemble_graph_sum(inst, 4, 4).matrix
    rel = float(np.abs(A - B).max() / np.abs(A).max())
    left = Shape.build([0, 1], [0, 1], ["s0"], ["s1"], [(0, 0, 1), (0, 0, 1), (0, 1, 2), (1, 0, 2), (1, 1, 2)])
    terms = expand_improper(left)
    has_two = any(c == 2 for _, c in terms)
    data = np.random.default_rng(0).standard_normal((4, 6))
    table = HermiteTable(data)
    from pap_sos.graph_matrix import IndexSpace

    space = IndexSpace.subsets(6, 1)
    lhs = realize(left, table, space, space).matrix
    rhs = sum(float(c) * realize(g, table, space, space).matrix for g, c in terms)
    sym_err = float(np.abs(lhs - rhs).max() / np.abs(lhs).max())
    ok = rel <= 1e-9 and has_two and sym_err <= 1e-9
    record(5, ok, f"assemble vs graph sum (n=8 m=6 D=4 T=4) rel diff {rel:.2e}; "
                  f"ribbon symmetry coefficient 2 present:{has_two}, entrywise err {sym_err:.1e}")


@pytest.mark.slow
def test_criterion_05_full_catalog_products():
    from catalog_products import catalog, check_products

    t0 = time.time()
    shapes = catalog(3)
    res = check_products(n=6, m=4, shapes=shapes)
    secs = time.time() - t0
    ok = res["worst"] <= 1e-9
    record(5, ok, f"multiply_decompose + expand_improper over all {res['pairs']} composable pairs of "
                  f"{len(shapes)} shapes (<=3 edges, n=6 m=4): worst rel err {res['worst']:.1e} ({secs:.0f}s)")


# ---------------------------------------------------------------- 6


def test_criterion_06_constraint_machinery():
    t0 = time.time()
    inst = sample_instance(8, 6, "gaussian", 0)
    pe = build_pe(inst, 4, 4)
    cm = build_Q(inst, 4)
    pr = project(pe, cm)
    ann = {k: verify_annihilation(pr.pe, k, inst, reference=pe) for k in range(2, 5)}
    perr = projector_error(cm)
    nk = {}
    for k, D in ((4, 4), (5, 6)):
        cmD = cm if D == 4 else build_Q(inst, D)
        N = build_Nk(k, inst, D).matrix
        nk[k] = float(np.linalg.norm(cmD.Q.T @ N) / (cmD.norm * np.linalg.norm(N)))
    secs = time.time() - t0
    ok = (pr.relative_residual <= 1e-8 and all(v <= 1e-6 for v in ann.values()) and perr <= 1e-8
          and all(v <= 1e-8 for v in nk.values()) and secs < 600)
    record(6, ok, f"n=8 m=6 D=4: ‖QẼ'‖ rel {pr.relative_residual:.1e} (collapsed={pr.collapsed}); "
                  f"annihilation max {max(ann.values()):.1e}; projector err {perr:.1e}; "
                  f"L4N4 {nk[4]:.1e}, L5N5 {nk[5]:.1e} ({secs:.1f}s)")


# ---------------------------------------------------------------- 7


@pytest.mark.slow
def test_criterion_07_qq_spectrum():
    seeds = range(20)
    t0 = time.time()
    small = [qq_spectrum(sample_instance(20, 20, "gaussian", s), 4).ratio for s in seeds]
    t1 = time.time()
    # at n = 80 the dense matrix is out of reach; Ritz values bound the minimum from above
    big = [qq_min_structured(sample_instance(80, 80, "gaussian", s).data, odd=False, maxiter=12).even_min / 80 ** 2
           for s in seeds]
    t2 = time.time()
    in_window = all(1 <= r <= 3 for r in big)
    spread_small, spread_big = float(np.std(small)), float(np.std(big))
    shrinks = spread_big < spread_small
    record(7, in_window and shrinks,
           f"n=20 exact λ_min/n² in [{min(small):.4f}, {max(small):.4f}] sd {spread_small:.4f} ({t1 - t0:.0f}s); "
           f"n=80 upper bounds in [{min(big):.4f}, {max(big):.4f}] sd {spread_big:.4f} ({t2 - t1:.0f}s); "
           f"in [1,3]:{in_window} spread shrinks:{shrinks}")


# ---------------------------------------------------------------- 8


@pytest.mark.slow
def test_criterion_08_norm_bounds():
    n = 64
    m = math.ceil(n ** 1.3)
    catalog = enumerate_shapes(8, 4, "calL", max_u=2, max_v=2)
    t0 = time.time()
    tables = [HermiteTable(sample_instance(n, m, "gaussian", s).data) for s in range(50)]
    worst_frac, worst_ratio, bare_ratio = 1.0, 0.0, 0.0
    for shape in catalog:
        bound = norm_bound(shape, n, m)
        norms = [spectral_norm(realize(shape, t).matrix) for t in tables]
        worst_frac = min(worst_frac, sum(x <= bound for x in norms) / len(norms))
        worst_ratio = max(worst_ratio, max(norms) / bound)
        # informational: the same comparison without the polylog prefactor
        bare_ratio = max(bare_ratio, max(norms) / norm_bound(shape, n, m, log_exponent_budget=0))
    secs = time.time() - t0
    record(8, worst_frac >= 0.95,
           f"{len(catalog)} calL shapes, n=64 m={m}, 50 draws: worst fraction within bound {worst_frac:.2f}, "
           f"max ‖M‖/bound {worst_ratio:.3f}, without log prefactor {bare_ratio:.3f} ({secs:.0f}s)")


# ---------------------------------------------------------------- 9


def test_criterion_09_spider_webs():
    catalog = enumerate_shapes(8, 4, "calL", max_u=2, max_v=2)
    spiders = [s for s in catalog if sw.is_spider(s) is not None]
    webs_ok = True
    for s in spiders:
        chk = sw.build_web(s).check()
        webs_ok &= chk["derivation_ok"] and chk["parents_ok"] and chk["squares_decrease"] and chk["root_value_one"]
    decomposition = {s: Fraction(1, k + 2) for k, s in enumerate(catalog)}
    decomposition[trivial_shape(1)] = Fraction(3)
    decomposition[trivial_shape(2)] = Fraction(-5, 7)
    killed = sw.kill_spiders(decomposition)
    spider_free = all(sw.is_spider(s) is None for s in killed)
    trivial = {s.key: c for s, c in killed.items() if s.is_trivial()}
    trivial_ok = (trivial.get(trivial_shape(1).canonical().key) == sw.NPoly.const(3)
                  and trivial.get(trivial_shape(2).canonical().key) == sw.NPoly.const(Fraction(-5, 7)))
    inst = sample_instance(8, 2, "gaussian", 0)
    pr = project(build_pe(inst, 4, 4), build_Q(inst, 4), normalize_after=True)
    M = assemble(pr.pe, 4)
    quad = max(sw.web_quadratic_check(sw.build_web(s), inst, M.matrix, M.space, probes=20) for s in spiders)
    ok = bool(spiders) and webs_ok and spider_free and trivial_ok and quad <= 1e-6
    record(9, ok, f"{len(spiders)} spiders: web invariants:{webs_ok}; kill_spiders spider-free:{spider_free}, "
                  f"trivial coefficients unchanged:{trivial_ok}; quadratic-form check {quad:.1e} at n=8")


# ---------------------------------------------------------------- 10


def test_criterion_10_psd_harness():
    t0 = time.time()
    counts, worst = {}, {}
    for n in (16, 25):
        seeds = RunConfig("psd", n=n, trials=20, seed=0).trial_seeds()
        trials = [psd_trial(n, n, 2, 4, s) for s in seeds]
        counts[n] = sum(t["psd"] for t in trials)
        worst[n] = min(t.get("relative_min", -math.inf) for t in trials)
    # D = 4 is exploratory: it must run and report, PSD-ness is not asserted
    exploratory = psd_trial(16, 16, 4, 4, 0)
    reported = exploratory["status"] == "degenerate" or math.isfinite(exploratory["min_eigenvalue"])
    secs = time.time() - t0
    ok = all(c >= 18 for c in counts.values()) and reported
    record(10, ok, f"PSD trials n=16: {counts[16]}/20 (worst λ_min/‖M‖ {worst[16]:.3f}), "
                   f"n=25: {counts[25]}/20 (worst {worst[25]:.1e}); D=4 exploratory n=16 λ_min/‖M‖ "
                   f"{exploratory.get('relative_min', float('nan')):.3f} reported:{reported} "
                   f"({secs:.0f}s)")


# ---------------------------------------------------------------- 11


def test_criterion_11_sk_pipeline():
    rep = run_sk(400, seed=0)
    n = rep.n
    norm_ok = abs(rep.normalized_norm - 1) <= 1e-6
    chain = rep.objective >= rep.lambda_p * n - abs(rep.lambda_min) * (n - rep.normalized_norm * n) - 1e-6 * n ** 2
    lam = rep.lambda_max / math.sqrt(n)
    ok = norm_ok and chain and 1.7 <= lam <= 2.3 and rep.seconds < 300
    record(11, ok, f"n=400 p={rep.p}: (1/n)Ẽ[bᵀΠb]={rep.normalized_norm:.9f}; objective {rep.objective:.1f} "
                   f">= chain {rep.chain:.1f}:{chain}; λ_max/√n={lam:.3f}; λ_p/√n={rep.lambda_p / math.sqrt(n):.3f} "
                   f"({rep.seconds:.1f}s)")


# ---------------------------------------------------------------- 12


def test_criterion_12_shift_propositions():
    rep = nullspace_shift_tests(100, seed=0)
    null = np.array_equal(EXAMPLE_M @ EXAMPLE_X, np.zeros(3, dtype=EXAMPLE_M.dtype))
    record(12, rep.passed and null, f"scaling and nullspace propositions over 100 trials:{rep.passed}; "
                                    f"M x = 0 exactly:{null}")
