"""Moment matrices: direct assembly, graph-matrix assembly, PSD checks."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
import scipy.linalg

from .graph_matrix import (HermiteTable, IndexSpace, Shape, enumerate_shapes, lambda_coeff, norm_bound,
                           realize, shape_in_calL)
from .pseudocalibration import Instance, PseudoExpectation

PSD_TOL = 1e-8


@dataclass
class MomentMatrix:
    D: int
    n: int
    matrix: np.ndarray
    space: IndexSpace

    @property
    def eta(self) -> float:
        return 1.0 / math.sqrt(self.n)

    def block(self, k: int, l: int) -> np.ndarray:
        return self.matrix[self.space.block_slice(k), self.space.block_slice(l)]

    def save(self, stem: str, m: int | None = None, seed: int | None = None) -> None:
        np.ascontiguousarray(self.matrix, dtype="<f8").tofile(stem + ".bin")
        meta = {"ordering": "graded-lex", "D": self.D, "n": self.n, "m": m, "seed": seed,
                "shape": list(self.matrix.shape), "index": self.space.describe()}
        with open(stem + ".json", "w") as f:
            json.dump(meta, f)

    def to_csv(self) -> str:
        return "\n".join(",".join(repr(float(x)) for x in row) for row in self.matrix) + "\n"


def assemble(pe: PseudoExpectation, D: int) -> MomentMatrix:
    if pe.D < D:
        raise ValueError("pseudoexpectation degree too small")
    space = IndexSpace.subsets(pe.n, D // 2)
    keys = [k[0] for k in space.keys()]
    N = len(keys)
    M = np.empty((N, N))
    sets = [set(k) for k in keys]
    for a in range(N):
        for b in range(a, N):
            sym = tuple(sorted(sets[a] ^ sets[b]))
            val = pe[sym] * pe.n ** -len(sets[a] & sets[b])
            M[a, b] = M[b, a] = val
    return MomentMatrix(D, pe.n, M, space)


def assemble_graph_sum(instance: Instance, D: int, T: int) -> MomentMatrix:
    n, m = instance.n, instance.m
    space = IndexSpace.subsets(n, D // 2)
    table = HermiteTable(instance.data, instance.setting)
    flt = "calL-bool" if instance.setting.value == "boolean-parity" else "calL"
    catalog = enumerate_shapes(D + T + T // 4, T, flt, max_u=D // 2, max_v=D // 2)
    M = np.zeros((space.size, space.size))
    for shape in catalog:
        lam = lambda_coeff(shape, instance.setting, n)
        if lam:
            M += float(lam) * realize(shape, table, space, space).matrix
    return MomentMatrix(D, n, M, space)


def min_eigenvalue(M) -> float:
    A = M.matrix if isinstance(M, MomentMatrix) else np.asarray(M, dtype=float)
    if not np.allclose(A, A.T, atol=1e-12 * max(1.0, np.abs(A).max())):
        raise ValueError("matrix must be symmetric")
    w, vecs = scipy.linalg.eigh(A, subset_by_index=[0, 0])
    resid = np.linalg.norm(A @ vecs[:, 0] - w[0] * vecs[:, 0])
    if resid > 1e-8 * max(np.linalg.norm(A, 2), 1e-300):
        raise np.linalg.LinAlgError("eigensolver residual too large")
    return float(w[0])


def is_psd(M, tol: float = PSD_TOL) -> bool:
    A = M.matrix if isinstance(M, MomentMatrix) else np.asarray(M, dtype=float)
    return min_eigenvalue(A) >= -tol * np.linalg.norm(A, 2)


def block_psd_certify(M, eta: float, D: int, space: IndexSpace | None = None) -> bool:
    """Sufficient condition: strong diagonal blocks, weak off-diagonal blocks."""
    if isinstance(M, MomentMatrix):
        space = M.space
        M = M.matrix
    if space is None:
        # whole matrix treated as one (0,0) block
        return float(np.linalg.svd(M, compute_uv=False).min()) >= 1 - 1 / (D + 1)
    sizes = sorted(a for a, _ in space.blocks)
    for k in sizes:
        for l in sizes:
            blk = M[space.block_slice(k), space.block_slice(l)]
            if k == l:
                if np.linalg.svd(blk, compute_uv=False).min() < eta ** (2 * k) * (1 - 1 / (D + 1)):
                    return False
            elif np.linalg.norm(blk, 2) > eta ** (k + l) / (D + 1):
                return False
    return True


@dataclass
class ShiftReport:
    trials: int
    scaling_ok: int
    shift_ok: int
    example_null: bool
    example_rescaled_psd: bool
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.scaling_ok == self.trials and self.shift_ok == self.trials and self.example_null


EXAMPLE_M = np.array([[1, 1, 2], [1, 2, 3], [2, 3, 5]], dtype=np.int64)
EXAMPLE_X = np.array([1, 1, -1], dtype=np.int64)


def nullspace_shift_tests(trials: int = 100, seed: int = 0, dim: int = 5) -> ShiftReport:
    """Randomized checks: DMD ⪰ 0 iff M ⪰ 0, and M + c xx^T ⪰ 0 iff M ⪰ 0 when Mx = 0."""
    rng = np.random.default_rng(seed)
    scaling_ok = shift_ok = 0
    failures = []
    for t in range(trials):
        # half PSD, half indefinite, all with a planted null vector x
        x = rng.standard_normal(dim)
        P = np.eye(dim) - np.outer(x, x) / (x @ x)
        G = rng.standard_normal((dim, dim))
        if t % 2:
            M0 = G @ G.T
        else:
            M0 = G + G.T
        M = P @ M0 @ P
        d = rng.uniform(0.2, 3.0, dim) * rng.choice([-1, 1], dim)
        Dm = np.diag(d)
        c = rng.uniform(-2, 5) * (t % 3 != 0)
        psd = is_psd(M, 1e-9)
        if is_psd(Dm @ M @ Dm, 1e-9) == psd:
            scaling_ok += 1
        else:
            failures.append(("scaling", t))
        if c >= 0:
            shifted = is_psd(M + c * np.outer(x, x), 1e-9)
            expect = psd
        else:
            # a negative shift always breaks PSD along x
            shifted = is_psd(M + c * np.outer(x, x), 1e-9)
            expect = False
        if shifted == expect:
            shift_ok += 1
        else:
            failures.append(("shift", t))
    null = bool(np.all(EXAMPLE_M @ EXAMPLE_X == 0))
    return ShiftReport(trials, scaling_ok, shift_ok, null, example_rescaling_check(), failures)


def example_rescaling_check(lams=(0.5, 1.0, 2.0, 3.0), cs=(0.0, 0.5, 1.0, 4.0)) -> bool:
    """The 3x3 example: D^{-1}x stays null for DMD, the closed form of DMD + c D^{-1}xx^T D^{-1}
    matches, PSD-ness never changes, and the normalized upper-left entry depends on c only."""
    M = EXAMPLE_M.astype(float)
    x = EXAMPLE_X.astype(float)
    ok = True
    for lam in lams:
        Dm = np.diag([1.0, 1.0, lam])
        y = np.linalg.solve(Dm, x)
        DMD = Dm @ M @ Dm
        ok &= bool(np.allclose(DMD @ y, 0))
        for c in cs:
            S = DMD + c * np.outer(y, y)
            closed = np.array([
                [1 + c, 1 + c, 2 * lam - c / lam],
                [1 + c, 2 + c, 3 * lam - c / lam],
                [2 * lam - c / lam, 3 * lam - c / lam, 5 * lam ** 2 + c / lam ** 2],
            ])
            ok &= bool(np.allclose(S, closed))
            ok &= is_psd(S, 1e-9)
            d = 1 / np.sqrt(np.diag(S))
            N = S * np.outer(d, d)
            ok &= bool(np.isclose(N[0, 1], math.sqrt(1 + c) / math.sqrt(2 + c)))
    return ok


def non_spider_mass(catalog: Iterable[Shape], n: int, m: float, eps: float, k: int, l: int,
                    log_exponent_budget: float = 0.0) -> float:
    """Σ |λ_α| · bound(α) over non-trivial non-spiders on block (k, l), relative to η^{k+l}."""
    from .spider_web import is_spider

    total = 0.0
    for shape in catalog:
        if len(shape.U) != k or len(shape.V) != l or shape.is_trivial():
            continue
        if not shape_in_calL(shape) or is_spider(shape) is not None:
            continue
        total += abs(float(lambda_coeff(shape, "gaussian", n))) * norm_bound(shape, n, m, log_exponent_budget)
    return total / n ** (-(k + l) / 2)
