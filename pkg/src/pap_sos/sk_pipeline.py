"""Sherrington–Kirkpatrick demo: GOE disorder, top eigenspace, planted boolean vector instance,
pseudoexpectation pushforward and the objective lower-bound chain."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize
import scipy.stats

from .constraint_projection import build_Q, project
from .hermite_basis import BasisKind
from .pseudocalibration import Instance, PseudoExpectation, build_pe

CONSTRAINT_TOL = 1e-6


@dataclass
class GoeSample:
    n: int
    W: np.ndarray
    seed: int | None = None


@dataclass
class PbvInstance:
    p: int
    n: int
    A: np.ndarray  # n x p, rows d_u
    Pi: np.ndarray
    eigenvalues: np.ndarray  # descending
    eigenvectors: np.ndarray  # columns, descending order

    @property
    def lambda_p(self) -> float:
        return float(self.eigenvalues[self.p - 1])

    @property
    def lambda_min(self) -> float:
        return float(self.eigenvalues[-1])

    @property
    def lambda_max(self) -> float:
        return float(self.eigenvalues[0])

    def as_instance(self, seed: int | None = None) -> Instance:
        return Instance(self.p, self.n, BasisKind.GAUSSIAN, self.A.copy(), seed)


def default_p(n: int) -> int:
    return math.ceil(n ** 0.67)


def sample_goe(n: int, seed: int | None = None) -> GoeSample:
    if n < 2:
        raise ValueError("n must be at least 2")
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n))
    W = (A + A.T) / math.sqrt(2)
    return GoeSample(n, W, seed)


def semicircle_quantile(frac: float) -> float:
    """t with P(λ/√n > t) = frac under the semicircle on [-2, 2]."""
    cdf = lambda t: 0.5 + (t * math.sqrt(4 - t * t) / 4 + math.asin(t / 2)) / math.pi
    return float(scipy.optimize.brentq(lambda t: 1 - cdf(t) - frac, -2, 2))


def pbv_from_eigenspace(W: np.ndarray | GoeSample, p: int, seed: int | None = None, rotate: bool = True) -> PbvInstance:
    """Rows of A = √n · [w_1 … w_p] · O, with O a Haar rotation of R^p (identity when rotate=False)."""
    if isinstance(W, GoeSample):
        W = W.W
    n = W.shape[0]
    if not 1 <= p <= n:
        raise ValueError("need 1 <= p <= n")
    w, V = scipy.linalg.eigh(W)
    w, V = w[::-1], V[:, ::-1]
    Wp = V[:, :p]
    O = scipy.stats.special_ortho_group.rvs(p, random_state=seed) if rotate and p > 1 else np.eye(p)
    A = math.sqrt(n) * Wp @ O
    Pi = Wp @ Wp.T
    return PbvInstance(p, n, A, Pi, w, V)


def second_moment(pe: PseudoExpectation) -> tuple[np.ndarray, np.ndarray]:
    """(Ẽ[v], Ẽ[v vᵀ]) with v_i² reduced to 1/dim."""
    p = pe.n
    mean = np.array([pe[(i,)] for i in range(p)])
    S = np.empty((p, p))
    for i in range(p):
        S[i, i] = pe[()] / p
        for j in range(i + 1, p):
            S[i, j] = S[j, i] = pe[(i, j)]
    return mean, S


@dataclass
class PushedPE:
    """Degree-2 pseudoexpectation over b ∈ R^n: Ẽ[1], Ẽ[b], Ẽ[b bᵀ]."""

    one: float
    mean: np.ndarray
    second: np.ndarray

    def combine(self, other: "PushedPE", a: float) -> "PushedPE":
        return PushedPE(a * self.one + (1 - a) * other.one, a * self.mean + (1 - a) * other.mean,
                        a * self.second + (1 - a) * other.second)


def pushforward_pe(pe: PseudoExpectation, A: np.ndarray, check: bool = True) -> PushedPE:
    """Ẽ[b^S] = Ẽ'[Π_{u∈S} <v, d_u>] for |S| <= 2."""
    if pe.D > 2:
        raise NotImplementedError("pushforward implemented through degree 2")
    mean, S = second_moment(pe)
    second = A @ S @ A.T
    if check:
        resid = np.max(np.abs(np.diag(second) - pe.one))
        if resid > CONSTRAINT_TOL * max(1.0, abs(pe.one)):
            raise ValueError(f"constraint residual {resid:.3g} exceeds tolerance")
    # b_u^2 = 1 on the boolean side
    second = second.copy()
    np.fill_diagonal(second, pe.one)
    return PushedPE(pe.one, A @ mean, second)


@dataclass
class SkReport:
    n: int
    p: int
    D: int
    T: int
    lambda_max: float
    lambda_p: float
    lambda_min: float
    objective: float
    chain: float
    normalized_norm: float
    spectral_sum: float
    psd_min_eig: float
    constraint_residual: float
    seconds: float
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    @property
    def ratio(self) -> float:
        return self.objective / self.n ** 1.5

    @property
    def chain_ok(self) -> bool:
        return self.objective >= self.chain - 1e-6 * self.n ** 2

    def to_json(self) -> dict:
        return {"n": self.n, "p": self.p, "D": self.D, "T": self.T, "lambda_p": self.lambda_p,
                "lambda_max": self.lambda_max, "lambda_min": self.lambda_min, "objective": self.objective,
                "chain": self.chain, "chain_ok": self.chain_ok, "ratio": self.ratio,
                "normalized_norm": self.normalized_norm, "psd_min_eig": self.psd_min_eig,
                "constraint_residual": self.constraint_residual, "seconds": self.seconds,
                "seeds": [self.seed], **self.extra}


def sk_objective(pushed: PushedPE, pbv: PbvInstance, W: np.ndarray) -> dict:
    S = pushed.second
    obj = float(np.sum(W * S))
    in_v = float(np.sum(pbv.Pi * S))
    total = float(np.trace(S))
    # Σ_{i<=p} <x, w_i>^2 = x^T Π_V x
    chain = pbv.lambda_p * in_v - abs(pbv.lambda_min) * (total - in_v)
    spectral = float(np.sum(pbv.eigenvalues * np.einsum("ui,uv,vi->i", pbv.eigenvectors, S, pbv.eigenvectors)))
    return {"objective": obj, "chain": chain, "in_v": in_v, "total": total, "spectral_sum": spectral}


def run_sk(n: int = 400, p: int | None = None, D: int = 2, T: int = 4, seed: int | None = 0) -> SkReport:
    if D != 2:
        raise NotImplementedError("the SK demo runs at D = 2")
    t0 = time.time()
    p = default_p(n) if p is None else p
    goe = sample_goe(n, seed)
    pbv = pbv_from_eigenspace(goe, p, seed=seed)
    inst = pbv.as_instance(seed)
    pe = build_pe(inst, D, T)
    cm = build_Q(inst, D)
    pr = project(pe, cm, normalize_after=True)
    pushed = pushforward_pe(pr.pe, pbv.A)
    res = sk_objective(pushed, pbv, goe.W)
    _, S = second_moment(pr.pe)
    return SkReport(n, p, D, T, pbv.lambda_max, pbv.lambda_p, pbv.lambda_min, res["objective"], res["chain"],
                    res["in_v"] / n, res["spectral_sum"], float(np.linalg.eigvalsh(S)[0]),
                    float(pr.relative_residual), time.time() - t0, seed,
                    {"lambda_p_over_sqrt_n": pbv.lambda_p / math.sqrt(n),
                     "semicircle_lambda_p": semicircle_quantile(p / n),
                     "lambda_max_over_sqrt_n": pbv.lambda_max / math.sqrt(n)})
