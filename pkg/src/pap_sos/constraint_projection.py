"""Exact enforcement of the constraints <v, d_u>^2 = 1.

Q has one row per (S, u), |S| = k - 2 for k = 2..D, and one column per monomial v^I,
|I| <= D.  Row (S, u) dotted with a pseudoexpectation vector is Ẽ[v^S (<v, d_u>^2 - 1)].
The rows are graph matrices: Q = Σ_k L_kᵀ, with L_k the five-term combination below.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import scipy.linalg

from .graph_matrix import CI, SQ, HermiteTable, IndexSpace, RealizedMatrix, Shape, realize
from .pseudocalibration import DegenerateInstance, PseudoExpectation, normalize

CUTOFF = 1e-8
GAP_FACTOR = 1e3


@dataclass(frozen=True)
class NCoeff:
    """c · n^{-power}, kept symbolic in n."""

    c: Fraction
    power: int

    def __call__(self, n: int) -> Fraction:
        return self.c / Fraction(n) ** self.power

    def __repr__(self) -> str:
        return f"{self.c}/n^{self.power}" if self.power else str(self.c)


def build_Lk(k: int) -> list[tuple[Shape, NCoeff]]:
    """The completed left side L_k; columns are (S, u) with |S| = k - 2."""
    if k < 2:
        raise ValueError("k must be at least 2")
    c = [(CI, 0)]
    rest = list(range(3, k + 1))
    sq = lambda ids: [(SQ, i) for i in ids]
    out = [(Shape(tuple([1, 2] + rest), (0,), tuple(sq([1, 2] + rest)), tuple(sq(rest) + c),
                  ((1, 0, 1), (2, 0, 1))), NCoeff(Fraction(2), 0))]
    if k >= 3:
        # 1 and 3 collapse; the merged vertex (id 1) sits in V only
        r = list(range(4, k + 1))
        out.append((Shape(tuple([1, 2] + r), (0,), tuple(sq([2] + r)), tuple(sq([1] + r) + c),
                          ((1, 0, 1), (2, 0, 1))), NCoeff(Fraction(2), 1)))
    if k >= 4:
        r = list(range(5, k + 1))
        out.append((Shape(tuple([1, 2] + r), (0,), tuple(sq(r)), tuple(sq([1, 2] + r) + c),
                          ((1, 0, 1), (2, 0, 1))), NCoeff(Fraction(2), 2)))
    # 1 and 2 collapse into a middle square with a label-2 edge
    out.append((Shape(tuple([1] + rest), (0,), tuple(sq(rest)), tuple(sq(rest) + c), ((1, 0, 2),)),
                NCoeff(Fraction(1), 1)))
    if k >= 3:
        r = list(range(4, k + 1))
        out.append((Shape(tuple([1] + r), (0,), tuple(sq([1] + r)), tuple(sq([1] + r) + c), ((1, 0, 2),)),
                    NCoeff(Fraction(1), 1)))
    return out


def row_space(n: int, m: int, D: int, k_min: int = 2) -> IndexSpace:
    return IndexSpace(n, m, [(k - 2, 1) for k in range(k_min, D + 1)])


def column_space(n: int, D: int) -> IndexSpace:
    return IndexSpace.subsets(n, D)


def realize_Lk(k: int, instance, rows: IndexSpace | None = None, cols: IndexSpace | None = None) -> RealizedMatrix:
    table = _table(instance)
    n, m = table.n, table.m
    rows = rows or IndexSpace.subsets(n, k)
    cols = cols or IndexSpace(n, m, [(k - 2, 1)])
    M = np.zeros((rows.size, cols.size))
    for shape, coeff in build_Lk(k):
        M += float(coeff(n)) * realize(shape, table, rows, cols).matrix
    return RealizedMatrix(M, rows, cols)


def _table(instance) -> HermiteTable:
    if isinstance(instance, HermiteTable):
        return instance
    return HermiteTable(instance.data, instance.setting)


@dataclass
class CheckMatrix:
    Q: np.ndarray
    rows: IndexSpace
    cols: IndexSpace
    D: int

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.Q, 2))


def build_Q(instance, D: int) -> CheckMatrix:
    if D < 2 or D % 2:
        raise ValueError("D must be even and at least 2")
    table = _table(instance)
    n, m = table.n, table.m
    rows, cols = row_space(n, m, D), column_space(n, D)
    L = np.zeros((cols.size, rows.size))
    for k in range(2, D + 1):
        L += realize_Lk(k, table, cols, rows).matrix
    return CheckMatrix(L.T.copy(), rows, cols, D)


def q_row_direct(pe: PseudoExpectation, data: np.ndarray, S, u: int, boolean: bool = False) -> float:
    """Ẽ[v^S (<v, d_u>^2 - 1)] from the pseudoexpectation coefficients, by expanding the square."""
    d = data[u]
    n = pe.n
    out = -pe.reduce_monomial(S)
    for j in range(n):
        for jp in range(n):
            out += d[j] * d[jp] * pe.reduce_monomial(tuple(S) + (j, jp))
    return out


def residual(cm: CheckMatrix, pe: PseudoExpectation) -> np.ndarray:
    return cm.Q @ pe.vector(cm.cols)


@dataclass
class ProjectionResult:
    pe: PseudoExpectation
    rank: int
    cutoff: float
    kept_min: float
    dropped_max: float
    gap_flag: bool
    residual_before: float
    residual_after: float
    relative_residual: float
    collapsed: bool


def _pinv_parts(G: np.ndarray, cutoff: float = CUTOFF):
    w, V = scipy.linalg.eigh(G)
    top = max(w.max(), 0.0)
    thr = cutoff * top
    keep = w > thr
    kept_min = float(w[keep].min()) if keep.any() else 0.0
    dropped_max = float(w[~keep].max()) if (~keep).any() else 0.0
    flag = keep.any() and kept_min < GAP_FACTOR * thr
    return w, V, keep, thr, kept_min, dropped_max, bool(flag)


def project(pe: PseudoExpectation, cm: CheckMatrix, normalize_after: bool = False) -> ProjectionResult:
    """Ẽ' = Ẽ - Qᵀ(QQᵀ)⁺QẼ."""
    x = pe.vector(cm.cols)
    Q = cm.Q
    w, V, keep, thr, kept_min, dropped_max, flag = _pinv_parts(Q @ Q.T)
    r = Q @ x
    y = V[:, keep] @ ((V[:, keep].T @ r) / w[keep])
    x_new = x - Q.T @ y
    out = PseudoExpectation.from_vector(x_new, cm.cols, pe.n, pe.D, pe.T)
    x_norm = float(np.linalg.norm(x))
    # the feasible set can miss every even monomial, leaving only roundoff
    collapsed = bool(np.linalg.norm(x_new) <= 1e-10 * x_norm)
    res_after = float(np.linalg.norm(Q @ x_new))
    rel = res_after / (cm.norm * x_norm) if x_norm else 0.0
    if normalize_after:
        if collapsed or abs(out.one) <= 1e-10 * x_norm:
            raise DegenerateInstance("projected pseudoexpectation has Ẽ'[1] = 0")
        out = normalize(out)
        x_new = out.vector(cm.cols)
        res_after = float(np.linalg.norm(Q @ x_new))
        rel = res_after / (cm.norm * np.linalg.norm(x_new))
    return ProjectionResult(out, int(keep.sum()), thr, kept_min, dropped_max, flag,
                            float(np.linalg.norm(r)), res_after, rel, collapsed)


def projector(cm: CheckMatrix) -> np.ndarray:
    Q = cm.Q
    w, V, keep, *_ = _pinv_parts(Q @ Q.T)
    B = Q.T @ V[:, keep]
    return (B / w[keep]) @ B.T


def extended_moment_matrix(pe: PseudoExpectation, row_max: int, col_max: int) -> tuple[np.ndarray, IndexSpace, IndexSpace]:
    rows = IndexSpace.subsets(pe.n, row_max)
    cols = IndexSpace.subsets(pe.n, col_max)
    rk = [set(k[0]) for k in rows.keys()]
    ck = [set(k[0]) for k in cols.keys()]
    M = np.empty((len(rk), len(ck)))
    for a, A in enumerate(rk):
        for b, B in enumerate(ck):
            M[a, b] = pe[tuple(sorted(A ^ B))] * pe.n ** -len(A & B)
    return M, rows, cols


def verify_annihilation(pe, k: int, instance, D: int | None = None,
                        reference: PseudoExpectation | None = None) -> float:
    """Relative size of M·L_k, with M the moment matrix block pairing degree <= D-k with degree <= k.

    `pe` may also be a MomentMatrix; its entries are read back into a pseudoexpectation.
    The scale is taken from `reference` when given (use the pre-projection Ẽ).
    """
    pe = _as_pe(pe)
    D = pe.D if D is None else D
    if not 2 <= k <= D:
        raise ValueError("need 2 <= k <= D")
    M, rows, cols = extended_moment_matrix(pe, D - k, k)
    L = realize_Lk(k, instance, cols).matrix
    prod = M @ L
    M_ref = M if reference is None else extended_moment_matrix(reference, D - k, k)[0]
    scale = np.linalg.norm(M_ref, 2) * np.linalg.norm(L, 2)
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(prod, 2) / scale)


def _as_pe(obj) -> PseudoExpectation:
    if isinstance(obj, PseudoExpectation):
        return obj
    from .moment_matrix import MomentMatrix

    if not isinstance(obj, MomentMatrix):
        raise TypeError("expected a PseudoExpectation or MomentMatrix")
    # row of the empty set holds Ẽ[v^J] for every |J| <= D/2; the rest come from pairs
    values: dict[tuple, float] = {}
    keys = [k[0] for k in obj.space.keys()]
    for a, A in enumerate(keys):
        for b, B in enumerate(keys):
            sym = tuple(sorted(set(A) ^ set(B)))
            if sym not in values:
                values[sym] = obj.matrix[a, b] * obj.n ** len(set(A) & set(B))
    return PseudoExpectation(obj.n, obj.D, 0, values)


def projector_error(cm: CheckMatrix) -> float:
    P = projector(cm)
    return float(np.linalg.norm(P @ P - P, 2) / max(np.linalg.norm(P, 2), 1e-300))


def build_Nk(k: int, instance, D: int | None = None) -> RealizedMatrix:
    """Null combinations of Q's rows: v^S q_i q_i' written two ways, for |S| = k - 4 and i < i'.

    Column (S, i, i') carries the coefficients of v^S q_i on rows (·, i') and minus
    those of v^S q_i' on rows (·, i); both expand v^S q_i q_i'.
    """
    if k < 4:
        raise ValueError("k must be at least 4")
    table = _table(instance)
    n, m = table.n, table.m
    D = k if D is None else D
    rows = row_space(n, m, D)
    mons = IndexSpace.subsets(n, k - 2)
    L = realize_Lk(k - 2, table, mons).matrix  # rows: monomials T; cols: (S, u)
    lcols = IndexSpace(n, m, [(k - 4, 1)])
    pairs = list(itertools.combinations(range(m), 2))
    S_list = list(itertools.combinations(range(n), k - 4))
    cols_keys = [(S, i, ip) for S in S_list for i, ip in pairs]
    N = np.zeros((rows.size, len(cols_keys)))
    mon_keys = [k_[0] for k_ in mons.keys()]
    for col, (S, i, ip) in enumerate(cols_keys):
        for src, dst, sign in ((i, ip, 1.0), (ip, i, -1.0)):
            coeffs = L[:, lcols.position(S, (src,))]
            for r in np.nonzero(coeffs)[0]:
                T = mon_keys[r]
                N[rows.position(T, (dst,)), col] += sign * coeffs[r]
    out = RealizedMatrix(N, rows, rows)
    out.col_keys = cols_keys
    return out


@dataclass
class SpectrumReport:
    n: int
    m: int
    D: int
    eigenvalues: np.ndarray
    min_nonzero: float
    nullity: int
    expected_nullity: int
    cutoff: float

    @property
    def ratio(self) -> float:
        return self.min_nonzero / self.n ** 2

    def to_json(self) -> dict:
        return {"n": self.n, "m": self.m, "D": self.D, "min_nonzero": self.min_nonzero,
                "ratio": self.ratio, "nullity": self.nullity, "expected_nullity": self.expected_nullity}


def expected_nullity(n: int, m: int, D: int) -> int:
    return sum(math.comb(n, k - 4) * math.comb(m, 2) for k in range(4, D + 1, 2))


def qq_spectrum(instance, D: int, cutoff: float = CUTOFF, dense_limit: int = 24, **structured):
    """Eigenvalues of QQᵀ; dense up to n = dense_limit, otherwise matrix-free Ritz bounds (D = 4 only)."""
    table = _table(instance)
    if table.n > dense_limit:
        if D != 4:
            raise ValueError("matrix-free spectrum implemented for D = 4")
        return qq_min_structured(table.data, **structured)
    cm = build_Q(instance, D)
    G = cm.Q @ cm.Q.T
    w = scipy.linalg.eigvalsh(G)
    thr = cutoff * w.max()
    nz = w[w > thr]
    return SpectrumReport(table.n, table.m, D, w, float(nz.min()), int((w <= thr).sum()),
                          expected_nullity(table.n, table.m, D), thr)


# ---------------------------------------------------------------- matrix-free Q at D = 4


class StructuredQ4:
    """Q at D = 4 applied without forming it, split by parity.

    Even rows: (∅, u) then ({a,b}, u); even columns: ∅, pairs, 4-sets.
    Odd rows: ({a}, u); odd columns: singletons, 3-sets.  Orderings match build_Q
    (lex within a block, circles fastest).  Memory is O(n^2 (n^2/4 + m)).
    """

    def __init__(self, data: np.ndarray):
        d = np.asarray(data, dtype=float)
        self.d = d
        self.m, self.n = d.shape
        n = self.n
        self.s = (d * d).sum(axis=1) / n
        self.DD = np.einsum("ui,uj->uij", d, d).reshape(self.m, n * n)
        self.pairs = np.array(list(itertools.combinations(range(n), 2)), dtype=np.int64).reshape(-1, 2)
        self.P = len(self.pairs)
        pidx = -np.ones((n, n), dtype=np.int64)
        pidx[self.pairs[:, 0], self.pairs[:, 1]] = np.arange(self.P)
        pidx[self.pairs[:, 1], self.pairs[:, 0]] = np.arange(self.P)
        self.pidx = pidx
        self.dA = d[:, self.pairs[:, 0]].T
        self.dB = d[:, self.pairs[:, 1]].T
        quads = np.array(list(itertools.combinations(range(n), 4)), dtype=np.int64).reshape(-1, 4)
        trips = np.array(list(itertools.combinations(range(n), 3)), dtype=np.int64).reshape(-1, 3)
        self.n4, self.n3 = len(quads), len(trips)
        # (row pair S, ordered complement i*n+j) for each split of a 4-set
        self.split4 = []
        for s in itertools.combinations(range(4), 2):
            rest = [t for t in range(4) if t not in s]
            S = pidx[quads[:, s[0]], quads[:, s[1]]]
            i, j = quads[:, rest[0]], quads[:, rest[1]]
            self.split4.append((S, i * n + j, j * n + i))
        self.split3 = []
        for a in range(3):
            rest = [t for t in range(3) if t != a]
            i, j = trips[:, rest[0]], trips[:, rest[1]]
            self.split3.append((trips[:, a], i * n + j, j * n + i))
        self._e4 = self._flat_maps(self.split4, self.P)
        self._e3 = self._flat_maps(self.split3, n)
        self.even_rows = self.m + self.P * self.m
        self.even_cols = 1 + self.P + self.n4
        self.odd_rows = n * self.m
        self.odd_cols = n + self.n3

    def _flat_maps(self, splits, nrows: int):
        """Sorted flat positions in an (nrows, n^2) array, for sequential scatter and gather."""
        nn = self.n * self.n
        src = np.arange(len(splits[0][0]), dtype=np.int64)
        flat = np.concatenate([np.concatenate([S * nn + ij, S * nn + ji]) for S, ij, ji in splits])
        owner = np.tile(src, 2 * len(splits))
        half = np.concatenate([S * nn + ij for S, ij, _ in splits])
        half_owner = np.tile(src, len(splits))
        o1, o2 = np.argsort(flat, kind="stable"), np.argsort(half, kind="stable")
        idx_t = np.int32 if nrows * nn < 2 ** 31 else np.int64
        return (flat[o1].astype(idx_t), owner[o1].astype(np.int32),
                half[o2].astype(idx_t), half_owner[o2].astype(np.int32))

    def _scatter(self, maps, x, nrows: int) -> np.ndarray:
        E = np.zeros(nrows * self.n * self.n)
        E[maps[0]] = x[maps[1]]
        return E.reshape(nrows, -1)

    def _gather(self, maps, H: np.ndarray, size: int) -> np.ndarray:
        return 2 * np.bincount(maps[3], weights=H.ravel()[maps[2]], minlength=size)

    # even block
    def even_matvec(self, x: np.ndarray) -> np.ndarray:
        n, P, m = self.n, self.P, self.m
        x0, x2, x4 = x[0], x[1:1 + P], x[1 + P:]
        E4 = self._scatter(self._e4, x4, P)
        R4 = E4 @ self.DD.T
        C2 = np.zeros((n, n))
        C2[self.pairs[:, 0], self.pairs[:, 1]] = x2
        C2 += C2.T
        CD = C2 @ self.d.T
        dA, dB = self.dA, self.dB
        a, b = self.pairs[:, 0], self.pairs[:, 1]
        R4 += (self.s - 1)[None, :] * x2[:, None]
        R4 += (2 / n) * (dA * (CD[b] - dA * x2[:, None]) + dB * (CD[a] - dB * x2[:, None]))
        R4 += 2 * dA * dB * x0 / n ** 2
        R2 = 2 * x2 @ (dA * dB) + (self.s - 1) * x0
        return np.concatenate([R2, R4.ravel()])

    def even_rmatvec(self, y: np.ndarray) -> np.ndarray:
        n, P, m = self.n, self.P, self.m
        Y2, Y4 = y[:m], y[m:].reshape(P, m)
        dA, dB = self.dA, self.dB
        x0 = Y2 @ (self.s - 1) + (2 / n ** 2) * np.sum(Y4 * dA * dB)
        x2 = 2 * (dA * dB) @ Y2 + Y4 @ (self.s - 1) - (2 / n) * np.sum(Y4 * (dA ** 2 + dB ** 2), axis=1)
        Ysym = np.zeros((n, n, m))
        Ysym[self.pairs[:, 0], self.pairs[:, 1]] = Y4
        Ysym[self.pairs[:, 1], self.pairs[:, 0]] = Y4
        w = np.einsum("abu,ua->bu", Ysym, self.d)
        G = w @ self.d
        G = G + G.T
        x2 += (2 / n) * G[self.pairs[:, 0], self.pairs[:, 1]]
        H = Y4 @ self.DD
        x4 = self._gather(self._e4, H, self.n4)
        return np.concatenate([[x0], x2, x4])

    # odd block
    def odd_matvec(self, x: np.ndarray) -> np.ndarray:
        n = self.n
        x1, x3 = x[:n], x[n:]
        E3 = self._scatter(self._e3, x3, n)
        dT = self.d.T
        R3 = E3 @ self.DD.T + (self.s - 1)[None, :] * x1[:, None]
        R3 += (2 / n) * dT * ((self.d @ x1)[None, :] - dT * x1[:, None])
        return R3.ravel()

    def odd_rmatvec(self, y: np.ndarray) -> np.ndarray:
        n = self.n
        Y3 = y.reshape(n, self.m)
        dT = self.d.T
        z = np.sum(Y3 * dT, axis=0)
        x1 = Y3 @ (self.s - 1) - (2 / n) * np.sum(Y3 * dT ** 2, axis=1) + (2 / n) * (self.d.T @ z)
        H = Y3 @ self.DD
        x3 = self._gather(self._e3, H, self.n3)
        return np.concatenate([x1, x3])

    def gram(self, parity: str):
        """QQᵀ restricted to one parity block, as a LinearOperator."""
        from scipy.sparse.linalg import LinearOperator

        if parity == "even":
            f, g, N = self.even_matvec, self.even_rmatvec, self.even_rows
        else:
            f, g, N = self.odd_matvec, self.odd_rmatvec, self.odd_rows

        def mv(Y):
            Y = np.asarray(Y)
            if Y.ndim == 1:
                return f(g(Y))
            return np.column_stack([f(g(np.ascontiguousarray(Y[:, j]))) for j in range(Y.shape[1])])

        return LinearOperator((N, N), matvec=mv, matmat=mv, dtype=float)

    # exact null space of the even Gram: v^0 q_i q_i' written two ways
    def _q_vectors(self) -> np.ndarray:
        """Row u is q_u's coefficient vector on (∅, pairs)."""
        return np.column_stack([self.s - 1, 2 * (self.dA * self.dB).T])

    def null_projector(self):
        F = self._q_vectors()
        m = self.m
        Gf = F @ F.T
        ij = np.array(list(itertools.combinations(range(m), 2)), dtype=np.int64).reshape(-1, 2)
        i, ip = ij[:, 0], ij[:, 1]
        I, Ip = i[:, None], ip[:, None]
        J, Jp = i[None, :], ip[None, :]
        NtN = ((Ip == Jp) * Gf[I, J] - (Ip == J) * Gf[I, Jp]
               - (I == Jp) * Gf[Ip, J] + (I == J) * Gf[Ip, Jp])
        cho = scipy.linalg.cho_factor(NtN)
        P = self.P

        def to_rows(y):  # even vector -> (m, 1+P) with row u = (y2[u], y4[:, u])
            return np.column_stack([y[:m], y[m:].reshape(P, m).T])

        def from_rows(Yr):
            return np.concatenate([Yr[:, 0], Yr[:, 1:].T.ravel()])

        def apply(y):
            Yr = to_rows(y)
            A = F @ Yr.T
            z = A[i, ip] - A[ip, i]
            z = scipy.linalg.cho_solve(cho, z)
            Z = np.zeros((m, m))
            Z[i, ip] = z
            Z[ip, i] = -z
            return from_rows(Z.T @ F)

        return apply, len(ij)

    def null_basis_dense(self) -> np.ndarray:
        """N_4 columns in even-row coordinates (small n only)."""
        F = self._q_vectors()
        m, P = self.m, self.P
        cols = []
        for i, ip in itertools.combinations(range(m), 2):
            Yr = np.zeros((m, 1 + P))
            Yr[ip] = F[i]
            Yr[i] = -F[ip]
            cols.append(np.concatenate([Yr[:, 0], Yr[:, 1:].T.ravel()]))
        return np.array(cols).T if cols else np.zeros((self.even_rows, 0))


def _lobpcg_min(op, X: np.ndarray, tol: float, maxiter: int):
    import warnings

    from scipy.sparse.linalg import lobpcg

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        w, V, hist = lobpcg(op, X, largest=False, tol=tol, maxiter=maxiter, retResidualNormsHistory=True)
    order = np.argsort(w)
    return w[order], V[:, order], len(hist)


@dataclass
class StructuredSpectrum:
    """Ritz estimates of the smallest nonzero eigenvalue of QQᵀ at D = 4.

    Both values are upper bounds on the true minimum of their parity block; `converged`
    says whether the residual tolerance was met.
    """

    n: int
    m: int
    even_min: float
    odd_min: float
    iterations: tuple
    even_residual: float
    converged: bool

    @property
    def min_nonzero(self) -> float:
        return min(self.even_min, self.odd_min)

    @property
    def ratio(self) -> float:
        return self.min_nonzero / self.n ** 2

    def to_json(self) -> dict:
        return {"n": self.n, "m": self.m, "D": 4, "min_nonzero": self.min_nonzero, "ratio": self.ratio,
                "even_min": self.even_min, "odd_min": self.odd_min, "iterations": list(self.iterations),
                "even_residual": self.even_residual, "converged": self.converged, "upper_bound": True}


def _warm_start(sq: StructuredQ4, proj, samples: int, per: int) -> np.ndarray:
    """Bottom eigenvectors of the weakest samples' diagonal blocks, with null components removed."""
    order = np.argsort(sq.s)[:samples]
    cols = []
    for u in order:
        _, V = scipy.linalg.eigh(same_sample_gram(sq.d[u]), subset_by_index=[0, per - 1])
        for j in range(per):
            Yr = np.zeros((sq.m, 1 + sq.P))
            Yr[u] = V[:, j]
            y = np.concatenate([Yr[:, 0], Yr[:, 1:].T.ravel()])
            cols.append(y - proj(y))
    return np.array(cols).T


def qq_min_structured(data: np.ndarray, seed: int = 0, warm_samples: int = 4, per_sample: int = 2,
                      tol: float = 1e-6, maxiter: int = 400, odd_maxiter: int = 2000,
                      odd: bool = True) -> StructuredSpectrum:
    """Smallest nonzero eigenvalue of QQᵀ at D = 4 by deflated LOBPCG.

    The even block's null space (spanned by the N_4 columns) is shifted to σ = 10 n².
    Any Ritz value below σ bounds the smallest nonzero eigenvalue from above.
    """
    from scipy.sparse.linalg import LinearOperator

    sq = StructuredQ4(data)
    rng = np.random.default_rng(seed)
    G_even, G_odd = sq.gram("even"), sq.gram("odd")
    sigma = 10.0 * sq.n ** 2
    proj, _ = sq.null_projector()

    def mv(Y):
        Y = np.asarray(Y)
        if Y.ndim == 1:
            return G_even.matvec(Y) + sigma * proj(Y)
        cols = (np.ascontiguousarray(Y[:, j]) for j in range(Y.shape[1]))
        return np.column_stack([G_even.matvec(c) + sigma * proj(c) for c in cols])

    A = LinearOperator(G_even.shape, matvec=mv, matmat=mv, dtype=float)
    X = _warm_start(sq, proj, min(warm_samples, sq.m), min(per_sample, sq.P + 1))
    we, Ve, it_e = _lobpcg_min(A, X, tol, maxiter)
    if we[0] >= sigma:
        raise RuntimeError("Ritz value above the null-space shift; bound not certified")
    if we[0] <= CUTOFF * sigma:
        raise RuntimeError("null directions beyond the N_4 span; the system is overdetermined")
    if odd:
        wo, _, it_o = _lobpcg_min(G_odd, rng.standard_normal((sq.odd_rows, 4)), tol, odd_maxiter)
    else:
        wo, it_o = np.array([np.inf]), 0
    v = Ve[:, 0]
    res = float(np.linalg.norm(mv(v) - we[0] * v) / abs(we[0]))
    return StructuredSpectrum(sq.n, sq.m, float(we[0]), float(wo[0]), (it_e, it_o), res, res <= 10 * tol)


def same_sample_gram(du: np.ndarray) -> np.ndarray:
    """Diagonal block of the even QQᵀ for one sample u: rows (∅, u) then ({a,b}, u), in closed form."""
    d = np.asarray(du, dtype=float)
    n = len(d)
    s = d @ d / n
    pairs = np.array(list(itertools.combinations(range(n), 2)), dtype=np.int64).reshape(-1, 2)
    P = len(pairs)
    pidx = -np.ones((n, n), dtype=np.int64)
    pidx[pairs[:, 0], pairs[:, 1]] = np.arange(P)
    pidx[pairs[:, 1], pairs[:, 0]] = np.arange(P)
    a, b = pairs[:, 0], pairs[:, 1]
    dS = d[a] * d[b]
    d2 = d * d
    tot, tot4 = d2.sum(), (d2 * d2).sum()
    # degree-2 coefficients of the (S, u) rows
    B = (s - 1) * np.eye(P)
    js = np.arange(n)
    for x, y in ((a, b), (b, a)):
        T = pidx[y[:, None], js[None, :]]
        ok = (js[None, :] != a[:, None]) & (js[None, :] != b[:, None])
        rows = np.broadcast_to(np.arange(P)[:, None], T.shape)
        B[rows[ok], T[ok]] += (2 / n) * (d[x][:, None] * d[None, :])[ok]
    G = B @ B.T + 4 * np.outer(dS, dS) * (1 + 1 / n ** 4)
    # degree-4 part: only pairs sharing exactly one index differ from the disjoint formula
    for x, y in ((a, b), (b, a)):
        T = pidx[x[:, None], js[None, :]]
        ok = (js[None, :] != a[:, None]) & (js[None, :] != b[:, None])
        rows = np.broadcast_to(np.arange(P)[:, None], T.shape)
        z = np.broadcast_to(js[None, :], T.shape)
        yy = np.broadcast_to(y[:, None], T.shape)
        xx = np.broadcast_to(x[:, None], T.shape)
        val = 4 * d[yy] * d[z] * (tot - d2[xx] - d2[yy] - d2[z])
        G[rows[ok], T[ok]] += val[ok] - 4 * (dS[rows[ok]] * dS[T[ok]])
    rest = tot - d2[a] - d2[b]
    rest4 = tot4 - d2[a] ** 2 - d2[b] ** 2
    G[np.arange(P), np.arange(P)] += 2 * (rest ** 2 - rest4) - 4 * dS ** 2
    g = 2 * dS * (s - 1) * (1 + 1 / n ** 2) + (8 / n) * dS * (tot - d2[a] - d2[b])
    top = (s - 1) ** 2 + 4 * (dS @ dS)
    out = np.empty((P + 1, P + 1))
    out[0, 0] = top
    out[0, 1:] = out[1:, 0] = g
    out[1:, 1:] = G
    return out
