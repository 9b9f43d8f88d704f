"""Planted Affine Planes instances and the pseudocalibrated pseudoexpectation."""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from .graph_matrix import IndexSpace, HermiteTable, enumerate_shapes, lambda_coeff, realize
from .hermite_basis import BasisKind, CellMultiIndex, hermite_at_one, hermite_eval
from .slice_moments import UnsupportedInstance, e_scaled, isqrt_exact

DEFAULT_T = 4


@dataclass(frozen=True)
class Instance:
    n: int
    m: int
    setting: BasisKind
    data: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.shape != (self.m, self.n):
            raise ValueError(f"data shape {data.shape} does not match (m, n) = {(self.m, self.n)}")
        object.__setattr__(self, "setting", BasisKind.parse(self.setting))
        if self.setting is BasisKind.BOOLEAN and not np.all(np.abs(data) == 1):
            raise ValueError("boolean instance entries must be +-1")
        object.__setattr__(self, "data", data)

    def header(self) -> dict:
        return {"n": self.n, "m": self.m, "setting": self.setting.value, "seed": self.seed}

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        for row in self.data:
            writer.writerow([repr(float(x)) for x in row])
        return buf.getvalue()

    def save(self, stem: str) -> None:
        with open(stem + ".csv", "w") as f:
            f.write(self.to_csv())
        with open(stem + ".json", "w") as f:
            json.dump(self.header(), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, stem: str) -> "Instance":
        with open(stem + ".json") as f:
            head = json.load(f)
        with open(stem + ".csv") as f:
            rows = [[float(x) for x in r] for r in csv.reader(f)]
        return cls(head["n"], head["m"], head["setting"], np.array(rows).reshape(head["m"], head["n"]), head.get("seed"))

    def relabeled(self, perm: Sequence[int]) -> "Instance":
        """Coordinate i of the new instance is coordinate perm[i] of this one."""
        return Instance(self.n, self.m, self.setting, self.data[:, list(perm)], self.seed)


@dataclass(frozen=True)
class PlantedSample:
    signs: np.ndarray  # w = sqrt(n) v in {+-1}^n
    b: np.ndarray
    instance: Instance

    @property
    def v(self) -> np.ndarray:
        return self.signs / math.sqrt(self.instance.n)

    def residuals(self) -> np.ndarray:
        return self.instance.data @ self.v - self.b


def sample_instance(n: int, m: int, setting: BasisKind | str = BasisKind.GAUSSIAN, seed: int | None = 0) -> Instance:
    if n < 1 or m < 1:
        raise ValueError("n and m must be positive")
    setting = BasisKind.parse(setting)
    rng = np.random.default_rng(seed)
    if setting is BasisKind.BOOLEAN:
        data = rng.choice([-1.0, 1.0], size=(m, n))
    else:
        data = rng.standard_normal((m, n))
    return Instance(n, m, setting, data, seed)


def sample_planted(n: int, m: int, setting: BasisKind | str = BasisKind.GAUSSIAN, seed: int | None = 0) -> PlantedSample:
    setting = BasisKind.parse(setting)
    rng = np.random.default_rng(seed)
    w = rng.choice([-1.0, 1.0], size=n)
    b = rng.choice([-1.0, 1.0], size=m)
    if setting is BasisKind.BOOLEAN:
        root = isqrt_exact(n)
        if root is None:
            raise UnsupportedInstance("boolean planted distribution needs a perfect-square n")
        data = np.empty((m, n))
        for u in range(m):
            x = np.ones(n)
            neg = (n - int(b[u]) * root) // 2
            x[rng.choice(n, size=neg, replace=False)] = -1.0
            data[u] = w * x
    else:
        v = w / math.sqrt(n)
        x = rng.standard_normal((m, n))
        data = b[:, None] * v[None, :] + x - np.outer(x @ v, v)
    return PlantedSample(w, b, Instance(n, m, setting, data, seed))


def planted_conditional_moment(alpha_u: Sequence[int], v: Sequence[float], b: float) -> float:
    """E[h_{alpha_u}(d) | v, b] for d = b v/|v| + (I - vv^T/|v|^2) x."""
    v = np.asarray(v, dtype=float)
    norm = float(np.linalg.norm(v))
    if norm == 0:
        raise ValueError("v must be nonzero")
    alpha_u = list(alpha_u)
    out = 1.0
    for vi, a in zip(v, alpha_u):
        out *= (vi / norm) ** a
    return out * hermite_eval(sum(alpha_u), b)


def _n_half_power(n: int, e: int) -> Fraction:
    """n^{-e/2} for even e."""
    assert e % 2 == 0
    return Fraction(1, n ** (e // 2))


def fourier_support_ok(I: Iterable[int], alpha: CellMultiIndex) -> bool:
    I = set(I)
    if any(s % 2 for s in alpha.row_sums.values()):
        return False
    cols = alpha.col_sums
    touched = set(cols) | I
    return all(cols.get(i, 0) % 2 == (1 if i in I else 0) for i in touched)


def planted_fourier_coeff(I: Iterable[int], alpha: CellMultiIndex, n: int, m: int,
                          setting: BasisKind | str = BasisKind.GAUSSIAN) -> Fraction:
    I = set(I)
    setting = BasisKind.parse(setting)
    if not fourier_support_ok(I, alpha):
        return Fraction(0)
    if setting is BasisKind.BOOLEAN:
        if not alpha.is_binary():
            return Fraction(0)
        out = _n_half_power(n, len(I))
        for s in alpha.row_sums.values():
            out *= e_scaled(n, s) / Fraction(n) ** (s // 2)
        return out
    out = Fraction(1)
    for s in alpha.row_sums.values():
        out *= hermite_at_one(s)
    return out * _n_half_power(n, len(I) + alpha.total) / alpha.factorial()


def character(alpha: CellMultiIndex, data: np.ndarray, setting: BasisKind | str = BasisKind.GAUSSIAN) -> float:
    setting = BasisKind.parse(setting)
    out = 1.0
    for (u, i), a in alpha.cells.items():
        out *= hermite_eval(a, float(data[u, i]), setting)
    return out


@dataclass
class PseudoExpectation:
    n: int
    D: int
    T: int
    values: dict[tuple[int, ...], float] = field(default_factory=dict)
    normalized: bool = False

    def __getitem__(self, I: Iterable[int]) -> float:
        return self.values.get(tuple(sorted(I)), 0.0)

    def space(self) -> IndexSpace:
        return IndexSpace.subsets(self.n, self.D)

    def vector(self, space: IndexSpace | None = None) -> np.ndarray:
        space = space or self.space()
        vec = np.zeros(space.size)
        for blk in space.blocks.values():
            for r in range(blk.size):
                vec[blk.offset + r] = self.values.get(tuple(int(x) for x in blk.sq[r]), 0.0)
        return vec

    @classmethod
    def from_vector(cls, vec: np.ndarray, space: IndexSpace, n: int, D: int, T: int, normalized: bool = False):
        values = {}
        for blk in space.blocks.values():
            for r in range(blk.size):
                val = float(vec[blk.offset + r])
                if val != 0.0:
                    values[tuple(int(x) for x in blk.sq[r])] = val
        return cls(n, D, T, values, normalized)

    @property
    def one(self) -> float:
        return self.values.get((), 0.0)

    def scaled(self, c: float) -> "PseudoExpectation":
        return PseudoExpectation(self.n, self.D, self.T, {k: c * v for k, v in self.values.items()}, False)

    def reduce_monomial(self, idx: Iterable[int]) -> float:
        """Ẽ of a (not necessarily multilinear) monomial, using v_i^2 = 1/n."""
        counts: dict[int, int] = {}
        for i in idx:
            counts[i] = counts.get(i, 0) + 1
        scale = 1.0
        K = []
        for i, c in counts.items():
            scale *= self.n ** -(c // 2)
            if c % 2:
                K.append(i)
        return scale * self[K]

    def to_json(self) -> dict:
        return {json.dumps(list(k)): v for k, v in sorted(self.values.items(), key=lambda kv: (len(kv[0]), kv[0]))}

    @classmethod
    def from_json(cls, obj: Mapping[str, float], n: int, D: int, T: int) -> "PseudoExpectation":
        values = {tuple(json.loads(k)): float(v) for k, v in obj.items()}
        return cls(n, D, T, values, abs(values.get((), 0.0) - 1.0) < 1e-15)


def enumerate_alphas(n: int, m: int, T: int, binary: bool = False):
    cells = [(u, i) for u in range(m) for i in range(n)]
    for total in range(T + 1):
        if binary:
            for chosen in itertools.combinations(cells, total):
                yield CellMultiIndex({c: 1 for c in chosen})
        else:
            for chosen in itertools.combinations_with_replacement(cells, total):
                counts: dict = {}
                for c in chosen:
                    counts[c] = counts.get(c, 0) + 1
                yield CellMultiIndex(counts)


def odd_columns(alpha: CellMultiIndex) -> tuple[int, ...]:
    return tuple(sorted(i for i, s in alpha.col_sums.items() if s % 2))


def fourier_expansion(n: int, m: int, D: int, T: int, setting: BasisKind | str = BasisKind.GAUSSIAN
                      ) -> dict[tuple[int, ...], dict[CellMultiIndex, Fraction]]:
    """Exact Fourier coefficients of every Ẽ[v^I], |I| <= D, truncated at |alpha| <= T."""
    setting = BasisKind.parse(setting)
    out: dict[tuple[int, ...], dict[CellMultiIndex, Fraction]] = {}
    for alpha in enumerate_alphas(n, m, T, binary=setting is BasisKind.BOOLEAN):
        I = odd_columns(alpha)
        if len(I) > D:
            continue
        c = planted_fourier_coeff(I, alpha, n, m, setting)
        if c:
            out.setdefault(I, {})[alpha] = c
    return out


class ResourceLimit(RuntimeError):
    pass


def build_pe(instance: Instance, D: int, T: int = DEFAULT_T, mode: str = "shape-sum",
             catalog_cap: int = 5000) -> PseudoExpectation:
    if D % 2:
        raise ValueError("D must be even")
    n, m = instance.n, instance.m
    setting = instance.setting
    if mode == "alpha-enum":
        if n * m > 12 or T > 4:
            raise ResourceLimit("alpha enumeration is an oracle for n*m <= 12 and T <= 4")
        values: dict[tuple[int, ...], float] = {}
        for I, terms in fourier_expansion(n, m, D, T, setting).items():
            values[I] = sum(float(c) * character(a, instance.data, setting) for a, c in terms.items())
        return PseudoExpectation(n, D, T, values)
    if mode != "shape-sum":
        raise ValueError(f"unknown mode {mode!r}")
    table = HermiteTable(instance.data, setting)
    flt = "calL-bool" if setting is BasisKind.BOOLEAN else "calL"
    values = {(): 0.0}
    cols = IndexSpace(n, m, [(0, 0)])
    for k in range(0, min(D, n) + 1):
        catalog = enumerate_shapes(k + T + T // 4, T, flt, exact_u=k, exact_v=0)
        if len(catalog) > catalog_cap:
            raise ResourceLimit(f"catalog of {len(catalog)} shapes exceeds cap {catalog_cap}")
        rows = IndexSpace(n, m, [(k, 0)])
        acc = np.zeros(rows.size)
        for shape in catalog:
            lam = lambda_coeff(shape, setting, n)
            if lam:
                acc += float(lam) * realize(shape, table, rows, cols).matrix[:, 0]
        blk = rows.blocks[(k, 0)]
        for r in range(blk.size):
            if acc[r] != 0.0:
                values[tuple(int(x) for x in blk.sq[r])] = float(acc[r])
    return PseudoExpectation(n, D, T, values)


class DegenerateInstance(ZeroDivisionError):
    pass


def normalize(pe: PseudoExpectation) -> PseudoExpectation:
    one = pe.one
    if one == 0:
        raise DegenerateInstance("Ẽ[1] = 0")
    return PseudoExpectation(pe.n, pe.D, pe.T, {k: v / one for k, v in pe.values.items()}, True)


# ---------------------------------------------------------------- exact oracles


def boolean_planted_oracle(n: int, m: int, I: Iterable[int], alpha: CellMultiIndex) -> Fraction:
    """E_pl[v^I chi_alpha(d)] by enumerating every (v, b, d) of the boolean planted model."""
    root = isqrt_exact(n)
    if root is None:
        raise UnsupportedInstance("needs perfect-square n")
    I = list(I)
    slices = {}
    for b in (1, -1):
        neg = (n - b * root) // 2
        pts = []
        for S in itertools.combinations(range(n), neg):
            x = [1] * n
            for i in S:
                x[i] = -1
            pts.append(x)
        slices[b] = pts
    total = Fraction(0)
    count = 0
    for w in itertools.product((1, -1), repeat=n):
        wI = math.prod(w[i] for i in I)
        # rows are independent given w
        row_means = []
        for u in range(m):
            cells = [i for (uu, i), a in alpha.cells.items() if uu == u and a % 2]
            acc = Fraction(0)
            for b in (1, -1):
                pts = slices[b]
                acc += Fraction(sum(math.prod(w[i] * x[i] for i in cells) for x in pts), len(pts))
            row_means.append(acc / 2)
        total += wI * math.prod(row_means)
        count += 1
    return total / count * Fraction(1, root ** len(I))


# ---------------------------------------------------------------- truncation window


def _mul_h1(poly: dict, cell) -> dict:
    out: dict = {}
    for alpha, c in poly.items():
        a = alpha[cell]
        cells = dict(alpha.cells)
        cells[cell] = a + 1
        k = CellMultiIndex(cells)
        out[k] = out.get(k, 0) + c
        if a:
            cells[cell] = a - 1
            k = CellMultiIndex(cells)
            out[k] = out.get(k, 0) + a * c
    return out


def _mul_h2(poly: dict, cell) -> dict:
    out: dict = {}
    for alpha, c in poly.items():
        a = alpha[cell]
        for shift, mult in ((2, 1), (0, 2 * a), (-2, a * (a - 1))):
            if mult == 0:
                continue
            cells = dict(alpha.cells)
            cells[cell] = a + shift
            k = CellMultiIndex(cells)
            out[k] = out.get(k, 0) + mult * c
    return out


def _flip(poly: dict, cells_to_flip) -> dict:
    """Multiply boolean characters by d_{c1} d_{c2} (x^2 = 1)."""
    out: dict = {}
    for alpha, c in poly.items():
        cells = dict(alpha.cells)
        for cell in cells_to_flip:
            if cells.get(cell, 0):
                cells.pop(cell)
            else:
                cells[cell] = 1
        k = CellMultiIndex(cells)
        out[k] = out.get(k, 0) + c
    return out


def constraint_residual(n: int, m: int, D: int, T: int, setting: BasisKind | str = BasisKind.BOOLEAN
                        ) -> dict[tuple[tuple[int, ...], int], dict[CellMultiIndex, Fraction]]:
    """Fourier expansion in d of Ẽ[v^I (<v, d_u>^2 - 1)] for |I| <= D - 2, exactly."""
    setting = BasisKind.parse(setting)
    boolean = setting is BasisKind.BOOLEAN
    expansion = fourier_expansion(n, m, D, T, setting)
    nn = Fraction(n)

    def pe_poly(idx) -> tuple[Fraction, dict]:
        counts: dict[int, int] = {}
        for i in idx:
            counts[i] = counts.get(i, 0) + 1
        scale = Fraction(1)
        K = []
        for i, c in counts.items():
            scale /= nn ** (c // 2)
            if c % 2:
                K.append(i)
        return scale, expansion.get(tuple(sorted(K)), {})

    out = {}
    for size in range(0, D - 1):
        for I in itertools.combinations(range(n), size):
            for u in range(m):
                res: dict = {}
                for j in range(n):
                    for jp in range(n):
                        if j == jp:
                            continue
                        scale, poly = pe_poly(I + (j, jp))
                        if not poly:
                            continue
                        if boolean:
                            prod = _flip(poly, [(u, j), (u, jp)])
                        else:
                            prod = _mul_h1(_mul_h1(poly, (u, j)), (u, jp))
                        for k, c in prod.items():
                            res[k] = res.get(k, 0) + scale * c
                if not boolean:
                    scale, poly = pe_poly(I)
                    for j in range(n):
                        for k, c in _mul_h2(poly, (u, j)).items():
                            res[k] = res.get(k, 0) + scale * c / nn
                out[(I, u)] = {k: c for k, c in res.items() if c}
    return out


@dataclass
class WindowReport:
    n: int
    m: int
    D: int
    T: int
    setting: str
    support_sizes: list[int]
    l2: float
    in_window: bool

    def to_json(self) -> dict:
        return self.__dict__.copy()


def truncation_window_check(n: int, m: int, D: int, T: int, setting: BasisKind | str = BasisKind.BOOLEAN) -> WindowReport:
    setting = BasisKind.parse(setting)
    res = constraint_residual(n, m, D, T, setting)
    sizes = set()
    sq = Fraction(0)
    for poly in res.values():
        for alpha, c in poly.items():
            sizes.add(alpha.total)
            sq += c * c * alpha.factorial()
    sizes = sorted(sizes)
    ok = all(T - 2 <= s <= T + 2 for s in sizes)
    return WindowReport(n, m, D, T, setting.value, sizes, math.sqrt(sq), ok)
