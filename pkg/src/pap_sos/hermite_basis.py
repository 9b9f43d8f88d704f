"""Unnormalized (probabilists') Hermite polynomials and the degenerate boolean basis.

Everything here is exact: integers and ``fractions.Fraction``.  Floating point
only enters when a caller passes a float argument to :func:`hermite_eval`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from functools import lru_cache
from typing import Iterable, Mapping


class BasisKind(str, Enum):
    GAUSSIAN = "gaussian-hermite"
    BOOLEAN = "boolean-parity"

    @classmethod
    def parse(cls, value: "BasisKind | str") -> "BasisKind":
        if isinstance(value, BasisKind):
            return value
        aliases = {"gaussian": cls.GAUSSIAN, "boolean": cls.BOOLEAN}
        if value in aliases:
            return aliases[value]
        return cls(value)


@lru_cache(maxsize=None)
def hermite_coeffs(k: int) -> tuple[int, ...]:
    """Monomial coefficients (lowest degree first) of h_k."""
    if k < 0:
        raise ValueError("degree must be nonnegative")
    if k == 0:
        return (1,)
    if k == 1:
        return (0, 1)
    prev, cur = hermite_coeffs(k - 2), hermite_coeffs(k - 1)
    out = [0] * (k + 1)
    # h_k = x h_{k-1} - (k-1) h_{k-2}
    for i, c in enumerate(cur):
        out[i + 1] += c
    for i, c in enumerate(prev):
        out[i] -= (k - 1) * c
    return tuple(out)


def hermite_eval(k: int, x, basis: BasisKind | str = BasisKind.GAUSSIAN):
    """Value of the degree-k basis polynomial at x (exact for int/Fraction x)."""
    if k < 0:
        raise ValueError("degree must be nonnegative")
    basis = BasisKind.parse(basis)
    if basis is BasisKind.BOOLEAN:
        if k == 0:
            return 1
        return x if k == 1 else 0
    h_prev, h_cur = 1, x
    if k == 0:
        return 1
    for j in range(1, k):
        h_prev, h_cur = h_cur, x * h_cur - j * h_prev
    return h_cur


@lru_cache(maxsize=None)
def hermite_at_one(k: int) -> int:
    return hermite_eval(k, 1)


def hermite_one_bound_check(k_max: int) -> bool:
    if k_max < 1:
        raise ValueError("k_max must be at least 1")
    return all(abs(hermite_at_one(k)) <= k ** k for k in range(1, k_max + 1))


@lru_cache(maxsize=None)
def gaussian_moment(k: int) -> int:
    """E[z^k] for standard normal z, i.e. (k-1)!! for even k and 0 for odd k."""
    if k % 2:
        return 0
    out = 1
    for j in range(k - 1, 0, -2):
        out *= j
    return out


def hermite_matrix(x, k_max: int):
    """Stack [h_0(x), ..., h_{k_max}(x)] along a new leading axis (numpy arrays)."""
    import numpy as np

    x = np.asarray(x, dtype=float)
    out = np.empty((k_max + 1,) + x.shape)
    out[0] = 1.0
    if k_max >= 1:
        out[1] = x
    for j in range(1, k_max):
        out[j + 1] = x * out[j] - j * out[j - 1]
    return out


@dataclass(frozen=True)
class LinearCombination:
    """Finite combination sum_k c_k h_k with exact rational coefficients."""

    coeffs: Mapping[int, Fraction] = field(default_factory=dict)

    def __post_init__(self):
        clean = {int(k): Fraction(v) for k, v in self.coeffs.items() if v != 0}
        if any(k < 0 for k in clean):
            raise ValueError("degrees must be nonnegative")
        object.__setattr__(self, "coeffs", dict(sorted(clean.items())))

    def __getitem__(self, k: int) -> Fraction:
        return self.coeffs.get(k, Fraction(0))

    def __iter__(self):
        return iter(self.coeffs.items())

    def __len__(self) -> int:
        return len(self.coeffs)

    def __eq__(self, other) -> bool:
        if isinstance(other, LinearCombination):
            return self.coeffs == other.coeffs
        if isinstance(other, Mapping):
            return self == LinearCombination(other)
        return NotImplemented

    def degrees(self) -> list[int]:
        return list(self.coeffs)

    def evaluate(self, x, basis: BasisKind | str = BasisKind.GAUSSIAN):
        return sum((c * hermite_eval(k, x, basis) for k, c in self.coeffs.items()), Fraction(0))


def _poly_mul(a: list[int], b: Iterable[int]) -> list[int]:
    b = list(b)
    out = [0] * (len(a) + len(b) - 1)
    for i, x in enumerate(a):
        if x:
            for j, y in enumerate(b):
                out[i + j] += x * y
    return out


def linearize_product(
    labels: Iterable[int], basis: BasisKind | str = BasisKind.GAUSSIAN, strict: bool = False
) -> LinearCombination:
    """Expand h_{l_1} ... h_{l_k} back into the basis.

    Gaussian case: the coefficient of h_j is E[p(z) h_j(z)] / j!, computed
    from the exact moment table.  Label 0 is the constant 1 and is dropped
    unless ``strict`` is set.
    """
    labels = [int(l) for l in labels]
    if not labels:
        raise ValueError("labels must be nonempty")
    if any(l < 0 for l in labels):
        raise ValueError("labels must be nonnegative")
    if strict and any(l == 0 for l in labels):
        raise ValueError("label 0 rejected in strict mode")
    labels = [l for l in labels if l > 0]
    basis = BasisKind.parse(basis)
    if basis is BasisKind.BOOLEAN:
        if any(l >= 2 for l in labels):
            return LinearCombination({})
        return LinearCombination({len(labels) % 2: 1})
    if not labels:
        return LinearCombination({0: 1})
    poly = [1]
    for l in labels:
        poly = _poly_mul(poly, hermite_coeffs(l))
    total = sum(labels)
    out: dict[int, Fraction] = {}
    for j in range(total % 2, total + 1, 2):
        hj = hermite_coeffs(j)
        inner = 0
        for a, ca in enumerate(poly):
            if ca:
                for b, cb in enumerate(hj):
                    if cb:
                        inner += ca * cb * gaussian_moment(a + b)
        if inner:
            out[j] = Fraction(inner, math.factorial(j))
    return LinearCombination(out)


def block_matching_count(labels: list[int], p: int) -> int:
    """E[h_{l_1}...h_{l_k} h_p] as a count of block perfect matchings (cross-check oracle)."""
    blocks: list[int] = []
    for b, l in enumerate(list(labels) + [p]):
        blocks.extend([b] * l)

    @lru_cache(maxsize=None)
    def count(remaining: tuple[int, ...]) -> int:
        if not remaining:
            return 1
        first, rest = remaining[0], remaining[1:]
        total = 0
        for i, other in enumerate(rest):
            if blocks[other] != blocks[first]:
                total += count(rest[:i] + rest[i + 1 :])
        return total

    return count(tuple(range(len(blocks))))


def coefficient_bound(labels: Iterable[int]) -> int:
    labels = [l for l in labels if l > 0]
    total = sum(labels)
    return (2 * total) ** (total - max(labels)) if labels else 1


@dataclass(frozen=True)
class CellMultiIndex:
    """Multi-index alpha over cells (u, i) of [m] x [n] with cached row/column sums."""

    cells: Mapping[tuple[int, int], int]
    total: int = field(init=False)
    row_sums: Mapping[int, int] = field(init=False)
    col_sums: Mapping[int, int] = field(init=False)

    def __post_init__(self):
        clean = {(int(u), int(i)): int(a) for (u, i), a in self.cells.items() if a}
        if any(a < 0 for a in clean.values()):
            raise ValueError("multiplicities must be nonnegative")
        rows: dict[int, int] = {}
        cols: dict[int, int] = {}
        for (u, i), a in clean.items():
            rows[u] = rows.get(u, 0) + a
            cols[i] = cols.get(i, 0) + a
        object.__setattr__(self, "cells", dict(sorted(clean.items())))
        object.__setattr__(self, "total", sum(clean.values()))
        object.__setattr__(self, "row_sums", rows)
        object.__setattr__(self, "col_sums", cols)

    @classmethod
    def single(cls, a: int) -> "CellMultiIndex":
        return cls({(0, 0): a})

    def __getitem__(self, cell: tuple[int, int]) -> int:
        return self.cells.get(cell, 0)

    def __hash__(self) -> int:
        return hash(tuple(self.cells.items()))

    def factorial(self) -> int:
        out = 1
        for a in self.cells.values():
            out *= math.factorial(a)
        return out

    def is_binary(self) -> bool:
        return all(a == 1 for a in self.cells.values())

    def check(self) -> bool:
        fresh = CellMultiIndex(dict(self.cells))
        return (
            fresh.total == self.total
            and dict(fresh.row_sums) == dict(self.row_sums)
            and dict(fresh.col_sums) == dict(self.col_sums)
        )


def linearization_coeff(alpha: CellMultiIndex, beta: CellMultiIndex, delta: CellMultiIndex) -> int:
    """l_{alpha, beta, alpha+beta-2 delta} = prod binom(a, d) binom(b, d) d!."""
    out = 1
    for cell, d in delta.cells.items():
        a, b = alpha[cell], beta[cell]
        if d > a or d > b:
            raise ValueError(f"delta exceeds alpha or beta at cell {cell}")
        out *= math.comb(a, d) * math.comb(b, d) * math.factorial(d)
    return out
