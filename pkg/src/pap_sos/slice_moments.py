"""Moments of the boolean slice S(sqrt n) and the partition bookkeeping behind them.

e(k) is the mean of x_1 ... x_k over the uniform point of {x in {+-1}^n : sum x = sqrt n}.
For odd k and non-square n the value carries an irrational sqrt(n) factor, so the
recurrence is carried out on the scaled payload ê(k) = e(k) n^{k/2}, which is rational
for every n.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from itertools import combinations


class UnsupportedInstance(ValueError):
    pass


@dataclass(frozen=True)
class Partition:
    parts: tuple[int, ...]

    def __post_init__(self):
        parts = tuple(int(p) for p in self.parts)
        if any(p <= 0 for p in parts):
            raise ValueError("parts must be positive")
        object.__setattr__(self, "parts", tuple(sorted(parts, reverse=True)))

    @property
    def k(self) -> int:
        return sum(self.parts)

    @property
    def length(self) -> int:
        return len(self.parts)

    @property
    def odd_parts(self) -> int:
        return sum(p % 2 for p in self.parts)

    def transpose(self) -> "Partition":
        if not self.parts:
            return self
        return Partition(tuple(sum(1 for p in self.parts if p >= i) for i in range(1, self.parts[0] + 1)))

    def multinomial(self) -> int:
        out = math.factorial(self.k)
        for p in self.parts:
            out //= math.factorial(p)
        return out


def partitions(k: int) -> list[Partition]:
    if k < 0:
        raise ValueError("k must be nonnegative")

    def gen(remaining: int, largest: int):
        if remaining == 0:
            yield ()
            return
        for p in range(min(remaining, largest), 0, -1):
            for rest in gen(remaining - p, p):
                yield (p,) + rest

    return [Partition(p) for p in gen(k, k)]


def aut_size(lam: Partition) -> int:
    counts: dict[int, int] = {}
    for p in lam.parts:
        counts[p] = counts.get(p, 0) + 1
    out = 1
    for c in counts.values():
        out *= math.factorial(c)
    return out


def falling_factorial(n: int, k: int) -> int:
    out = 1
    for i in range(k):
        out *= n - i
    return out


def isqrt_exact(n: int) -> int | None:
    r = math.isqrt(n)
    return r if r * r == n else None


def slice_moment_bruteforce(n: int, k: int) -> Fraction:
    root = isqrt_exact(n)
    if root is None:
        raise UnsupportedInstance(f"slice S(sqrt n) is empty for non-square n={n}")
    if not 0 <= k <= n:
        raise ValueError("need 0 <= k <= n")
    r = (n - root) // 2  # number of -1 coordinates
    if n <= 20:
        total = 0
        count = 0
        for neg in combinations(range(n), r):
            count += 1
            total += (-1) ** sum(1 for i in neg if i < k)
        return Fraction(total, count)
    num = sum((-1) ** j * math.comb(k, j) * math.comb(n - k, r - j) for j in range(0, min(k, r) + 1))
    return Fraction(num, math.comb(n, r))


def identity_coefficient(n: int, lam: Partition) -> int:
    """(k!/prod lam_i!) * (n)_{lam^t_1} / |aut(lam)|, always an integer."""
    num = lam.multinomial() * falling_factorial(n, lam.length)
    den = aut_size(lam)
    assert num % den == 0
    return num // den


@lru_cache(maxsize=None)
def e_scaled(n: int, k: int) -> Fraction:
    """ê(k) = e(k) * n^{k/2}, from the triangular system sum_lam c_lam ê(j_lam) n^{(k-j_lam)/2} = n^k."""
    if k < 0:
        raise ValueError("k must be nonnegative")
    if k == 0:
        return Fraction(1)
    lead = falling_factorial(n, k)
    if lead == 0:
        raise ValueError(f"(n)_k vanishes for n={n}, k={k}")
    rest = Fraction(0)
    for lam in partitions(k):
        if lam.parts[0] == 1:
            continue
        j = lam.odd_parts
        rest += identity_coefficient(n, lam) * e_scaled(n, j) * Fraction(n) ** ((k - j) // 2)
    return (Fraction(n) ** k - rest) / lead


def e_coeff(n: int, k: int) -> Fraction:
    """Exact e(k).  Odd k needs a perfect-square n; use :func:`e_scaled` otherwise."""
    scaled = e_scaled(n, k)
    if k % 2 == 0:
        return scaled / Fraction(n) ** (k // 2)
    root = isqrt_exact(n)
    if root is None:
        raise ValueError(f"e({k}) is irrational for non-square n={n}; use e_scaled")
    return scaled / Fraction(root) ** k


def e_float(n: int, k: int) -> float:
    return float(e_scaled(n, k)) * n ** (-k / 2)


def moment_bound(n: int, k: int) -> float:
    return float(k) ** (3 * k) * n ** (-k / 2)


def identity_lhs_scaled(n: int, k: int) -> Fraction:
    """Left side of the expansion identity multiplied by n^{k/2}; should equal n^k."""
    return sum(
        (identity_coefficient(n, lam) * e_scaled(n, lam.odd_parts) * Fraction(n) ** ((k - lam.odd_parts) // 2)
         for lam in partitions(k)),
        Fraction(0),
    )


@dataclass
class SliceMomentTable:
    n: int
    values: dict[int, Fraction] = field(default_factory=dict)

    @classmethod
    def build(cls, n: int, k_max: int) -> "SliceMomentTable":
        table = cls(n)
        for k in range(0, min(k_max, n) + 1):
            if k % 2 == 0 or isqrt_exact(n) is not None:
                table.values[k] = e_coeff(n, k)
        return table

    def check(self) -> bool:
        if 2 in self.values and self.values[2] != 0:
            return False
        return all(abs(float(v)) <= moment_bound(self.n, k) * (1 + 1e-12) for k, v in self.values.items() if k > 0)
