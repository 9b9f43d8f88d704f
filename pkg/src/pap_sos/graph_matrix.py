"""Shapes, ribbons and graph matrices.

A shape is a bipartite multigraph between square vertices (coordinates in [n]) and
circle vertices (samples in [m]) with two distinguished vertex sets U and V.  The
graph matrix of a shape sums, over all injective type-preserving labelings, the
product of Hermite polynomials h_l(d[u, i]) along its edges, divided by the number
of automorphisms so that each ribbon is counted once.

Realization avoids explicit ribbon enumeration: the sum over injective labelings is
written by Moebius inversion as a signed sum over vertex merges, and each merged
pattern is an unrestricted tensor contraction handed to ``numpy.einsum``.
"""

from __future__ import annotations

import itertools
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property, lru_cache
from typing import Iterable, Mapping, Sequence

import numpy as np

from .hermite_basis import BasisKind, hermite_at_one, hermite_matrix, linearize_product
from .slice_moments import e_scaled

SQ, CI = "s", "c"
Vertex = tuple  # (kind, id)

MAX_CANON_PERMS = 2_000_000


class ShapeError(ValueError):
    pass


class BudgetExceeded(RuntimeError):
    pass


def _fr(x) -> Fraction:
    return x if isinstance(x, Fraction) else Fraction(x)


@dataclass(frozen=True)
class Shape:
    squares: tuple[int, ...]
    circles: tuple[int, ...]
    U: tuple[Vertex, ...]
    V: tuple[Vertex, ...]
    edges: tuple[tuple[int, int, int], ...]  # (square id, circle id, label)

    def __post_init__(self):
        sq, ci = tuple(sorted(set(self.squares))), tuple(sorted(set(self.circles)))
        if len(sq) != len(self.squares) or len(ci) != len(self.circles):
            raise ShapeError("duplicate vertex ids")
        verts = {(SQ, s) for s in sq} | {(CI, c) for c in ci}
        U = tuple(sorted(set(map(tuple, self.U))))
        V = tuple(sorted(set(map(tuple, self.V))))
        for x in U + V:
            if x not in verts:
                raise ShapeError(f"index vertex {x} not in shape")
        edges = []
        for s, c, l in self.edges:
            if (SQ, s) not in verts or (CI, c) not in verts:
                raise ShapeError(f"edge ({s},{c}) must join a square to a circle")
            if l < 0:
                raise ShapeError("negative label")
            if l > 0:
                edges.append((int(s), int(c), int(l)))
        object.__setattr__(self, "squares", sq)
        object.__setattr__(self, "circles", ci)
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "V", V)
        object.__setattr__(self, "edges", tuple(sorted(edges)))

    @classmethod
    def build(cls, squares, circles, U, V, edges) -> "Shape":
        """Convenience constructor: U, V given as lists of 's3'/'c1'-style strings or vertex tuples."""

        def parse(x):
            if isinstance(x, str):
                return (x[0], int(x[1:]))
            return tuple(x)

        return cls(tuple(squares), tuple(circles), tuple(map(parse, U)), tuple(map(parse, V)), tuple(edges))

    @property
    def vertices(self) -> list[Vertex]:
        return [(SQ, s) for s in self.squares] + [(CI, c) for c in self.circles]

    @property
    def W(self) -> list[Vertex]:
        uv = set(self.U) | set(self.V)
        return [x for x in self.vertices if x not in uv]

    @property
    def num_edges(self) -> int:
        """|E| counted with multiplicity: the sum of edge labels."""
        return sum(l for _, _, l in self.edges)

    def degree(self, x: Vertex) -> int:
        kind, i = x
        pos = 0 if kind == SQ else 1
        return sum(e[2] for e in self.edges if e[pos] == i)

    def neighbors(self, x: Vertex) -> set[Vertex]:
        kind, i = x
        if kind == SQ:
            return {(CI, c) for s, c, _ in self.edges if s == i}
        return {(SQ, s) for s, c, _ in self.edges if c == i}

    def is_proper(self) -> bool:
        pairs = [(s, c) for s, c, _ in self.edges]
        return len(pairs) == len(set(pairs))

    def is_trivial(self) -> bool:
        return set(self.U) == set(self.V) and not self.W and not self.edges

    def transpose(self) -> "Shape":
        return Shape(self.squares, self.circles, self.V, self.U, self.edges)

    def index_type(self, side: str) -> tuple[int, int]:
        idx = self.U if side == "U" else self.V
        return (sum(1 for x in idx if x[0] == SQ), sum(1 for x in idx if x[0] == CI))

    def isolated_W(self) -> list[Vertex]:
        return [x for x in self.W if self.degree(x) == 0]

    def relabeled(self) -> "Shape":
        """Same shape with ids compacted to 0..k-1 in the current order."""
        smap = {s: i for i, s in enumerate(self.squares)}
        cmap = {c: i for i, c in enumerate(self.circles)}
        return self._apply(smap, cmap)

    def _apply(self, smap: Mapping[int, int], cmap: Mapping[int, int]) -> "Shape":
        def mv(x):
            return (SQ, smap[x[1]]) if x[0] == SQ else (CI, cmap[x[1]])

        return Shape(
            tuple(smap[s] for s in self.squares),
            tuple(cmap[c] for c in self.circles),
            tuple(map(mv, self.U)),
            tuple(map(mv, self.V)),
            tuple((smap[s], cmap[c], l) for s, c, l in self.edges),
        )

    @cached_property
    def _canon(self):
        return _canonicalize(self)

    @property
    def key(self) -> bytes:
        return self._canon[0]

    def canonical(self) -> "Shape":
        return self._canon[1]

    def aut(self, ordered: bool = False) -> int:
        if ordered:
            return _count_automorphisms(self, fix=set(self.U) | set(self.V))
        return self._canon[2]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Shape):
            return NotImplemented
        return (self.squares, self.circles, self.U, self.V, self.edges) == (
            other.squares, other.circles, other.U, other.V, other.edges)

    def __hash__(self) -> int:
        return hash((self.squares, self.circles, self.U, self.V, self.edges))

    def to_json(self) -> dict:
        fmt = lambda x: f"{x[0]}{x[1]}"
        return {
            "vertices": [fmt(x) for x in self.vertices],
            "U": [fmt(x) for x in self.U],
            "V": [fmt(x) for x in self.V],
            "edges": [[f"s{s}", f"c{c}", l] for s, c, l in self.edges],
            "key": self.key.decode(),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "Shape":
        sq = [int(v[1:]) for v in obj["vertices"] if v[0] == SQ]
        ci = [int(v[1:]) for v in obj["vertices"] if v[0] == CI]
        edges = [(int(s[1:]), int(c[1:]), int(l)) for s, c, l in obj["edges"]]
        return cls.build(sq, ci, obj["U"], obj["V"], edges)


def trivial_shape(k: int) -> Shape:
    sq = tuple(range(k))
    U = tuple((SQ, i) for i in sq)
    return Shape(sq, (), U, U, ())


# ---------------------------------------------------------------- canonical form


def _refined_classes(shape: Shape, fix: set | None = None) -> list[list[Vertex]]:
    """Color refinement; returns vertex classes in a canonical order."""
    fix = fix or set()
    uset, vset = set(shape.U), set(shape.V)
    verts = shape.vertices
    adj: dict[Vertex, list[tuple[Vertex, int]]] = defaultdict(list)
    deg: dict[Vertex, int] = defaultdict(int)
    for s, c, l in shape.edges:
        adj[(SQ, s)].append(((CI, c), l))
        adj[(CI, c)].append(((SQ, s), l))
        deg[(SQ, s)] += l
        deg[(CI, c)] += l
    color = {x: (x[0], x in uset, x in vset, deg[x]) for x in verts}
    # pointwise-fixed vertices get their own singleton colors (ordered index semantics)
    for x in fix:
        color[x] = color[x] + (("fix", x),)
    rank = {c: i for i, c in enumerate(sorted(set(color.values()), key=repr))}
    color = {x: rank[c] for x, c in color.items()}
    ncolors = len(rank)
    while True:
        sig = {x: (color[x], tuple(sorted((color[y], l) for y, l in adj[x]))) for x in verts}
        rank = {c: i for i, c in enumerate(sorted(set(sig.values())))}
        color = {x: rank[sig[x]] for x in verts}
        if len(rank) == ncolors:
            break
        ncolors = len(rank)
    classes: dict[int, list[Vertex]] = defaultdict(list)
    for x in verts:
        classes[color[x]].append(x)
    return [classes[c] for c in sorted(classes)]


def _encode(shape: Shape, order: Sequence[Vertex]):
    smap, cmap = {}, {}
    for x in order:
        if x[0] == SQ:
            smap[x[1]] = len(smap)
        else:
            cmap[x[1]] = len(cmap)
    mv = lambda x: (x[0], smap[x[1]] if x[0] == SQ else cmap[x[1]])
    enc = (
        len(smap),
        len(cmap),
        tuple(sorted(map(mv, shape.U))),
        tuple(sorted(map(mv, shape.V))),
        tuple(sorted((smap[s], cmap[c], l) for s, c, l in shape.edges)),
    )
    return enc, smap, cmap


def _orderings(classes: list[list[Vertex]]):
    total = 1
    for cl in classes:
        total *= math.factorial(len(cl))
    if total > MAX_CANON_PERMS:
        raise BudgetExceeded(f"canonical form needs {total} permutations")
    for combo in itertools.product(*(itertools.permutations(cl) for cl in classes)):
        yield [x for part in combo for x in part]


_CANON_MEMO: dict[Shape, tuple] = {}
_CANON_MEMO_CAP = 200_000


def _canonicalize(shape: Shape):
    hit = _CANON_MEMO.get(shape)
    if hit is not None:
        return hit
    out = _canonicalize_uncached(shape)
    if len(_CANON_MEMO) >= _CANON_MEMO_CAP:
        _CANON_MEMO.clear()
    _CANON_MEMO[shape] = out
    return out


def _canonicalize_uncached(shape: Shape):
    classes = _refined_classes(shape)
    best, best_maps, count = None, None, 0
    for order in _orderings(classes):
        enc, smap, cmap = _encode(shape, order)
        if best is None or enc < best:
            best, best_maps, count = enc, (smap, cmap), 1
        elif enc == best:
            count += 1
    canon = shape._apply(*best_maps)
    return repr(best).encode(), canon, count


def _count_automorphisms(shape: Shape, fix: set) -> int:
    classes = _refined_classes(shape, fix)
    ref, _, _ = _encode(shape, [x for cl in classes for x in cl])
    return sum(1 for order in _orderings(classes) if _encode(shape, order)[0] == ref)


def canonical_form(shape: Shape) -> Shape:
    return shape.canonical()


def aut_size(shape: Shape, ordered: bool = False) -> int:
    return shape.aut(ordered)


# ---------------------------------------------------------------- enumeration


def _role_configs(max_vertices: int, max_edges: int, max_u: int, max_v: int, max_circles: int,
                  exact_u: int | None, exact_v: int | None):
    for n_b in range(0, min(max_u, max_v) + 1):
        for n_u in range(0, max_u - n_b + 1):
            for n_v in range(0, max_v - n_b + 1):
                if exact_u is not None and n_u + n_b != exact_u:
                    continue
                if exact_v is not None and n_v + n_b != exact_v:
                    continue
                for n_c in range(0, max_circles + 1):
                    for n_w in range(0, max_edges + 1):
                        if n_b + n_u + n_v + n_w + n_c <= max_vertices:
                            yield n_b, n_u, n_v, n_w, n_c


def _label_vectors(npairs: int, budget: int, allowed_labels):
    """All label assignments to npairs slots with total <= budget."""
    if npairs == 0:
        yield ()
        return
    for l in allowed_labels:
        if l > budget:
            break
        for rest in _label_vectors(npairs - 1, budget - l, allowed_labels):
            yield (l,) + rest


def shape_in_calL(shape: Shape, max_edges: int | None = None, boolean: bool = False) -> bool:
    if not shape.is_proper():
        return False
    if any(x[0] != SQ for x in shape.U + shape.V):
        return False
    if shape.isolated_W():
        return False
    uset, vset = set(shape.U), set(shape.V)
    for x in shape.vertices:
        d = shape.degree(x)
        if x[0] == SQ:
            if (d + (x in uset) + (x in vset)) % 2:
                return False
        elif d % 2 or d < 4:
            return False
    if max_edges is not None and shape.num_edges > max_edges:
        return False
    if boolean and any(l != 1 for _, _, l in shape.edges):
        return False
    return True


@dataclass
class ShapeCatalog:
    shapes: list[Shape] = field(default_factory=list)

    def __iter__(self):
        return iter(self.shapes)

    def __len__(self):
        return len(self.shapes)

    def keys(self) -> list[bytes]:
        return [s.key for s in self.shapes]

    def by_edges(self) -> dict[int, list[Shape]]:
        out: dict[int, list[Shape]] = defaultdict(list)
        for s in self.shapes:
            out[s.num_edges].append(s)
        return dict(out)

    def to_json(self) -> list[dict]:
        return [s.to_json() for s in self.shapes]


def enumerate_shapes(
    max_vertices: int,
    max_edges: int,
    filter: str = "calL",
    max_u: int | None = None,
    max_v: int | None = None,
    exact_u: int | None = None,
    exact_v: int | None = None,
) -> ShapeCatalog:
    """Every shape (up to isomorphism) within the caps, exactly once.

    Index sets are square-only and circles live in W for every filter.  ``all``
    keeps proper shapes whose middle vertices are not isolated; ``calL`` adds the
    parity and circle-degree rules; ``calL-bool`` also forces unit labels.
    """
    if filter not in ("all", "calL", "calL-bool"):
        raise ValueError(f"unknown filter {filter!r}")
    max_u = max_vertices if max_u is None else max_u
    max_v = max_vertices if max_v is None else max_v
    calL = filter != "all"
    labels = [1] if filter == "calL-bool" else list(range(1, max_edges + 1))
    max_circles = max_edges // 4 if calL else max_edges
    seen: dict[bytes, Shape] = {}
    for n_b, n_u, n_v, n_w, n_c in _role_configs(max_vertices, max_edges, max_u, max_v, max_circles, exact_u, exact_v):
        sq = list(range(n_b + n_u + n_v + n_w))
        both = sq[:n_b]
        uonly = sq[n_b:n_b + n_u]
        vonly = sq[n_b + n_u:n_b + n_u + n_v]
        U = [(SQ, i) for i in both + uonly]
        V = [(SQ, i) for i in both + vonly]
        ci = list(range(n_c))
        pairs = [(s, c) for s in sq for c in ci]
        slots = [0] + labels
        for vec in _label_vectors(len(pairs), max_edges, slots):
            edges = tuple((s, c, l) for (s, c), l in zip(pairs, vec) if l)
            shape = Shape(tuple(sq), tuple(ci), tuple(U), tuple(V), edges)
            if shape.isolated_W():
                continue
            if calL and not shape_in_calL(shape, max_edges, filter == "calL-bool"):
                continue
            k = shape.key
            if k not in seen:
                seen[k] = shape.canonical()
    return ShapeCatalog(sorted(seen.values(), key=lambda s: (s.num_edges, s.key)))


# ---------------------------------------------------------------- weights, separators, bounds


def weight(vertices: Iterable[Vertex], n: int, m: float) -> float:
    if n < 2:
        raise ValueError("n must be at least 2")
    vertices = list(vertices)
    circles = sum(1 for x in vertices if x[0] == CI)
    squares = len(vertices) - circles
    return circles * math.log(m) / math.log(n) + squares


def _separates(shape: Shape, S: set) -> bool:
    start = [x for x in shape.U if x not in S]
    targets = {x for x in shape.V if x not in S}
    seen = set(start)
    stack = list(start)
    while stack:
        x = stack.pop()
        if x in targets:
            return False
        for y in shape.neighbors(x):
            if y not in S and y not in seen:
                seen.add(y)
                stack.append(y)
    return True


def min_vertex_separator(shape: Shape, n: int, m: float, max_vertices: int = 14) -> tuple[tuple[Vertex, ...], float]:
    verts = shape.vertices
    if len(verts) > max_vertices:
        raise BudgetExceeded("separator search limited to small shapes")
    must = set(shape.U) & set(shape.V)
    free = [x for x in verts if x not in must]
    best, best_key = None, None
    for r in range(len(free) + 1):
        for extra in itertools.combinations(free, r):
            S = must | set(extra)
            if not _separates(shape, S):
                continue
            w = weight(S, n, m)
            key = (round(w, 12), tuple(sorted(S)))
            if best_key is None or key < best_key:
                best, best_key = tuple(sorted(S)), key
    return best, weight(best, n, m)


def norm_bound_exponent(shape: Shape, n: int, m: float) -> float:
    _, w_sep = min_vertex_separator(shape, n, m)
    return (weight(shape.vertices, n, m) - w_sep + weight(shape.isolated_W(), n, m)) / 2


def norm_bound(shape: Shape, n: int, m: float, log_exponent_budget: float = 1.0) -> float:
    """Graph-matrix norm bound with polylog prefactor 2(|V|(1+|E|) log n)^{C(|V_rel|+|E|)}."""
    expo = norm_bound_exponent(shape, n, m)
    nv = len(shape.vertices)
    ne = shape.num_edges
    v_rel = nv - len(set(shape.U) & set(shape.V))
    prefactor = 2.0 * (max(nv, 1) * (1 + ne) * math.log(n)) ** (log_exponent_budget * (v_rel + ne))
    return prefactor * n ** expo


def spectral_norm(M: np.ndarray, dense_limit: int = 600) -> float:
    """Largest singular value; Lanczos on big matrices, a full SVD otherwise."""
    M = np.asarray(M, dtype=float)
    if min(M.shape) <= dense_limit:
        return float(np.linalg.norm(M, 2)) if M.size else 0.0
    from scipy.sparse.linalg import svds

    s = svds(M, k=1, tol=1e-8, return_singular_vectors=False, random_state=0)
    return float(s[0])


def lambda_coeff(shape: Shape, setting: BasisKind | str, n: int) -> Fraction:
    """Coefficient of M_shape in the pseudocalibrated moment matrix (0 outside the family).

    Boolean values need n^{(|U|+|V|)/2} e(deg) products to be rational, which holds
    whenever every circle degree is even (always true in the family).
    """
    setting = BasisKind.parse(setting)
    boolean = setting is BasisKind.BOOLEAN
    if not shape_in_calL(shape, boolean=boolean):
        return Fraction(0)
    nu, nv = len(shape.U), len(shape.V)
    if boolean:
        out = Fraction(1)
        for c in shape.circles:
            d = shape.degree((CI, c))
            out *= e_scaled(n, d) / Fraction(n) ** (d // 2)
        return out * _n_power(n, -(nu + nv))
    out = Fraction(1)
    for c in shape.circles:
        out *= hermite_at_one(shape.degree((CI, c)))
    for _, _, l in shape.edges:
        out /= math.factorial(l)
    return out * _n_power(n, -(nu + nv + shape.num_edges))


def _n_power(n: int, half_exp: int) -> Fraction:
    """n^{half_exp/2}; half_exp must be even for the result to be rational."""
    if half_exp % 2:
        root = math.isqrt(n)
        if root * root != n:
            raise ValueError("odd power of sqrt(n) with non-square n")
        return Fraction(root) ** half_exp
    return Fraction(n) ** (half_exp // 2)


def coefficient_bound_holds(shape: Shape, n: int) -> bool:
    eta = n ** -0.5
    e = shape.num_edges
    lam = abs(float(lambda_coeff(shape, "gaussian", n)))
    bound = eta ** (len(shape.U) + len(shape.V)) * (e ** (3 * e) if e else 1) * n ** (-e / 2)
    return lam <= bound * (1 + 1e-12)


def charging_exponent(shape: Shape, n: int, m: float, eps: float) -> tuple[float, float]:
    from .spider_web import is_spider

    if shape.is_trivial() or not shape_in_calL(shape):
        raise ShapeError("charging needs a non-trivial shape in the family")
    if is_spider(shape) is not None:
        raise ShapeError("spiders are handled by the killing argument")
    _, w_sep = min_vertex_separator(shape, n, m)
    lhs = (weight(shape.vertices, n, m) - w_sep) / 2 - shape.num_edges / 2
    return lhs, -(eps / 10) * shape.num_edges


# ---------------------------------------------------------------- index spaces and realization


@lru_cache(maxsize=None)
def _lex_rank_table(n: int, a: int) -> np.ndarray:
    """G[i, x] = number of a-subsets whose i-th element is < x given a fixed prefix; used for lex rank."""
    G = np.zeros((max(a, 1), n + 1), dtype=np.int64)
    for i in range(a):
        for x in range(1, n + 1):
            G[i, x] = G[i, x - 1] + math.comb(n - x, a - 1 - i)
    return G


def lex_rank(combos: np.ndarray, n: int) -> np.ndarray:
    combos = np.asarray(combos, dtype=np.int64)
    if combos.ndim == 1:
        combos = combos[None, :]
    a = combos.shape[1]
    if a == 0:
        return np.zeros(combos.shape[0], dtype=np.int64)
    G = _lex_rank_table(n, a)
    rank = np.zeros(combos.shape[0], dtype=np.int64)
    prev = np.zeros(combos.shape[0], dtype=np.int64)
    for i in range(a):
        rank += G[i, combos[:, i]] - G[i, prev]
        prev = combos[:, i] + 1
    return rank


@lru_cache(maxsize=None)
def _combos(n: int, k: int) -> np.ndarray:
    rows = list(itertools.combinations(range(n), k))
    arr = np.array(rows, dtype=np.int64).reshape(len(rows), k)
    arr.flags.writeable = False
    return arr


@dataclass
class IndexBlock:
    n_sq: int
    n_ci: int
    sq: np.ndarray  # (N, n_sq) sorted square tuples
    ci: np.ndarray  # (N, n_ci)
    offset: int

    @property
    def size(self) -> int:
        return self.sq.shape[0]


class IndexSpace:
    """Matrix indices: sets of squares and circles, graded by (size, #circles), lex inside a block."""

    def __init__(self, n: int, m: int, blocks: Sequence[tuple[int, int]]):
        self.n, self.m = n, m
        self.blocks: dict[tuple[int, int], IndexBlock] = {}
        offset = 0
        for a, b in blocks:
            if (a, b) in self.blocks:
                continue
            sq = _combos(n, a)
            ci = _combos(m, b)
            # circles vary fastest
            sqr = np.repeat(sq, ci.shape[0], axis=0)
            cir = np.tile(ci, (sq.shape[0], 1))
            self.blocks[(a, b)] = IndexBlock(a, b, sqr, cir, offset)
            offset += sqr.shape[0]
        self.size = offset
        self._pos: dict | None = None

    @classmethod
    def subsets(cls, n: int, max_size: int, min_size: int = 0, m: int = 1) -> "IndexSpace":
        return cls(n, m, [(k, 0) for k in range(min_size, max_size + 1)])

    def keys(self) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
        out = []
        for blk in self.blocks.values():
            out.extend((tuple(map(int, s)), tuple(map(int, c))) for s, c in zip(blk.sq, blk.ci))
        return out

    def position(self, squares: Iterable[int], circles: Iterable[int] = ()) -> int:
        if self._pos is None:
            self._pos = {k: i for i, k in enumerate(self.keys())}
        return self._pos[(tuple(sorted(squares)), tuple(sorted(circles)))]

    def block_slice(self, a: int, b: int = 0) -> slice:
        blk = self.blocks[(a, b)]
        return slice(blk.offset, blk.offset + blk.size)

    def describe(self) -> list[list]:
        return [[list(s), list(c)] for s, c in self.keys()]


@dataclass
class RealizedMatrix:
    matrix: np.ndarray
    rows: IndexSpace
    cols: IndexSpace

    def __matmul__(self, other: "RealizedMatrix") -> "RealizedMatrix":
        return RealizedMatrix(self.matrix @ other.matrix, self.rows, other.cols)


class HermiteTable:
    """Cache of h_l(d) arrays for one instance (shape (m, n) each)."""

    def __init__(self, data: np.ndarray, basis: BasisKind | str = BasisKind.GAUSSIAN):
        self.data = np.asarray(data, dtype=float)
        self.basis = BasisKind.parse(basis)
        self._cache: dict[int, np.ndarray] = {}
        self._ones: dict[int, np.ndarray] = {}

    @property
    def m(self) -> int:
        return self.data.shape[0]

    @property
    def n(self) -> int:
        return self.data.shape[1]

    def __getitem__(self, l: int) -> np.ndarray:
        if l not in self._cache:
            if self.basis is BasisKind.BOOLEAN:
                arr = np.ones_like(self.data) if l == 0 else (self.data if l == 1 else np.zeros_like(self.data))
            else:
                arr = hermite_matrix(self.data, l)[l]
            self._cache[l] = arr
        return self._cache[l]

    def ones(self, size: int) -> np.ndarray:
        if size not in self._ones:
            self._ones[size] = np.ones(size)
        return self._ones[size]


def _as_table(instance, basis=None) -> HermiteTable:
    if isinstance(instance, HermiteTable):
        return instance
    data = getattr(instance, "data", instance)
    setting = basis if basis is not None else getattr(instance, "setting", BasisKind.GAUSSIAN)
    return HermiteTable(data, setting)


def _merge_partitions(uv: list[Vertex], w: list[Vertex]):
    """Type-pure partitions of uv + w in which no block holds two uv vertices, with Moebius weights."""
    blocks0 = [[x] for x in uv]

    def rec(i, blocks):
        if i == len(w):
            mu = 1
            for b in blocks:
                k = len(b)
                mu *= (-1) ** (k - 1) * math.factorial(k - 1)
            yield [list(b) for b in blocks], mu
            return
        x = w[i]
        for b in blocks:
            if b[0][0] == x[0]:
                b.append(x)
                yield from rec(i + 1, blocks)
                b.pop()
        blocks.append([x])
        yield from rec(i + 1, blocks)
        blocks.pop()

    yield from rec(0, blocks0)


_PATHS: dict[tuple, list] = {}


def _einsum_path(operands: list, out_idx: list) -> list:
    """Contraction path cached by operand shapes and subscripts."""
    key = tuple((op.shape, tuple(sub)) for op, sub in zip(operands[::2], operands[1::2])) + (tuple(out_idx),)
    path = _PATHS.get(key)
    if path is None:
        path = np.einsum_path(*operands, out_idx, optimize="greedy")[0]
        _PATHS[key] = path
    return path


def ribbon_tensor(shape: Shape, table: HermiteTable, uv_order: Sequence[Vertex] | None = None,
                  work_budget: float = 5e8) -> np.ndarray:
    """T[x_1..x_r] = sum over injective extensions to W of the edge product, for U∪V labeled x.

    Entries with repeated labels among U∪V are meaningless and must be masked by the caller.
    """
    n, m = table.n, table.m
    uv = list(uv_order) if uv_order is not None else list(dict.fromkeys(list(shape.U) + list(shape.V)))
    w = shape.W
    size = lambda x: n if x[0] == SQ else m
    out_shape = tuple(size(x) for x in uv)
    if float(np.prod(out_shape, dtype=float)) > work_budget:
        raise BudgetExceeded(f"realization tensor of shape {out_shape} exceeds budget")
    total = np.zeros(out_shape)
    for blocks, mu in _merge_partitions(uv, w):
        where = {x: bi for bi, b in enumerate(blocks) for x in b}
        operands = []
        touched = set()
        for s, c, l in shape.edges:
            bs, bc = where[(SQ, s)], where[(CI, c)]
            operands += [table[l], [bc, bs]]
            touched |= {bs, bc}
        scalar = float(mu)
        for bi, b in enumerate(blocks):
            if bi in touched:
                continue
            if bi < len(uv):
                operands += [table.ones(size(b[0])), [bi]]
            else:
                scalar *= size(b[0])
        out_idx = list(range(len(uv)))
        if operands:
            term = np.einsum(*operands, out_idx, optimize=_einsum_path(operands, out_idx))
        else:
            term = np.ones(())
        total = total + scalar * term
    return total


def realize(shape: Shape, instance, rows: IndexSpace | None = None, cols: IndexSpace | None = None,
            basis: BasisKind | str | None = None, work_budget: float = 5e8, aut: int | None = None) -> RealizedMatrix:
    """Dense graph matrix of ``shape`` on the given instance."""
    table = _as_table(instance, basis)
    n, m = table.n, table.m
    ua, ub = shape.index_type("U"), shape.index_type("V")
    rows = rows or IndexSpace(n, m, [ua])
    cols = cols or IndexSpace(n, m, [ub])
    if float(rows.size) * cols.size > work_budget:
        raise BudgetExceeded(f"output of {rows.size} x {cols.size} exceeds budget")
    M = np.zeros((rows.size, cols.size))
    if ua not in rows.blocks or ub not in cols.blocks:
        return RealizedMatrix(M, rows, cols)
    uv = list(dict.fromkeys(list(shape.U) + list(shape.V)))
    T = ribbon_tensor(shape, table, uv, work_budget)
    rblk, cblk = rows.blocks[ua], cols.blocks[ub]
    shared = set(shape.U) & set(shape.V)
    groups = {}
    for kind, size in ((SQ, n), (CI, m)):
        groups[kind] = (
            [x for x in shape.U if x[0] == kind and x in shared],
            [x for x in shape.U if x[0] == kind and x not in shared],
            [x for x in shape.V if x[0] == kind and x not in shared],
        )
    # Injectivity forces A ∩ B = σ(U ∩ V), so each (A, B) entry is read off from the
    # union A ∪ B split into shared / U-only / V-only parts.
    sq_parts = list(_split_patterns(n, [len(g) for g in groups[SQ]]))
    ci_parts = list(_split_patterns(m, [len(g) for g in groups[CI]]))
    a = shape.aut() if aut is None else aut
    n_rc, n_cc = math.comb(m, ua[1]), math.comb(m, ub[1])
    for Xs, ps in sq_parts:
        for Xc, pc in ci_parts:
            ra = lex_rank(Xs[:, sorted(ps[0] + ps[1])], n)[:, None] * n_rc + lex_rank(Xc[:, sorted(pc[0] + pc[1])], m)[None, :]
            cb = lex_rank(Xs[:, sorted(ps[0] + ps[2])], n)[:, None] * n_cc + lex_rank(Xc[:, sorted(pc[0] + pc[2])], m)[None, :]
            vals = np.zeros(ra.shape)
            perm_sets = [itertools.permutations(p) for p in ps] + [itertools.permutations(p) for p in pc]
            for choice in itertools.product(*map(list, perm_sets)):
                where = {}
                for g, pos in zip(groups[SQ], choice[:3]):
                    for x, j in zip(g, pos):
                        where[x] = Xs[:, j][:, None]
                for g, pos in zip(groups[CI], choice[3:]):
                    for x, j in zip(g, pos):
                        where[x] = Xc[:, j][None, :]
                idx = tuple(np.broadcast_to(where[x], ra.shape) for x in uv)
                vals += T[idx] if idx else float(T)
            M[rblk.offset + ra, cblk.offset + cb] = vals / a
    return RealizedMatrix(M, rows, cols)


def _split_patterns(size: int, group_sizes: Sequence[int]):
    """All (X, positions) with X the sorted t-subsets and positions splitting 0..t-1 into groups."""
    t = sum(group_sizes)
    X = _combos(size, t)

    def rec(avail, gs):
        if not gs:
            yield []
            return
        for pick in itertools.combinations(avail, gs[0]):
            rest = [p for p in avail if p not in pick]
            for tail in rec(rest, gs[1:]):
                yield [list(pick)] + tail

    for pos in rec(list(range(t)), list(group_sizes)):
        yield X, pos


@lru_cache(maxsize=None)
def _injections(size: int, k: int) -> np.ndarray:
    rows = list(itertools.permutations(range(size), k))
    arr = np.array(rows, dtype=np.int64).reshape(len(rows), k)
    arr.flags.writeable = False
    return arr


def realize_by_labelings(shape: Shape, instance, rows: IndexSpace, cols: IndexSpace,
                         basis: BasisKind | str | None = None, max_labelings: float = 2e6) -> np.ndarray:
    """Graph matrix as (1/aut) times the sum over every injective labeling.

    Independent of the tensor contraction in :func:`realize`; fast for tiny n and m.
    Only square-only index sets are supported.
    """
    table = _as_table(instance, basis)
    n, m = table.n, table.m
    if any(x[0] != SQ for x in shape.U + shape.V):
        raise ShapeError("labeling realizer supports square-only index sets")
    M = np.zeros((rows.size, cols.size))
    ua, ub = shape.index_type("U"), shape.index_type("V")
    if ua not in rows.blocks or ub not in cols.blocks:
        return M
    ns, nc = len(shape.squares), len(shape.circles)
    if ns > n or nc > m:
        return M
    Ls, Lc = _injections(n, ns), _injections(m, nc)
    if float(len(Ls)) * len(Lc) > max_labelings:
        raise BudgetExceeded("too many labelings")
    spos = {s: i for i, s in enumerate(shape.squares)}
    cpos = {c: i for i, c in enumerate(shape.circles)}
    vals = np.ones((len(Ls), len(Lc)))
    for s, c, l in shape.edges:
        vals *= table[l][Lc[:, cpos[c]][None, :], Ls[:, spos[s]][:, None]]
    vals = vals.sum(axis=1)
    ra = lex_rank(np.sort(Ls[:, [spos[x[1]] for x in shape.U]], axis=1), n)
    cb = lex_rank(np.sort(Ls[:, [spos[x[1]] for x in shape.V]], axis=1), n)
    # circle indices are empty, so the block offset plus square rank is the position
    np.add.at(M, (rows.blocks[ua].offset + ra, cols.blocks[ub].offset + cb), vals)
    return M / shape.aut()


def realize_sum(terms: Iterable[tuple[Shape, object]], instance, rows: IndexSpace, cols: IndexSpace,
                basis: BasisKind | str | None = None, n: int | None = None) -> np.ndarray:
    """Σ coeff·M_shape; coefficients may be Fractions or callables of n."""
    table = _as_table(instance, basis)
    out = np.zeros((rows.size, cols.size))
    for shape, c in terms:
        val = c(table.n if n is None else n) if callable(c) else c
        if val == 0:
            continue
        out += float(val) * realize(shape, table, rows, cols).matrix
    return out


# ---------------------------------------------------------------- products and improper shapes


def expand_improper(shape: Shape, basis: BasisKind | str = BasisKind.GAUSSIAN,
                    max_bundle: int = 12) -> list[tuple[Shape, Fraction]]:
    """Rewrite a multigraph shape as a combination of proper shapes (edge bundles linearized)."""
    bundles: dict[tuple[int, int], list[int]] = defaultdict(list)
    for s, c, l in shape.edges:
        bundles[(s, c)].append(l)
    if any(sum(ls) > max_bundle for ls in bundles.values()):
        raise BudgetExceeded("edge bundle too heavy")
    if all(len(ls) == 1 for ls in bundles.values()):
        return [(shape, Fraction(1))]
    keys = sorted(bundles)
    options = []
    for k in keys:
        lc = linearize_product(bundles[k], basis)
        options.append(list(lc))
    aut_improper = shape.aut()
    acc: dict[bytes, list] = {}
    for choice in itertools.product(*options):
        coeff = Fraction(1)
        edges = []
        for (s, c), (deg, cf) in zip(keys, choice):
            coeff *= cf
            if deg:
                edges.append((s, c, deg))
        g = Shape(shape.squares, shape.circles, shape.U, shape.V, tuple(edges))
        k = g.key
        if k in acc:
            acc[k][1] += coeff
        else:
            acc[k] = [g, coeff]
    out = []
    for g, coeff in acc.values():
        if coeff:
            out.append((g.canonical(), coeff * g.aut() / aut_improper))
    return out


def composable(A: Shape, B: Shape) -> bool:
    return A.index_type("V") == B.index_type("U")


def gluing_patterns(A: Shape, B: Shape):
    """Yield glued improper shapes, one per (bijection V_A -> U_B, partial intersection matching)."""
    if not composable(A, B):
        raise ShapeError("shapes are not composable")
    A = A.relabeled()
    # B vertices get fresh ids after A's
    so, co = len(A.squares), len(A.circles)
    B = B._apply({s: s + so for s in B.squares}, {c: c + co for c in B.circles})
    VA = list(A.V)
    UB = list(B.U)
    X = [x for x in A.vertices if x not in set(A.V)]
    Y = [y for y in B.vertices if y not in set(B.U)]
    for perm in itertools.permutations(UB):
        if any(a[0] != b[0] for a, b in zip(VA, perm)):
            continue
        phi = dict(zip(perm, VA))  # B vertex -> A vertex
        for psi in _partial_matchings(X, Y):
            ident = dict(phi)
            ident.update({y: x for x, y in psi})
            mv = lambda y: ident.get(y, y)
            sq = sorted(set(A.squares) | {mv(y)[1] for y in B.vertices if mv(y)[0] == SQ})
            ci = sorted(set(A.circles) | {mv(y)[1] for y in B.vertices if mv(y)[0] == CI})
            edges = list(A.edges) + [(mv((SQ, s))[1], mv((CI, c))[1], l) for s, c, l in B.edges]
            yield Shape(tuple(sq), tuple(ci), A.U, tuple(mv(y) for y in B.V), tuple(edges)), len(psi)


def _partial_matchings(X, Y):
    def rec(i, used):
        if i == len(X):
            yield []
            return
        yield from rec(i + 1, used)
        for y in Y:
            if y not in used and y[0] == X[i][0]:
                used.add(y)
                for rest in rec(i + 1, used):
                    yield [(X[i], y)] + rest
                used.remove(y)

    yield from rec(0, set())


def multiply_decompose(A: Shape, B: Shape, basis: BasisKind | str = BasisKind.GAUSSIAN,
                       include_intersections: bool = True) -> list[tuple[Shape, Fraction]]:
    """M_A M_B = Σ c_γ M_γ over proper shapes γ."""
    scale = Fraction(1, A.aut() * B.aut())
    acc: dict[bytes, list] = {}
    for glued, k in gluing_patterns(A, B):
        if k and not include_intersections:
            continue
        g_aut = glued.aut()
        for g, c in expand_improper(glued, basis):
            val = c * g_aut * scale
            key = g.key
            if key in acc:
                acc[key][1] += val
            else:
                acc[key] = [g, val]
    return [(g, c) for g, c in acc.values() if c]


def multiply_bound(A: Shape, gamma: Shape) -> float:
    x = len(A.vertices) - len(A.V)
    y = len(A.vertices) - len(A.U)
    return 2.0 ** x * len(gamma.vertices) ** y
