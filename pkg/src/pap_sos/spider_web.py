"""Spiders, their intersection terms, webs, and the spider-free recombination M⁺."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping

import numpy as np

from .constraint_projection import build_Lk, verify_annihilation  # noqa: F401  (re-exported)
from .graph_matrix import CI, SQ, BudgetExceeded, HermiteTable, IndexSpace, Shape, ShapeError, multiply_decompose, realize
from .hermite_basis import BasisKind

__all__ = ["NPoly", "SpiderInfo", "is_spider", "body", "intersection_terms", "Web", "build_web",
           "kill_spiders", "web_quadratic_check", "build_Lk", "verify_annihilation", "parity_property"]


class NPoly:
    """Finite Laurent polynomial in 1/n with rational coefficients: Σ c_p n^{-p}."""

    __slots__ = ("terms",)

    def __init__(self, terms: Mapping[int, Fraction] | None = None):
        self.terms = {int(p): Fraction(c) for p, c in (terms or {}).items() if c}

    @classmethod
    def const(cls, c) -> "NPoly":
        return cls({0: Fraction(c)})

    @classmethod
    def coerce(cls, x) -> "NPoly":
        if isinstance(x, NPoly):
            return x
        if hasattr(x, "c") and hasattr(x, "power"):
            return cls({x.power: x.c})
        return cls.const(x)

    def __add__(self, other) -> "NPoly":
        other = NPoly.coerce(other)
        out = dict(self.terms)
        for p, c in other.terms.items():
            out[p] = out.get(p, 0) + c
        return NPoly(out)

    __radd__ = __add__

    def __neg__(self) -> "NPoly":
        return NPoly({p: -c for p, c in self.terms.items()})

    def __sub__(self, other) -> "NPoly":
        return self + (-NPoly.coerce(other))

    def __mul__(self, other) -> "NPoly":
        other = NPoly.coerce(other)
        out: dict[int, Fraction] = defaultdict(Fraction)
        for p, c in self.terms.items():
            for q, d in other.terms.items():
                out[p + q] += c * d
        return NPoly(out)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "NPoly":
        other = NPoly.coerce(other)
        if len(other.terms) != 1:
            raise ZeroDivisionError("can only divide by a monomial in 1/n")
        (q, d), = other.terms.items()
        return NPoly({p - q: c / d for p, c in self.terms.items()})

    def __call__(self, n: int) -> Fraction:
        return sum((c * Fraction(n) ** (-p) for p, c in self.terms.items()), Fraction(0))

    def __bool__(self) -> bool:
        return bool(self.terms)

    def __eq__(self, other) -> bool:
        return self.terms == NPoly.coerce(other).terms

    @property
    def min_power(self) -> int:
        return min(self.terms) if self.terms else 0

    def abs_max(self) -> Fraction:
        return max((abs(c) for c in self.terms.values()), default=Fraction(0))

    def __repr__(self) -> str:
        if not self.terms:
            return "0"
        parts = []
        for p in sorted(self.terms):
            c = self.terms[p]
            parts.append(f"{c}" if p == 0 else f"{c}/n^{p}" if p > 0 else f"{c}*n^{-p}")
        return " + ".join(parts)

    def to_json(self) -> dict:
        return {str(p): str(c) for p, c in sorted(self.terms.items())}


# ---------------------------------------------------------------- detection


@dataclass(frozen=True)
class SpiderInfo:
    shape: Shape
    side: str
    ends: tuple[int, int]
    hub: int


def _left_pair(shape: Shape, U, V) -> tuple[tuple[int, int], int] | None:
    uset, vset = set(U), set(V)
    best = None
    by_hub: dict[int, list[int]] = defaultdict(list)
    for s, c, l in shape.edges:
        x = (SQ, s)
        if l == 1 and x in uset and x not in vset and shape.degree(x) == 1:
            by_hub[c].append(s)
    for c, ends in by_hub.items():
        if len(ends) >= 2:
            cand = (tuple(sorted(ends)[:2]), c)
            if best is None or cand < best:
                best = cand
    return best


def is_spider(shape: Shape) -> SpiderInfo | None:
    """Left spiders take precedence; the end pair is the lexicographically least valid one."""
    if not shape.is_proper():
        return None
    hit = _left_pair(shape, shape.U, shape.V)
    if hit is not None:
        return SpiderInfo(shape, "left", hit[0], hit[1])
    hit = _left_pair(shape, shape.V, shape.U)
    if hit is not None:
        return SpiderInfo(shape, "right", hit[0], hit[1])
    return None


def body(info: SpiderInfo) -> Shape:
    """Delete the end vertices; the hub joins U (left) or V (right)."""
    s = info.shape
    i, j = info.ends
    drop = {(SQ, i), (SQ, j)}
    sq = tuple(x for x in s.squares if x not in (i, j))
    edges = tuple(e for e in s.edges if e[0] not in (i, j))
    hub = (CI, info.hub)
    if info.side == "left":
        U = tuple(x for x in s.U if x not in drop) + (hub,)
        return Shape(sq, s.circles, U, s.V, edges)
    V = tuple(x for x in s.V if x not in drop) + (hub,)
    return Shape(sq, s.circles, s.U, V, edges)


def parity_property(shape: Shape) -> bool:
    """Odd (label-weighted) degree exactly on (U ∪ V) minus (U ∩ V), for squares; circles even."""
    uset, vset = set(shape.U), set(shape.V)
    for x in shape.vertices:
        odd = shape.degree(x) % 2 == 1
        if odd != ((x in uset) != (x in vset)):
            return False
    return True


# ---------------------------------------------------------------- intersection terms


@dataclass
class KillTerms:
    """x^T M_α x = Σ c x^T M_β x on null(M_fix)^⊥, with c = -(product coefficient)/c_α."""

    spider: SpiderInfo
    c_alpha: NPoly
    type1: list[tuple[Shape, NPoly]]
    type2: list[tuple[Shape, NPoly]]

    @property
    def children(self) -> list[tuple[Shape, NPoly, int]]:
        return [(s, c, 1) for s, c in self.type1] + [(s, c, 2) for s, c in self.type2]


def _product_terms(info: SpiderInfo, basis) -> tuple[dict, set]:
    """Σ over L_k shapes of coeff · multiply_decompose(shape, body), keyed by canonical key.

    Returns (key -> [shape, NPoly]) and the keys produced by the ℓ_k term itself.
    """
    if any(x[0] != SQ for x in info.shape.U + info.shape.V):
        raise ShapeError("spider killing expects square-only index sets")
    left = info if info.side == "left" else SpiderInfo(info.shape.transpose(), "left", info.ends, info.hub)
    k = len(left.shape.U)
    b = body(left)
    acc: dict[bytes, list] = {}
    from_lk: set[bytes] = set()
    for idx, (L, coeff) in enumerate(build_Lk(k)):
        for g, c in multiply_decompose(L, b, basis):
            g = g.canonical()
            if info.side == "right":
                g = g.transpose().canonical()
            key = g.key
            val = NPoly.coerce(coeff) * c
            if key in acc:
                acc[key][1] = acc[key][1] + val
            else:
                acc[key] = [g, val]
            if idx == 0:
                from_lk.add(key)
    return acc, from_lk


_TERMS_CACHE: dict[tuple[bytes, str], KillTerms] = {}


def intersection_terms(info: SpiderInfo, basis: BasisKind | str = BasisKind.GAUSSIAN) -> KillTerms:
    basis = BasisKind.parse(basis)
    ck = (info.shape.key, basis.value)
    if ck in _TERMS_CACHE and _TERMS_CACHE[ck].spider.shape == info.shape:
        return _TERMS_CACHE[ck]
    acc, from_lk = _product_terms(info, basis)
    akey = info.shape.key
    if akey not in acc or not acc[akey][1]:
        raise ShapeError("spider does not appear in its own factorization")
    c_alpha = acc.pop(akey)[1]
    n_sq = len(info.shape.squares)
    t1, t2 = [], []
    for key, (g, c) in acc.items():
        if not c:
            continue
        if len(g.squares) >= n_sq:
            raise ShapeError("intersection term does not reduce the square count")
        kill = -(c / c_alpha)
        (t1 if key in from_lk else t2).append((g, kill))
    t1.sort(key=lambda t: t[0].key)
    t2.sort(key=lambda t: t[0].key)
    out = KillTerms(info, c_alpha, t1, t2)
    _TERMS_CACHE[ck] = out
    return out


# ---------------------------------------------------------------- webs


@dataclass
class WebNode:
    shape: Shape
    value: NPoly = field(default_factory=NPoly)
    spider: SpiderInfo | None = None
    children: list[tuple[bytes, int, NPoly]] = field(default_factory=list)

    @property
    def is_leaf(self) -> bool:
        return self.spider is None


@dataclass
class Web:
    root: bytes
    nodes: dict[bytes, WebNode]

    @property
    def edges(self) -> list[tuple[bytes, bytes, int, NPoly]]:
        return [(k, c, t, coef) for k, node in self.nodes.items() for c, t, coef in node.children]

    def leaves(self) -> list[WebNode]:
        return [n for n in self.nodes.values() if n.is_leaf]

    def parents(self) -> dict[bytes, set[bytes]]:
        out: dict[bytes, set[bytes]] = defaultdict(set)
        for a, b, _, _ in self.edges:
            out[b].add(a)
        return out

    def topological(self) -> list[bytes]:
        # edges strictly lower the square count
        return sorted(self.nodes, key=lambda k: (-len(self.nodes[k].shape.squares), k))

    def height(self) -> int:
        depth = {self.root: 0}
        for k in self.topological():
            for c, _, _ in self.nodes[k].children:
                depth[c] = max(depth.get(c, 0), depth.get(k, 0) + 1)
        return max(depth.values())

    def max_derivation_excess(self) -> int:
        """max over root paths of #1(p) - 2 #2(p)."""
        best: dict[bytes, int] = {self.root: 0}
        for k in self.topological():
            if k not in best:
                continue
            for c, t, _ in self.nodes[k].children:
                v = best[k] + (1 if t == 1 else -2)
                best[c] = max(best.get(c, -10 ** 9), v)
        return max(best.values())

    def squares_decrease(self) -> bool:
        return all(len(self.nodes[b].shape.squares) < len(self.nodes[a].shape.squares) for a, b, _, _ in self.edges)

    def leaf_terms(self) -> list[tuple[Shape, NPoly]]:
        return [(n.shape, n.value) for n in self.leaves() if n.value]

    def check(self) -> dict:
        root = self.nodes[self.root].shape
        V, E = len(root.vertices), root.num_edges
        par = self.parents()
        max_par = max((len(p) for p in par.values()), default=0)
        return {
            "nodes": len(self.nodes),
            "leaves": len(self.leaves()),
            "height": self.height(),
            "height_ok": self.height() <= V,
            "max_parents": max_par,
            "parents_ok": max_par <= 4 * V ** 3 * E ** 2,
            "derivation_excess": self.max_derivation_excess(),
            "derivation_ok": self.max_derivation_excess() <= E,
            "squares_decrease": self.squares_decrease(),
            "root_value_one": self.nodes[self.root].value == NPoly.const(1),
        }

    def leaf_value_fit(self, n: int) -> dict:
        """Report max |v_γ| at n against (C1 |V| |E|)^{C2 |E|}, giving the smallest C1 for C2 = 1."""
        root = self.nodes[self.root].shape
        V, E = len(root.vertices), max(root.num_edges, 1)
        vmax = max((abs(float(n_.value(n))) for n_ in self.leaves()), default=0.0)
        c1 = (vmax ** (1 / E)) / (V * E) if vmax > 0 else 0.0
        return {"max_leaf_value": vmax, "C1_for_C2_eq_1": c1}

    def to_json(self) -> dict:
        return {
            "root": self.root.decode(),
            "nodes": [{"key": k.decode(), "shape": n.shape.to_json(), "value": n.value.to_json(),
                       "spider": n.spider is not None} for k, n in self.nodes.items()],
            "edges": [{"from": a.decode(), "to": b.decode(), "type": t, "coefficient": c.to_json()}
                      for a, b, t, c in self.edges],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json())


def build_web(spider: Shape | SpiderInfo, basis: BasisKind | str = BasisKind.GAUSSIAN,
              node_cap: int = 5000) -> Web:
    shape = spider.shape if isinstance(spider, SpiderInfo) else spider
    root = shape.canonical()
    info = is_spider(root)
    if info is None:
        raise ShapeError("root is not a spider")
    nodes: dict[bytes, WebNode] = {root.key: WebNode(root, spider=info)}
    queue = [root.key]
    while queue:
        key = queue.pop()
        node = nodes[key]
        if node.spider is None:
            continue
        terms = intersection_terms(node.spider, basis)
        for g, c, t in terms.children:
            gk = g.key
            node.children.append((gk, t, c))
            if gk not in nodes:
                if len(nodes) >= node_cap:
                    raise BudgetExceeded(f"web exceeds {node_cap} nodes")
                nodes[gk] = WebNode(g, spider=is_spider(g))
                queue.append(gk)
    web = Web(root.key, nodes)
    web.nodes[root.key].value = NPoly.const(1)
    for k in web.topological():
        node = web.nodes[k]
        if node.spider is None or not node.value:
            continue
        for c, _, coef in node.children:
            web.nodes[c].value = web.nodes[c].value + node.value * coef
    return web


def kill_spiders(decomposition: Mapping[Shape, object] | Iterable[tuple[Shape, object]],
                 basis: BasisKind | str = BasisKind.GAUSSIAN, node_cap: int = 5000) -> dict[Shape, NPoly]:
    """M⁺ = M - Σ_spiders λ_α (M_α - Σ_leaves v_γ M_γ), keyed by canonical shape."""
    items = decomposition.items() if isinstance(decomposition, Mapping) else decomposition
    out: dict[bytes, list] = {}

    def add(shape: Shape, c: NPoly):
        shape = shape.canonical()
        if shape.key in out:
            out[shape.key][1] = out[shape.key][1] + c
        else:
            out[shape.key] = [shape, c]

    for shape, lam in items:
        lam = NPoly.coerce(lam)
        if not lam:
            continue
        if is_spider(shape.canonical()) is None:
            add(shape, lam)
            continue
        web = build_web(shape, basis, node_cap)
        for g, v in web.leaf_terms():
            add(g, lam * v)
    return {s: c for s, c in out.values() if c}


def web_quadratic_check(web: Web, instance, M_fix: np.ndarray, space: IndexSpace, probes: int = 20,
                        seed: int = 0) -> float:
    """max over probes x = M_fix z of |x^T (M_α - Σ v_γ M_γ) x| / (|x|² Σ|coef| ‖M‖)."""
    n = space.n
    table = HermiteTable(instance.data, instance.setting)
    root = web.nodes[web.root].shape
    A = realize(root, table, space, space).matrix
    scale = np.linalg.norm(A, 2)
    for g, v in web.leaf_terms():
        R = realize(g, table, space, space).matrix
        val = float(v(n))
        A = A - val * R
        scale += abs(val) * np.linalg.norm(R, 2)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(probes):
        x = M_fix @ rng.standard_normal(M_fix.shape[0])
        nx = x @ x
        if nx == 0:
            continue
        worst = max(worst, abs(x @ A @ x) / (nx * max(scale, 1e-300)))
    return worst
