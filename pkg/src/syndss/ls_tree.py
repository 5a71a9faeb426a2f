"""Least-squares phylogenies on distance matrices.

Unrooted binary topologies are stored as edge lists over integer nodes:
tips are ``0..n-1`` and internal nodes ``n..2n-3``.  Branch lengths are fit
by ordinary least squares on the path-indicator design matrix; negative
solutions are clamped to zero and the residual sum of squares is computed
after clamping.
"""

from __future__ import annotations

import functools
import re
from dataclasses import dataclass

import numpy as np

from .pairwise_dist import DistanceMatrix

EXHAUSTIVE_MAX_TAXA = 6


class TooFewTaxa(ValueError):
    pass


class SingularDesign(np.linalg.LinAlgError):
    pass


class NewickError(ValueError):
    pass


@dataclass(frozen=True)
class Topology:
    """Unrooted binary tree shape over ``n_tips`` labelled tips."""

    n_tips: int
    edges: tuple

    def adjacency(self) -> dict:
        adj = {}
        for u, v in self.edges:
            adj.setdefault(u, []).append(v)
            adj.setdefault(v, []).append(u)
        for nbrs in adj.values():
            nbrs.sort()
        return adj

    def splits(self) -> list:
        """Tip bitmask on the ``v`` side of each edge ``(u, v)``."""
        adj = self.adjacency()
        out = []
        for u, v in self.edges:
            mask, stack, seen = 0, [v], {u, v}
            while stack:
                x = stack.pop()
                if x < self.n_tips:
                    mask |= 1 << x
                for y in adj[x]:
                    if y not in seen:
                        seen.add(y)
                        stack.append(y)
            out.append(mask)
        return out

    def split_set(self) -> frozenset:
        """Canonical nontrivial splits (sides not containing tip 0)."""
        full = (1 << self.n_tips) - 1
        out = set()
        for m in self.splits():
            m = full ^ m if m & 1 else m
            if 1 < bin(m).count("1") < self.n_tips - 1:
                out.add(m)
        return frozenset(out)

    def same_shape(self, other: Topology) -> bool:
        return self.n_tips == other.n_tips and self.split_set() == other.split_set()

    def design_matrix(self) -> np.ndarray:
        return _design(self)

    def nni_neighbors(self) -> list:
        """The two nearest-neighbour interchanges around each internal edge."""
        adj = self.adjacency()
        out = []
        for i, (u, v) in enumerate(self.edges):
            if u < self.n_tips or v < self.n_tips:
                continue
            a_side = [x for x in adj[u] if x != v]
            c_side = [x for x in adj[v] if x != u]
            b = a_side[1]
            for c in c_side:
                out.append(_swap(self, u, b, v, c))
        return out


def _swap(topo, u, b, v, c):
    """Move subtree b from u to v and subtree c from v to u."""
    new = []
    for x, y in topo.edges:
        e = {x, y}
        if e == {u, b}:
            new.append((v, b))
        elif e == {v, c}:
            new.append((u, c))
        else:
            new.append((x, y))
    return Topology(topo.n_tips, tuple(new))


@functools.lru_cache(maxsize=4096)
def _design(topo: Topology) -> np.ndarray:
    n = topo.n_tips
    ks, ls = np.triu_indices(n, 1)
    masks = topo.splits()
    X = np.zeros((ks.size, len(masks)))
    for e, m in enumerate(masks):
        side = np.array([(m >> i) & 1 for i in range(n)], dtype=bool)
        X[:, e] = side[ks] != side[ls]
    X.setflags(write=False)
    return X


@functools.lru_cache(maxsize=4096)
def _pinv(topo: Topology) -> np.ndarray:
    X = _design(topo)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise SingularDesign("path design matrix is rank deficient")
    P = np.linalg.pinv(X)
    P.setflags(write=False)
    return P


@dataclass(frozen=True, eq=False)
class Phylogeny:
    """Topology plus one nonnegative length per edge, with tip names."""

    names: tuple
    topology: Topology
    lengths: np.ndarray

    def __post_init__(self):
        lengths = np.array(self.lengths, dtype=float)
        if lengths.shape != (len(self.topology.edges),):
            raise ValueError("need exactly one length per edge")
        if np.any(lengths < 0):
            raise ValueError("branch lengths must be nonnegative")
        lengths.setflags(write=False)
        object.__setattr__(self, "lengths", lengths)
        object.__setattr__(self, "names", tuple(self.names))

    @property
    def n_tips(self) -> int:
        return self.topology.n_tips

    def path_distances(self) -> np.ndarray:
        """n x n matrix of tree-path distances t_kl."""
        n = self.n_tips
        ks, ls = np.triu_indices(n, 1)
        out = np.zeros((n, n))
        vals = _design(self.topology) @ self.lengths
        out[ks, ls] = vals
        out[ls, ks] = vals
        return out

    def scaled(self, factor: float) -> Phylogeny:
        return Phylogeny(self.names, self.topology, self.lengths * factor)

    def relabeled(self, names) -> Phylogeny:
        return Phylogeny(tuple(names), self.topology, self.lengths)

    def reordered(self, names) -> Phylogeny:
        """Same tree with tips renumbered to follow ``names``."""
        names = tuple(names)
        if sorted(names) != sorted(self.names):
            raise ValueError("tip names differ")
        perm = {self.names.index(nm): i for i, nm in enumerate(names)}
        relabel = lambda x: perm.get(x, x)  # noqa: E731
        edges = tuple((relabel(u), relabel(v)) for u, v in self.topology.edges)
        return Phylogeny(names, Topology(self.n_tips, edges), self.lengths)

    def total_length(self) -> float:
        return float(self.lengths.sum())

    def to_newick(self, digits: int = 10) -> str:
        adj = self.topology.adjacency()
        blen = {}
        for (u, v), b in zip(self.topology.edges, self.lengths):
            blen[u, v] = blen[v, u] = b

        def fmt(x):
            return f"{x:.{digits}g}"

        def rec(node, parent):
            if node < self.n_tips:
                return _quote(self.names[node])
            kids = [c for c in adj[node] if c != parent]
            return "(" + ",".join(f"{rec(c, node)}:{fmt(blen[node, c])}" for c in kids) + ")"

        root = adj[0][0]
        if self.n_tips == 2:
            return f"({_quote(self.names[0])}:{fmt(self.lengths[0])},{_quote(self.names[1])}:0);"
        return rec(root, None) + ";"


def _quote(name):
    if re.search(r"[\s(),:;\[\]']", name):
        return "'" + name.replace("'", "''") + "'"
    return name


def parse_newick(text: str) -> Phylogeny:
    """Parse a Newick string into an unrooted binary :class:`Phylogeny`.

    A bifurcating root is removed by merging its two edges.  Missing branch
    lengths are read as 0.
    """
    s = text.strip()
    if not s.endswith(";"):
        raise NewickError("Newick string must end with ';'")
    pos = 0
    nodes = []  # (name, length, children)

    def skip():
        nonlocal pos
        while pos < len(s) and s[pos].isspace():
            pos += 1

    def label():
        nonlocal pos
        skip()
        if pos < len(s) and s[pos] == "'":
            end = pos + 1
            buf = []
            while True:
                j = s.index("'", end)
                buf.append(s[end:j])
                if j + 1 < len(s) and s[j + 1] == "'":
                    buf.append("'")
                    end = j + 2
                else:
                    pos = j + 1
                    return "".join(buf)
        m = re.compile(r"[^\s(),:;\[\]]*").match(s, pos)
        pos = m.end()
        return m.group(0)

    def length():
        nonlocal pos
        skip()
        if pos < len(s) and s[pos] == ":":
            pos += 1
            skip()
            m = re.compile(r"[-+0-9.eE]+").match(s, pos)
            if not m:
                raise NewickError(f"bad branch length at offset {pos}")
            pos = m.end()
            return float(m.group(0))
        return 0.0

    def node():
        nonlocal pos
        skip()
        kids = []
        if s[pos] == "(":
            pos += 1
            while True:
                kids.append(node())
                skip()
                if s[pos] == ",":
                    pos += 1
                    continue
                if s[pos] == ")":
                    pos += 1
                    break
                raise NewickError(f"unexpected {s[pos]!r} at offset {pos}")
        name = label()
        ln = length()
        nodes.append((name, ln, kids))
        return len(nodes) - 1

    root = node()
    skip()
    if s[pos] != ";":
        raise NewickError(f"trailing characters at offset {pos}")
    rname, _, rkids = nodes[root]
    if len(rkids) == 2:
        # unroot: splice the root out, joining its two children by one edge
        a, b = rkids
        na, la, ka = nodes[a]
        nb, lb, kb = nodes[b]
        if ka:
            nodes[a] = (na, 0.0, ka + [b])
            nodes[b] = (nb, la + lb, kb)
            root = a
        elif kb:
            nodes[b] = (nb, 0.0, kb + [a])
            nodes[a] = (na, la + lb, ka)
            root = b
        else:
            raise NewickError("a two-taxon tree is not supported")
    tips = [i for i, (_, _, k) in enumerate(nodes) if not k]
    names = [nodes[i][0] for i in tips]
    if len(set(names)) != len(names) or any(not nm for nm in names):
        raise NewickError("tip names must be unique and non-empty")
    n = len(tips)
    ids = {old: new for new, old in enumerate(tips)}
    nxt = n
    edges, lengths = [], []

    def assign(i, parent):
        nonlocal nxt
        if i not in ids:
            ids[i] = nxt
            nxt += 1
        kids = nodes[i][2]
        if kids and len(kids) + (parent is not None) != 3:
            raise NewickError("tree is not binary")
        for c in kids:
            assign(c, i)
            edges.append((ids[i], ids[c]))
            lengths.append(nodes[c][1])

    assign(root, None)
    return Phylogeny(tuple(names), Topology(n, tuple(edges)), np.array(lengths))


def read_newick(path) -> Phylogeny:
    with open(path) as fh:
        return parse_newick(fh.read())


@dataclass(frozen=True)
class LsFit:
    tree: Phylogeny
    ss: float


def _as_matrix(d):
    if isinstance(d, DistanceMatrix):
        return d.values, d.names
    d = np.asarray(d, dtype=float)
    return d, tuple(str(i) for i in range(d.shape[0]))


def _upper(d):
    return d[np.triu_indices(d.shape[0], 1)]


def _ols(topo, dvec):
    b = _pinv(topo) @ dvec
    b = np.maximum(b, 0.0)
    r = dvec - _design(topo) @ b
    return b, float(r @ r)


def ols_branch_lengths(topology: Topology, d) -> LsFit:
    """OLS branch lengths for a fixed topology, clamped at zero."""
    D, names = _as_matrix(d)
    if topology.n_tips != D.shape[0]:
        raise ValueError("topology and distance matrix disagree on taxon count")
    b, ss = _ols(topology, _upper(D))
    return LsFit(Phylogeny(names, topology, b), ss)


def ols_ss_batch(topology: Topology, dvecs: np.ndarray) -> np.ndarray:
    """Post-clamp residual sums of squares for many upper-triangle vectors."""
    B = np.maximum(dvecs @ _pinv(topology).T, 0.0)
    R = dvecs - B @ _design(topology).T
    return np.einsum("ij,ij->i", R, R)


def nj_topology(d) -> Topology:
    """Neighbour-joining topology; ties go to the lowest taxon indices."""
    D, _ = _as_matrix(d)
    n = D.shape[0]
    if n < 4:
        raise TooFewTaxa(f"neighbour joining needs at least 4 taxa, got {n}")
    D = D.astype(float).copy()
    active = list(range(n))
    nxt = n
    edges = []
    while len(active) > 3:
        m = len(active)
        sub = D[np.ix_(active, active)]
        r = sub.sum(axis=1)
        Qm = (m - 2) * sub - r[:, None] - r[None, :]
        np.fill_diagonal(Qm, np.inf)
        i, j = divmod(int(np.argmin(Qm)), m)  # row-major argmin: lowest (i, j)
        a, b = active[i], active[j]
        new = nxt
        nxt += 1
        edges += [(new, a), (new, b)]
        grow = np.zeros((nxt, nxt))
        grow[: D.shape[0], : D.shape[1]] = D
        D = grow
        for k in active:
            if k not in (a, b):
                D[new, k] = D[k, new] = 0.5 * (D[a, k] + D[b, k] - D[a, b])
        active = [k for k in active if k not in (a, b)] + [new]
    centre = nxt
    edges += [(centre, k) for k in active]
    return _normalize(n, edges)


def _normalize(n, edges):
    """Renumber internal nodes to n.. in first-seen order; orient edges (parent, child)."""
    ids = {i: i for i in range(n)}
    nxt = n
    out = []
    for u, v in edges:
        for x in (u, v):
            if x not in ids:
                ids[x] = nxt
                nxt += 1
        out.append((ids[u], ids[v]))
    return Topology(n, tuple(out))


def all_topologies(n: int) -> list:
    """Every unrooted binary topology on ``n`` tips, by stepwise addition."""
    return list(_all_topologies(n))


@functools.lru_cache(maxsize=8)
def _all_topologies(n):
    if n < 3:
        raise TooFewTaxa("need at least 3 taxa")
    trees = [((0, n), (1, n), (2, n))]
    for tip in range(3, n):
        new_node = n + tip - 2
        grown = []
        for edges in trees:
            for i, (u, v) in enumerate(edges):
                e = list(edges)
                e[i] = (u, new_node)
                e += [(new_node, v), (new_node, tip)]
                grown.append(tuple(e))
        trees = grown
    return tuple(Topology(n, e) for e in trees)


def _search_exhaustive(dvec, n):
    best = None
    for topo in _all_topologies(n):
        b, ss = _ols(topo, dvec)
        if best is None or ss < best[2]:
            best = (topo, b, ss)
    return best


def _search_nni(dvec, D):
    n = D.shape[0]
    topo = nj_topology(D)
    b, ss = _ols(topo, dvec)
    improved = True
    while improved:
        improved = False
        for cand in topo.nni_neighbors():
            cb, css = _ols(cand, dvec)
            if css < ss - 1e-14 * max(1.0, ss):
                topo, b, ss = cand, cb, css
                improved = True
                break
    return topo, b, ss


def ls_tree_search(d, exhaustive: bool | None = None) -> LsFit:
    """Least-squares tree: exhaustive for small n, else NJ start + NNI climbing.

    Parameters
    ----------
    d : DistanceMatrix or ndarray
    exhaustive : bool, optional
        Force (True) or forbid (False) full enumeration; by default it is
        used when ``n <= 6``.
    """
    D, names = _as_matrix(d)
    n = D.shape[0]
    if n < 4:
        raise TooFewTaxa(f"tree search needs at least 4 taxa, got {n}")
    if exhaustive is None:
        exhaustive = n <= EXHAUSTIVE_MAX_TAXA
    dvec = _upper(D)
    if exhaustive:
        topo, b, ss = _search_exhaustive(dvec, n)
    else:
        topo, b, ss = _search_nni(dvec, D)
    return LsFit(Phylogeny(names, topo, b), ss)


def best_fits_exhaustive(dvecs: np.ndarray, n: int):
    """Vectorized exhaustive search over many matrices with ``n`` taxa.

    Returns ``(topology_index, ss)`` arrays; indices refer to
    :func:`all_topologies`.  Ties resolve to the lowest index.
    """
    topos = _all_topologies(n)
    ss = np.stack([ols_ss_batch(t, dvecs) for t in topos], axis=1)
    idx = np.argmin(ss, axis=1)
    return idx, ss[np.arange(ss.shape[0]), idx]
