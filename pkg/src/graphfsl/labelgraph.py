"""Label graphs, node2vec walks and negative sampling.

A :class:`LabelGraph` holds the class taxonomy as an undirected graph with
dense integer node ids.  The IS-A direction read from edge lists is kept
only to compute node depths and to support layer-removal ablations; walks
ignore it.

Edge-list format
----------------
UTF-8 text, one edge per line as ``<child> <parent>``, whitespace separated.
Everything after ``#`` is a comment.  A line ``classes: a,b,c`` declares the
class nodes; if absent, every node that never appears as a parent is a class.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class GraphError(ValueError):
    """Raised for malformed or structurally invalid label graphs."""


@dataclass(frozen=True)
class LabelGraph:
    names: tuple[str, ...]
    adjacency: tuple[tuple[int, ...], ...]
    class_nodes: tuple[int, ...]
    parents: tuple[tuple[int, ...], ...]
    depth: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "_index", {n: i for i, n in enumerate(self.names)})
        object.__setattr__(self, "_adjsets", [frozenset(a) for a in self.adjacency])
        object.__setattr__(self, "_classset", frozenset(self.class_nodes))

    @property
    def n_nodes(self) -> int:
        return len(self.names)

    @property
    def n_edges(self) -> int:
        return sum(len(a) for a in self.adjacency) // 2

    def neighbors(self, node: int) -> tuple[int, ...]:
        return self.adjacency[node]

    def has_edge(self, u: int, v: int) -> bool:
        return v in self._adjsets[u]

    def node_id(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"unknown node {name!r}") from None

    def is_class(self, node: int) -> bool:
        return node in self._classset

    def edges(self) -> list[tuple[int, int]]:
        return [(u, v) for u, nb in enumerate(self.adjacency) for v in nb if u < v]

    def shortest_paths(self, source: int) -> np.ndarray:
        """BFS hop distances from ``source``; -1 for unreachable nodes."""
        dist = np.full(self.n_nodes, -1, dtype=np.int64)
        dist[source] = 0
        queue = deque([source])
        while queue:
            u = queue.popleft()
            for v in self.adjacency[u]:
                if dist[v] < 0:
                    dist[v] = dist[u] + 1
                    queue.append(v)
        return dist

    def is_connected(self) -> bool:
        return self.n_nodes == 0 or bool(np.all(self.shortest_paths(0) >= 0))


def from_edges(
    names: Sequence[str],
    child_parent: Iterable[tuple[int, int]],
    class_nodes: Iterable[int] | None = None,
) -> LabelGraph:
    """Build and validate a graph from directed ``(child, parent)`` id pairs."""
    n = len(names)
    if len(set(names)) != n:
        raise GraphError("duplicate node names")
    adj: list[set[int]] = [set() for _ in range(n)]
    parents: list[set[int]] = [set() for _ in range(n)]
    for c, p in child_parent:
        if c == p:
            raise GraphError(f"self-loop on {names[c]!r}")
        if p in adj[c]:
            raise GraphError(f"duplicate edge {names[c]!r} {names[p]!r}")
        adj[c].add(p)
        adj[p].add(c)
        parents[c].add(p)

    if class_nodes is None:
        has_child = set()
        for c in range(n):
            has_child.update(parents[c])
        class_nodes = [v for v in range(n) if v not in has_child]
    class_nodes = list(class_nodes)
    if len(set(class_nodes)) != len(class_nodes):
        raise GraphError("class node listed twice")
    class_nodes = tuple(sorted(class_nodes))

    roots = [v for v in range(n) if not parents[v]]
    depth = np.full(n, -1, dtype=np.int64)
    queue = deque(roots)
    for r in roots:
        depth[r] = 0
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if depth[v] < 0:
                depth[v] = depth[u] + 1
                queue.append(v)

    g = LabelGraph(
        names=tuple(names),
        adjacency=tuple(tuple(sorted(a)) for a in adj),
        class_nodes=class_nodes,
        parents=tuple(tuple(sorted(p)) for p in parents),
        depth=tuple(int(d) for d in depth),
    )
    if n == 0:
        raise GraphError("empty graph")
    if not g.is_connected():
        raise GraphError("label graph is disconnected")
    return g


def load_edge_list(text: str, classes: Iterable[str] | None = None) -> LabelGraph:
    """Parse an edge list (see module docstring) into a :class:`LabelGraph`.

    ``classes`` plays the role of a sidecar file and overrides any
    ``classes:`` directive in the text.
    """
    names: list[str] = []
    index: dict[str, int] = {}
    pairs: list[tuple[int, int]] = []
    directive: list[str] | None = None
    seen: set[frozenset] = set()

    def intern(name):
        if name not in index:
            index[name] = len(names)
            names.append(name)
        return index[name]

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.lower().startswith("classes:"):
            if directive is not None:
                raise GraphError(f"line {lineno}: repeated classes directive")
            body = line.split(":", 1)[1]
            directive = [c.strip() for c in body.split(",") if c.strip()]
            continue
        parts = line.split()
        if len(parts) != 2:
            raise GraphError(f"line {lineno}: expected two node names, got {len(parts)}")
        a, b = parts
        if a == b:
            raise GraphError(f"line {lineno}: self-loop on {a!r}")
        key = frozenset((a, b))
        if key in seen:
            raise GraphError(f"line {lineno}: duplicate edge {a!r} {b!r}")
        seen.add(key)
        pairs.append((intern(a), intern(b)))

    if classes is not None:
        directive = list(classes)
    class_ids = None
    if directive is not None:
        class_ids = []
        for c in directive:
            if c not in index:
                raise GraphError(f"unknown class name {c!r}")
            class_ids.append(index[c])
    return from_edges(names, pairs, class_ids)


def read_edge_list(path, classes_path=None) -> LabelGraph:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    classes = None
    if classes_path is not None:
        with open(classes_path, encoding="utf-8") as fh:
            classes = [t for t in fh.read().replace(",", " ").split() if t]
    return load_edge_list(text, classes)


def dump_edge_list(g: LabelGraph) -> str:
    lines = ["classes: " + ",".join(g.names[c] for c in g.class_nodes)]
    for c in range(g.n_nodes):
        for p in g.parents[c]:
            lines.append(f"{g.names[c]} {g.names[p]}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class WalkConfig:
    p: float = 1.0
    q: float = 1.0
    walk_length: int = 20
    walks_per_node: int = 10
    window: int = 5

    def __post_init__(self):
        if not self.p > 0 or not self.q > 0:
            raise ValueError("walk biases p and q must be positive")
        if self.walk_length < 1:
            raise ValueError("walk_length must be >= 1")
        if self.walks_per_node < 1:
            raise ValueError("walks_per_node must be >= 1")
        if self.window < 1:
            raise ValueError("window must be >= 1")


def transition_distribution(g: LabelGraph, prev: int, cur: int, cfg: WalkConfig) -> np.ndarray:
    """Second-order node2vec step probabilities, aligned with ``g.neighbors(cur)``.

    Unnormalized weights are ``1/p`` for returning to ``prev``, 1 for
    neighbors of ``prev`` and ``1/q`` for everything else.
    """
    if not g.has_edge(prev, cur):
        raise ValueError(f"{prev} and {cur} are not adjacent")
    nbrs = g.neighbors(cur)
    if not nbrs:
        raise ValueError(f"node {cur} has no neighbors")
    w = np.empty(len(nbrs))
    for i, x in enumerate(nbrs):
        if x == prev:
            w[i] = 1.0 / cfg.p
        elif g.has_edge(x, prev):
            w[i] = 1.0
        else:
            w[i] = 1.0 / cfg.q
    return w / w.sum()


class WalkSampler:
    """Caches cumulative transition tables for repeated walk generation."""

    def __init__(self, g: LabelGraph, cfg: WalkConfig):
        self.g = g
        self.cfg = cfg
        self._nbrs = [np.asarray(nb, dtype=np.int64) for nb in g.adjacency]
        self._cdf: dict[tuple[int, int], np.ndarray] = {}

    def _table(self, prev, cur):
        key = (prev, cur)
        cdf = self._cdf.get(key)
        if cdf is None:
            cdf = np.cumsum(transition_distribution(self.g, prev, cur, self.cfg))
            cdf[-1] = 1.0
            self._cdf[key] = cdf
        return cdf

    def step(self, prev: int | None, cur: int, rng: np.random.Generator) -> int:
        nbrs = self._nbrs[cur]
        if prev is None:
            return int(nbrs[rng.integers(len(nbrs))])
        cdf = self._table(prev, cur)
        return int(nbrs[np.searchsorted(cdf, rng.random(), side="right")])

    def walk(self, start: int, rng: np.random.Generator, length: int | None = None) -> list[int]:
        length = self.cfg.walk_length if length is None else length
        walk = [start]
        if length == 0 or not len(self._nbrs[start]):
            return walk
        prev, cur = None, start
        for _ in range(length):
            nxt = self.step(prev, cur, rng)
            walk.append(nxt)
            prev, cur = cur, nxt
        return walk


def biased_walk(g: LabelGraph, start: int, cfg: WalkConfig, rng: np.random.Generator,
                walk_length: int | None = None) -> list[int]:
    """One node2vec walk of ``walk_length + 1`` nodes starting at ``start``.

    ``walk_length`` overrides ``cfg.walk_length`` (0 is allowed here).
    """
    if not 0 <= start < g.n_nodes:
        raise ValueError(f"invalid start node {start}")
    return WalkSampler(g, cfg).walk(start, rng, walk_length)


@dataclass(frozen=True)
class NeighborhoodMap:
    """Multiset neighborhoods stored as parallel ``(source, context)`` arrays."""

    n_nodes: int
    sources: np.ndarray
    contexts: np.ndarray

    def __post_init__(self):
        if self.sources.shape != self.contexts.shape:
            raise ValueError("sources and contexts differ in length")
        if np.any(self.sources == self.contexts):
            raise ValueError("a node cannot be its own context")
        if len(self.sources) and (
            min(self.sources.min(), self.contexts.min()) < 0
            or max(self.sources.max(), self.contexts.max()) >= self.n_nodes
        ):
            raise ValueError("node id out of range")

    @classmethod
    def from_dict(cls, n_nodes: int, nmap: dict[int, Iterable[int]]) -> "NeighborhoodMap":
        src, ctx = [], []
        for y in sorted(nmap):
            for c in nmap[y]:
                src.append(y)
                ctx.append(c)
        return cls(n_nodes, np.asarray(src, dtype=np.int64), np.asarray(ctx, dtype=np.int64))

    @classmethod
    def empty(cls, n_nodes: int) -> "NeighborhoodMap":
        z = np.zeros(0, dtype=np.int64)
        return cls(n_nodes, z, z.copy())

    def __len__(self):
        return len(self.sources)

    def of(self, y: int) -> list[int]:
        return self.contexts[self.sources == y].tolist()

    def counts(self) -> np.ndarray:
        """Dense ``(n, n)`` multiplicity matrix ``C[y, c]`` (cached, read-only)."""
        c = self.__dict__.get("_counts")
        if c is None:
            c = np.zeros((self.n_nodes, self.n_nodes))
            np.add.at(c, (self.sources, self.contexts), 1.0)
            c.setflags(write=False)
            object.__setattr__(self, "_counts", c)
        return c

    def source_counts(self) -> np.ndarray:
        """``|N(y)|`` for every node."""
        c = self.__dict__.get("_src")
        if c is None:
            c = np.bincount(self.sources, minlength=self.n_nodes).astype(float)
            c.setflags(write=False)
            object.__setattr__(self, "_src", c)
        return c

    def subset(self, idx) -> "NeighborhoodMap":
        return NeighborhoodMap(self.n_nodes, self.sources[idx], self.contexts[idx])

    def permuted(self, perm: np.ndarray) -> "NeighborhoodMap":
        """Relabel node ``i`` as ``perm[i]``."""
        perm = np.asarray(perm)
        return NeighborhoodMap(self.n_nodes, perm[self.sources], perm[self.contexts])


def build_neighborhoods(g: LabelGraph, cfg: WalkConfig, rng: np.random.Generator) -> NeighborhoodMap:
    """Skip-gram contexts of each node over the walks started from it.

    Every occurrence of the source ``y`` in its own walks contributes the
    nodes within ``cfg.window`` positions; occurrences of ``y`` itself are
    dropped.  Each source draws from its own child stream of ``rng`` so the
    result does not depend on the order in which sources are processed.
    """
    sampler = WalkSampler(g, cfg)
    seeds = np.random.SeedSequence(int(rng.integers(2**63))).spawn(g.n_nodes)
    src, ctx = [], []
    w = cfg.window
    for y in range(g.n_nodes):
        node_rng = np.random.default_rng(seeds[y])
        for _ in range(cfg.walks_per_node):
            walk = sampler.walk(y, node_rng)
            for i, v in enumerate(walk):
                if v != y:
                    continue
                for j in range(max(0, i - w), min(len(walk), i + w + 1)):
                    if walk[j] != y:
                        src.append(y)
                        ctx.append(walk[j])
    return NeighborhoodMap(g.n_nodes, np.asarray(src, dtype=np.int64), np.asarray(ctx, dtype=np.int64))


def negative_sample(
    g: LabelGraph | int,
    source: int,
    count: int,
    rng: np.random.Generator,
    proposal: np.ndarray | None = None,
) -> np.ndarray:
    """Draw ``count`` nodes other than ``source`` from ``proposal`` (default uniform).

    ``g`` may be a graph or a node count.  ``proposal`` is an unnormalized
    weight per node; the source's weight is ignored.
    """
    if count < 1:
        raise ValueError("negative sample count must be >= 1")
    n = g if isinstance(g, int) else g.n_nodes
    if n < 2:
        raise ValueError("need at least two nodes to draw negatives")
    if proposal is None:
        draws = rng.integers(n - 1, size=count)
        return draws + (draws >= source)
    w = np.asarray(proposal, dtype=float).copy()
    w[source] = 0.0
    if w.sum() <= 0:
        raise ValueError("proposal has no mass outside the source")
    return rng.choice(n, size=count, p=w / w.sum())


def child_parent_neighborhoods(g: LabelGraph) -> NeighborhoodMap:
    """Neighborhoods restricted to direct edges, each neighbor once."""
    return NeighborhoodMap.from_dict(g.n_nodes, {y: g.neighbors(y) for y in range(g.n_nodes)})


def remove_bottom_layers(g: LabelGraph, n_layers: int) -> LabelGraph:
    """Delete the deepest ``n_layers`` levels of internal (non-class) nodes.

    Children of a deleted node are re-attached to its nearest surviving
    ancestors.  Class nodes are never deleted.
    """
    if n_layers < 0:
        raise ValueError("n_layers must be >= 0")
    if n_layers == 0:
        return g
    classes = set(g.class_nodes)
    internal_depths = sorted({g.depth[v] for v in range(g.n_nodes) if v not in classes})
    doomed_depths = set(internal_depths[-n_layers:]) if internal_depths else set()
    removed = {v for v in range(g.n_nodes) if v not in classes and g.depth[v] in doomed_depths}
    keep = [v for v in range(g.n_nodes) if v not in removed]
    new_id = {v: i for i, v in enumerate(keep)}

    memo: dict[int, set[int]] = {}

    def surviving_ancestors(v):
        out = set()
        for p in g.parents[v]:
            if p in removed:
                if p not in memo:
                    memo[p] = surviving_ancestors(p)
                out |= memo[p]
            else:
                out.add(p)
        return out

    pairs = []
    for v in keep:
        ancestors = surviving_ancestors(v)
        if g.parents[v] and not ancestors:
            raise GraphError(f"removing {n_layers} layers leaves {g.names[v]!r} without an ancestor")
        for a in sorted(ancestors):
            pairs.append((new_id[v], new_id[a]))
    names = [g.names[v] for v in keep]
    try:
        return from_edges(names, pairs, [new_id[c] for c in g.class_nodes])
    except GraphError as e:
        raise GraphError(f"removing {n_layers} layers: {e}") from None


def internal_layer_count(g: LabelGraph) -> int:
    classes = set(g.class_nodes)
    return len({g.depth[v] for v in range(g.n_nodes) if v not in classes})
