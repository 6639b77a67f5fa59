"""Synthetic tree benchmark, feature-file datasets and episode sampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graphreg import ParamTable
from .labelgraph import LabelGraph, from_edges

N_BASE_ANCHOR_SAMPLES = 100


def make_binary_tree(h: int) -> LabelGraph:
    """Balanced binary tree of height ``h`` in heap order.

    Node ``i`` has children ``2i+1`` and ``2i+2``; internal nodes are named
    ``n<i>`` and leaves ``c<j>`` with ``j`` the left-to-right leaf index.
    """
    if h < 1:
        raise ValueError("tree height must be >= 1")
    n = 2 ** (h + 1) - 1
    first_leaf = 2**h - 1
    names = [f"n{i}" if i < first_leaf else f"c{i - first_leaf}" for i in range(n)]
    pairs = [(i, (i - 1) // 2) for i in range(1, n)]
    return from_edges(names, pairs, range(first_leaf, n))


def split_leaves(g: LabelGraph, seed: int = 0, mode: str = "random") -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Split class nodes half/half into ``(base, novel)`` node ids.

    ``mode="subtree"`` takes the first half of the leaves in left-to-right
    order as base.
    """
    leaves = np.asarray(g.class_nodes)
    if len(leaves) % 2:
        raise ValueError(f"cannot halve {len(leaves)} leaves")
    half = len(leaves) // 2
    if mode == "random":
        perm = np.random.default_rng(seed).permutation(len(leaves))
        base, novel = leaves[perm[:half]], leaves[perm[half:]]
    elif mode == "subtree":
        base, novel = leaves[:half], leaves[half:]
    else:
        raise ValueError(f"unknown split mode {mode!r}")
    return tuple(sorted(int(v) for v in base)), tuple(sorted(int(v) for v in novel))


@dataclass(frozen=True)
class SyntheticConfig:
    d: int = 4
    h: int = 6
    k: int = 1
    q_count: int = 50
    sigma: float = 0.2
    base_novel_seed: int = 0

    def __post_init__(self):
        if self.d < 2 or self.h < 2 or self.k < 1 or self.q_count < 1:
            raise ValueError("synthetic config needs d>=2, h>=2, k>=1, q_count>=1")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")


@dataclass
class Episode:
    """One few-shot task.  Labels index into ``classes`` (graph node names)."""

    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    classes: tuple[str, ...]
    base_classes: tuple[str, ...] = ()
    base_anchors: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    support_idx: list[tuple[str, int]] | None = None
    query_idx: list[tuple[str, int]] | None = None

    @property
    def n_way(self) -> int:
        return len(self.classes)

    def validate(self):
        if not set(np.unique(self.query_y)) <= set(np.unique(self.support_y)):
            raise ValueError("query class without support examples")
        if self.support_idx is not None and self.query_idx is not None:
            if set(self.support_idx) & set(self.query_idx):
                raise ValueError("support and query overlap")

    def to_bytes(self) -> bytes:
        parts = [self.support_x, self.support_y, self.query_x, self.query_y, self.base_anchors]
        return b"".join(np.ascontiguousarray(p).tobytes() for p in parts) + "|".join(
            self.classes + ("/",) + self.base_classes).encode()


def sample_synthetic_episode(
    embeddings: ParamTable,
    split: tuple[tuple[int, ...], tuple[int, ...]],
    cfg: SyntheticConfig,
    rng: np.random.Generator,
) -> Episode:
    """Gaussian clouds around the novel leaf embeddings, plus base anchors.

    Every novel class gets ``cfg.k`` support and ``cfg.q_count`` query draws
    from ``N(embedding, sigma^2 I)``.  Base anchors are the means of
    ``N_BASE_ANCHOR_SAMPLES`` draws per base class.
    """
    base, novel = split
    x = embeddings.values
    d = x.shape[1]
    n = len(novel)
    mu = x[list(novel)]
    sup = mu[:, None, :] + cfg.sigma * rng.standard_normal((n, cfg.k, d))
    qry = mu[:, None, :] + cfg.sigma * rng.standard_normal((n, cfg.q_count, d))
    base_mu = x[list(base)]
    anchors = base_mu + cfg.sigma * rng.standard_normal(
        (len(base), N_BASE_ANCHOR_SAMPLES, d)).mean(axis=1)
    names = embeddings.names
    return Episode(
        support_x=sup.reshape(-1, d),
        support_y=np.repeat(np.arange(n), cfg.k),
        query_x=qry.reshape(-1, d),
        query_y=np.repeat(np.arange(n), cfg.q_count),
        classes=tuple(names[v] for v in novel),
        base_classes=tuple(names[v] for v in base),
        base_anchors=anchors,
    )


# ---------------------------------------------------------------------------
# feature datasets


class DatasetError(ValueError):
    pass


@dataclass
class DatasetSplit:
    features: dict[str, np.ndarray]
    base: tuple[str, ...]
    novel: tuple[str, ...]

    def __post_init__(self):
        overlap = set(self.base) & set(self.novel)
        if overlap:
            raise DatasetError(f"classes in both base and novel: {sorted(overlap)}")
        for c in self.base + self.novel:
            if c not in self.features:
                raise DatasetError(f"class {c!r} not in feature file")
        dims = {v.shape[1] for v in self.features.values()}
        if len(dims) > 1:
            raise DatasetError(f"inconsistent feature dimensions {sorted(dims)}")
        self._anchors = None

    @property
    def dim(self) -> int:
        return next(iter(self.features.values())).shape[1]

    def base_anchors(self) -> np.ndarray:
        if self._anchors is None:
            self._anchors = np.array([self.features[c].mean(axis=0) for c in self.base]).reshape(
                len(self.base), self.dim)
        return self._anchors


def parse_features(text: str) -> dict[str, np.ndarray]:
    """Read the block feature format.

    ``classes=<n> dim=<d>`` on the first line, then per class a line
    ``<name> <count>`` followed by ``count`` lines of ``d`` decimals.
    Blank lines and ``#`` comments are ignored; anything else is an error.
    """
    lines = [(i, ln.split("#", 1)[0].strip()) for i, ln in enumerate(text.splitlines(), start=1)]
    lines = [(i, ln) for i, ln in lines if ln]
    if not lines:
        raise DatasetError("empty feature file")
    lineno, head = lines[0]
    try:
        fields = dict(tok.split("=", 1) for tok in head.split())
        n_classes, dim = int(fields.pop("classes")), int(fields.pop("dim"))
    except (ValueError, KeyError):
        raise DatasetError(f"line {lineno}: bad header {head!r}") from None
    if fields:
        raise DatasetError(f"line {lineno}: unexpected header fields {sorted(fields)}")
    out: dict[str, np.ndarray] = {}
    pos = 1
    for _ in range(n_classes):
        if pos >= len(lines):
            raise DatasetError("feature file ended before all classes were read")
        lineno, block = lines[pos]
        parts = block.split()
        if len(parts) != 2 or not parts[1].isdigit():
            raise DatasetError(f"line {lineno}: expected '<class> <count>'")
        name, count = parts[0], int(parts[1])
        if name in out:
            raise DatasetError(f"line {lineno}: class {name!r} repeated")
        rows = lines[pos + 1:pos + 1 + count]
        if len(rows) != count:
            raise DatasetError(f"class {name!r}: expected {count} vectors")
        vecs = np.empty((count, dim))
        for r, (ln_i, row) in enumerate(rows):
            vals = row.split()
            if len(vals) != dim:
                raise DatasetError(f"line {ln_i}: expected {dim} values, got {len(vals)}")
            try:
                vecs[r] = [float(v) for v in vals]
            except ValueError:
                raise DatasetError(f"line {ln_i}: non-numeric value") from None
        out[name] = vecs
        pos += 1 + count
    if pos != len(lines):
        raise DatasetError(f"line {lines[pos][0]}: trailing content after {n_classes} classes")
    return out


def format_features(features: dict[str, np.ndarray]) -> str:
    dims = {v.shape[1] for v in features.values()}
    if len(dims) != 1:
        raise DatasetError("inconsistent feature dimensions")
    out = [f"classes={len(features)} dim={dims.pop()}"]
    for name, vecs in features.items():
        out.append(f"{name} {len(vecs)}")
        out.extend(" ".join(repr(float(v)) for v in row) for row in vecs)
    return "\n".join(out) + "\n"


def parse_manifest(text: str) -> tuple[tuple[str, ...], tuple[str, ...]]:
    got = {}
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, body = line.partition(":")
        key = key.strip()
        if not sep or key not in ("base", "novel") or key in got:
            raise DatasetError(f"manifest line {i}: expected 'base: ...' or 'novel: ...'")
        got[key] = tuple(c.strip() for c in body.split(",") if c.strip())
    if set(got) != {"base", "novel"}:
        raise DatasetError("manifest needs both base and novel lines")
    return got["base"], got["novel"]


def load_feature_dataset(path, manifest_path=None) -> DatasetSplit:
    """Load a feature file and its split manifest (default ``<path>.split``)."""
    with open(path, encoding="utf-8") as fh:
        features = parse_features(fh.read())
    manifest_path = manifest_path or f"{path}.split"
    with open(manifest_path, encoding="utf-8") as fh:
        base, novel = parse_manifest(fh.read())
    return DatasetSplit(features, base, novel)


def save_feature_dataset(ds: DatasetSplit, path, manifest_path=None):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_features(ds.features))
    with open(manifest_path or f"{path}.split", "w", encoding="utf-8") as fh:
        fh.write(f"base: {','.join(ds.base)}\nnovel: {','.join(ds.novel)}\n")


def sample_episode(ds: DatasetSplit, n_way: int, k_shot: int, q_count: int,
                   rng: np.random.Generator) -> Episode:
    """N-way K-shot episode over the novel classes, sampled without replacement."""
    if len(ds.novel) < n_way:
        raise DatasetError(f"need {n_way} novel classes, have {len(ds.novel)}")
    picked = rng.choice(len(ds.novel), size=n_way, replace=False)
    classes = tuple(ds.novel[i] for i in picked)
    sx, sy, qx, qy, sidx, qidx = [], [], [], [], [], []
    for j, c in enumerate(classes):
        vecs = ds.features[c]
        if len(vecs) < k_shot + q_count:
            raise DatasetError(f"class {c!r} has {len(vecs)} examples, need {k_shot + q_count}")
        order = rng.permutation(len(vecs))[:k_shot + q_count]
        s, q = order[:k_shot], order[k_shot:]
        sx.append(vecs[s])
        qx.append(vecs[q])
        sy += [j] * k_shot
        qy += [j] * q_count
        sidx += [(c, int(i)) for i in s]
        qidx += [(c, int(i)) for i in q]
    return Episode(
        support_x=np.concatenate(sx),
        support_y=np.asarray(sy),
        query_x=np.concatenate(qx),
        query_y=np.asarray(qy),
        classes=classes,
        base_classes=ds.base,
        base_anchors=ds.base_anchors(),
        support_idx=sidx,
        query_idx=qidx,
    )


def save_episode(ep: Episode, path):
    np.savez(path, support_x=ep.support_x, support_y=ep.support_y, query_x=ep.query_x,
             query_y=ep.query_y, base_anchors=ep.base_anchors,
             classes=np.array(ep.classes, dtype=str), base_classes=np.array(ep.base_classes, dtype=str))


def load_episode(path) -> Episode:
    with np.load(path, allow_pickle=False) as z:
        return Episode(
            support_x=z["support_x"], support_y=z["support_y"], query_x=z["query_x"],
            query_y=z["query_y"], classes=tuple(str(c) for c in z["classes"]),
            base_classes=tuple(str(c) for c in z["base_classes"]), base_anchors=z["base_anchors"])
