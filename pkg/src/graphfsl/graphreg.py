"""Node2vec-style graph loss over per-node parameter vectors.

For source ``y`` with context multiset ``N(y)`` the loss is

    L = sum_y sum_{n in N(y)} [ log Z_y - sim(theta_n, theta_y) / T ],
    Z_y = sum_v exp(sim(theta_y, theta_v) / T),

where ``v`` ranges over every node in the table.  ``graph_loss_ns`` replaces
the partition function with the logistic negative-sampling surrogate.
"""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import expit, log_expit

from .labelgraph import (
    LabelGraph,
    NeighborhoodMap,
    WalkConfig,
    build_neighborhoods,
    child_parent_neighborhoods,
)

logger = logging.getLogger(__name__)

SIMILARITIES = ("neg-sq-euclidean", "dot", "cosine")
COS_EPS = 1e-12


class DivergenceError(FloatingPointError):
    """Raised when an optimizer produces a non-finite loss."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


@dataclass
class ParamTable:
    """One ``d``-dimensional row per graph node plus a trainable mask."""

    values: np.ndarray
    names: tuple[str, ...] = ()
    trainable: np.ndarray = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] < 1:
            raise ValueError("parameter table must be a 2-D array with d >= 1")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("parameter table has non-finite entries")
        n = self.values.shape[0]
        if not self.names:
            self.names = tuple(str(i) for i in range(n))
        self.names = tuple(self.names)
        if len(self.names) != n:
            raise ValueError("names do not match the number of rows")
        if self.trainable is None:
            self.trainable = np.ones(n, dtype=bool)
        self.trainable = np.asarray(self.trainable, dtype=bool)
        if self.trainable.shape != (n,):
            raise ValueError("trainable mask has the wrong shape")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def copy(self) -> "ParamTable":
        return ParamTable(self.values.copy(), self.names, self.trainable.copy())

    def with_values(self, values) -> "ParamTable":
        return ParamTable(values, self.names, self.trainable.copy())

    def frozen(self, rows) -> "ParamTable":
        t = self.copy()
        t.trainable[np.asarray(rows, dtype=np.int64)] = False
        return t


@dataclass(frozen=True)
class RegConfig:
    temperature: float = 2.0
    similarity: str = "cosine"
    partition: str = "exact"
    negatives: int = 5
    neighborhood: str = "walk"
    walk: WalkConfig = field(default_factory=WalkConfig)

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.similarity not in SIMILARITIES:
            raise ValueError(f"unknown similarity {self.similarity!r}")
        if self.partition not in ("exact", "negative-sampling"):
            raise ValueError(f"unknown partition mode {self.partition!r}")
        if self.partition == "negative-sampling" and self.negatives < 1:
            raise ValueError("negative-sampling needs at least one negative")
        if self.neighborhood not in ("walk", "child-parent"):
            raise ValueError(f"unknown neighborhood mode {self.neighborhood!r}")


def neighborhoods(g: LabelGraph, cfg: RegConfig, rng: np.random.Generator) -> NeighborhoodMap:
    if cfg.neighborhood == "child-parent":
        return child_parent_neighborhoods(g)
    return build_neighborhoods(g, cfg.walk, rng)


# ---------------------------------------------------------------------------
# similarities


def _norms(x):
    return np.maximum(np.linalg.norm(x, axis=-1), COS_EPS)


def similarity(a, b, kind: str) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch {a.shape} vs {b.shape}")
    if kind == "dot":
        return float(a @ b)
    if kind == "neg-sq-euclidean":
        diff = a - b
        return float(-(diff @ diff))
    if kind == "cosine":
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0 or nb == 0:
            raise ValueError("cosine similarity of a zero vector")
        return float(np.clip(a @ b / (na * nb), -1.0, 1.0))
    raise ValueError(f"unknown similarity {kind!r}")


def similarity_matrix(a: np.ndarray, b: np.ndarray, kind: str) -> np.ndarray:
    """``S[i, j] = sim(a_i, b_j)`` for the rows of ``a`` and ``b``."""
    if a.shape[-1] != b.shape[-1]:
        raise ValueError("dimension mismatch")
    if kind == "dot":
        return a @ b.T
    if kind == "neg-sq-euclidean":
        sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T)
        return -np.maximum(sq, 0.0)
    if kind == "cosine":
        return (a / _norms(a)[:, None]) @ (b / _norms(b)[:, None]).T
    raise ValueError(f"unknown similarity {kind!r}")


def weighted_similarity_grad(x: np.ndarray, w: np.ndarray, kind: str) -> np.ndarray:
    """Gradient of ``sum_ij w[i, j] * sim(x_i, x_j)`` with respect to ``x``."""
    ws = w + w.T
    if kind == "dot":
        return ws @ x
    if kind == "neg-sq-euclidean":
        return 2.0 * (ws @ x) - 2.0 * ws.sum(1)[:, None] * x
    if kind == "cosine":
        norms = _norms(x)
        u = x / norms[:, None]
        gu = ws @ u
        radial = (gu * u).sum(1)[:, None] * u
        return (gu - radial) / norms[:, None]
    raise ValueError(f"unknown similarity {kind!r}")


def cross_similarity_grad(x: np.ndarray, c: np.ndarray, w: np.ndarray, kind: str) -> np.ndarray:
    """Gradient of ``sum_ij w[i, j] * sim(x_i, c_j)`` with respect to ``c``."""
    if kind == "dot":
        return w.T @ x
    if kind == "neg-sq-euclidean":
        return 2.0 * (w.T @ x) - 2.0 * w.sum(0)[:, None] * c
    if kind == "cosine":
        norms = _norms(c)
        u = c / norms[:, None]
        gu = w.T @ (x / _norms(x)[:, None])
        radial = (gu * u).sum(1)[:, None] * u
        return (gu - radial) / norms[:, None]
    raise ValueError(f"unknown similarity {kind!r}")


# ---------------------------------------------------------------------------
# losses


def _check(params: ParamTable, nmap: NeighborhoodMap):
    if nmap.n_nodes != params.n:
        raise ValueError(f"neighborhood map covers {nmap.n_nodes} nodes, table has {params.n}")


def _exact(params, nmap, cfg, want_grad):
    _check(params, nmap)
    if len(nmap) == 0:
        return 0.0, np.zeros_like(params.values)
    x = params.values
    s = similarity_matrix(x, x, cfg.similarity) / cfg.temperature
    counts = nmap.counts()
    src_count = nmap.source_counts()
    e = np.exp(s - s.max(axis=1, keepdims=True))
    z = e.sum(axis=1)
    log_z = np.log(z) + s.max(axis=1)
    loss = float(src_count @ log_z - (counts * s).sum())
    if not want_grad:
        return loss, None
    w = (src_count / z)[:, None] * e - counts
    grad = weighted_similarity_grad(x, w / cfg.temperature, cfg.similarity)
    grad[~params.trainable] = 0.0
    return loss, grad


def graph_loss_exact(params: ParamTable, nmap: NeighborhoodMap, cfg: RegConfig) -> float:
    return _exact(params, nmap, cfg, want_grad=False)[0]


def graph_loss_grad_exact(params: ParamTable, nmap: NeighborhoodMap, cfg: RegConfig) -> np.ndarray:
    return _exact(params, nmap, cfg, want_grad=True)[1]


def graph_loss_exact_and_grad(params, nmap, cfg):
    return _exact(params, nmap, cfg, want_grad=True)


def graph_loss_ns(
    params: ParamTable,
    nmap: NeighborhoodMap,
    cfg: RegConfig,
    rng: np.random.Generator,
    proposal: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Negative-sampling loss and gradient.

    Per positive pair ``(y, n)``:
    ``-log sig(s_yn / T) - sum_k log sig(-s_yk / T)`` with ``cfg.negatives``
    fresh draws ``k != y`` from ``proposal`` (uniform by default).
    """
    _check(params, nmap)
    grad = np.zeros_like(params.values)
    if len(nmap) == 0:
        return 0.0, grad
    negs = sample_negatives(params.n, nmap.sources, cfg.negatives, rng, proposal)
    return _ns_loss_given(params, nmap, negs, cfg)


def sample_negatives(n, sources, count, rng, proposal=None):
    """``(len(sources), count)`` array of negatives, never equal to the row's source."""
    if count < 1:
        raise ValueError("negative sample count must be >= 1")
    sources = np.asarray(sources)
    if proposal is None:
        draws = rng.integers(n - 1, size=(len(sources), count))
        return draws + (draws >= sources[:, None])
    w = np.asarray(proposal, dtype=float)
    out = np.empty((len(sources), count), dtype=np.int64)
    for i, y in enumerate(sources):
        wy = w.copy()
        wy[y] = 0.0
        out[i] = rng.choice(n, size=count, p=wy / wy.sum())
    return out


def _ns_loss_given(params, nmap, negs, cfg):
    x = params.values
    t = cfg.temperature
    kind = cfg.similarity
    pos = _pair_sims(x, nmap.sources, nmap.contexts, kind) / t
    neg_src = np.repeat(nmap.sources, negs.shape[1])
    neg = _pair_sims(x, neg_src, negs.ravel(), kind) / t
    loss = -log_expit(pos).sum() - log_expit(-neg).sum()

    # d loss / d sim, scattered into a weight matrix over (source, other)
    w = np.zeros((params.n, params.n))
    np.add.at(w, (nmap.sources, nmap.contexts), -expit(-pos) / t)
    np.add.at(w, (neg_src, negs.ravel()), expit(neg) / t)
    grad = weighted_similarity_grad(x, w, kind)
    grad[~params.trainable] = 0.0
    return float(loss), grad


def _pair_sims(x, i, j, kind):
    a, b = x[i], x[j]
    if kind == "dot":
        return (a * b).sum(1)
    if kind == "neg-sq-euclidean":
        d = a - b
        return -(d * d).sum(1)
    if kind == "cosine":
        return (a * b).sum(1) / (_norms(a) * _norms(b))
    raise ValueError(f"unknown similarity {kind!r}")


def graph_loss(params, nmap, cfg, rng=None):
    """Loss and gradient in the mode selected by ``cfg.partition``."""
    if cfg.partition == "exact":
        return graph_loss_exact_and_grad(params, nmap, cfg)
    if rng is None:
        raise ValueError("negative sampling needs an rng")
    return graph_loss_ns(params, nmap, cfg, rng)


# ---------------------------------------------------------------------------
# standalone embedding


@dataclass(frozen=True)
class SGDConfig:
    lr: float = 0.1
    epochs: int = 50
    batch: int = 256
    clip: float = 5.0


def init_rows(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform skip-gram initialization in ``[-1/(2d), 1/(2d)]``."""
    half = 0.5 / d
    return rng.uniform(-half, half, size=(n, d))


def clip_by_norm(grad: np.ndarray, max_norm: float) -> np.ndarray:
    norm = np.linalg.norm(grad)
    if max_norm and norm > max_norm:
        return grad * (max_norm / norm)
    return grad


def embed_graph(
    g: LabelGraph,
    d: int,
    walk_cfg: WalkConfig,
    reg_cfg: RegConfig,
    sgd: SGDConfig,
    rng: np.random.Generator,
) -> ParamTable:
    """Train node embeddings of ``g`` by mini-batch SGD on the graph loss.

    Each batch contributes the mean per-pair loss; gradients are clipped to
    global norm ``sgd.clip``.
    """
    if d < 2:
        raise ValueError("embedding dimension must be >= 2")
    init_rng, walk_rng, batch_rng = (np.random.default_rng(s) for s in
                                     np.random.SeedSequence(int(rng.integers(2**63))).spawn(3))
    table = ParamTable(init_rows(g.n_nodes, d, init_rng), g.names)
    if sgd.epochs == 0:
        return table
    cfg = replace(reg_cfg, walk=walk_cfg)
    nmap = neighborhoods(g, cfg, walk_rng)
    if len(nmap) == 0:
        return table
    x = table.values
    it = 0
    for epoch in range(sgd.epochs):
        order = batch_rng.permutation(len(nmap))
        for start in range(0, len(order), sgd.batch):
            batch = nmap.subset(order[start:start + sgd.batch])
            if not np.all(np.isfinite(x)):
                raise DivergenceError(f"non-finite parameters at iteration {it}", it)
            cur = ParamTable(x, table.names)
            loss, grad = graph_loss(cur, batch, cfg, batch_rng)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite graph loss at iteration {it}", it)
            x = x - sgd.lr * clip_by_norm(grad / len(batch), sgd.clip)
            it += 1
        logger.debug("embed epoch %d loss %.4f", epoch, loss / len(batch))
    return ParamTable(x, table.names)


# ---------------------------------------------------------------------------
# serialization

_MAGIC = b"PTAB1\n"


def dump_binary(table: ParamTable) -> bytes:
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<QQ", table.n, table.d))
    for name in table.names:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
    buf.write(table.trainable.astype(np.uint8).tobytes())
    buf.write(table.values.astype("<f8").tobytes())
    return buf.getvalue()


def load_binary(data: bytes) -> ParamTable:
    if not data.startswith(_MAGIC):
        raise ValueError("not a parameter table file")
    pos = len(_MAGIC)
    n, d = struct.unpack_from("<QQ", data, pos)
    pos += 16
    names = []
    for _ in range(n):
        (k,) = struct.unpack_from("<I", data, pos)
        pos += 4
        names.append(data[pos:pos + k].decode("utf-8"))
        pos += k
    trainable = np.frombuffer(data, dtype=np.uint8, count=n, offset=pos).astype(bool)
    pos += n
    values = np.frombuffer(data, dtype="<f8", count=n * d, offset=pos).reshape(n, d)
    pos += 8 * n * d
    if pos != len(data):
        raise ValueError("trailing bytes after parameter table")
    return ParamTable(values.astype(np.float64), tuple(names), trainable)


def dump_text(table: ParamTable) -> str:
    lines = [f"n={table.n} d={table.d}"]
    for name, row, tr in zip(table.names, table.values, table.trainable):
        vals = " ".join(repr(float(v)) for v in row)
        lines.append(f"{name} {int(tr)} {vals}")
    return "\n".join(lines) + "\n"


def load_text(text: str) -> ParamTable:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty parameter table")
    try:
        head = dict(tok.split("=") for tok in lines[0].split())
        n, d = int(head["n"]), int(head["d"])
    except (ValueError, KeyError):
        raise ValueError(f"bad header {lines[0]!r}") from None
    if len(lines) != n + 1:
        raise ValueError(f"expected {n} rows, found {len(lines) - 1}")
    names, flags, rows = [], [], []
    for i, ln in enumerate(lines[1:], start=2):
        parts = ln.split()
        if len(parts) != d + 2:
            raise ValueError(f"line {i}: expected {d + 2} fields")
        names.append(parts[0])
        flags.append(parts[1] == "1")
        rows.append([float(v) for v in parts[2:]])
    return ParamTable(np.array(rows).reshape(n, d), tuple(names), np.array(flags))


def save(table: ParamTable, path, binary: bool = True):
    if binary:
        with open(path, "wb") as fh:
            fh.write(dump_binary(table))
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(dump_text(table))


def load(path) -> ParamTable:
    with open(path, "rb") as fh:
        data = fh.read()
    if data.startswith(_MAGIC):
        return load_binary(data)
    return load_text(data.decode("utf-8"))


def permute_table(table: ParamTable, perm: Sequence[int]) -> ParamTable:
    """Move row ``i`` to position ``perm[i]``."""
    perm = np.asarray(perm)
    inv = np.argsort(perm)
    return ParamTable(table.values[inv], tuple(table.names[i] for i in inv), table.trainable[inv])
