"""Graph-regularized few-shot learners.

All three learners minimise

    CE(support; class rows) + lam * L_graph(table) / |pairs|

over a parameter table with one row per label-graph node.  Episode class
rows are trained, base-class rows are frozen anchors and all remaining rows
(internal taxonomy nodes, unused classes) are auxiliary rows that only the
graph term touches.  With ``regularize=False`` the graph term is never
evaluated, which is the unregularized baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from .graphreg import (
    DivergenceError,
    ParamTable,
    RegConfig,
    cross_similarity_grad,
    graph_loss,
    init_rows,
    neighborhoods,
    similarity_matrix,
)
from .labelgraph import LabelGraph, NeighborhoodMap
from .tasks import Episode

INIT_STRATEGIES = ("A", "B", "C")


@dataclass(frozen=True)
class JointConfig:
    lam: float = 0.0
    reg: RegConfig = field(default_factory=RegConfig)
    lr: float = 0.1
    iterations: int = 100
    init: str = "A"
    init_steps: int = 100
    inner_steps: int = 5
    inner_lr: float = 0.1
    graph_similarity: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.iterations < 0 or self.inner_steps < 0 or self.init_steps < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.init not in INIT_STRATEGIES:
            raise ValueError(f"unknown init strategy {self.init!r}")


@dataclass
class Classifier:
    classes: tuple[str, ...]
    rows: np.ndarray
    kind: str
    learner: str
    table: ParamTable | None = None
    objective: list[float] = field(default_factory=list)
    graph_objective: list[float] = field(default_factory=list)
    trajectory: np.ndarray | None = None

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return class_softmax(x, self, self.kind)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.predict_proba(x), axis=-1)


# ---------------------------------------------------------------------------
# classification loss


def _logits(x, rows, kind):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if kind == "cosine" and np.any(np.linalg.norm(x, axis=1) == 0):
        raise ValueError("zero feature vector under cosine similarity")
    return similarity_matrix(x, rows, kind)


def class_softmax(x, c: Classifier | np.ndarray, kind: str) -> np.ndarray:
    """Softmax over classes of ``sim(x, row)``; a 1-D ``x`` gives a 1-D result."""
    rows = c.rows if isinstance(c, Classifier) else np.asarray(c, dtype=float)
    single = np.ndim(x) == 1
    z = _logits(x, rows, kind)
    p = np.exp(z - logsumexp(z, axis=1, keepdims=True))
    return p[0] if single else p


def ce_loss(x, y, c: Classifier | np.ndarray, kind: str) -> float:
    """Mean ``-log p(y|x)``; ``y`` indexes the classifier rows."""
    rows = c.rows if isinstance(c, Classifier) else np.asarray(c, dtype=float)
    y = np.asarray(y)
    if len(y) and (y.min() < 0 or y.max() >= len(rows)):
        raise ValueError("label outside the classifier's classes")
    z = _logits(x, rows, kind)
    return float(np.mean(logsumexp(z, axis=1) - z[np.arange(len(y)), y]))


def ce_loss_and_grad(x, y, rows, kind):
    z = _logits(x, rows, kind)
    lse = logsumexp(z, axis=1)
    m = len(y)
    loss = float(np.mean(lse - z[np.arange(m), y]))
    w = np.exp(z - lse[:, None])
    w[np.arange(m), y] -= 1.0
    return loss, cross_similarity_grad(x, rows, w / m, kind)


def episode_ce(episode: Episode, c: Classifier) -> float:
    return ce_loss(episode.query_x, episode.query_y, c, c.kind)


def accuracy(episode: Episode, c: Classifier) -> float:
    return float(np.mean(c.predict(episode.query_x) == episode.query_y))


# ---------------------------------------------------------------------------
# shared optimizer


@dataclass
class GraphPrior:
    """A label graph with fixed neighborhoods, reused across episodes."""

    g: LabelGraph
    nmap: NeighborhoodMap

    @classmethod
    def build(cls, g: LabelGraph, reg: RegConfig, seed: int = 0) -> "GraphPrior":
        return cls(g, neighborhoods(g, reg, np.random.default_rng(seed)))


def _prior(g, cfg, nmap=None) -> GraphPrior:
    if isinstance(g, GraphPrior):
        return g
    if nmap is not None:
        return GraphPrior(g, nmap)
    return GraphPrior.build(g, cfg.reg, cfg.seed)


def _streams(cfg: JointConfig, episode: Episode):
    """Independent generators for class-row init, auxiliary-row init and sampling."""
    key = np.frombuffer(episode.support_x.tobytes()[:64].ljust(64, b"\0"), dtype=np.uint32)
    ss = np.random.SeedSequence([cfg.seed, *key.tolist()])
    return [np.random.default_rng(s) for s in ss.spawn(3)]


def _layout(prior: GraphPrior, episode: Episode):
    g = prior.g
    cls_ids = np.array([g.node_id(c) for c in episode.classes], dtype=np.int64)
    base_ids = np.array([g.node_id(c) for c in episode.base_classes], dtype=np.int64)
    if len(set(cls_ids) & set(base_ids)):
        raise ValueError("episode classes overlap the base classes")
    return cls_ids, base_ids


def _base_table(prior, episode, d, aux_rng, base_ids):
    values = init_rows(prior.g.n_nodes, d, aux_rng)
    trainable = np.ones(prior.g.n_nodes, dtype=bool)
    if len(base_ids):
        values[base_ids] = episode.base_anchors
        trainable[base_ids] = False
    return ParamTable(values, prior.g.names, trainable)


def joint_objective(table: ParamTable, cls_ids, episode: Episode, kind: str, lam: float,
                    nmap: NeighborhoodMap | None, reg: RegConfig, rng=None):
    """``CE(support) + lam * L_graph / |pairs|`` and its gradient over the table.

    ``nmap=None`` drops the graph term entirely (it is not evaluated).
    Returns ``(objective, graph_term, grad)``; ``graph_term`` is None when
    the graph term is dropped.  Frozen rows get zero gradient.
    """
    x = table.values
    ce, g_rows = ce_loss_and_grad(episode.support_x, episode.support_y, x[cls_ids], kind)
    grad = np.zeros_like(x)
    grad[cls_ids] = g_rows
    obj, gl = ce, None
    if nmap is not None:
        n_pairs = max(len(nmap), 1)
        gl, gg = graph_loss(table, nmap, reg, rng)
        gl /= n_pairs
        obj = ce + lam * gl
        grad += lam * (gg / n_pairs)
    grad[~table.trainable] = 0.0
    return obj, gl, grad


def _optimize(table, cls_ids, episode, kind, lam, prior, reg, lr, steps,
              regularize, record, rng):
    x = table.values.copy()
    trainable = table.trainable.copy()
    if not regularize:
        trainable[:] = False
        trainable[cls_ids] = True
    nmap = prior.nmap if regularize else None
    objective, graph_obj = [], []
    traj = [x[cls_ids].copy()] if record else None
    for it in range(steps + 1):
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"non-finite parameters at iteration {it}", it)
        obj, gl, grad = joint_objective(ParamTable(x, table.names, trainable), cls_ids, episode, kind,
                                        lam, nmap, reg, rng)
        if gl is not None:
            graph_obj.append(gl)
        objective.append(obj)
        if not np.isfinite(obj):
            raise DivergenceError(f"non-finite objective at iteration {it}", it)
        if it == steps:
            break
        x -= lr * grad
        if record:
            traj.append(x[cls_ids].copy())
    out = ParamTable(x, table.names, table.trainable)
    return out, objective, graph_obj, (np.array(traj) if record else None)


def _graph_reg(cfg: JointConfig, default_sim: str) -> RegConfig:
    return replace(cfg.reg, similarity=cfg.graph_similarity or default_sim)


def _fit(episode, g, cfg, *, learner, kind, graph_sim, init_rows_fn, lr, steps,
         regularize, nmap, record):
    if regularize or cfg.init == "C":
        prior = _prior(g, cfg, nmap)
    else:
        graph = g.g if isinstance(g, GraphPrior) else g
        prior = GraphPrior(graph, NeighborhoodMap.empty(graph.n_nodes))
    cls_rng, aux_rng, ns_rng = _streams(cfg, episode)
    cls_ids, base_ids = _layout(prior, episode)
    d = episode.support_x.shape[1]
    table = _base_table(prior, episode, d, aux_rng, base_ids)
    reg = _graph_reg(cfg, graph_sim)
    table.values[cls_ids] = init_rows_fn(prior, table, cls_ids, cls_rng, reg)
    if steps > 0:
        table, obj, gobj, traj = _optimize(table, cls_ids, episode, kind, cfg.lam, prior, reg,
                                           lr, steps, regularize, record, ns_rng)
    else:
        obj, gobj = [], []
        traj = table.values[cls_ids][None].copy() if record else None
    return Classifier(
        classes=episode.classes,
        rows=table.values[cls_ids].copy(),
        kind=kind,
        learner=learner,
        table=table,
        objective=obj,
        graph_objective=gobj,
        trajectory=traj,
    )


# ---------------------------------------------------------------------------
# initialization


def nearest_base(g: LabelGraph, node: int, base_ids) -> int:
    """Graph-nearest base node; ties go to the lowest node id."""
    dist = g.shortest_paths(node)
    base_ids = np.asarray(sorted(base_ids))
    reach = base_ids[dist[base_ids] >= 0]
    if not len(reach):
        raise ValueError(f"no base class reachable from node {node}")
    return int(reach[np.argmin(dist[reach])])


def init_classifier(
    g: LabelGraph | GraphPrior,
    base_params: ParamTable,
    novel_classes,
    strategy: str,
    rng: np.random.Generator,
    reg: RegConfig | None = None,
    steps: int = 100,
    lr: float = 0.1,
) -> np.ndarray:
    """Initial rows for ``novel_classes`` (node ids or names).

    A: uniform random rows.  B: copy of the graph-nearest base row (frozen
    rows of ``base_params`` are the base classes).  C: start from A and
    minimise the mean graph loss alone for ``steps`` SGD steps with every
    frozen row held fixed.
    """
    prior = g if isinstance(g, GraphPrior) else None
    graph = prior.g if prior else g
    ids = np.array([graph.node_id(c) if isinstance(c, str) else int(c) for c in novel_classes],
                   dtype=np.int64)
    d = base_params.d
    if strategy == "A":
        return init_rows(len(ids), d, rng)
    base_ids = np.flatnonzero(~base_params.trainable)
    if strategy == "B":
        return np.array([base_params.values[nearest_base(graph, v, base_ids)] for v in ids]).reshape(-1, d)
    if strategy == "C":
        reg = reg or RegConfig()
        if prior is None:
            prior = GraphPrior.build(graph, reg)
        x = base_params.values.copy()
        x[ids] = init_rows(len(ids), d, rng)
        n_pairs = max(len(prior.nmap), 1)
        for it in range(steps):
            if not np.all(np.isfinite(x)):
                raise DivergenceError(f"init C diverged at step {it}", it)
            _, gg = graph_loss(ParamTable(x, base_params.names, base_params.trainable),
                               prior.nmap, reg, rng)
            x -= lr * gg / n_pairs
        return x[ids].copy()
    raise ValueError(f"unknown init strategy {strategy!r}")


def _init_by_strategy(cfg):
    def init(prior, table, cls_ids, rng, reg):
        return init_classifier(prior, table, cls_ids, cfg.init, rng, reg, cfg.init_steps, cfg.lr)
    return init


# ---------------------------------------------------------------------------
# learners


def fit_prototype(episode: Episode, g, cfg: JointConfig, *, regularize: bool = True,
                  nmap: NeighborhoodMap | None = None, record: bool = False) -> Classifier:
    """Prototypes start at per-class support means and, for ``lam > 0``, are
    refined by SGD on support CE plus the graph term (neg-sq-euclidean)."""
    counts = np.bincount(episode.support_y, minlength=episode.n_way)
    if np.any(counts == 0):
        raise ValueError("class with zero support examples")

    def means(prior, table, cls_ids, rng, reg):
        sums = np.zeros((episode.n_way, episode.support_x.shape[1]))
        np.add.at(sums, episode.support_y, episode.support_x)
        return sums / counts[:, None]

    steps = cfg.iterations if (regularize and cfg.lam > 0) else 0
    return _fit(episode, g, cfg, learner="prototype", kind="neg-sq-euclidean",
                graph_sim="neg-sq-euclidean", init_rows_fn=means, lr=cfg.lr, steps=steps,
                regularize=regularize and steps > 0, nmap=nmap, record=record)


def fit_cosine(episode: Episode, g, cfg: JointConfig, *, regularize: bool = True,
               nmap: NeighborhoodMap | None = None, record: bool = False) -> Classifier:
    """Cosine-softmax fine-tuning of novel rows with base rows frozen."""
    return _fit(episode, g, cfg, learner="cosine", kind="cosine", graph_sim="cosine",
                init_rows_fn=_init_by_strategy(cfg), lr=cfg.lr, steps=cfg.iterations,
                regularize=regularize, nmap=nmap, record=record)


def fit_inner_loop(episode: Episode, g, cfg: JointConfig, *, regularize: bool = True,
                   nmap: NeighborhoodMap | None = None, record: bool = False) -> Classifier:
    """A few inner-loop steps on per-class codes with dot-product logits and a
    cosine graph term."""
    return _fit(episode, g, cfg, learner="inner-loop", kind="dot", graph_sim="cosine",
                init_rows_fn=_init_by_strategy(cfg), lr=cfg.inner_lr, steps=cfg.inner_steps,
                regularize=regularize, nmap=nmap, record=record)


LEARNERS = {
    "prototype": fit_prototype,
    "cosine": fit_cosine,
    "inner-loop": fit_inner_loop,
}
