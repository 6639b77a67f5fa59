"""Episode harness shared by the CLI and the acceptance suite."""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .graphreg import DivergenceError, ParamTable, RegConfig, SGDConfig, embed_graph
from .labelgraph import LabelGraph, internal_layer_count, remove_bottom_layers
from .learners import LEARNERS, GraphPrior, JointConfig, accuracy, episode_ce
from .metrics import TaskResult, hardness
from .tasks import (
    DatasetSplit,
    Episode,
    SyntheticConfig,
    make_binary_tree,
    sample_episode,
    sample_synthetic_episode,
    split_leaves,
)

EMBED_SGD = SGDConfig(lr=0.5, epochs=30, batch=256)
EMBED_REG = RegConfig(similarity="dot", temperature=2.0)


def default_lambda(shots: int) -> float:
    """5 / 3 / 1 for 1-, 2- and 5-shot; 3 in between, 1 from five shots up."""
    if shots <= 1:
        return 5.0
    if shots < 5:
        return 3.0
    return 1.0


def episode_seed(master: int, cell: int, episode: int) -> int:
    ss = np.random.SeedSequence([master, cell, episode])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


@dataclass(frozen=True)
class Arm:
    name: str
    learner: str = "cosine"
    lam: float | str = "auto"
    init: str = "A"
    neighborhood: str = "walk"
    remove_layers: int = 0
    graph_similarity: str | None = None

    def __post_init__(self):
        if self.learner not in LEARNERS:
            raise ValueError(f"unknown learner {self.learner!r}")
        if self.lam != "auto" and float(self.lam) < 0:
            raise ValueError("lambda must be >= 0")

    def lam_for(self, shots: int) -> float:
        return default_lambda(shots) if self.lam == "auto" else float(self.lam)


@lru_cache(maxsize=32)
def tree_embedding(h: int, d: int, seed: int = 0) -> ParamTable:
    """Node2vec embedding of the height-``h`` tree, rows scaled to unit norm.

    Unit rows make ``sigma`` a noise level relative to the class-mean radius.
    """
    g = make_binary_tree(h)
    table = embed_graph(g, d, EMBED_REG.walk, EMBED_REG, EMBED_SGD, np.random.default_rng(seed))
    x = table.values / np.linalg.norm(table.values, axis=1, keepdims=True)
    return ParamTable(x, table.names)


@lru_cache(maxsize=64)
def _prior(g: LabelGraph, neighborhood: str, seed: int) -> GraphPrior:
    return GraphPrior.build(g, RegConfig(neighborhood=neighborhood), seed)


def collapsed_graph(g: LabelGraph, n_layers: int) -> LabelGraph:
    """Layer removal, clamped so the top internal layer always survives."""
    n_layers = min(n_layers, internal_layer_count(g) - 1)
    return remove_bottom_layers(g, max(n_layers, 0))


@lru_cache(maxsize=64)
def _collapsed(h: int, n_layers: int) -> LabelGraph:
    return collapsed_graph(make_binary_tree(h), n_layers)


def fingerprint(*parts) -> str:
    return hashlib.sha256(repr(parts).encode()).hexdigest()[:12]


def evaluate(episode: Episode, prior: GraphPrior, arm: Arm, shots: int, seed: int) -> tuple[float, float]:
    lam = arm.lam_for(shots)
    cfg = JointConfig(lam=lam, init=arm.init, graph_similarity=arm.graph_similarity, seed=seed,
                      reg=RegConfig(neighborhood=arm.neighborhood))
    fit = LEARNERS[arm.learner]
    clf = fit(episode, prior, cfg, regularize=lam > 0)
    return accuracy(episode, clf), episode_ce(episode, clf)


@dataclass(frozen=True)
class SynthCell:
    h: int
    k: int
    sigma: float
    d: int = 4
    q_count: int = 50
    split_seed: int = 0
    split_mode: str = "random"
    embed_seed: int = 0
    walk_seed: int = 0


def synth_episode(cell: SynthCell, seed: int) -> Episode:
    emb = tree_embedding(cell.h, cell.d, cell.embed_seed)
    g = make_binary_tree(cell.h)
    split = split_leaves(g, cell.split_seed, cell.split_mode)
    cfg = SyntheticConfig(d=cell.d, h=cell.h, k=cell.k, q_count=cell.q_count, sigma=cell.sigma,
                          base_novel_seed=cell.split_seed)
    return sample_synthetic_episode(emb, split, cfg, np.random.default_rng(seed))


def run_synth_task(cell: SynthCell, arms, seed: int, cell_index: int = 0, episode_index: int = 0):
    """All arms on one shared episode; returns one TaskResult per arm."""
    ep = synth_episode(cell, seed)
    omega = hardness(ep)
    out = []
    for arm in arms:
        g = _collapsed(cell.h, arm.remove_layers)
        prior = _prior(g, arm.neighborhood, cell.walk_seed)
        lam = arm.lam_for(cell.k)
        try:
            acc, loss = evaluate(ep, prior, arm, cell.k, seed)
            note = ""
        except (DivergenceError, FloatingPointError) as e:
            acc = loss = float("nan")
            note = f"diverged: {e}"
        out.append(TaskResult(
            seed=seed, shots=cell.k, h=cell.h, sigma=cell.sigma, lam=lam, learner=arm.learner,
            accuracy=acc, loss=loss, hardness=omega, arm=arm.name, cell=cell_index,
            episode=episode_index, fingerprint=fingerprint(cell, arm), note=note))
    return out


def run_synth_cell(cell: SynthCell, arms, episodes: int, master_seed: int, cell_index: int = 0,
                   workers: int = 1) -> list[TaskResult]:
    seeds = [episode_seed(master_seed, cell_index, e) for e in range(episodes)]

    def task(e):
        return run_synth_task(cell, arms, seeds[e], cell_index, e)

    if workers > 1:
        # warm caches before fanning out so threads share one embedding and prior
        synth_episode(cell, seeds[0])
        for arm in arms:
            _prior(_collapsed(cell.h, arm.remove_layers), arm.neighborhood, cell.walk_seed)
        with ThreadPoolExecutor(workers) as pool:
            chunks = list(pool.map(task, range(episodes)))
    else:
        chunks = [task(e) for e in range(episodes)]
    results = [r for chunk in chunks for r in chunk]
    results.sort(key=lambda r: (r.cell, r.episode, [a.name for a in arms].index(r.arm)))
    return results


def by_arm(results, name):
    return [r for r in results if r.arm == name]


def run_feature_cell(ds: DatasetSplit, g: LabelGraph, arms, n_way: int, k_shot: int, q_count: int,
                     episodes: int, master_seed: int, cell_index: int = 0, walk_seed: int = 0):
    results = []
    for e in range(episodes):
        seed = episode_seed(master_seed, cell_index, e)
        ep = sample_episode(ds, n_way, k_shot, q_count, np.random.default_rng(seed))
        omega = hardness(ep)
        for arm in arms:
            graph = collapsed_graph(g, arm.remove_layers) if arm.remove_layers else g
            prior = _prior(graph, arm.neighborhood, walk_seed)
            lam = arm.lam_for(k_shot)
            try:
                acc, loss = evaluate(ep, prior, arm, k_shot, seed)
                note = ""
            except (DivergenceError, FloatingPointError) as err:
                acc = loss = float("nan")
                note = f"diverged: {err}"
            results.append(TaskResult(
                seed=seed, shots=k_shot, h=0, sigma=0.0, lam=lam, learner=arm.learner,
                accuracy=acc, loss=loss, hardness=omega, arm=arm.name, cell=cell_index,
                episode=e, fingerprint=fingerprint(n_way, k_shot, q_count, arm), note=note))
    return results


__all__ = [
    "Arm", "SynthCell", "default_lambda", "episode_seed", "tree_embedding", "collapsed_graph",
    "run_synth_cell", "run_synth_task", "run_feature_cell", "by_arm", "synth_episode", "fingerprint",
]
