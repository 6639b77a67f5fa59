"""Command-line front end.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from collections import defaultdict

import numpy as np

from . import experiment as ex
from .config import ConfigError, ExperimentConfig, parse_config
from .graphreg import DivergenceError, ParamTable, save
from .labelgraph import GraphError, read_edge_list
from .learners import LEARNERS, JointConfig
from .metrics import (
    TaskResult,
    one_sided_t,
    read_results_csv,
    results_csv,
    summarize,
)
from .plots import PLOT_KINDS, pca_task_svg, plot_results
from .tasks import DatasetError, load_episode, load_feature_dataset, make_binary_tree, save_episode

log = logging.getLogger("graphfsl")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
SUMMARY_COLUMNS = ("cell", "h", "shots", "sigma", "arm", "learner", "lambda", "n", "diverged",
                   "accuracy_mean", "accuracy_ci", "loss_mean", "loss_ci", "hardness_mean",
                   "loss_gap", "gap_p")


class InputError(Exception):
    pass


# ---------------------------------------------------------------------------
# running


def ablation_arms(learner: str, study: str = "all") -> list[ex.Arm]:
    """Neighborhood, layer-removal and initialization studies for one learner.

    Init A and B fine-tune without the graph term; init C is the full
    graph-regularized method started from the graph-loss initialization.
    """
    studies = {
        "neighborhood": [ex.Arm("walk", learner), ex.Arm("child-parent", learner, neighborhood="child-parent")],
        "layers": [ex.Arm(f"layers-{n}", learner, remove_layers=n) for n in (0, 5, 10)],
        "init": [ex.Arm("init-A", learner, lam=0.0, init="A"), ex.Arm("init-B", learner, lam=0.0, init="B"),
                 ex.Arm("init-C", learner, init="C")],
    }
    if study != "all" and study not in studies:
        raise ConfigError([f"unknown ablation study {study!r}"])
    arms = [ex.Arm("baseline", learner, lam=0.0)]
    for name in studies if study == "all" else [study]:
        arms += studies[name]
    return arms


def synth_cells(cfg: ExperimentConfig) -> list[ex.SynthCell]:
    return [ex.SynthCell(h=h, k=k, sigma=s, d=cfg.d, q_count=cfg.q_count, split_seed=cfg.split_seed,
                         split_mode=cfg.split_mode, embed_seed=cfg.embed_seed, walk_seed=cfg.walk_seed)
            for h in cfg.h for k in cfg.k for s in cfg.sigma]


def _load_features(cfg):
    try:
        ds = load_feature_dataset(cfg.features, cfg.manifest)
        g = read_edge_list(cfg.graph, cfg.classes)
    except (DatasetError, GraphError, OSError) as e:
        raise InputError(str(e)) from None
    missing = [c for c in ds.base + ds.novel if c not in g.names]
    if missing:
        raise InputError(f"classes missing from the label graph: {', '.join(missing)}")
    return ds, g


def run(cfg: ExperimentConfig, arms=None) -> list[TaskResult]:
    arms = arms or cfg.arms
    if not arms:
        raise ConfigError(["no [arm] sections given"])
    results = []
    if cfg.mode == "synth":
        for i, cell in enumerate(synth_cells(cfg)):
            log.info("cell %d: h=%d k=%d sigma=%g", i, cell.h, cell.k, cell.sigma)
            results += ex.run_synth_cell(cell, arms, cfg.episodes, cfg.seed, i, cfg.workers)
    else:
        ds, g = _load_features(cfg)
        for i, k in enumerate(cfg.k_shot):
            try:
                results += ex.run_feature_cell(ds, g, arms, cfg.n_way, k, cfg.q_count, cfg.episodes,
                                               cfg.seed, i, cfg.walk_seed)
            except DatasetError as e:
                raise InputError(str(e)) from None
    for r in results:
        if r.note:
            log.warning("cell %d episode %d arm %s: %s", r.cell, r.episode, r.arm, r.note)
    return results


def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)


def summary_csv(results, arms) -> str:
    """Per (cell, arm) means with CIs; gaps are paired against the first
    lambda=0 arm that uses the same learner."""
    cells = defaultdict(lambda: defaultdict(list))
    for r in results:
        cells[r.cell][r.arm].append(r)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for cell in sorted(cells):
        per_arm = cells[cell]
        for arm in arms:
            rs = per_arm.get(arm.name, [])
            if not rs:
                continue
            ok = [r for r in rs if not r.note]
            row = [cell, rs[0].h, rs[0].shots, rs[0].sigma, arm.name, arm.learner, rs[0].lam, len(ok),
                   len(rs) - len(ok)]
            for field in ("accuracy", "loss"):
                if len(ok) >= 2:
                    s = summarize(ok, field)
                    row += [s.mean, s.ci]
                elif ok:
                    row += [getattr(ok[0], field), ""]
                else:
                    row += ["", ""]
            row.append(float(np.mean([r.hardness for r in rs])))
            base = next((a for a in arms if a.learner == arm.learner and a.lam_for(rs[0].shots) == 0), None)
            if base is not None and base.name != arm.name and arm.lam_for(rs[0].shots) > 0:
                pairs = [(b, t) for b, t in zip(per_arm[base.name], rs) if not (b.note or t.note)]
                if pairs:
                    gap, p = one_sided_t(np.array([b.loss - t.loss for b, t in pairs]))
                    row += [gap, p]
                else:
                    row += ["", ""]
            else:
                row += ["", ""]
            w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _write(path, text):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _emit(cfg, results, arms) -> int:
    _write(os.path.join(cfg.out, "results.csv"), results_csv(results))
    _write(os.path.join(cfg.out, "summary.csv"), summary_csv(results, arms))
    diverged = sum(1 for r in results if r.note)
    print(f"wrote {len(results)} rows to {os.path.join(cfg.out, 'results.csv')}")
    if diverged:
        print(f"{diverged} fits diverged; see the note column", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------------------
# subcommands


def _load_config(args, mode=None) -> ExperimentConfig:
    if not args.config:
        raise ConfigError(["--config is required"])
    try:
        with open(args.config, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError([f"cannot read config: {e}"]) from None
    cfg = parse_config(text, os.path.dirname(os.path.abspath(args.config)))
    if mode and cfg.mode != mode:
        raise ConfigError([f"this command needs mode = {mode}, config has mode = {cfg.mode}"])
    if args.seed is not None:
        cfg.seed = args.seed
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError(["--workers must be >= 1"])
        cfg.workers = args.workers
    if args.out is not None:
        cfg.out = args.out
    return cfg


def cmd_run(args, mode):
    cfg = _load_config(args, mode)
    results = run(cfg)
    return _emit(cfg, results, cfg.arms)


def cmd_ablate(args):
    cfg = _load_config(args)
    learner = cfg.arms[0].learner if cfg.arms else "cosine"
    arms = ablation_arms(learner, args.study)
    results = run(cfg, arms)
    return _emit(cfg, results, arms)


def _task_for_plot(cfg: ExperimentConfig, index: int):
    if cfg.mode == "synth":
        cell = synth_cells(cfg)[0]
        seed = ex.episode_seed(cfg.seed, 0, index)
        return ex.synth_episode(cell, seed), make_binary_tree(cell.h), cell.walk_seed, cell.k, seed
    from .tasks import sample_episode
    ds, g = _load_features(cfg)
    seed = ex.episode_seed(cfg.seed, 0, index)
    k = cfg.k_shot[0]
    return sample_episode(ds, cfg.n_way, k, cfg.q_count, np.random.default_rng(seed)), g, cfg.walk_seed, k, seed


def cmd_plot(args):
    if args.kind not in PLOT_KINDS:
        raise ConfigError([f"unknown plot kind {args.kind!r}; choose from {', '.join(PLOT_KINDS)}"])
    out = args.out or f"{args.kind}.svg"
    if args.kind != "pca-task":
        if not args.input:
            raise ConfigError(["--input results CSV is required"])
        try:
            with open(args.input, encoding="utf-8") as fh:
                rows = read_results_csv(fh.read())
        except (OSError, ValueError) as e:
            raise InputError(f"cannot read results: {e}") from None
        if not rows:
            raise InputError("results CSV has no data rows")
        try:
            svg = plot_results(rows, args.kind)
        except ValueError as e:
            raise InputError(str(e)) from None
        _write(out, svg)
        print(f"wrote {out}")
        return EXIT_OK
    cfg = _load_config(args)
    ep, g, walk_seed, shots, seed = _task_for_plot(cfg, args.episode)
    if args.input:
        try:
            ep = load_episode(args.input)
        except (OSError, KeyError, ValueError) as e:
            raise InputError(f"cannot read episode: {e}") from None
    else:
        save_episode(ep, os.path.splitext(out)[0] + ".npz")
    arms = [a for a in cfg.arms if args.arm in (None, a.name)]
    if not arms:
        raise ConfigError([f"no arm named {args.arm!r}"] if args.arm else ["no [arm] sections given"])
    arm = arms[0]
    prior = ex._prior(ex.collapsed_graph(g, arm.remove_layers), arm.neighborhood, walk_seed)
    lam = arm.lam_for(shots)
    jc = JointConfig(lam=lam, init=arm.init, graph_similarity=arm.graph_similarity, seed=seed)
    clf = LEARNERS[arm.learner](ep, prior, jc, regularize=lam > 0)
    _write(out, pca_task_svg(ep, clf))
    print(f"wrote {out}")
    return EXIT_OK


def cmd_embed(args):
    from .graphreg import embed_graph
    if args.graph:
        try:
            g = read_edge_list(args.graph)
        except (GraphError, OSError) as e:
            raise InputError(str(e)) from None
    else:
        if args.h < 1:
            raise ConfigError(["--h must be >= 1"])
        g = make_binary_tree(args.h)
    if args.d < 1:
        raise ConfigError(["--d must be >= 1"])
    seed = args.seed or 0
    table = embed_graph(g, args.d, ex.EMBED_REG.walk, ex.EMBED_REG, ex.EMBED_SGD, np.random.default_rng(seed))
    if args.unit:
        table = ParamTable(table.values / np.linalg.norm(table.values, axis=1, keepdims=True), table.names)
    out = args.out or ("embedding.txt" if args.text else "embedding.ptab")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    save(table, out, binary=not args.text)
    print(f"wrote {g.n_nodes} x {args.d} embedding to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graphfsl", description="Graph-regularized few-shot experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="experiment config file")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--workers", type=int, help="episodes fitted concurrently")
        p.add_argument("--out", help="output directory or file")
        return p

    common(sub.add_parser("synth-run", help="run a synthetic-tree grid"))
    common(sub.add_parser("feat-run", help="run on a precomputed feature dataset"))
    p = common(sub.add_parser("ablate", help="neighborhood, layer-removal and init studies"))
    p.add_argument("--study", default="all", help="all, neighborhood, layers or init")
    p = common(sub.add_parser("plot", help="render an SVG figure"))
    p.add_argument("--kind", required=True, help=", ".join(PLOT_KINDS))
    p.add_argument("--input", help="results CSV, or a saved episode (.npz) for pca-task")
    p.add_argument("--arm", help="arm to fit for pca-task (default: first)")
    p.add_argument("--episode", type=int, default=0, help="episode index for pca-task")
    p = common(sub.add_parser("embed", help="node2vec embedding of a tree or edge list"), config=False)
    p.add_argument("--h", type=int, default=4, help="height of the binary tree")
    p.add_argument("--d", type=int, default=4)
    p.add_argument("--graph", help="edge list to embed instead of a tree")
    p.add_argument("--unit", action="store_true", help="scale rows to unit norm")
    p.add_argument("--text", action="store_true", help="write the text table format")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command in ("synth-run", "feat-run"):
            return cmd_run(args, "synth" if args.command == "synth-run" else "features")
        if args.command == "ablate":
            return cmd_ablate(args)
        if args.command == "plot":
            return cmd_plot(args)
        return cmd_embed(args)
    except ConfigError as e:
        for problem in e.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except InputError as e:
        print(f"input error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
