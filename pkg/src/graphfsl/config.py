"""Experiment configuration files.

Flat ``key = value`` lines, ``#`` comments, and any number of ``[arm]``
sections, each a block of ``key = value`` lines describing one learner arm::

    mode = synth
    episodes = 200
    seed = 0
    h = 6
    k = 1, 10
    sigma = 0.2

    [arm]
    name = baseline
    learner = cosine
    lambda = 0

    [arm]
    name = graph
    learner = cosine
    lambda = auto

List-valued keys take comma-separated values.  Every problem found is
reported together in one :class:`ConfigError`.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

from .experiment import Arm
from .graphreg import SIMILARITIES
from .learners import INIT_STRATEGIES, LEARNERS

TOP_KEYS = {
    "mode", "episodes", "seed", "out", "workers",
    # synthetic grid
    "h", "k", "sigma", "d", "q_count", "split_seed", "split_mode", "embed_seed", "walk_seed",
    # feature datasets
    "features", "manifest", "graph", "classes", "n_way", "k_shot",
}
ARM_KEYS = {"name", "learner", "lambda", "init", "neighborhood", "remove_layers", "graph_similarity"}


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass
class ExperimentConfig:
    mode: str = "synth"
    episodes: int = 200
    seed: int = 0
    out: str = "results"
    workers: int = 1
    h: tuple[int, ...] = (6,)
    k: tuple[int, ...] = (1,)
    sigma: tuple[float, ...] = (0.2,)
    d: int = 4
    q_count: int = 50
    split_seed: int = 0
    split_mode: str = "random"
    embed_seed: int = 0
    walk_seed: int = 0
    features: str | None = None
    manifest: str | None = None
    graph: str | None = None
    classes: str | None = None
    n_way: int = 5
    k_shot: tuple[int, ...] = (1,)
    arms: list[Arm] = field(default_factory=list)


def _split(text):
    return [v.strip() for v in text.split(",") if v.strip()]


class _Parser:
    def __init__(self):
        self.problems: list[str] = []

    def bad(self, where, msg):
        self.problems.append(f"{where}: {msg}")

    def number(self, where, raw, kind, lo=None):
        try:
            v = kind(raw)
        except ValueError:
            self.bad(where, f"expected {kind.__name__}, got {raw!r}")
            return None
        if lo is not None and v < lo:
            self.bad(where, f"must be >= {lo}")
            return None
        return v

    def numbers(self, where, raw, kind, lo=None):
        vals = [self.number(where, v, kind, lo) for v in _split(raw)]
        if not vals:
            self.bad(where, "empty list")
        return tuple(v for v in vals if v is not None)


def _read_sections(text):
    top, arms = [], []
    current = top
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            current = []
            arms.append((i, line, current))
            continue
        current.append((i, line))
    return top, arms


def parse_config(text: str, base_dir: str = ".") -> ExperimentConfig:
    """Parse and validate; relative paths resolve against ``base_dir``."""
    p = _Parser()
    cfg = ExperimentConfig()
    top, arm_blocks = _read_sections(text)
    seen = set()
    ints = {"episodes": 1, "workers": 1, "d": 2, "q_count": 1, "n_way": 1, "seed": 0,
            "split_seed": 0, "embed_seed": 0, "walk_seed": 0}
    for i, line in top:
        where = f"line {i}"
        key, sep, val = (s.strip() for s in line.partition("="))
        if not sep:
            p.bad(where, f"expected 'key = value', got {line!r}")
            continue
        if key not in TOP_KEYS:
            p.bad(where, f"unknown key {key!r}")
            continue
        if key in seen:
            p.bad(where, f"duplicate key {key!r}")
            continue
        seen.add(key)
        where = f"line {i} ({key})"
        if key in ints:
            v = p.number(where, val, int, ints[key])
            if v is not None:
                setattr(cfg, key, v)
        elif key in ("h", "k", "k_shot"):
            setattr(cfg, key, p.numbers(where, val, int, 2 if key == "h" else 1))
        elif key == "sigma":
            vals = p.numbers(where, val, float)
            if any(v <= 0 for v in vals):
                p.bad(where, "sigma values must be positive")
            cfg.sigma = vals
        elif key == "mode":
            if val not in ("synth", "features"):
                p.bad(where, f"mode must be synth or features, got {val!r}")
            cfg.mode = val
        elif key == "split_mode":
            if val not in ("random", "subtree"):
                p.bad(where, f"split_mode must be random or subtree, got {val!r}")
            cfg.split_mode = val
        elif key in ("features", "manifest", "graph", "classes"):
            setattr(cfg, key, os.path.join(base_dir, val))
        else:
            setattr(cfg, key, val)

    for i, header, body in arm_blocks:
        if header != "[arm]":
            p.bad(f"line {i}", f"unknown section {header!r}")
            continue
        arm = _parse_arm(p, i, body, len(cfg.arms))
        if arm is not None:
            cfg.arms.append(arm)
    names = [a.name for a in cfg.arms]
    for n in sorted({n for n in names if names.count(n) > 1}):
        p.bad("arms", f"duplicate arm name {n!r}")

    if cfg.mode == "features":
        for key in ("features", "graph"):
            if getattr(cfg, key) is None:
                p.bad("config", f"features mode needs {key!r}")
        for key in ("features", "manifest", "graph", "classes"):
            path = getattr(cfg, key)
            if path is not None and not os.path.exists(path):
                p.bad("config", f"{key} path does not exist: {path}")
        if cfg.manifest is None and cfg.features and not os.path.exists(f"{cfg.features}.split"):
            p.bad("config", f"no manifest given and {cfg.features}.split does not exist")
    if p.problems:
        raise ConfigError(p.problems)
    return cfg


def _parse_arm(p, line_no, body, index):
    vals = {}
    for i, line in body:
        key, sep, val = (s.strip() for s in line.partition("="))
        if not sep or key not in ARM_KEYS:
            p.bad(f"line {i}", f"bad arm entry {line!r}")
            continue
        vals[key] = val
    where = f"arm at line {line_no}"
    ok = True
    learner = vals.get("learner", "cosine")
    if learner not in LEARNERS:
        p.bad(where, f"unknown learner {learner!r}")
        ok = False
    lam = vals.get("lambda", "auto")
    if lam != "auto":
        lam = p.number(where, lam, float, 0.0)
        ok &= lam is not None
    init = vals.get("init", "A")
    if init not in INIT_STRATEGIES:
        p.bad(where, f"init must be one of {INIT_STRATEGIES}")
        ok = False
    hood = vals.get("neighborhood", "walk")
    if hood not in ("walk", "child-parent"):
        p.bad(where, f"neighborhood must be walk or child-parent, got {hood!r}")
        ok = False
    layers = p.number(where, vals.get("remove_layers", "0"), int, 0)
    ok &= layers is not None
    gsim = vals.get("graph_similarity") or None
    if gsim is not None and gsim not in SIMILARITIES:
        p.bad(where, f"unknown similarity {gsim!r}")
        ok = False
    if not ok:
        return None
    return Arm(name=vals.get("name", f"arm{index}"), learner=learner, lam=lam, init=init,
               neighborhood=hood, remove_layers=layers, graph_similarity=gsim)
