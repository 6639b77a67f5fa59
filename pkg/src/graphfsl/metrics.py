"""Task metrics: hardness, summaries, paired tests, correlation and PCA."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from .tasks import Episode

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-12
CSV_COLUMNS = ("seed", "shots", "h", "sigma", "lambda", "learner", "accuracy", "loss", "hardness")
# appended after the fixed columns so readers keyed on the first nine keep working
EXTRA_COLUMNS = ("arm", "cell", "episode", "fingerprint", "note")


def hardness_details(episode: Episode) -> tuple[float, bool]:
    """Mean log-odds of misclassifying a query under the support-mean softmax.

    Returns ``(hardness, clamped)``; ``clamped`` is True when some
    ``p(y|x)`` had to be clipped into ``[1e-12, 1 - 1e-12]``.
    """
    n_way = episode.n_way
    counts = np.bincount(episode.support_y, minlength=n_way)
    if np.any(counts[np.unique(episode.query_y)] == 0):
        raise ValueError("query class without support examples")
    d = episode.support_x.shape[1]
    means = np.zeros((n_way, d))
    np.add.at(means, episode.support_y, episode.support_x)
    means /= np.maximum(counts, 1)[:, None]
    diff = episode.query_x[:, None, :] - means[None, :, :]
    logits = -np.einsum("qkd,qkd->qk", diff, diff)
    logits[:, counts == 0] = -np.inf
    rows = np.arange(len(episode.query_y))
    log_p = logits[rows, episode.query_y] - logsumexp(logits, axis=1)
    # log(1-p) computed from the other classes to keep precision near p=1
    others = logits.copy()
    others[rows, episode.query_y] = -np.inf
    log_1mp = logsumexp(others, axis=1) - logsumexp(logits, axis=1)
    # clamp in log space: p >= 1e-12 and 1 - p >= 1e-12, both bounds exact
    lo = math.log(PROB_CLAMP)
    clamped = bool(np.any(log_p < lo) | np.any(log_1mp < lo))
    if clamped:
        logger.warning("hardness: clamped p(y|x) into [%g, 1-%g]", PROB_CLAMP, PROB_CLAMP)
        log_p = np.maximum(log_p, lo)
        log_1mp = np.maximum(log_1mp, lo)
    return float(np.mean(log_1mp - log_p)), clamped


def hardness(episode: Episode) -> float:
    return hardness_details(episode)[0]


@dataclass
class TaskResult:
    seed: int
    shots: int
    h: int
    sigma: float
    lam: float
    learner: str
    accuracy: float
    loss: float
    hardness: float
    arm: str = ""
    cell: int = 0
    episode: int = 0
    fingerprint: str = ""
    note: str = ""

    def __post_init__(self):
        if self.note:
            return
        if not all(math.isfinite(v) for v in (self.accuracy, self.loss, self.hardness)):
            raise ValueError("task result fields must be finite")
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError("accuracy outside [0, 1]")


@dataclass(frozen=True)
class Summary:
    mean: float
    ci: float
    n: int


def _values(results, field):
    if field is None:
        return np.asarray(list(results), dtype=float)
    return np.asarray([getattr(r, field) for r in results], dtype=float)


def summarize(results: Iterable, field: str | None = None) -> Summary:
    """Mean and normal-approximation 95% half-width ``1.96 s / sqrt(n)``.

    ``results`` is a list of :class:`TaskResult` (with ``field``) or of
    plain numbers (``field=None``).
    """
    v = _values(results, field)
    if len(v) == 0:
        raise ValueError("cannot summarize an empty list")
    if len(v) < 2:
        raise ValueError("confidence interval needs n >= 2")
    return Summary(float(v.mean()), float(1.96 * v.std(ddof=1) / math.sqrt(len(v))), len(v))


def paired_gap_test(baseline: Sequence[TaskResult], treated: Sequence[TaskResult],
                    field: str = "loss") -> tuple[float, float]:
    """Mean of ``baseline - treated`` and the one-sided paired t-test p-value
    for that gap being positive."""
    if len(baseline) != len(treated):
        raise ValueError("result lists differ in length")
    for b, t in zip(baseline, treated):
        if b.seed != t.seed:
            raise ValueError(f"episode seed mismatch: {b.seed} vs {t.seed}")
    gaps = _values(baseline, field) - _values(treated, field)
    return one_sided_t(gaps)


def one_sided_t(gaps: np.ndarray) -> tuple[float, float]:
    gaps = np.asarray(gaps, dtype=float)
    n = len(gaps)
    if n == 0:
        raise ValueError("no paired results")
    mean = float(gaps.mean())
    sd = float(gaps.std(ddof=1)) if n > 1 else 0.0
    if sd == 0.0:
        return mean, 0.5 if mean == 0 else (0.0 if mean > 0 else 1.0)
    t = mean / (sd / math.sqrt(n))
    return mean, float(stats.t.sf(t, df=n - 1))


def pearson(xs, ys) -> float:
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or len(x) < 3:
        raise ValueError("pearson needs two equal-length samples of size >= 3")
    x = x - x.mean()
    y = y - y.mean()
    sx, sy = math.sqrt(x @ x), math.sqrt(y @ y)
    if sx == 0 or sy == 0:
        raise ValueError("zero variance")
    return float(np.clip((x @ y) / (sx * sy), -1.0, 1.0))


def pearson_ci(r: float, n: int, level: float = 0.95) -> tuple[float, float]:
    """Fisher-z confidence interval for a correlation."""
    if n < 4:
        raise ValueError("need n >= 4 for a Fisher interval")
    z = math.atanh(min(max(r, -1 + 1e-15), 1 - 1e-15))
    half = stats.norm.ppf(0.5 + level / 2) / math.sqrt(n - 3)
    return math.tanh(z - half), math.tanh(z + half)


@dataclass
class PCA2D:
    projections: np.ndarray
    explained: np.ndarray
    components: np.ndarray
    mean: np.ndarray

    def transform(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=float) - self.mean) @ self.components.T


def pca_2d(points) -> PCA2D:
    """Project onto the top two principal axes of the centred covariance."""
    x = np.asarray(points, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise ValueError("pca_2d needs at least 2 points of dimension >= 2")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (len(x) - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    comps = evecs[:, order[:2]].T
    # deterministic sign: largest-magnitude coordinate positive
    for i in range(2):
        j = np.argmax(np.abs(comps[i]))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    total = evals.sum()
    explained = evals[:2] / total if total > 0 else np.zeros(2)
    proj = xc @ comps.T
    if total == 0:
        proj = np.zeros((len(x), 2))
    return PCA2D(proj, explained, comps, mean)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def results_csv(results: Sequence[TaskResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS + EXTRA_COLUMNS)
    for r in results:
        w.writerow([_fmt(v) for v in (r.seed, r.shots, r.h, r.sigma, r.lam, r.learner,
                                       r.accuracy, r.loss, r.hardness, r.arm, r.cell,
                                       r.episode, r.fingerprint, r.note)])
    return buf.getvalue()


def read_results_csv(text: str) -> list[dict]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0][:len(CSV_COLUMNS)]) != CSV_COLUMNS:
        raise ValueError("results CSV header does not match the expected columns")
    out = []
    for row in rows[1:]:
        if not row:
            continue
        rec = dict(zip(rows[0], row))
        for k in ("seed", "shots", "h", "cell", "episode"):
            if k in rec:
                rec[k] = int(rec[k])
        for k in ("sigma", "lambda", "accuracy", "loss", "hardness"):
            rec[k] = float(rec[k])
        out.append(rec)
    return out
