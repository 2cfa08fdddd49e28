"""Groundtruth conversion and evaluation: change-point segmentation,
knapsack keyshot packing, precision/recall/F-score, rank correlations, and
per-object dominance scores.

The keyshot protocol: segment the video into disjoint intervals, average
the per-frame scores inside each interval, then pack intervals under a
duration budget (15% of the original length by convention).  Predictions
and groundtruth are converted with the same segmentation so summaries are
compared shot-for-shot.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from videograph.errors import ConfigError

DEFAULT_BUDGET_RATIO = 0.15
DEFAULT_MIN_SEG_LEN = 2


@dataclass
class SegmentSet:
    """A partition of [0, T) into contiguous segments with mean scores."""

    boundaries: list[int]        # interior cut points, sorted
    length: int                  # total frame count T
    mean_scores: np.ndarray | None = None

    def intervals(self):
        edges = [0] + list(self.boundaries) + [self.length]
        return [(edges[i], edges[i + 1]) for i in range(len(edges) - 1)]

    def segment_lengths(self):
        return [b - a for a, b in self.intervals()]


@dataclass
class KeyshotSummary:
    """Binary per-frame summary vector over the original frame grid."""

    vector: np.ndarray           # uint8, length T_original
    selected_segments: list[int]
    budget_ratio: float = DEFAULT_BUDGET_RATIO


@dataclass
class EvalReport:
    precision: float
    recall: float
    f_score: float
    kendall_tau: float = 0.0
    spearman_rho: float = 0.0
    per_user: list = field(default_factory=list)
    aggregation: str = "mean"
    degenerate_rank: bool = False

    def as_dict(self):
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f_score": self.f_score,
            "kendall_tau": self.kendall_tau,
            "spearman_rho": self.spearman_rho,
            "aggregation": self.aggregation,
        }


# ---------------------------------------------------------------------------
# change-point segmentation


def _prefix_scatter(x: np.ndarray):
    """O(1) within-segment scatter lookups from prefix sums.

    scatter(i, j) = sum_{t in [i, j)} ||x_t - mean||^2
                  = sum ||x_t||^2 - ||sum x_t||^2 / (j - i)
    """
    s1 = np.concatenate([np.zeros((1, x.shape[1])), np.cumsum(x, axis=0)])
    s2 = np.concatenate([[0.0], np.cumsum((x * x).sum(axis=1))])

    def scatter(i: int, j: int) -> float:
        n = j - i
        diff = s1[j] - s1[i]
        return float(s2[j] - s2[i] - diff @ diff / n)

    return scatter


def kts_segment(
    signal: np.ndarray,
    max_segments: int,
    penalty: float,
    min_seg_len: int = DEFAULT_MIN_SEG_LEN,
) -> SegmentSet:
    """Exact DP change-point detection on a (T, d) signal.

    Minimizes total within-segment scatter plus ``penalty`` per segment,
    over all partitions into at most ``max_segments`` segments of at least
    ``min_seg_len`` frames.  The optimal segment count is chosen by the
    penalized objective; ties prefer fewer segments.
    """
    if max_segments < 1:
        raise ConfigError(f"max_segments must be >= 1, got {max_segments}")
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    t = x.shape[0]
    if t < 1:
        raise ConfigError("kts_segment needs at least one frame")
    lmin = max(1, min(min_seg_len, t))
    m_max = min(max_segments, t // lmin)
    scatter = _prefix_scatter(x)

    # cost[m][j]: best scatter for the first j frames split into m segments
    inf = float("inf")
    cost = np.full((m_max + 1, t + 1), inf)
    back = np.zeros((m_max + 1, t + 1), dtype=int)
    for j in range(lmin, t + 1):
        cost[1][j] = scatter(0, j)
    for m in range(2, m_max + 1):
        for j in range(m * lmin, t + 1):
            best, arg = inf, 0
            for s in range((m - 1) * lmin, j - lmin + 1):
                c = cost[m - 1][s] + scatter(s, j)
                if c < best:
                    best, arg = c, s
            cost[m][j] = best
            back[m][j] = arg

    best_m, best_obj = 1, cost[1][t] + penalty
    for m in range(2, m_max + 1):
        obj = cost[m][t] + penalty * m
        if obj < best_obj:
            best_m, best_obj = m, obj

    cuts = []
    j = t
    for m in range(best_m, 1, -1):
        j = int(back[m][j])
        cuts.append(j)
    cuts.reverse()
    return SegmentSet(boundaries=cuts, length=t)


def segment_mean_scores(segments: SegmentSet, scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    return np.array([scores[a:b].mean() for a, b in segments.intervals()])


def default_penalty(signal: np.ndarray) -> float:
    """Noise-scaled per-segment penalty: 2 * sigma^2 * log T, with sigma^2
    estimated robustly from first differences (change points are outliers
    in the difference sequence, so the median ignores them)."""
    x = np.asarray(signal, dtype=np.float64)
    t = x.shape[0]
    if t < 2:
        return 1.0
    diffs = np.sum(np.diff(x, axis=0) ** 2, axis=1)
    sigma2 = float(np.median(diffs)) / 2.0
    return max(2.0 * sigma2 * np.log(max(t, 2)), 1e-12)


# ---------------------------------------------------------------------------
# knapsack keyshot selection


def knapsack_select(segments: SegmentSet, scores: np.ndarray, budget_frames: int) -> list[int]:
    """0/1 knapsack over segments: maximize mean-score x length under budget.

    Ties prefer lower segment indices (greedy include-on-tie during
    reconstruction from a suffix table).
    """
    if budget_frames < 0:
        raise ConfigError(f"budget_frames must be >= 0, got {budget_frames}")
    lengths = segments.segment_lengths()
    means = segment_mean_scores(segments, scores)
    values = [m * l for m, l in zip(means, lengths)]
    n = len(lengths)
    cap = int(budget_frames)

    # suffix[i][c]: best value using segments i.. with capacity c
    suffix = np.zeros((n + 1, cap + 1))
    for i in range(n - 1, -1, -1):
        w, v = lengths[i], values[i]
        row = suffix[i + 1].copy()
        if w <= cap:
            take = np.full(cap + 1, -np.inf)
            take[w:] = suffix[i + 1][: cap + 1 - w] + v
            row = np.maximum(row, take)
        suffix[i] = row

    chosen = []
    c = cap
    for i in range(n):
        w, v = lengths[i], values[i]
        if w <= c and v + suffix[i + 1][c - w] >= suffix[i + 1][c]:
            chosen.append(i)
            c -= w
    return chosen


def scores_to_keyshots(
    frame_scores: np.ndarray,
    features: np.ndarray | None = None,
    budget_ratio: float = DEFAULT_BUDGET_RATIO,
    picks: np.ndarray | None = None,
    n_frames_original: int | None = None,
    max_segments: int | None = None,
    penalty: float | None = None,
    min_seg_len: int = DEFAULT_MIN_SEG_LEN,
) -> KeyshotSummary:
    """Convert per-frame scores into a keyshot summary.

    Scores (and the segmentation signal) live on the sampled frame grid;
    ``picks`` maps sampled frames back to original indices, expanding each
    score as a step function.  Segmentation runs on ``features`` when given
    and on the scores themselves otherwise.  Used identically for model
    predictions and for building groundtruth summaries from user scores.
    """
    scores = np.asarray(frame_scores, dtype=np.float64).reshape(-1)
    if not np.isfinite(scores).all():
        raise ConfigError("frame scores must be finite")
    # canonical [0, 1] calibration: keyshot selection depends only on the
    # ordering of scores, never on their affine scale
    lo, hi = scores.min(), scores.max()
    scores = (scores - lo) / (hi - lo) if hi > lo else np.full_like(scores, 0.5)
    t = scores.shape[0]
    if picks is not None:
        n_orig = int(n_frames_original if n_frames_original is not None else np.max(picks) + 1)
        scores = _expand_by_picks(scores, np.asarray(picks), n_orig)
        if features is not None:
            features = _expand_by_picks(np.asarray(features, dtype=np.float64), np.asarray(picks), n_orig)
    n_orig = scores.shape[0]
    signal = features if features is not None else scores[:, None]
    signal = np.asarray(signal, dtype=np.float64)
    if signal.shape[0] != n_orig:
        raise ConfigError(f"segmentation signal has {signal.shape[0]} frames, scores {n_orig}")
    if max_segments is None:
        max_segments = max(1, n_orig // (2 * min_seg_len))
    if penalty is None:
        penalty = default_penalty(signal if signal.ndim == 2 else signal[:, None])
    segments = kts_segment(signal, max_segments, penalty, min_seg_len)
    segments.mean_scores = segment_mean_scores(segments, scores)
    budget = int(math.floor(budget_ratio * n_orig))
    chosen = knapsack_select(segments, scores, budget)
    vector = np.zeros(n_orig, dtype=np.uint8)
    for idx in chosen:
        a, b = segments.intervals()[idx]
        vector[a:b] = 1
    return KeyshotSummary(vector=vector, selected_segments=chosen, budget_ratio=budget_ratio)


def _expand_by_picks(values: np.ndarray, picks: np.ndarray, n_frames: int) -> np.ndarray:
    """Step-function expansion of sampled-frame values onto the full grid."""
    out_shape = (n_frames,) + values.shape[1:]
    out = np.zeros(out_shape, dtype=np.float64)
    edges = list(picks) + [n_frames]
    for i in range(len(picks)):
        out[edges[i]:edges[i + 1]] = values[i]
    out[: edges[0]] = values[0]
    return out


# ---------------------------------------------------------------------------
# precision / recall / F-score


def prf(pred: KeyshotSummary, gts: list[KeyshotSummary], aggregation: str = "mean") -> EvalReport:
    """Overlap-based precision, recall, F against per-user summaries.

    ``max`` keeps the best-matching user; ``mean`` averages across users.
    """
    if aggregation not in ("max", "mean"):
        raise ConfigError(f"aggregation {aggregation!r} must be max or mean")
    if not gts:
        raise ConfigError("prf needs at least one groundtruth summary")
    p = np.asarray(pred.vector) > 0
    rows = []
    for gt in gts:
        g = np.asarray(gt.vector) > 0
        if g.shape != p.shape:
            raise ConfigError(f"frame counts differ: {p.shape} vs {g.shape}")
        overlap = float(np.logical_and(p, g).sum())
        prec = overlap / p.sum() if p.sum() else 0.0
        rec = overlap / g.sum() if g.sum() else 0.0
        f = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
        rows.append((prec, rec, f))
    if aggregation == "max":
        best = max(range(len(rows)), key=lambda i: rows[i][2])
        prec, rec, f = rows[best]
    else:
        prec = float(np.mean([r[0] for r in rows]))
        rec = float(np.mean([r[1] for r in rows]))
        f = float(np.mean([r[2] for r in rows]))
    return EvalReport(precision=prec, recall=rec, f_score=f, per_user=rows, aggregation=aggregation)


# ---------------------------------------------------------------------------
# rank correlations


def kendall_tau(a, b) -> float:
    """Tie-corrected Kendall tau (the tau-b variant); 0 when undefined."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.shape[0] < 2:
        raise ConfigError(f"rank correlation needs two equal vectors of length >= 2")
    if np.all(a == a[0]) or np.all(b == b[0]):
        warnings.warn("constant ranking; correlation undefined, returning 0")
        return 0.0
    value = stats.kendalltau(a, b, variant="b").statistic
    return float(value) if np.isfinite(value) else 0.0


def spearman_rho(a, b) -> float:
    """Spearman rho via average ranks; 0 when undefined."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.shape[0] < 2:
        raise ConfigError(f"rank correlation needs two equal vectors of length >= 2")
    if np.all(a == a[0]) or np.all(b == b[0]):
        warnings.warn("constant ranking; correlation undefined, returning 0")
        return 0.0
    value = stats.spearmanr(a, b).statistic
    return float(value) if np.isfinite(value) else 0.0


def rank_correlations(pred_scores, user_scores) -> tuple[float, float, bool]:
    """Average tau/rho of predictions against every annotation vector."""
    pred = np.asarray(pred_scores, dtype=np.float64)
    taus, rhos = [], []
    degenerate = False
    for row in np.atleast_2d(np.asarray(user_scores, dtype=np.float64)):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            taus.append(kendall_tau(pred, row))
            rhos.append(spearman_rho(pred, row))
            degenerate = degenerate or bool(caught)
    return float(np.mean(taus)), float(np.mean(rhos)), degenerate


# ---------------------------------------------------------------------------
# dominance


def dominance(spatial_final: np.ndarray) -> tuple[np.ndarray, bool]:
    """Min-max-normalized off-diagonal edge-weight sums per object.

    ``spatial_final`` is the stack of final operational spatial adjacencies
    (T, N, N).  A frame whose objects all share the same edge sum gets 0.5
    everywhere and raises the degenerate flag.
    """
    s = np.asarray(spatial_final, dtype=np.float64)
    if s.ndim == 2:
        s = s[None]
    t, n, _ = s.shape
    sums = s.sum(axis=2) - s[:, np.arange(n), np.arange(n)]
    lo = sums.min(axis=1, keepdims=True)
    hi = sums.max(axis=1, keepdims=True)
    flat = (hi - lo).reshape(-1) == 0
    degenerate = bool(flat.any())
    if degenerate:
        warnings.warn("frame with uniform edge sums; dominance set to 0.5")
    span = np.where(hi - lo == 0, 1.0, hi - lo)
    out = (sums - lo) / span
    out[flat] = 0.5
    return out, degenerate
