"""Rank, concentration and detection statistics, plus bootstrap machinery.

Everything here is implemented directly (average-rank Spearman with a
t-approximation, one-sided Wilcoxon signed-rank with exact enumeration for
small n, Benjamini-Hochberg step-up, trapezoidal PR-AUC with tie grouping,
percentile bootstrap in i.i.d. and spatial-block flavours) so the exact
conventions are pinned; SciPy supplies only distribution tail functions.
All randomized procedures reproduce bit-identically from their seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import t as _student_t

from .grid import StationGrid


@dataclass(frozen=True)
class RankCorrelation:
    rho: float
    n: int
    p_value: float
    undefined: bool = False


@dataclass(frozen=True)
class BootstrapCI:
    point: float
    lower: float
    upper: float
    level: float
    resamples: int
    scheme: str

    def __post_init__(self):
        if self.resamples < 1000:
            raise ValueError("bootstrap CIs need at least 1000 resamples")
        if not 0 < self.level < 1:
            raise ValueError("level must be in (0, 1)")

    @property
    def width(self) -> float:
        return self.upper - self.lower


def average_ranks(x: np.ndarray) -> np.ndarray:
    """Ranks 1..n with tied values assigned the mean of their rank range."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size)
    sx = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def average_ranks_matrix(x: np.ndarray) -> np.ndarray:
    """Row-wise tie-averaged ranks of a (rows, n) matrix (vectorized)."""
    order = np.argsort(x, axis=1, kind="stable")
    sx = np.take_along_axis(x, order, axis=1)
    rows, n = x.shape
    col = np.arange(n)
    new_group = np.ones((rows, n), dtype=bool)
    new_group[:, 1:] = sx[:, 1:] != sx[:, :-1]
    start = np.maximum.accumulate(np.where(new_group, col, 0), axis=1)
    is_end = np.ones((rows, n), dtype=bool)
    is_end[:, :-1] = new_group[:, 1:]
    end = np.minimum.accumulate(np.where(is_end, col, n)[:, ::-1], axis=1)[:, ::-1]
    avg_sorted = 0.5 * (start + end) + 1.0
    ranks = np.empty_like(avg_sorted)
    np.put_along_axis(ranks, order, avg_sorted, axis=1)
    return ranks


class PairedSpearmanStat:
    """Spearman rho of the two columns of an (n, 2) sample; nan if undefined.

    Usable as a bootstrap statistic; `batched` evaluates many index resamples
    at once, which the bootstrap helpers exploit when present.
    """

    def __call__(self, rows: np.ndarray) -> float:
        rc = spearman(rows[:, 0], rows[:, 1])
        return rc.rho if not rc.undefined else math.nan

    def batched(self, arr: np.ndarray, idx: np.ndarray) -> np.ndarray:
        ra = average_ranks_matrix(arr[idx, 0])
        rb = average_ranks_matrix(arr[idx, 1])
        ra -= ra.mean(axis=1, keepdims=True)
        rb -= rb.mean(axis=1, keepdims=True)
        den = np.sqrt((ra * ra).sum(axis=1) * (rb * rb).sum(axis=1))
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(den > 0, np.clip((ra * rb).sum(axis=1) / den, -1, 1), np.nan)


def spearman(a, b) -> RankCorrelation:
    """Spearman rho: Pearson correlation of average ranks, t-approximated p.

    Constant inputs leave the correlation undefined; the result is flagged
    rather than coerced to zero so aggregates cannot be silently polluted.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("inputs must be equal-length vectors")
    n = a.size
    if n < 3:
        raise ValueError("need at least 3 observations")
    if np.all(a == a[0]) or np.all(b == b[0]):
        return RankCorrelation(rho=math.nan, n=n, p_value=math.nan, undefined=True)
    ra = average_ranks(a)
    rb = average_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = math.sqrt(float(ra @ ra) * float(rb @ rb))
    rho = float(np.clip((ra @ rb) / denom, -1.0, 1.0))
    if abs(rho) == 1.0:
        p = 0.0
    else:
        tstat = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
        p = float(2.0 * _student_t.sf(abs(tstat), df=n - 2))
    return RankCorrelation(rho=rho, n=n, p_value=p, undefined=False)


def topk_indices(scores, k: int) -> np.ndarray:
    """Indices of the k largest scores, ties broken toward the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    if not 1 <= k <= scores.size:
        raise ValueError(f"k must be in [1, {scores.size}], got {k}")
    order = np.lexsort((np.arange(scores.size), -scores))
    return order[:k]


def topk_overlap(a, b, k: int) -> float:
    """|top-k(a) & top-k(b)| / k with the deterministic lower-index tie-break."""
    sa = set(topk_indices(a, k).tolist())
    sb = set(topk_indices(b, k).tolist())
    return len(sa & sb) / k


def wilcoxon_signed_rank(samples, exact_threshold: int = 12) -> float:
    """One-sided signed-rank p-value for a positive shift.

    Zeros are removed; below `exact_threshold` nonzero samples the null
    distribution of the positive-rank sum is enumerated over all 2^n sign
    assignments (exact even with ties); above it a normal approximation with
    the usual tie correction is used.
    """
    d = np.asarray(samples, dtype=np.float64)
    d = d[d != 0.0]
    n = d.size
    if n < 6:
        raise ValueError(f"need at least 6 nonzero samples, got {n}")
    ranks = average_ranks(np.abs(d))
    t_plus = float(ranks[d > 0].sum())
    if n <= exact_threshold:
        bits = (np.arange(1 << n)[:, None] >> np.arange(n)[None, :]) & 1
        sums = bits @ ranks
        return float(np.count_nonzero(sums >= t_plus - 1e-12) / (1 << n))
    mu = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    _, counts = np.unique(np.abs(d), return_counts=True)
    var -= float(((counts ** 3 - counts) / 48.0).sum())
    z = (t_plus - mu) / math.sqrt(var)
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def bh_fdr(p_values, q: float = 0.05) -> np.ndarray:
    """Benjamini-Hochberg step-up rejection mask at FDR level q."""
    p = np.asarray(p_values, dtype=np.float64)
    if p.size == 0:
        return np.zeros(0, dtype=bool)
    if np.any((p < 0) | (p > 1) | ~np.isfinite(p)):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    thresholds = (np.arange(1, m + 1) / m) * q
    passed = np.flatnonzero(p[order] <= thresholds)
    mask = np.zeros(m, dtype=bool)
    if passed.size:
        mask[order[:passed[-1] + 1]] = True
    return mask


def gini(values) -> float:
    """Gini coefficient of a nonnegative vector (0 = uniform, (n-1)/n = one-hot)."""
    v = np.asarray(values, dtype=np.float64)
    if np.any(v < 0):
        raise ValueError("gini needs nonnegative values")
    total = v.sum()
    if total <= 0:
        raise ValueError("gini needs a positive total")
    n = v.size
    sv = np.sort(v)
    # sort-based identity for the mean-absolute-difference formula
    return float(2.0 * (np.arange(1, n + 1) @ sv) / (n * total) - (n + 1) / n)


def pr_auc(scores, labels) -> float:
    """Area under the precision-recall curve, trapezoid over recall.

    Tied scores are collapsed into one operating point; the curve is anchored
    at (recall 0, first precision).  A step-interpolated variant (average
    precision) would weight each recall increment by its own precision; the
    trapezoid here averages adjacent precisions instead.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    pos = int(np.count_nonzero(y))
    if pos == 0 or pos == y.size:
        raise ValueError("need at least one positive and one negative label")
    order = np.argsort(-s, kind="stable")
    ss = s[order]
    yy = (y[order] != 0).astype(np.float64)
    boundary = np.flatnonzero(np.r_[ss[1:] != ss[:-1], True])
    tp = np.cumsum(yy)[boundary]
    pp = boundary + 1.0
    precision = tp / pp
    recall = tp / pos
    r_prev, p_prev = 0.0, precision[0]
    area = 0.0
    for r, p in zip(recall, precision):
        area += (r - r_prev) * 0.5 * (p + p_prev)
        r_prev, p_prev = r, p
    return float(area)


def topk_hit_rate(scores_per_scenario, attacker_sets, k: int) -> float:
    """Fraction of scenarios with at least one attacker among the top-k scores."""
    if len(scores_per_scenario) != len(attacker_sets):
        raise ValueError("scenario lists must align")
    if len(scores_per_scenario) == 0:
        raise ValueError("no scenarios")
    hits = 0
    for scores, attackers in zip(scores_per_scenario, attacker_sets):
        top = set(topk_indices(scores, k).tolist())
        if top & set(int(a) for a in attackers):
            hits += 1
    return hits / len(scores_per_scenario)


def _percentile_ci(stats: np.ndarray, point: float, level: float, resamples: int,
                   scheme: str) -> BootstrapCI:
    good = stats[np.isfinite(stats)]
    if good.size < stats.size // 2 or good.size == 0:
        raise ValueError("statistic was undefined on most resamples")
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(good, [100 * alpha, 100 * (1 - alpha)])
    return BootstrapCI(point=float(point), lower=float(lo), upper=float(hi),
                       level=level, resamples=resamples, scheme=scheme)


def bootstrap_iid(values, statistic, n_resamples: int = 10000, level: float = 0.95,
                  seed: int = 0) -> BootstrapCI:
    """Percentile CI by resampling rows of `values` with replacement."""
    arr = np.asarray(values, dtype=np.float64)
    n = arr.shape[0]
    if n < 3:
        raise ValueError("need at least 3 samples to bootstrap")
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), n_resamples)))
    idx = rng.integers(0, n, size=(n_resamples, n))
    batched = getattr(statistic, "batched", None)
    if batched is not None:
        stats = np.asarray(batched(arr, idx))
    else:
        stats = np.array([statistic(arr[row]) for row in idx])
    return _percentile_ci(stats, statistic(arr), level, n_resamples, "iid")


def station_blocks(stations: StationGrid, block: int = 2) -> list[np.ndarray]:
    """Partition a strided station lattice into block x block neighbourhoods."""
    if block < 1:
        raise ValueError("block must be >= 1")
    rows = np.unique(stations.lat_idx)
    cols = np.unique(stations.lon_idx)
    row_rank = {int(r): i for i, r in enumerate(rows)}
    col_rank = {int(c): i for i, c in enumerate(cols)}
    n_cb = math.ceil(cols.size / block)
    keys = np.array([
        (row_rank[int(stations.lat_idx[g])] // block) * n_cb
        + col_rank[int(stations.lon_idx[g])] // block
        for g in range(stations.n_stations)
    ])
    return [np.flatnonzero(keys == key) for key in np.unique(keys)]


def bootstrap_block_spatial(values, blocks: list[np.ndarray], statistic,
                            n_resamples: int = 10000, level: float = 0.95,
                            seed: int = 0) -> BootstrapCI:
    """Percentile CI resampling whole spatial blocks; members move together.

    With singleton blocks in index order this draws the exact same index
    paths as `bootstrap_iid` for the same seed.
    """
    arr = np.asarray(values, dtype=np.float64)
    n_blocks = len(blocks)
    if n_blocks == 0 or any(len(b) == 0 for b in blocks):
        raise ValueError("blocks must be nonempty")
    covered = np.concatenate(blocks)
    if np.unique(covered).size != arr.shape[0] or covered.size != arr.shape[0]:
        raise ValueError("blocks must partition the station set")
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), n_resamples)))
    draws = rng.integers(0, n_blocks, size=(n_resamples, n_blocks))
    batched = getattr(statistic, "batched", None)
    stats = np.empty(n_resamples)
    if batched is not None:
        # bucket resamples by total length so each bucket vectorizes
        sizes = np.array([len(b) for b in blocks])
        lengths = sizes[draws].sum(axis=1)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        flat = np.concatenate(blocks)
        for length in np.unique(lengths):
            sel = np.flatnonzero(lengths == length)
            idx = np.empty((sel.size, length), dtype=np.intp)
            for row, i in enumerate(sel):
                idx[row] = np.concatenate(
                    [flat[offsets[j]:offsets[j] + sizes[j]] for j in draws[i]])
            stats[sel] = batched(arr, idx)
    else:
        for i in range(n_resamples):
            idx = np.concatenate([blocks[j] for j in draws[i]])
            stats[i] = statistic(arr[idx])
    return _percentile_ci(stats, statistic(arr), level, n_resamples, "block")
