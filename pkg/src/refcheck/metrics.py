"""Detector evaluation: ROC/AUC, DeLong intervals, bootstrap bands, FDR curves, kappa.

Grounded (G) is the positive class throughout: a high groundedness score
predicts G, so ``fpr`` is the share of hallucinated references let through.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .errors import DegenerateLabels, LengthMismatch

LABELS = ("G", "H")

GRID = np.linspace(0.0, 1.0, 101)
FDR_GRID = GRID[1:]

BOOTSTRAP_Z = 1.96


@dataclass(frozen=True)
class ScoredLabel:
    score: float
    label: str

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError(f"score must be finite, got {self.score}")
        if self.label not in LABELS:
            raise ValueError(f"label must be G or H, got {self.label!r}")


def scored_labels(scores: Sequence[float], labels: Sequence[str]) -> list[ScoredLabel]:
    if len(scores) != len(labels):
        raise LengthMismatch(f"{len(scores)} scores but {len(labels)} labels")
    return [ScoredLabel(float(s), l) for s, l in zip(scores, labels)]


def _arrays(data) -> tuple[np.ndarray, np.ndarray]:
    scores = np.fromiter((d.score for d in data), dtype=float, count=len(data))
    is_g = np.fromiter((d.label == "G" for d in data), dtype=bool, count=len(data))
    return scores, is_g


def _split(data, min_per_class: int = 1) -> tuple[np.ndarray, np.ndarray]:
    scores, is_g = _arrays(data)
    g, h = scores[is_g], scores[~is_g]
    if len(g) < min_per_class or len(h) < min_per_class:
        raise DegenerateLabels(
            f"need at least {min_per_class} G and {min_per_class} H, got {len(g)} G and {len(h)} H"
        )
    return g, h


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float
    auc_ci95: tuple[float, float] | None = None
    band: "Band | None" = None

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def roc_curve(data: Sequence[ScoredLabel]) -> RocCurve:
    """Staircase ROC with one vertex per distinct score; tied scores give a diagonal step."""
    g, h = _split(data)
    scores = np.concatenate([g, h])
    thresholds = np.unique(scores)[::-1]
    g_sorted, h_sorted = np.sort(g), np.sort(h)
    # count of each class with score >= t
    g_kept = len(g) - np.searchsorted(g_sorted, thresholds, side="left")
    h_kept = len(h) - np.searchsorted(h_sorted, thresholds, side="left")
    tpr = np.concatenate([[0.0], g_kept / len(g)])
    fpr = np.concatenate([[0.0], h_kept / len(h)])
    thresholds = np.concatenate([[np.inf], thresholds])
    return RocCurve(fpr=fpr, tpr=tpr, thresholds=thresholds, auc=auc(data))


def trapezoid_area(curve: RocCurve) -> float:
    return float(np.sum(np.diff(curve.fpr) * (curve.tpr[1:] + curve.tpr[:-1]) / 2.0))


def auc(data: Sequence[ScoredLabel]) -> float:
    """Mann-Whitney AUC, half credit for ties, via midranks."""
    g, h = _split(data)
    ranks = stats.rankdata(np.concatenate([g, h]), method="average")
    n_g, n_h = len(g), len(h)
    u = ranks[:n_g].sum() - n_g * (n_g + 1) / 2.0
    return float(u / (n_g * n_h))


def _placements(g: np.ndarray, h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-observation placement values used by the DeLong variance."""
    h_sorted, g_sorted = np.sort(h), np.sort(g)
    h_below = np.searchsorted(h_sorted, g, side="left")
    h_at_or_below = np.searchsorted(h_sorted, g, side="right")
    v_g = (h_below + 0.5 * (h_at_or_below - h_below)) / len(h)
    g_below = np.searchsorted(g_sorted, h, side="left")
    g_at_or_below = np.searchsorted(g_sorted, h, side="right")
    g_above = len(g) - g_at_or_below
    v_h = (g_above + 0.5 * (g_at_or_below - g_below)) / len(g)
    return v_g, v_h


def delong_se(data: Sequence[ScoredLabel]) -> tuple[float, float]:
    """(auc, standard error) from DeLong's placement-value variance."""
    g, h = _split(data, min_per_class=2)
    v_g, v_h = _placements(g, h)
    var = np.var(v_g, ddof=1) / len(g) + np.var(v_h, ddof=1) / len(h)
    return float(np.mean(v_g)), float(np.sqrt(max(var, 0.0)))


def delong_ci(data: Sequence[ScoredLabel], level: float = 0.95) -> tuple[float, float]:
    if not 0.0 < level < 1.0:
        raise ValueError("level must be in (0, 1)")
    area, se = delong_se(data)
    z = stats.norm.ppf(0.5 + level / 2.0)
    return float(max(0.0, area - z * se)), float(min(1.0, area + z * se))


@dataclass
class Band:
    grid: np.ndarray
    mean: np.ndarray
    se: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    replicates: int
    valid_replicates: int


def bootstrap_band(
    data: Sequence[ScoredLabel],
    statistic: Callable[[list[ScoredLabel], int], Sequence[float] | float],
    replicates: int = 100,
    seed: int = 0,
    *,
    grid: np.ndarray | None = None,
    stratified: bool = False,
) -> Band:
    """Pointwise band: bootstrap mean +/- 1.96 bootstrap standard errors.

    ``statistic(sample, replicate_index)`` returns a scalar or one value per
    grid point. Replicates where the statistic is undefined (single-class
    resample) are dropped. Replicate ``r`` draws from its own generator
    seeded with ``(seed, r)``, so results do not depend on evaluation order.
    """
    if replicates < 2:
        raise ValueError("replicates must be >= 2")
    data = list(data)
    n = len(data)
    if stratified:
        _, is_g = _arrays(data)
        groups = [np.flatnonzero(is_g), np.flatnonzero(~is_g)]
    rows = []
    for r in range(replicates):
        rng = np.random.default_rng([seed, r])
        if stratified:
            idx = np.concatenate([rng.choice(grp, size=len(grp), replace=True) for grp in groups if len(grp)])
        else:
            idx = rng.integers(0, n, size=n)
        sample = [data[i] for i in idx]
        try:
            rows.append(np.atleast_1d(np.asarray(statistic(sample, r), dtype=float)))
        except DegenerateLabels:
            rows.append(None)
    width = next((len(row) for row in rows if row is not None), 1)
    values = np.array([row if row is not None else np.full(width, np.nan) for row in rows])
    valid = ~np.isnan(values).any(axis=1)
    good = values[valid]
    if len(good) >= 2:
        mean = good.mean(axis=0)
        se = good.std(axis=0, ddof=1)
    else:
        mean = np.full(width, np.nan)
        se = np.full(width, np.nan)
    if grid is None:
        grid = np.arange(width, dtype=float)
    return Band(
        grid=np.asarray(grid, dtype=float),
        mean=mean,
        se=se,
        lo=mean - BOOTSTRAP_Z * se,
        hi=mean + BOOTSTRAP_Z * se,
        replicates=replicates,
        valid_replicates=int(valid.sum()),
    )


def tpr_at(curve: RocCurve, fpr_grid: np.ndarray = GRID) -> np.ndarray:
    """Curve height on an fpr grid; vertical segments take their top."""
    x = np.asarray(fpr_grid, dtype=float)
    fpr, tpr = curve.fpr, curve.tpr
    # last vertex at or left of x; vertices are ordered so it is the highest one
    left = np.clip(np.searchsorted(fpr, x, side="right") - 1, 0, len(fpr) - 1)
    right = np.minimum(left + 1, len(fpr) - 1)
    span = fpr[right] - fpr[left]
    frac = np.divide(x - fpr[left], span, out=np.zeros_like(x), where=span > 0)
    return tpr[left] + frac * (tpr[right] - tpr[left])


@dataclass
class FdrCurve:
    preserved: np.ndarray
    fdr: np.ndarray
    extrapolated: np.ndarray
    band: Band | None = None

    @property
    def points(self) -> list[tuple[float, float, bool]]:
        return list(zip(self.preserved.tolist(), self.fdr.tolist(), self.extrapolated.tolist()))


def fdr_curve(
    data: Sequence[ScoredLabel],
    *,
    seed: int | np.random.Generator = 0,
    draws: int = 20,
    grid: np.ndarray = FDR_GRID,
) -> FdrCurve:
    """FDR among references kept by ``score >= t`` against the fraction kept.

    Fractions below the smallest achievable one (everything tied at the top
    score) are filled in on ``grid`` by uniformly subsampling the top-score
    group, averaged over ``draws`` subsamples.
    """
    if len(data) == 0:
        raise ValueError("fdr_curve needs at least one record")
    scores, is_g = _arrays(data)
    n = len(scores)
    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    h_cum = np.cumsum(~is_g[order])
    thresholds = np.unique(scores)[::-1]
    kept = n - np.searchsorted(np.sort(scores), thresholds, side="left")
    kept_h = h_cum[kept - 1]
    preserved = kept / n
    fdr = kept_h / kept

    top = np.flatnonzero(scores == s_sorted[0])
    top_is_h = ~is_g[top]
    sizes = np.unique(np.rint(np.asarray(grid) * n).astype(int))
    sizes = sizes[(sizes >= 1) & (sizes < len(top))]
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ext_fdr = []
    for k in sizes:
        hits = [top_is_h[rng.choice(len(top), size=k, replace=False)].sum() for _ in range(draws)]
        ext_fdr.append(float(np.mean(hits)) / k)
    return FdrCurve(
        preserved=np.concatenate([sizes / n, preserved]),
        fdr=np.concatenate([np.asarray(ext_fdr, dtype=float), fdr]),
        extrapolated=np.concatenate([np.ones(len(sizes), bool), np.zeros(len(preserved), bool)]),
    )


def fdr_at(curve: FdrCurve, grid: np.ndarray = FDR_GRID) -> np.ndarray:
    return np.interp(grid, curve.preserved, curve.fdr)


@dataclass(frozen=True)
class KappaResult:
    po: float
    pe: float
    kappa: float


def cohens_kappa(a: Sequence[str], b: Sequence[str]) -> KappaResult:
    if len(a) != len(b):
        raise LengthMismatch(f"rater vectors differ in length: {len(a)} vs {len(b)}")
    if len(a) == 0:
        raise ValueError("need at least one item")
    n = len(a)
    po = sum(x == y for x, y in zip(a, b)) / n
    cats = sorted(set(a) | set(b))
    pe = sum((list(a).count(c) / n) * (list(b).count(c) / n) for c in cats)
    if po == 1.0:
        return KappaResult(po=po, pe=pe, kappa=1.0)
    return KappaResult(po=po, pe=pe, kappa=(po - pe) / (1.0 - pe))


def hallucination_rate(labels: Sequence[str]) -> float:
    if len(labels) == 0:
        raise ValueError("need at least one label")
    return sum(1 for l in labels if l == "H") / len(labels)


@dataclass
class MethodMetrics:
    n: int
    n_g: int
    n_h: int
    roc: RocCurve
    fdr: FdrCurve
    roc_grid: np.ndarray = field(default_factory=lambda: GRID.copy())
    fdr_grid: np.ndarray = field(default_factory=lambda: FDR_GRID.copy())


def evaluate_scores(
    data: Sequence[ScoredLabel],
    *,
    replicates: int = 100,
    bootstrap_seed: int = 0,
    fdr_seed: int = 0,
    fdr_draws: int = 20,
    level: float = 0.95,
) -> MethodMetrics:
    """ROC with DeLong CI and bootstrap band, plus FDR curve with band, for one method."""
    data = list(data)
    _, is_g = _arrays(data)
    roc = roc_curve(data)
    roc.auc_ci95 = delong_ci(data, level)
    roc.band = bootstrap_band(
        data, lambda sample, r: tpr_at(roc_curve(sample)), replicates, bootstrap_seed, grid=GRID
    )
    fdr = fdr_curve(data, seed=fdr_seed, draws=fdr_draws)
    fdr.band = bootstrap_band(
        data,
        lambda sample, r: fdr_at(fdr_curve(sample, seed=np.random.default_rng([fdr_seed, r]), draws=fdr_draws)),
        replicates,
        bootstrap_seed,
        grid=FDR_GRID,
    )
    return MethodMetrics(n=len(data), n_g=int(is_g.sum()), n_h=int((~is_g).sum()), roc=roc, fdr=fdr)
