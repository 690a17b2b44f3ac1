"""Listening-test aggregation, 2-D embedding projection with cluster scoring, PESQ ingestion."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import curve_fit

MOS_MIN, MOS_MAX = 1.0, 5.0
MAX_MISSING = 6
PESQ_MIN, PESQ_MAX = -0.5, 4.5
PESQ_SPLITS = ("validation", "test")
Z95 = 1.959963984540054


class MetricsError(ValueError):
    pass


# -- MOS -----------------------------------------------------------------------

@dataclass
class MosSheet:
    """raters x items; NaN marks a missing rating."""

    labels: list
    ratings: np.ndarray

    def __post_init__(self):
        self.ratings = np.asarray(self.ratings, dtype=np.float64)
        if self.ratings.ndim != 2 or self.ratings.shape[1] != len(self.labels):
            raise MetricsError(f"ratings shape {self.ratings.shape} does not match {len(self.labels)} labels")
        present = self.ratings[~np.isnan(self.ratings)]
        if np.any((present < MOS_MIN) | (present > MOS_MAX)):
            raise MetricsError("rating outside [1, 5]")

    @property
    def n_raters(self) -> int:
        return self.ratings.shape[0]


@dataclass
class CleanedMos:
    sheet: MosSheet
    dropped: int


def clean_mos(sheet: MosSheet) -> CleanedMos:
    """Drop raters with more than 6 missing ratings, fill the rest with item means."""
    if sheet.n_raters < 1:
        raise MetricsError("MOS sheet has no raters")
    r = sheet.ratings
    keep = np.isnan(r).sum(axis=1) <= MAX_MISSING
    kept = r[keep].copy()
    for j, label in enumerate(sheet.labels):
        col = kept[:, j]
        miss = np.isnan(col)
        if miss.all():
            raise MetricsError(f"item {label!r} has no ratings after cleaning")
        col[miss] = col[~miss].mean()
    return CleanedMos(MosSheet(list(sheet.labels), kept), int((~keep).sum()))


@dataclass
class MosReport:
    item_means: dict
    item_intervals: dict
    naturalness: float
    similarity: float
    naturalness_ci: tuple
    similarity_ci: tuple
    n_raters: int
    dropped: int = 0


def _interval(x: np.ndarray) -> tuple:
    m = float(np.mean(x))
    if len(x) < 2:
        return (m, m)
    half = Z95 * float(np.std(x, ddof=1)) / np.sqrt(len(x))
    return (m - half, m + half)


def mos_report(cleaned: CleanedMos | MosSheet) -> MosReport:
    """Item means, per-category mean of item means, and 95% normal intervals.

    Category intervals are taken over each rater's average within the category.
    Items labelled ``n*`` count as naturalness, ``s*`` as similarity.
    """
    sheet = cleaned.sheet if isinstance(cleaned, CleanedMos) else cleaned
    dropped = cleaned.dropped if isinstance(cleaned, CleanedMos) else 0
    r = sheet.ratings
    if np.isnan(r).any():
        raise MetricsError("sheet has missing ratings; run clean_mos first")
    means = r.mean(axis=0)
    item_means = {lab: float(m) for lab, m in zip(sheet.labels, means)}
    item_ci = {lab: _interval(r[:, j]) for j, lab in enumerate(sheet.labels)}

    def category(prefix):
        cols = [j for j, lab in enumerate(sheet.labels) if lab.lower().startswith(prefix)]
        if not cols:
            return float("nan"), (float("nan"), float("nan"))
        return float(means[cols].mean()), _interval(r[:, cols].mean(axis=1))

    nat, nat_ci = category("n")
    sim, sim_ci = category("s")
    return MosReport(item_means, item_ci, nat, sim, nat_ci, sim_ci, sheet.n_raters, dropped)


def read_mos_csv(path) -> MosSheet:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise MetricsError(f"{path}: empty MOS sheet")
    labels = [c.strip() for c in rows[0]]
    data = []
    for i, row in enumerate(rows[1:], start=1):
        if not any(c.strip() for c in row):
            continue
        if len(row) != len(labels):
            raise MetricsError(f"row {i}: expected {len(labels)} cells, got {len(row)}")
        try:
            data.append([float(c) if c.strip() else np.nan for c in row])
        except ValueError as e:
            raise MetricsError(f"row {i}: {e}") from None
    return MosSheet(labels, np.array(data, dtype=np.float64).reshape(len(data), len(labels)))


def write_mos_csv(sheet: MosSheet, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(sheet.labels)
        for row in sheet.ratings:
            w.writerow(["" if np.isnan(v) else f"{v:g}" for v in row])


# -- projection ------------------------------------------------------------------

@dataclass
class ProjectionPoint:
    x: float
    y: float
    speaker: str = ""
    source: str = "original"


def fit_curve_params(min_dist: float, spread: float = 1.0) -> tuple:
    """(a, b) so that 1/(1 + a d^2b) approximates the target low-dimensional similarity."""
    d = np.linspace(0, spread * 3, 300)
    target = np.where(d < min_dist, 1.0, np.exp(-(d - min_dist) / spread))
    (a, b), _ = curve_fit(lambda x, a, b: 1.0 / (1.0 + a * x ** (2 * b)), d, target, p0=(1.0, 1.0))
    return float(a), float(b)


def _knn_cosine(x: np.ndarray, k: int):
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    xn = x / np.where(norm > 0, norm, 1.0)
    d = np.clip(1.0 - xn @ xn.T, 0.0, 2.0)
    np.fill_diagonal(d, np.inf)
    idx = np.argsort(d, axis=1, kind="stable")[:, :k]
    return idx, np.take_along_axis(d, idx, axis=1)


def _calibrate(dists: np.ndarray, target: float, iters: int = 64):
    """Per-row sigma so that sum exp(-(d - rho)/sigma) = target."""
    n = dists.shape[0]
    rho = dists[:, 0]
    w = np.zeros_like(dists)
    for i in range(n):
        gap = np.maximum(dists[i] - rho[i], 0.0)
        lo, hi = 0.0, np.inf
        sigma = 1.0
        for _ in range(iters):
            s = np.exp(-gap / sigma).sum()
            if abs(s - target) < 1e-5:
                break
            if s > target:
                hi = sigma
                sigma = (lo + hi) / 2
            else:
                lo = sigma
                sigma = sigma * 2 if hi == np.inf else (lo + hi) / 2
        w[i] = np.exp(-gap / sigma)
    return w


def fuzzy_graph(x: np.ndarray, n_neighbors: int) -> np.ndarray:
    """Symmetric affinity matrix from an exact cosine k-NN graph."""
    n = x.shape[0]
    idx, dists = _knn_cosine(x, n_neighbors)
    w = _calibrate(dists, np.log2(n_neighbors))
    p = np.zeros((n, n))
    p[np.repeat(np.arange(n), n_neighbors), idx.ravel()] = w.ravel()
    return p + p.T - p * p.T


def umap_project(vectors, n_neighbors: int = 15, min_dist: float = 0.1, epochs: int = 200,
                 seed: int = 0, negatives: int = 5) -> np.ndarray:
    """2-D layout of ``vectors`` [N, D]; returns coordinates [N, 2].

    Identical input rows are laid out once and share coordinates.
    Each epoch samples edges with probability proportional to their weight and
    applies all moves for that epoch at once.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < n_neighbors + 1:
        raise MetricsError(f"need at least n_neighbors+1 = {n_neighbors + 1} points, got {len(x)}")
    if not np.all(np.isfinite(x)):
        raise MetricsError("non-finite input vectors")
    uniq, inverse = np.unique(x, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    n = uniq.shape[0]
    k = min(n_neighbors, n - 1)
    if k < 1:
        return np.zeros((x.shape[0], 2))
    graph = fuzzy_graph(uniq, k)
    heads, tails = np.nonzero(graph)
    weights = graph[heads, tails]
    prob = weights / weights.max()
    a, b = fit_curve_params(min_dist)
    rng = np.random.default_rng(seed)
    y = rng.uniform(-10.0, 10.0, (n, 2))
    for epoch in range(epochs):
        lr = 1.0 - epoch / epochs
        take = rng.random(len(heads)) < prob
        h, t = heads[take], tails[take]
        delta = np.zeros_like(y)
        diff = y[h] - y[t]
        d2 = (diff ** 2).sum(1, keepdims=True)
        coef = np.where(d2 > 0, -2 * a * b * d2 ** np.maximum(b - 1, -10) / (1 + a * d2 ** b), 0.0)
        g = np.clip(coef * diff, -4, 4) * lr
        np.add.at(delta, h, g)
        np.add.at(delta, t, -g)
        nh = np.repeat(h, negatives)
        nt = rng.integers(0, n, len(nh))
        keep = nh != nt
        nh, nt = nh[keep], nt[keep]
        diff = y[nh] - y[nt]
        d2 = (diff ** 2).sum(1, keepdims=True)
        coef = 2 * b / ((0.001 + d2) * (1 + a * d2 ** b))
        np.add.at(delta, nh, np.clip(coef * diff, -4, 4) * lr)
        y = y + delta
    return y[inverse]


def silhouette(points, labels) -> float:
    """Mean silhouette (Euclidean). Singleton clusters score 0; a = b = 0 scores 0."""
    p = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if len(uniq) < 2:
        raise MetricsError("silhouette needs at least 2 labels")
    d = np.sqrt(((p[:, None, :] - p[None, :, :]) ** 2).sum(-1))
    s = np.zeros(len(p))
    masks = [labels == u for u in uniq]
    for i in range(len(p)):
        own = next(j for j, m in enumerate(masks) if m[i])
        n_own = masks[own].sum()
        if n_own < 2:
            continue
        a = d[i, masks[own]].sum() / (n_own - 1)
        b = min(d[i, m].mean() for j, m in enumerate(masks) if j != own)
        top = max(a, b)
        s[i] = 0.0 if top == 0 else (b - a) / top
    return float(s.mean())


def write_projection(points, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["speaker", "source", "x", "y"])
        for p in points:
            w.writerow([p.speaker, p.source, repr(float(p.x)), repr(float(p.y))])


def read_projection(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return [ProjectionPoint(float(r["x"]), float(r["y"]), r["speaker"], r["source"])
                for r in csv.DictReader(fh)]


# -- PESQ -------------------------------------------------------------------------

@dataclass
class PesqRecord:
    utt_id: str
    split: str
    score: float


@dataclass
class PesqReport:
    records: list = field(default_factory=list)
    means: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)


def summarize_pesq(records) -> PesqReport:
    counts = {s: 0 for s in PESQ_SPLITS}
    sums = {s: 0.0 for s in PESQ_SPLITS}
    for r in records:
        counts[r.split] += 1
        sums[r.split] += r.score
    means = {s: sums[s] / counts[s] for s in PESQ_SPLITS if counts[s]}
    return PesqReport(list(records), means, counts)


def ingest_pesq(path) -> PesqReport:
    """Read "utt_id,split,score" rows (header optional) and validate the PESQ range."""
    text = Path(path).read_text(encoding="utf-8")
    rows = [r for r in csv.reader(text.splitlines()) if any(c.strip() for c in r)]
    if rows and [c.strip().lower() for c in rows[0]] == ["utt_id", "split", "score"]:
        rows = rows[1:]
    records = []
    for i, row in enumerate(rows, start=1):
        if len(row) != 3:
            raise MetricsError(f"row {i}: expected 3 fields, got {len(row)}")
        utt, split, raw = (c.strip() for c in row)
        if split not in PESQ_SPLITS:
            raise MetricsError(f"row {i}: unknown split {split!r}")
        try:
            score = float(raw)
        except ValueError:
            raise MetricsError(f"row {i}: score {raw!r} is not a number") from None
        if not (PESQ_MIN <= score <= PESQ_MAX):
            raise MetricsError(f"row {i}: score out of PESQ range")
        records.append(PesqRecord(utt, split, score))
    return summarize_pesq(records)
