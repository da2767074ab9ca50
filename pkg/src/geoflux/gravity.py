"""Empirical distance-decay curves and power-law fits on binned averages."""

from __future__ import annotations

import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from .geo import haversine_matrix, haversine_pairs
from .ingest import CITATION, COLLABORATION, City, EdgeRecord

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BinSpec:
    lower_km: float = 1.0
    upper_km: float = 20000.0
    n_bins: int = 25

    def __post_init__(self):
        if not 0 < self.lower_km < self.upper_km or self.n_bins < 1:
            raise ValueError("bins need 0 < lower < upper and n_bins >= 1")

    def edges(self) -> np.ndarray:
        return np.logspace(math.log10(self.lower_km), math.log10(self.upper_km), self.n_bins + 1)

    def locate(self, d) -> np.ndarray:
        """Bin index per distance, -1 outside the range; the last bin is closed."""
        e = self.edges()
        d = np.asarray(d, dtype=float)
        k = np.searchsorted(e, d, side="right") - 1
        k[d == e[-1]] = self.n_bins - 1
        k[(d < e[0]) | (d > e[-1])] = -1
        return k


@dataclass
class DistanceBin:
    lower_km: float
    upper_km: float
    n_pairs: int = 0
    n_linked: int = 0
    mean_ratio: float = float("nan")

    @property
    def p_link(self) -> float:
        return self.n_linked / self.n_pairs if self.n_pairs else float("nan")

    @property
    def center_km(self) -> float:
        return math.sqrt(self.lower_km * self.upper_km)


@dataclass(frozen=True)
class GravityFit:
    exponent_b: float
    intercept: float
    stderr_b: float
    r_squared: float
    n_bins: int
    label: str = ""

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "b": self.exponent_b,
            "intercept": self.intercept,
            "stderr": self.stderr_b,
            "r2": self.r_squared,
            "n_bins": self.n_bins,
        }


@dataclass
class CurveDiagnostics:
    counts: Counter = field(default_factory=Counter)


def _aggregate(edges: Iterable[EdgeRecord]) -> dict[tuple[str, str], int]:
    """Total weight per city pair, summed over years and fields."""
    out: dict[tuple[str, str], int] = defaultdict(int)
    for e in edges:
        out[e.src_city, e.dst_city] += e.weight
    return dict(out)


def _kind_of(edges: Sequence[EdgeRecord], kind: str | None) -> str:
    if kind is not None:
        return kind
    kinds = {e.kind for e in edges}
    if len(kinds) > 1:
        raise ValueError("mixed collaboration and citation edges")
    return kinds.pop() if kinds else COLLABORATION


def node_strengths(edges: Iterable[EdgeRecord], direction: str = "total") -> dict[str, float]:
    """Sum of incident edge weights per city.

    ``direction`` selects ``"out"`` (as source), ``"in"`` (as target) or
    ``"total"``; intra-city records count once.
    """
    s: dict[str, float] = defaultdict(float)
    for e in edges:
        if direction in ("out", "total"):
            s[e.src_city] += e.weight
        if direction == "in" or (direction == "total" and e.dst_city != e.src_city):
            s[e.dst_city] += e.weight
    return dict(s)


def link_probability_curve(
    edges: Sequence[EdgeRecord],
    cities: Mapping[str, City],
    bins: BinSpec = BinSpec(),
    kind: str | None = None,
    diagnostics: CurveDiagnostics | None = None,
    pairs: str = "all",
) -> list[DistanceBin]:
    """Fraction of city pairs that carry at least one edge, per distance bin.

    The pair universe is every unordered (collaboration) or ordered
    (citation) pair of distinct cities in ``cities``.  ``pairs`` restricts
    it to ``"domestic"`` or ``"international"`` pairs.  Co-located pairs
    and pairs outside the bin range are counted in ``diagnostics``.
    """
    kind = _kind_of(edges, kind)
    diag = diagnostics if diagnostics is not None else CurveDiagnostics()
    ids = sorted(cities)
    pos = {c: k for k, c in enumerate(ids)}
    N = len(ids)
    out = [DistanceBin(float(lo), float(hi)) for lo, hi in zip(bins.edges()[:-1], bins.edges()[1:])]
    if N < 2:
        return out
    D = haversine_matrix([cities[c].point.latitude for c in ids], [cities[c].point.longitude for c in ids])
    linked = np.zeros((N, N), dtype=bool)
    for (a, b), w in _aggregate(edges).items():
        if w <= 0:
            continue
        if a not in pos or b not in pos:
            diag.counts["edge_unknown_city"] += 1
            continue
        linked[pos[a], pos[b]] = True
        if kind == COLLABORATION:
            linked[pos[b], pos[a]] = True
    if kind == COLLABORATION:
        i, j = np.triu_indices(N, 1)
    else:
        i, j = np.nonzero(~np.eye(N, dtype=bool))
    if pairs != "all":
        country = np.array([cities[c].country for c in ids])
        same = country[i] == country[j]
        keep = same if pairs == "domestic" else ~same
        i, j = i[keep], j[keep]
    d = D[i, j]
    zero = d <= 0
    diag.counts["zero_distance_pair"] += int(zero.sum())
    k = bins.locate(d)
    diag.counts["out_of_range_pair"] += int(((k < 0) & ~zero).sum())
    ok = (k >= 0) & ~zero
    n_pairs = np.bincount(k[ok], minlength=bins.n_bins)
    n_linked = np.bincount(k[ok], weights=linked[i[ok], j[ok]], minlength=bins.n_bins)
    for b in range(bins.n_bins):
        out[b].n_pairs = int(n_pairs[b])
        out[b].n_linked = int(n_linked[b])
    return out


def normalized_weight_curve(
    edges: Sequence[EdgeRecord],
    cities: Mapping[str, City],
    bins: BinSpec = BinSpec(),
    strengths: Mapping[str, float] | None = None,
    kind: str | None = None,
    diagnostics: CurveDiagnostics | None = None,
    curve: list[DistanceBin] | None = None,
) -> list[DistanceBin]:
    """Mean of ``w_ij / (s_i s_j)`` over linked pairs in each distance bin.

    For citation the product uses the citing city's out-strength and the
    cited city's in-strength unless ``strengths`` is given.  Results are
    written into ``curve`` when supplied (e.g. the link-probability bins).
    """
    kind = _kind_of(edges, kind)
    diag = diagnostics if diagnostics is not None else CurveDiagnostics()
    if strengths is not None:
        s_src = s_dst = dict(strengths)
    elif kind == CITATION:
        s_src, s_dst = node_strengths(edges, "out"), node_strengths(edges, "in")
    else:
        s_src = s_dst = node_strengths(edges)
    out = curve if curve is not None else [
        DistanceBin(float(lo), float(hi)) for lo, hi in zip(bins.edges()[:-1], bins.edges()[1:])
    ]
    sums = np.zeros(bins.n_bins)
    counts = np.zeros(bins.n_bins, dtype=int)
    agg = _aggregate(edges)
    keys = [k for k in sorted(agg) if agg[k] > 0]
    a_ok = [k for k in keys if k[0] in cities and k[1] in cities]
    diag.counts["edge_unknown_city"] += len(keys) - len(a_ok)
    if a_ok:
        A = [cities[a].point for a, _ in a_ok]
        B = [cities[b].point for _, b in a_ok]
        d = haversine_pairs([p.latitude for p in A], [p.longitude for p in A], [p.latitude for p in B], [p.longitude for p in B])
        kb = bins.locate(d)
        for (a, b), dist, k in zip(a_ok, d, kb):
            if a == b or dist <= 0:
                diag.counts["zero_distance_pair"] += 1
                continue
            if k < 0:
                diag.counts["out_of_range_pair"] += 1
                continue
            si, sj = s_src.get(a, 0.0), s_dst.get(b, 0.0)
            if si <= 0 or sj <= 0:
                diag.counts["zero_strength"] += 1
                continue
            sums[k] += agg[a, b] / (si * sj)
            counts[k] += 1
    for b in range(bins.n_bins):
        out[b].mean_ratio = sums[b] / counts[b] if counts[b] else float("nan")
    return out


def fit_power_law(curve, label: str = "") -> GravityFit:
    """OLS of ``log10 y`` on ``log10 d`` over points with finite positive ``y``.

    ``curve`` is a sequence of ``(d, y)`` pairs.  The slope is the exponent.
    """
    pts = np.asarray([(d, y) for d, y in curve if d > 0 and y is not None and np.isfinite(y) and y > 0], dtype=float)
    if len(pts) < 3:
        raise ValueError("insufficient bins")
    x, y = np.log10(pts[:, 0]), np.log10(pts[:, 1])
    if np.ptp(x) == 0:
        raise ValueError("insufficient bins")
    res = stats.linregress(x, y)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    # a flat curve is fit perfectly by slope 0
    r2 = float(res.rvalue**2) if ss_tot > 0 else 1.0
    return GravityFit(float(res.slope), float(res.intercept), float(res.stderr), min(max(r2, 0.0), 1.0), len(pts), label)


def probability_points(curve: Sequence[DistanceBin]) -> list[tuple[float, float]]:
    return [(b.center_km, b.p_link) for b in curve if b.n_pairs > 0]


def ratio_points(curve: Sequence[DistanceBin]) -> list[tuple[float, float]]:
    return [(b.center_km, b.mean_ratio) for b in curve]


def split_domestic_international(
    edges: Sequence[EdgeRecord], city_country: Mapping[str, str]
) -> tuple[list[EdgeRecord], list[EdgeRecord]]:
    """Partition edges by whether both endpoints lie in the same country."""
    missing = sorted({c for e in edges for c in (e.src_city, e.dst_city) if c not in city_country})
    if missing:
        raise ValueError(f"unknown country for cities: {', '.join(missing)}")
    dom, intl = [], []
    for e in edges:
        (dom if city_country[e.src_city] == city_country[e.dst_city] else intl).append(e)
    return dom, intl


@dataclass
class GravityAnalysis:
    curves: dict[str, list[DistanceBin]]
    fits: list[GravityFit]
    diagnostics: Counter

    @property
    def primary(self) -> GravityFit:
        return self.fits[0]


def analyze(
    edges: Sequence[EdgeRecord], cities: Mapping[str, City], bins: BinSpec = BinSpec(), kind: str | None = None
) -> GravityAnalysis:
    """Link-probability and normalized-weight curves, overall and split by pair type.

    Fits are attempted for every curve; the overall link-probability fit
    must succeed, others are skipped when they have too few bins.
    """
    kind = _kind_of(edges, kind)
    diag = CurveDiagnostics()
    city_country = {c: cities[c].country for c in cities}
    dom, intl = split_domestic_international([e for e in edges if e.src_city in cities and e.dst_city in cities], city_country)
    curves = {}
    fits = []
    for name, subset, pairs in (("all", edges, "all"), ("domestic", dom, "domestic"), ("international", intl, "international")):
        c = link_probability_curve(subset, cities, bins, kind, diag if name == "all" else None, pairs)
        normalized_weight_curve(subset, cities, bins, kind=kind, curve=c)
        curves[name] = c
        for metric, pts in (("p_link", probability_points(c)), ("mean_ratio", ratio_points(c))):
            try:
                fits.append(fit_power_law(pts, f"{name}:{metric}"))
            except ValueError:
                if name == "all" and metric == "p_link":
                    raise
                log.info("no fit for %s:%s (insufficient bins)", name, metric)
    return GravityAnalysis(curves, fits, diag.counts)
