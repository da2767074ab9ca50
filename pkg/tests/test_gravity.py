import math
import random

import numpy as np
import pytest
from hypothesis import given, strategies as st

from geoflux import gravity
from geoflux.geo import GeoPoint, destination, haversine
from geoflux.ingest import CITATION, COLLABORATION, City, EdgeRecord

PARIS = GeoPoint(48.8566, 2.3522)


def collab(a, b, w=1, year=2000):
    a, b = min(a, b), max(a, b)
    return EdgeRecord(a, b, year, year, "f", COLLABORATION, w)


def cite(a, b, w=1):
    return EdgeRecord(a, b, 2000, 1999, "f", CITATION, w)


def scatter(n, seed=0, max_km=4000, country=lambda k: "FR"):
    rng = random.Random(seed)
    return {
        f"c{k:02d}": City(f"c{k:02d}", country(k), destination(PARIS, rng.uniform(0, 2 * math.pi), rng.uniform(5, max_km)))
        for k in range(n)
    }


def test_bins_tile_range():
    bins = gravity.BinSpec()
    e = bins.edges()
    assert len(e) == 26 and e[0] == pytest.approx(1) and e[-1] == pytest.approx(20000)
    assert list(bins.locate([0.5, 1.0, 19999.0, 20000.0, 30000.0])) == [-1, 0, 24, 24, -1]


def test_complete_graph_probability_one():
    cities = scatter(3)
    edges = [collab("c00", "c01"), collab("c00", "c02"), collab("c01", "c02")]
    curve = gravity.link_probability_curve(edges, cities)
    occupied = [b for b in curve if b.n_pairs]
    assert occupied and all(b.p_link == 1.0 for b in occupied)


def test_no_edges_probability_zero():
    curve = gravity.link_probability_curve([], scatter(6), kind=COLLABORATION)
    assert sum(b.n_pairs for b in curve) == 15
    assert all(b.p_link == 0 for b in curve if b.n_pairs)


def test_planted_step_function():
    cities = scatter(40, seed=1)
    ids = sorted(cities)
    edges = [collab(a, b) for i, a in enumerate(ids) for b in ids[i + 1 :] if haversine(cities[a].point, cities[b].point) < 500]
    for b in gravity.link_probability_curve(edges, cities):
        if not b.n_pairs:
            continue
        if b.upper_km <= 500:
            assert b.p_link == 1.0
        elif b.lower_km >= 500:
            assert b.p_link == 0.0


@given(st.integers(2, 15), st.integers(0, 1000), st.booleans())
def test_pair_universe_invariants(n, seed, directed):
    cities = scatter(n, seed)
    rng = random.Random(seed)
    ids = sorted(cities)
    make = cite if directed else collab
    edges = [make(a, b, rng.randint(1, 3)) for a in ids for b in ids if a != b and rng.random() < 0.3]
    curve = gravity.link_probability_curve(edges, cities, kind=CITATION if directed else COLLABORATION)
    total = n * (n - 1) if directed else n * (n - 1) // 2
    assert sum(b.n_pairs for b in curve) == total
    assert all(0 <= b.n_linked <= b.n_pairs for b in curve)


def test_zero_distance_pairs_excluded():
    cities = {"a": City("a", "FR", PARIS), "b": City("b", "FR", PARIS), "c": City("c", "FR", destination(PARIS, 0, 100))}
    diag = gravity.CurveDiagnostics()
    curve = gravity.link_probability_curve([collab("a", "b")], cities, diagnostics=diag)
    assert diag.counts["zero_distance_pair"] == 1
    assert sum(b.n_pairs for b in curve) == 2


def test_ratio_single_edge():
    cities = scatter(2)
    curve = gravity.normalized_weight_curve([collab("c00", "c01", 4)], cities)
    vals = [b.mean_ratio for b in curve if not math.isnan(b.mean_ratio)]
    assert vals == [0.25]


def test_ratio_star_graph():
    cities = scatter(6, seed=2)
    edges = [collab("c00", f"c0{k}", k) for k in range(1, 6)]
    s = gravity.node_strengths(edges)
    assert s["c00"] == 15
    ratios = [w / (s["c00"] * w) for w in range(1, 6)]
    assert all(r == pytest.approx(1 / 15) for r in ratios)
    curve = gravity.normalized_weight_curve(edges, cities)
    for b in curve:
        if not math.isnan(b.mean_ratio):
            assert b.mean_ratio == pytest.approx(1 / 15)


def test_strengths_verified_sum():
    edges = [collab("a", "b", 2), collab("b", "c", 3), cite("a", "c", 5)]
    s = gravity.node_strengths(edges)
    assert s == {"a": 7, "b": 5, "c": 8}
    assert gravity.node_strengths([cite("a", "c", 5)], "in") == {"c": 5}


@pytest.mark.parametrize("b", [0.0, -0.24, -0.45])
def test_exact_power_law(b):
    d = np.logspace(0, 4, 10)
    fit = gravity.fit_power_law(list(zip(d, 3.0 * d**b)))
    assert abs(fit.exponent_b - b) < 1e-9
    assert fit.intercept == pytest.approx(math.log10(3.0))
    assert 0 <= fit.r_squared <= 1 and fit.stderr_b >= 0


def test_insufficient_bins():
    with pytest.raises(ValueError, match="insufficient bins"):
        gravity.fit_power_law([(1, 1), (10, 0.5), (100, 0), (1000, float("nan"))])


@pytest.mark.parametrize("seed", range(5))
def test_noisy_power_law_within_three_se(seed):
    rng = np.random.default_rng(seed)
    d = np.logspace(0.5, 4, 25)
    y = d**-0.45 * np.exp(rng.normal(0, 0.3, len(d)))
    fit = gravity.fit_power_law(list(zip(d, y)))
    assert abs(fit.exponent_b + 0.45) <= 3 * fit.stderr_b


def test_split_examples():
    cc = {"paris": "FR", "lyon": "FR", "berlin": "DE", "munich": "DE", "madrid": "ES"}
    edges = [
        collab("paris", "lyon"),
        collab("paris", "berlin"),
        collab("berlin", "munich"),
        collab("lyon", "madrid"),
        collab("madrid", "munich"),
    ]
    dom, intl = gravity.split_domestic_international(edges, cc)
    assert (len(dom), len(intl)) == (2, 3)
    assert collab("paris", "lyon") in dom and collab("paris", "berlin") in intl


def test_split_unknown_country():
    with pytest.raises(ValueError, match="atlantis"):
        gravity.split_domestic_international([collab("atlantis", "paris")], {"paris": "FR"})


@given(st.lists(st.tuples(st.sampled_from("abcdef"), st.sampled_from("abcdef"), st.integers(1, 9)), max_size=20))
def test_split_is_partition(raw):
    cc = dict(zip("abcdef", ["FR", "FR", "DE", "DE", "ES", "FR"]))
    edges = [cite(a, b, w) for a, b, w in raw]
    dom, intl = gravity.split_domestic_international(edges, cc)
    assert sorted(dom + intl) == sorted(edges)
    assert sum(e.weight for e in dom + intl) == sum(e.weight for e in edges)
    assert all(cc[e.src_city] == cc[e.dst_city] for e in dom)
    assert all(cc[e.src_city] != cc[e.dst_city] for e in intl)


def test_analyze_labels_fits():
    cities = scatter(40, seed=4, country=lambda k: ["FR", "DE"][k % 2])
    ids = sorted(cities)
    rng = random.Random(0)
    edges = []
    for i, a in enumerate(ids):
        for b in ids[i + 1 :]:
            d = haversine(cities[a].point, cities[b].point)
            if rng.random() < min(1.0, 30 / d):
                edges.append(collab(a, b, rng.randint(1, 4)))
    res = gravity.analyze(edges, cities)
    labels = [f.label for f in res.fits]
    assert labels[0] == "all:p_link" and "all:mean_ratio" in labels
    assert res.primary.exponent_b < 0
