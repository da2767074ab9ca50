import itertools
from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from geoflux import mobility
from geoflux.ingest import SchemaError
from geoflux.mobility import (
    DESTINATION,
    ORIGIN,
    MigrationEvent,
    MobilityConfig,
    ScholarProfile,
    aggregate_flows,
    identify_migrants,
    match_all,
    match_controls,
    move_year,
)

import mobility_fixture as fx
from mobility_fixture import pub, span
from oracles import exhaustive_argmin, reference_deltas


def raw(profile):
    return [(p.year, dict(p.concepts)) for p in profile.publications]


def rows(flows):
    return [(r.relative_year, r.group, r.origin_avg, r.destination_avg, r.other_avg) for r in flows]


@pytest.fixture
def scholars():
    return fx.scholars()


# ---- identification ------------------------------------------------------


@pytest.mark.parametrize("t_a,t_b,expected", [(2010, 2012, 2011), (2010, 2010, 2010), (2008, 2011, 2009), (2009, 2008, 2009)])
def test_move_year(t_a, t_b, expected):
    assert move_year(t_a, t_b) == expected


def test_fixture_identifies_single_migrant(scholars):
    diag = Counter()
    assert identify_migrants(scholars.values(), diagnostics=diag) == fx.EXPECTED_EVENTS
    assert diag[mobility.NON_MIGRANT] == 5
    for sid, reason in fx.EXPECTED_REASONS.items():
        assert mobility.classify(scholars[sid]) == reason, sid


def test_validator_agrees(scholars):
    for ev in identify_migrants(scholars.values()):
        assert mobility.validate_event(ev, scholars[ev.author_id]) == []
    bad = MigrationEvent("m01", "FR", "DE", 2009, 2010, 0, 2012)
    assert "move_year" in mobility.validate_event(bad, scholars["m01"])


def test_overlap_two_years_kept():
    aff = {**span("FR", 2001, 2007), 2008: {"FR", "DE"}, 2009: {"FR", "DE"}, **span("DE", 2010, 2016)}
    p = ScholarProfile("x", aff, [pub(y) for y in range(2001, 2017)])
    ev = mobility.classify(p)
    assert (ev.t_a, ev.t_b, ev.overlap_years, ev.t_m) == (2009, 2008, 2, 2009)


def test_gap_cap_is_configurable():
    aff = {**span("FR", 2001, 2007), **span("DE", 2010, 2016)}
    p = ScholarProfile("x", aff, [pub(y) for y in list(range(2001, 2008)) + list(range(2010, 2017))])
    assert mobility.classify(p).t_m == 2008
    assert mobility.classify(p, MobilityConfig(max_gap=1)) == mobility.GAP


def test_ambiguous_origin_and_empty():
    aff = {2001: {"FR", "DE"}, **span("DE", 2002, 2016)}
    assert mobility.classify(ScholarProfile("x", aff, [pub(y) for y in range(2001, 2017)])) == mobility.AMBIGUOUS_ORIGIN
    assert mobility.classify(ScholarProfile("y", {}, [])) == mobility.NO_RECORD


@settings(max_examples=60)
@given(st.integers(2000, 2010), st.integers(1, 8), st.integers(0, 3), st.integers(0, 3), st.integers(1, 8))
def test_overlap_consistency(first, n_pre, gap, overlap, n_post):
    t_a0 = first + n_pre
    aff = span("FR", first, t_a0)
    if overlap:
        aff.update({y: {"FR", "DE"} for y in range(t_a0 + 1, t_a0 + 1 + overlap)})
        start = t_a0 + 1 + overlap
    else:
        start = t_a0 + 1 + gap
    aff.update(span("DE", start, start + n_post))
    p = ScholarProfile("x", aff, [pub(y) for y in sorted(aff)])
    ev = mobility.classify(p)
    if isinstance(ev, MigrationEvent):
        assert (ev.t_a + 1 <= ev.t_b) == (ev.overlap_years == 0)
        assert mobility.validate_event(ev, p) == []


# ---- matching ------------------------------------------------------------


def test_volume_distance_examples():
    m = ScholarProfile("m", span("FR", 2000, 2010), [pub(y) for y in range(2000, 2005)])
    assert mobility.publication_volume_distance(m, m, 2010) == 0
    c = ScholarProfile("c", span("FR", 2000, 2010), [pub(y) for y in range(2000, 2010)] + [pub(2011)])
    m7 = ScholarProfile("m", span("FR", 2000, 2010), [pub(y) for y in range(2000, 2007)])
    assert mobility.publication_volume_distance(m7, c, 2010) == 3
    late = ScholarProfile("c", span("FR", 2000, 2010), [pub(2010)])
    assert mobility.publication_volume_distance(m, late, 2010) == 5


def test_concept_similarity_examples():
    a = ScholarProfile("a", {2000: {"FR"}}, [pub(2000, {"a": 2.0, "b": 1.0})])
    b = ScholarProfile("b", {2000: {"FR"}}, [pub(2000, {"b": 3.0, "c": 4.0})])
    c = ScholarProfile("c", {2000: {"FR"}}, [pub(2000, {"z": 1.0})])
    one = ScholarProfile("o", {2000: {"FR"}}, [pub(2000, {"a": 1.0})])
    assert mobility.concept_similarity(a, b, 2001) == 3.0
    assert mobility.concept_similarity(a, c, 2001) == 0.0
    assert mobility.concept_similarity(one, one, 2001) == 1.0
    assert mobility.concept_similarity(a, b, 2000) == 0.0


def test_composite_hand_values(scholars):
    m = scholars["m01"]
    ev = fx.EXPECTED_EVENTS[0]
    pool = mobility.eligible_pool(ev, m, scholars.values(), ORIGIN)
    assert [c.author_id for c in pool] == ["c01", "c02", "c03"]
    for c in pool:
        assert mobility.composite_distance(m, c, pool, ev.t_m) == pytest.approx(fx.EXPECTED_ORIGIN_DELTAS[c.author_id], abs=1e-15)
    dpool = mobility.eligible_pool(ev, m, scholars.values(), DESTINATION)
    assert [c.author_id for c in dpool] == ["d01"]
    assert match_controls(m, dpool, DESTINATION, ev.t_m).delta == fx.EXPECTED_DESTINATION_DELTA


def test_zero_over_zero_terms():
    m = ScholarProfile("m", {2000: {"FR"}}, [pub(2000)])
    pool = [ScholarProfile(f"c{k}", {2000: {"FR"}}, [pub(2000)]) for k in range(3)]
    assert list(mobility.composite_distances(m, pool, 2001)) == [0.0, 0.0, 0.0]


def test_best_on_both_criteria_is_zero():
    m = ScholarProfile("m", {2000: {"FR"}}, [pub(2000, {"a": 1.0})])
    pool = [
        ScholarProfile("c1", {2000: {"FR"}}, [pub(2000, {"a": 2.0})]),
        ScholarProfile("c2", {2000: {"FR"}}, [pub(2000, {"a": 1.0}), pub(2000)]),
    ]
    d = mobility.composite_distances(m, pool, 2001)
    assert d[0] == 0.0 and d[1] == 0.75


def test_empty_pool():
    m = ScholarProfile("m", {2000: {"FR"}}, [pub(2000)])
    with pytest.raises(mobility.NoEligibleControls, match="no eligible controls"):
        match_controls(m, [], ORIGIN, 2001)


def test_tie_goes_to_smallest_id():
    m = ScholarProfile("m", {2000: {"FR"}}, [pub(2000, {"a": 1.0})])
    twin = [pub(2000, {"a": 1.0})]
    pool = [ScholarProfile("zz", {2000: {"FR"}}, twin), ScholarProfile("aa", {2000: {"FR"}}, twin)]
    assert match_controls(m, pool, ORIGIN, 2001).control_id == "aa"


def test_match_equals_exhaustive_argmin_on_fixture(scholars):
    for ev in identify_migrants(scholars.values()):
        m = scholars[ev.author_id]
        for stratum in (ORIGIN, DESTINATION):
            pool = mobility.eligible_pool(ev, m, scholars.values(), stratum)
            ref = reference_deltas(raw(m), {c.author_id: raw(c) for c in pool}, ev.t_m)
            best = exhaustive_argmin(ref.items(), lambda d: d)
            got = match_controls(m, pool, stratum, ev.t_m)
            assert (got.delta, got.control_id) == pytest.approx(best)


concept_maps = st.dictionaries(st.sampled_from("abcde"), st.integers(1, 4).map(float), max_size=3)
pub_lists = st.lists(st.tuples(st.integers(2000, 2012), concept_maps), min_size=0, max_size=6)


@settings(max_examples=80)
@given(pub_lists, st.lists(pub_lists, min_size=1, max_size=6), st.sampled_from([0.0, 0.3, 0.5, 1.0]))
def test_match_equals_exhaustive_argmin_random(mp, pools, beta_p):
    m = ScholarProfile("m", {2000: {"FR"}}, [pub(y, c) for y, c in mp])
    pool = [ScholarProfile(f"c{k}", {2000: {"FR"}}, [pub(y, c) for y, c in p]) for k, p in enumerate(pools)]
    ref = reference_deltas(mp, {c.author_id: raw(c) for c in pool}, 2008, beta_p)
    best = exhaustive_argmin(ref.items(), lambda d: d)
    got = match_controls(m, pool, ORIGIN, 2008, beta_p)
    assert got.control_id == best[1]
    assert got.delta == pytest.approx(best[0], abs=1e-12)


def test_match_all_with_replacement(scholars):
    ev = fx.EXPECTED_EVENTS[0]
    twin = MigrationEvent("m99", "FR", "DE", 2009, 2010, 0, 2009)
    scholars["m99"] = ScholarProfile("m99", scholars["m01"].yearly_affiliations, scholars["m01"].publications)
    pairs = match_all([ev, twin], scholars)
    assert [(p.migrant_id, p.control_id, p.stratum) for p in pairs] == [
        ("m01", "c01", ORIGIN), ("m01", "d01", DESTINATION), ("m99", "c01", ORIGIN), ("m99", "d01", DESTINATION),
    ]


def test_match_all_reports_missing_stratum(scholars):
    del scholars["d01"]
    diag = Counter()
    pairs = match_all(fx.EXPECTED_EVENTS, scholars, diagnostics=diag)
    assert [p.stratum for p in pairs] == [ORIGIN]
    assert diag["no_destination_controls"] == 1


# ---- flows ---------------------------------------------------------------


def test_fixture_flows(scholars):
    events = identify_migrants(scholars.values())
    pairs = match_all(events, scholars)
    assert rows(aggregate_flows(scholars, events, pairs, "collaboration")) == fx.EXPECTED_COLLAB_FLOWS
    assert rows(aggregate_flows(scholars, events, pairs, "citation")) == fx.EXPECTED_CITE_FLOWS


def test_three_scholar_averages():
    profiles = {
        "A": ScholarProfile("A", {2009: {"FR"}, 2011: {"DE"}}, [pub(2009, coauthors={"FR"}), pub(2011, coauthors={"DE", "GB"})]),
        "B": ScholarProfile("B", {2011: {"FR"}, 2013: {"US"}}, [pub(2011, coauthors={"FR", "US"}), pub(2013, coauthors={"US"})]),
        "C": ScholarProfile("C", {2011: {"FR"}}, [pub(2011, coauthors={"FR", "DE"})]),
    }
    events = [MigrationEvent("A", "FR", "DE", 2009, 2011, 0, 2010), MigrationEvent("B", "FR", "US", 2011, 2013, 0, 2012)]
    pairs = [mobility.MatchPair("A", "C", ORIGIN, 0.0), mobility.MatchPair("B", "C", ORIGIN, 0.0)]
    assert rows(aggregate_flows(profiles, events, pairs)) == [
        (-1, "migrant", 1.0, 0.5, 0.0),
        (1, "migrant", 0.0, 1.0, 0.5),
        (-1, "origin_control", 0.5, 0.0, 0.5),
        (1, "origin_control", 0.5, 0.5, 0.0),
    ]
    assert rows(aggregate_flows(profiles, events, pairs, "citation")) == []


def test_all_origin_coauthors_pre_move():
    p = ScholarProfile("A", span("FR", 2005, 2009), [pub(y, coauthors={"FR"}) for y in range(2005, 2009)])
    ev = MigrationEvent("A", "FR", "DE", 2009, 2010, 0, 2009)
    for r in aggregate_flows({"A": p}, [ev], []):
        assert r.relative_year < 0
        assert r.origin_avg / (r.origin_avg + r.destination_avg + r.other_avg) == 1.0


@settings(max_examples=50)
@given(st.lists(st.tuples(st.integers(2000, 2020), st.sets(st.sampled_from(["FR", "DE", "US", "JP"]))), max_size=12))
def test_split_sums_to_total(pubs):
    p = ScholarProfile("A", {2000: {"FR"}}, [pub(y, coauthors=c) for y, c in pubs])
    ev = MigrationEvent("A", "FR", "DE", 2009, 2010, 0, 2009)
    per_year = mobility.scholar_year_counts(p, "collaboration")
    for r in aggregate_flows({"A": p}, [ev], []):
        assert r.origin_avg + r.destination_avg + r.other_avg == sum(per_year[r.relative_year + 2009].values())


def test_unknown_flow_kind():
    with pytest.raises(ValueError):
        aggregate_flows({}, [], [], "views")


# ---- I/O -----------------------------------------------------------------


def test_jsonl_roundtrip(tmp_path, scholars):
    path = tmp_path / "scholars.jsonl"
    path.write_text("".join(mobility.profile_to_json(p) + "\n" for p in scholars.values()))
    back = mobility.read_scholars(path)
    assert set(back) == set(scholars)
    for sid, p in scholars.items():
        assert back[sid].yearly_affiliations == p.yearly_affiliations
        assert back[sid].publications == p.publications


@pytest.mark.parametrize(
    "line",
    [
        "{not json",
        '{"author_id": "x", "affiliations": {"2000": ["France"]}}',
        '{"author_id": "x", "affiliations": {"2000": ["FR"]}, "publications": [{"year": 2001}]}',
        '{"affiliations": {}}',
    ],
)
def test_schema_errors_carry_line(tmp_path, line):
    path = tmp_path / "s.jsonl"
    path.write_text('{"author_id": "ok", "affiliations": {"2000": ["FR"]}}\n' + line + "\n")
    with pytest.raises(SchemaError, match=":2:"):
        mobility.read_scholars(path)


def test_row_roundtrips():
    ev = fx.EXPECTED_EVENTS[0]
    assert mobility.event_from_row(dict(zip(mobility.MIGRANT_HEADER, map(str, mobility.event_row(ev))))) == ev
    mp = mobility.MatchPair("m", "c", ORIGIN, 0.25)
    assert mobility.match_from_row(dict(zip(mobility.MATCH_HEADER, map(str, mobility.match_row(mp))))) == mp
