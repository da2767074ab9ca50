"""Internationally mobile scholars: identification, control matching, flow tables."""

from __future__ import annotations

import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .ingest import SchemaError, _COUNTRY_RE

log = logging.getLogger(__name__)

ORIGIN = "origin"
DESTINATION = "destination"
GROUPS = ("migrant", "origin_control", "destination_control")

# exclusion reason codes
NON_MIGRANT = "non_migrant"
EARLY_START = "first_pub_before_window"
THIRD_COUNTRY = "third_country"
AMBIGUOUS_ORIGIN = "ambiguous_origin"
MULTIPLE_TRANSITIONS = "multiple_transitions"
OVERLAP = "overlap_exceeds_cap"
GAP = "gap_exceeds_cap"
SHORT_PRE = "insufficient_pre_record"
SHORT_POST = "insufficient_post_record"
NO_RECORD = "no_publications"


@dataclass(frozen=True)
class ScholarPublication:
    year: int
    concepts: Mapping[str, float] = field(default_factory=dict)
    coauthor_countries: frozenset = frozenset()
    # citing year -> citing country -> count
    citations: Mapping[int, Mapping[str, int]] = field(default_factory=dict)


@dataclass
class ScholarProfile:
    author_id: str
    yearly_affiliations: dict[int, frozenset]
    publications: list[ScholarPublication] = field(default_factory=list)

    def __post_init__(self):
        self.yearly_affiliations = {int(y): frozenset(c) for y, c in self.yearly_affiliations.items() if c}

    @property
    def first_pub_year(self) -> int:
        years = [p.year for p in self.publications] or list(self.yearly_affiliations)
        if not years:
            raise ValueError(f"scholar {self.author_id} has no publication record")
        return min(years)

    @property
    def last_pub_year(self) -> int:
        return max([p.year for p in self.publications] or list(self.yearly_affiliations))

    def countries(self) -> frozenset:
        return frozenset().union(*self.yearly_affiliations.values()) if self.yearly_affiliations else frozenset()

    def is_non_migrant(self) -> bool:
        return len(self.countries()) == 1

    def home_country(self) -> str:
        (c,) = self.countries()
        return c

    def publications_before(self, year: int) -> list[ScholarPublication]:
        return [p for p in self.publications if p.year < year]


@dataclass(frozen=True)
class MobilityConfig:
    min_first_year: int = 2000
    min_record_years: int = 5
    min_pubs: int = 3
    max_overlap: int = 2
    # largest allowed number of calendar years strictly between t_a and t_b
    max_gap: int = 2
    beta_p: float = 0.5

    def __post_init__(self):
        if not 0 <= self.beta_p <= 1:
            raise ValueError("beta_p must lie in [0, 1]")


@dataclass(frozen=True)
class MigrationEvent:
    author_id: str
    origin: str
    destination: str
    t_a: int
    t_b: int
    overlap_years: int
    t_m: int

    def __post_init__(self):
        if self.origin == self.destination:
            raise ValueError("origin and destination must differ")


@dataclass(frozen=True)
class MatchPair:
    migrant_id: str
    control_id: str
    stratum: str
    delta: float


class NoEligibleControls(ValueError):
    def __init__(self, author_id: str = "", stratum: str = ""):
        detail = f" for {author_id} ({stratum})" if author_id else ""
        super().__init__("no eligible controls" + detail)


def move_year(t_a: int, t_b: int) -> int:
    """Floor of the midpoint between the last origin and first destination year."""
    return (2 * t_a + abs(t_b - t_a)) // 2


def classify(profile: ScholarProfile, config: MobilityConfig = MobilityConfig()) -> MigrationEvent | str:
    """The scholar's migration event, or the reason code for excluding them."""
    aff = profile.yearly_affiliations
    if not aff or not profile.publications:
        return NO_RECORD
    countries = profile.countries()
    if len(countries) == 1:
        return NON_MIGRANT
    if profile.first_pub_year < config.min_first_year:
        return EARLY_START
    if len(countries) > 2:
        return THIRD_COUNTRY
    years = sorted(aff)
    if len(aff[years[0]]) != 1:
        return AMBIGUOUS_ORIGIN
    (origin,) = aff[years[0]]
    (dest,) = countries - {origin}
    t_a = max(y for y in years if origin in aff[y])
    t_b = min(y for y in years if dest in aff[y])
    for y in years:
        expected = {origin} if y < t_b else {dest} if y > t_a else {origin, dest}
        if aff[y] != expected:
            return MULTIPLE_TRANSITIONS
    overlap = sum(1 for y in years if aff[y] == {origin, dest})
    if overlap > config.max_overlap:
        return OVERLAP
    if t_b - t_a > config.max_gap + 1:
        return GAP
    t_m = move_year(t_a, t_b)
    pre = [p for p in profile.publications if p.year < t_m]
    post = [p for p in profile.publications if p.year > t_m]
    if t_m - profile.first_pub_year < config.min_record_years or len(pre) < config.min_pubs:
        return SHORT_PRE
    if profile.last_pub_year - t_m < config.min_record_years or len(post) < config.min_pubs:
        return SHORT_POST
    return MigrationEvent(profile.author_id, origin, dest, t_a, t_b, overlap, t_m)


def identify_migrants(
    profiles: Iterable[ScholarProfile], config: MobilityConfig = MobilityConfig(), diagnostics: Counter | None = None
) -> list[MigrationEvent]:
    """Migration events sorted by author id; exclusion reasons are tallied in ``diagnostics``."""
    out = []
    for p in sorted(profiles, key=lambda p: p.author_id):
        res = classify(p, config)
        if isinstance(res, MigrationEvent):
            out.append(res)
        elif diagnostics is not None:
            diagnostics[res] += 1
    return out


def validate_event(event: MigrationEvent, profile: ScholarProfile, config: MobilityConfig = MobilityConfig()) -> list[str]:
    """Re-derive every inclusion predicate from scratch; returns the violated ones."""
    bad = []
    aff = profile.yearly_affiliations
    if profile.first_pub_year < config.min_first_year:
        bad.append(EARLY_START)
    if set().union(*aff.values()) != {event.origin, event.destination}:
        bad.append(THIRD_COUNTRY)
    if any(event.destination in c for y, c in aff.items() if y < event.t_b) or any(
        event.origin in c for y, c in aff.items() if y > event.t_a
    ):
        bad.append(MULTIPLE_TRANSITIONS)
    both = [y for y, c in aff.items() if event.origin in c and event.destination in c]
    if len(both) != event.overlap_years or event.overlap_years > config.max_overlap:
        bad.append(OVERLAP)
    if event.t_b - event.t_a > config.max_gap + 1:
        bad.append(GAP)
    if event.t_m != move_year(event.t_a, event.t_b):
        bad.append("move_year")
    n_pre = sum(p.year < event.t_m for p in profile.publications)
    n_post = sum(p.year > event.t_m for p in profile.publications)
    if n_pre < config.min_pubs or event.t_m - profile.first_pub_year < config.min_record_years:
        bad.append(SHORT_PRE)
    if n_post < config.min_pubs or profile.last_pub_year - event.t_m < config.min_record_years:
        bad.append(SHORT_POST)
    return bad


# --------------------------------------------------------------------------
# matching


def publication_volume_distance(migrant: ScholarProfile, control: ScholarProfile, t_m: int) -> float:
    return float(abs(len(control.publications_before(t_m)) - len(migrant.publications_before(t_m))))


def concept_vector(profile: ScholarProfile, t_m: int) -> dict[str, float]:
    v: dict[str, float] = defaultdict(float)
    for p in profile.publications_before(t_m):
        for c, w in p.concepts.items():
            v[c] += w
    return dict(v)


def concept_similarity(migrant: ScholarProfile, control: ScholarProfile, t_m: int) -> float:
    a, b = concept_vector(migrant, t_m), concept_vector(control, t_m)
    return float(sum(w * b[c] for c, w in sorted(a.items()) if c in b))


def composite_distances(
    migrant: ScholarProfile, pool: Sequence[ScholarProfile], t_m: int, beta_p: float = 0.5
) -> np.ndarray:
    """Composite distance of every control in ``pool``; a 0/0 term counts as 0."""
    if not pool:
        raise NoEligibleControls(migrant.author_id)
    dp = np.array([publication_volume_distance(migrant, c, t_m) for c in pool])
    va = concept_vector(migrant, t_m)
    sc = np.array([sum(w * concept_vector(c, t_m).get(k, 0.0) for k, w in sorted(va.items())) for c in pool])
    vol = dp / dp.max() if dp.max() > 0 else np.zeros(len(pool))
    top = 1.0 - sc / sc.max() if sc.max() > 0 else np.zeros(len(pool))
    return beta_p * vol + (1.0 - beta_p) * top


def composite_distance(
    migrant: ScholarProfile, control: ScholarProfile, pool: Sequence[ScholarProfile], t_m: int, beta_p: float = 0.5
) -> float:
    ids = [c.author_id for c in pool]
    if control.author_id not in ids:
        raise ValueError(f"control {control.author_id} is not in the pool")
    return float(composite_distances(migrant, pool, t_m, beta_p)[ids.index(control.author_id)])


def eligible_pool(
    event: MigrationEvent, migrant: ScholarProfile, controls: Iterable[ScholarProfile], stratum: str
) -> list[ScholarProfile]:
    country = event.origin if stratum == ORIGIN else event.destination
    y = migrant.first_pub_year
    return sorted(
        (c for c in controls if c.is_non_migrant() and c.home_country() == country and c.first_pub_year == y),
        key=lambda c: c.author_id,
    )


def match_controls(
    migrant: ScholarProfile, pool: Sequence[ScholarProfile], stratum: str, t_m: int, beta_p: float = 0.5
) -> MatchPair:
    """Control with the smallest composite distance; ties go to the smallest author id."""
    if not pool:
        raise NoEligibleControls(migrant.author_id, stratum)
    deltas = composite_distances(migrant, pool, t_m, beta_p)
    best = min(range(len(pool)), key=lambda k: (deltas[k], pool[k].author_id))
    return MatchPair(migrant.author_id, pool[best].author_id, stratum, float(deltas[best]))


def match_all(
    events: Sequence[MigrationEvent],
    profiles: Mapping[str, ScholarProfile],
    config: MobilityConfig = MobilityConfig(),
    diagnostics: Counter | None = None,
) -> list[MatchPair]:
    """Origin and destination matches for every event, with replacement."""
    controls = [p for _, p in sorted(profiles.items()) if p.is_non_migrant()]
    out = []
    for ev in sorted(events, key=lambda e: e.author_id):
        m = profiles[ev.author_id]
        for stratum in (ORIGIN, DESTINATION):
            try:
                out.append(match_controls(m, eligible_pool(ev, m, controls, stratum), stratum, ev.t_m, config.beta_p))
            except NoEligibleControls:
                log.info("no %s controls for %s", stratum, ev.author_id)
                if diagnostics is not None:
                    diagnostics[f"no_{stratum}_controls"] += 1
    return out


# --------------------------------------------------------------------------
# flows


@dataclass(frozen=True)
class FlowRow:
    relative_year: int
    group: str
    origin_avg: float
    destination_avg: float
    other_avg: float


def _split(counts: Mapping[str, int], origin: str, dest: str) -> tuple[int, int, int]:
    o = counts.get(origin, 0)
    d = counts.get(dest, 0)
    return o, d, sum(counts.values()) - o - d


def scholar_year_counts(profile: ScholarProfile, kind: str) -> dict[int, Counter]:
    """Per calendar year, country counts of coauthorships or incoming citations.

    Coauthorships count each distinct coauthor country once per publication.
    """
    out: dict[int, Counter] = defaultdict(Counter)
    for p in profile.publications:
        if kind == "collaboration":
            for c in p.coauthor_countries:
                out[p.year][c] += 1
        else:
            for y, by_country in p.citations.items():
                out[int(y)].update(by_country)
    return dict(out)


def aggregate_flows(
    profiles: Mapping[str, ScholarProfile],
    events: Sequence[MigrationEvent],
    matches: Sequence[MatchPair],
    kind: str = "collaboration",
) -> list[FlowRow]:
    """Average origin/destination/other counts per relative year and group.

    Each migrant and each matched control (one per match, so a reused
    control counts once per migrant) is placed on the migrant's time axis
    ``year - t_m`` and classified against the migrant's O and D.  Averages
    divide by the number of scholars in the group, so years without
    activity count as zero.  Rows exist only for relative years where some
    scholar in the group has a record.
    """
    if kind not in ("collaboration", "citation"):
        raise ValueError(f"unknown flow kind {kind!r}")
    by_id = {e.author_id: e for e in events}
    members: dict[str, list[tuple[str, MigrationEvent]]] = {g: [] for g in GROUPS}
    for ev in sorted(events, key=lambda e: e.author_id):
        members["migrant"].append((ev.author_id, ev))
    for m in sorted(matches, key=lambda m: (m.migrant_id, m.stratum)):
        ev = by_id.get(m.migrant_id)
        if ev is None:
            continue
        members[f"{m.stratum}_control"].append((m.control_id, ev))
    rows = []
    for group in GROUPS:
        scholars = members[group]
        if not scholars:
            continue
        sums: dict[int, list[int]] = defaultdict(lambda: [0, 0, 0])
        for sid, ev in scholars:
            for y, counts in scholar_year_counts(profiles[sid], kind).items():
                o, d, x = _split(counts, ev.origin, ev.destination)
                s = sums[y - ev.t_m]
                s[0] += o
                s[1] += d
                s[2] += x
        n = len(scholars)
        for r in sorted(sums):
            o, d, x = sums[r]
            rows.append(FlowRow(r, group, o / n, d / n, x / n))
    return rows


# --------------------------------------------------------------------------
# I/O


def _parse_profile(obj: dict, path, line: int) -> ScholarProfile:
    try:
        aid = obj["author_id"]
        if not isinstance(aid, str) or not aid:
            raise SchemaError(path, line, "author_id must be a non-empty string")
        aff = {}
        for y, cs in obj.get("affiliations", {}).items():
            for c in cs:
                if not isinstance(c, str) or not _COUNTRY_RE.match(c):
                    raise SchemaError(path, line, f"country {c!r} is not an ISO-3166 alpha-2 code")
            aff[int(y)] = frozenset(cs)
        pubs = []
        for p in obj.get("publications", []):
            cites = {int(y): {str(c): int(n) for c, n in v.items()} for y, v in p.get("citations", {}).items()}
            pubs.append(
                ScholarPublication(
                    int(p["year"]),
                    {str(c): float(w) for c, w in p.get("concepts", {}).items()},
                    frozenset(p.get("coauthor_countries", [])),
                    cites,
                )
            )
    except SchemaError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise SchemaError(path, line, f"malformed scholar record: {exc!r}") from None
    for p in pubs:
        if p.year not in aff:
            raise SchemaError(path, line, f"publication year {p.year} has no affiliation entry")
    return ScholarProfile(aid, aff, pubs)


def read_scholars(path) -> dict[str, ScholarProfile]:
    out: dict[str, ScholarProfile] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise SchemaError(path, lineno, f"invalid JSON: {exc.msg}") from None
            prof = _parse_profile(obj, path, lineno)
            if prof.author_id in out:
                raise SchemaError(path, lineno, f"duplicate author_id {prof.author_id!r}")
            out[prof.author_id] = prof
    return out


def profile_to_json(p: ScholarProfile) -> str:
    obj = {
        "author_id": p.author_id,
        "affiliations": {str(y): sorted(c) for y, c in sorted(p.yearly_affiliations.items())},
        "publications": [
            {
                "year": q.year,
                "concepts": dict(sorted(q.concepts.items())),
                "coauthor_countries": sorted(q.coauthor_countries),
                "citations": {str(y): dict(sorted(v.items())) for y, v in sorted(q.citations.items())},
            }
            for q in p.publications
        ],
    }
    return json.dumps(obj, sort_keys=True)


MIGRANT_HEADER = ["author_id", "origin", "destination", "t_a", "t_b", "overlap_years", "t_m"]
MATCH_HEADER = ["migrant_id", "control_id", "stratum", "delta"]
FLOW_HEADER = ["relative_year", "group", "origin_avg", "destination_avg", "other_avg"]


def event_row(e: MigrationEvent) -> list:
    return [e.author_id, e.origin, e.destination, e.t_a, e.t_b, e.overlap_years, e.t_m]


def event_from_row(row: Mapping[str, str]) -> MigrationEvent:
    return MigrationEvent(
        row["author_id"], row["origin"], row["destination"], int(row["t_a"]), int(row["t_b"]),
        int(row["overlap_years"]), int(row["t_m"]),
    )


def match_row(m: MatchPair) -> list:
    return [m.migrant_id, m.control_id, m.stratum, m.delta]


def match_from_row(row: Mapping[str, str]) -> MatchPair:
    return MatchPair(row["migrant_id"], row["control_id"], row["stratum"], float(row["delta"]))


def flow_row(r: FlowRow) -> list:
    return [r.relative_year, r.group, r.origin_avg, r.destination_avg, r.other_avg]
