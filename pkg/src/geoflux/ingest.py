"""Publication records, inclusion filters and city-level edge lists.

``publications.jsonl`` holds one work per line::

    {"work_id": "W1", "year": 2010, "field": "Physical Sciences",
     "authors": ["A1", "A2"],
     "cities": [{"city_id": "paris", "country": "FR", "lat": 48.85, "lon": 2.35}],
     "refs": ["W0"]}

Edge lists are CSV with fixed headers and rows sorted lexicographically by
key, so identical inputs give byte-identical files.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .geo import GeoPoint

log = logging.getLogger(__name__)

COLLABORATION = "collaboration"
CITATION = "citation"

COLLAB_HEADER = ["src_city", "dst_city", "year", "field", "weight"]
CITE_HEADER = ["citing_city", "cited_city", "citing_year", "cited_year", "field", "weight"]
EXPOSURE_HEADER = ["city_id", "year", "n"]
CITY_HEADER = ["city_id", "country", "lat", "lon"]

_COUNTRY_RE = re.compile(r"^[A-Z]{2}$")


class SchemaError(ValueError):
    """An input file violates its documented schema."""

    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


@dataclass(frozen=True)
class CityRef:
    city_id: str
    country: str
    point: GeoPoint | None = None


@dataclass
class Publication:
    work_id: str
    year: int
    field_tag: str
    author_ids: list[str]
    city_refs: list[CityRef]
    refs: list[str] = field(default_factory=list)

    def cities(self) -> list[str]:
        return sorted({c.city_id for c in self.city_refs})


@dataclass(frozen=True, order=True)
class EdgeRecord:
    src_city: str
    dst_city: str
    year_src: int
    year_dst: int
    field_tag: str
    kind: str
    weight: int = 1


@dataclass(frozen=True, order=True)
class CityYearCount:
    city_id: str
    year: int
    pub_count: int


@dataclass(frozen=True)
class City:
    city_id: str
    country: str
    point: GeoPoint


# --------------------------------------------------------------------------
# reading


def _require(obj, key, typ, path, line):
    if key not in obj:
        raise SchemaError(path, line, f"missing key {key!r}")
    val = obj[key]
    if typ is int and isinstance(val, bool) or not isinstance(val, typ):
        raise SchemaError(path, line, f"key {key!r} must be {typ.__name__}")
    return val


def parse_publication(obj: dict, path="<memory>", line: int = 0) -> Publication:
    if not isinstance(obj, dict):
        raise SchemaError(path, line, "record is not an object")
    work_id = _require(obj, "work_id", str, path, line)
    year = _require(obj, "year", int, path, line)
    field_tag = obj.get("field", "")
    if not isinstance(field_tag, str):
        raise SchemaError(path, line, "key 'field' must be str")
    authors = _require(obj, "authors", list, path, line)
    if not all(isinstance(a, str) for a in authors):
        raise SchemaError(path, line, "authors must be strings")
    refs = obj.get("refs", [])
    if not isinstance(refs, list) or not all(isinstance(r, str) for r in refs):
        raise SchemaError(path, line, "refs must be a list of strings")
    cities = []
    for c in _require(obj, "cities", list, path, line):
        if not isinstance(c, dict):
            raise SchemaError(path, line, "city entry is not an object")
        city_id = _require(c, "city_id", str, path, line)
        country = _require(c, "country", str, path, line)
        if not _COUNTRY_RE.match(country):
            raise SchemaError(path, line, f"country {country!r} is not an ISO-3166 alpha-2 code")
        point = None
        if "lat" in c or "lon" in c:
            try:
                point = GeoPoint(float(c["lat"]), float(c["lon"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise SchemaError(path, line, f"bad coordinates for {city_id!r}: {exc}") from None
        cities.append(CityRef(city_id, country, point))
    return Publication(work_id, year, field_tag, list(authors), cities, list(refs))


def read_publications(path) -> list[Publication]:
    pubs = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise SchemaError(path, lineno, f"invalid JSON: {exc.msg}") from None
            pub = parse_publication(obj, path, lineno)
            if pub.work_id in seen:
                raise SchemaError(path, lineno, f"duplicate work_id {pub.work_id!r}")
            seen.add(pub.work_id)
            pubs.append(pub)
    return pubs


# --------------------------------------------------------------------------
# filters


def city_year_counts(pubs: Iterable[Publication]) -> list[CityYearCount]:
    """Distinct works with at least one authorship in each city-year."""
    counts: Counter = Counter()
    for pub in pubs:
        for city in pub.cities():
            counts[city, pub.year] += 1
    return sorted(CityYearCount(c, y, n) for (c, y), n in counts.items())


def filter_cities(counts: Iterable[CityYearCount], threshold: int = 50) -> set[str]:
    """Cities reaching ``threshold`` publications in at least one year."""
    return {c.city_id for c in counts if c.pub_count >= threshold}


def filter_countries(cities: Iterable[str], city_country: Mapping[str, str], min_cities: int = 3) -> set[str]:
    per_country = Counter(city_country[c] for c in set(cities))
    return {k for k, n in per_country.items() if n >= min_cities}


def top_decile_cities(counts: Iterable[CityYearCount], fraction: float = 0.1) -> set[str]:
    """Top ``fraction`` of cities by total publications; ties at the cutoff are kept."""
    totals: Counter = Counter()
    for c in counts:
        totals[c.city_id] += c.pub_count
    if not totals:
        return set()
    k = max(1, math.ceil(round(fraction * len(totals), 9)))
    ranked = sorted(totals.values(), reverse=True)
    cutoff = ranked[k - 1]
    return {c for c, n in totals.items() if n >= cutoff}


def restrict_to_cities(pubs: Iterable[Publication], keep: set[str]) -> list[Publication]:
    """Drop city references outside ``keep``; works left without cities are dropped."""
    out = []
    for pub in pubs:
        refs = [c for c in pub.city_refs if c.city_id in keep]
        if refs:
            out.append(Publication(pub.work_id, pub.year, pub.field_tag, pub.author_ids, refs, pub.refs))
    return out


def remove_self_citations(
    references: Iterable[tuple[str, str]], authorships: Mapping[str, Iterable[str]]
) -> list[tuple[str, str]]:
    """Drop references whose citing and cited works share an author."""
    authors = {w: set(a) for w, a in authorships.items()}
    return [(a, b) for a, b in references if not (authors.get(a, set()) & authors.get(b, set()))]


# --------------------------------------------------------------------------
# edges


def build_collab_edges(pubs: Iterable[Publication]) -> list[EdgeRecord]:
    """Undirected city pairs, counted once per publication."""
    weights: Counter = Counter()
    for pub in pubs:
        for a, b in combinations(pub.cities(), 2):
            weights[a, b, pub.year, pub.field_tag] += 1
    return sorted(
        EdgeRecord(a, b, y, y, f, COLLABORATION, w) for (a, b, y, f), w in weights.items()
    )


def build_citation_edges(
    pubs: Iterable[Publication],
    references: Iterable[tuple[str, str]],
    diagnostics: Counter | None = None,
) -> list[EdgeRecord]:
    """Directed citing-city -> cited-city pairs over the cross product of city sets.

    References to or from works not in ``pubs`` are skipped and counted
    under ``"dangling_reference"`` in ``diagnostics``; intra-city pairs are
    kept and counted under ``"intra_city_pair"``.
    """
    by_id = {p.work_id: p for p in pubs}
    weights: Counter = Counter()
    for citing, cited in references:
        a, b = by_id.get(citing), by_id.get(cited)
        if a is None or b is None:
            if diagnostics is not None:
                diagnostics["dangling_reference"] += 1
            continue
        for ca in a.cities():
            for cb in b.cities():
                weights[ca, cb, a.year, b.year, a.field_tag] += 1
                if ca == cb and diagnostics is not None:
                    diagnostics["intra_city_pair"] += 1
    return sorted(
        EdgeRecord(ca, cb, ya, yb, f, CITATION, w) for (ca, cb, ya, yb, f), w in weights.items()
    )


def collab_lookup(edges: Iterable[EdgeRecord]) -> dict[tuple[str, str], int]:
    """Total collaboration weight per pair, answering (A, B) and (B, A) alike."""
    out: dict[tuple[str, str], int] = defaultdict(int)
    for e in edges:
        out[e.src_city, e.dst_city] += e.weight
        if e.src_city != e.dst_city:
            out[e.dst_city, e.src_city] += e.weight
    return dict(out)


def references_of(pubs: Iterable[Publication]) -> list[tuple[str, str]]:
    return sorted((p.work_id, r) for p in pubs for r in p.refs)


# --------------------------------------------------------------------------
# cities


def city_table(pubs: Iterable[Publication], city_map: Mapping[str, Sequence] | None = None) -> dict[str, City]:
    """City coordinates as the mean of all reference positions per city.

    A city mentioned under two different countries is a schema error.
    """
    lats: dict[str, list[float]] = defaultdict(list)
    lons: dict[str, list[float]] = defaultdict(list)
    country: dict[str, str] = {}
    for pub in pubs:
        for ref in pub.city_refs:
            prev = country.setdefault(ref.city_id, ref.country)
            if prev != ref.country:
                raise ValueError(f"city {ref.city_id!r} listed under {prev} and {ref.country}")
            if ref.point is not None:
                lats[ref.city_id].append(ref.point.latitude)
                lons[ref.city_id].append(ref.point.longitude)
    out = {}
    for cid, cc in sorted(country.items()):
        if not lats[cid]:
            raise ValueError(f"city {cid!r} has no coordinates")
        out[cid] = City(cid, cc, GeoPoint(math.fsum(lats[cid]) / len(lats[cid]), math.fsum(lons[cid]) / len(lons[cid])))
    return out


def apply_city_map(pubs: Iterable[Publication], sub_cities: Mapping[str, Sequence[tuple[str, GeoPoint]]]) -> list[Publication]:
    """Re-label each city reference with the nearest sub-city of its raw city.

    ``sub_cities`` maps a raw city id to ``(sub_city_id, centroid)`` pairs.
    The reference's own coordinates choose the sub-city; its position is
    replaced by the sub-city centroid.
    """
    from .geo import haversine

    out = []
    for pub in pubs:
        refs = []
        for ref in pub.city_refs:
            subs = sub_cities.get(ref.city_id)
            if not subs:
                refs.append(ref)
                continue
            if ref.point is None or len(subs) == 1:
                sid, pt = subs[0]
            else:
                sid, pt = min(subs, key=lambda s: (haversine(ref.point, s[1]), s[0]))
            refs.append(CityRef(sid, ref.country, pt))
        out.append(Publication(pub.work_id, pub.year, pub.field_tag, pub.author_ids, refs, pub.refs))
    return out


# --------------------------------------------------------------------------
# CSV I/O


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_rows(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(x) for x in row])


def read_rows(path, header: Sequence[str]) -> list[dict[str, str]]:
    """Read a CSV whose header must equal ``header``; errors carry line numbers."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            got = next(reader)
        except StopIteration:
            raise SchemaError(path, 1, "empty file, expected header " + ",".join(header)) from None
        if got != list(header):
            raise SchemaError(path, 1, f"expected header {','.join(header)}, got {','.join(got)}")
        rows = []
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(header):
                raise SchemaError(path, lineno, f"expected {len(header)} columns, got {len(row)}")
            rows.append(dict(zip(header, row)))
    return rows


def _as_int(value: str, path, line: int, name: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise SchemaError(path, line, f"{name} must be an integer, got {value!r}") from None


def _as_float(value: str, path, line: int, name: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise SchemaError(path, line, f"{name} must be a number, got {value!r}") from None


def write_collab_edges(path, edges: Iterable[EdgeRecord]) -> None:
    write_rows(path, COLLAB_HEADER, ((e.src_city, e.dst_city, e.year_src, e.field_tag, e.weight) for e in sorted(edges)))


def write_citation_edges(path, edges: Iterable[EdgeRecord]) -> None:
    write_rows(
        path,
        CITE_HEADER,
        ((e.src_city, e.dst_city, e.year_src, e.year_dst, e.field_tag, e.weight) for e in sorted(edges)),
    )


def sniff_edge_kind(path) -> str:
    with open(path, encoding="utf-8", newline="") as fh:
        first = fh.readline().strip()
    if first == ",".join(CITE_HEADER):
        return CITATION
    if first == ",".join(COLLAB_HEADER):
        return COLLABORATION
    raise SchemaError(path, 1, f"unrecognized edge header {first!r}")


def read_edges(path, kind: str | None = None) -> list[EdgeRecord]:
    kind = kind or sniff_edge_kind(path)
    header = CITE_HEADER if kind == CITATION else COLLAB_HEADER
    out = []
    for lineno, row in enumerate(read_rows(path, header), 2):
        w = _as_int(row["weight"], path, lineno, "weight")
        if w < 0:
            raise SchemaError(path, lineno, "weight must be non-negative")
        if kind == CITATION:
            ya = _as_int(row["citing_year"], path, lineno, "citing_year")
            yb = _as_int(row["cited_year"], path, lineno, "cited_year")
            out.append(EdgeRecord(row["citing_city"], row["cited_city"], ya, yb, row["field"], CITATION, w))
        else:
            a, b = row["src_city"], row["dst_city"]
            if b < a:
                a, b = b, a
            y = _as_int(row["year"], path, lineno, "year")
            out.append(EdgeRecord(a, b, y, y, row["field"], COLLABORATION, w))
    return out


def write_exposures(path, counts: Iterable[CityYearCount]) -> None:
    write_rows(path, EXPOSURE_HEADER, ((c.city_id, c.year, c.pub_count) for c in sorted(counts)))


def read_exposures(path) -> dict[tuple[str, int], int]:
    out = {}
    for lineno, row in enumerate(read_rows(path, EXPOSURE_HEADER), 2):
        n = _as_int(row["n"], path, lineno, "n")
        if n < 0:
            raise SchemaError(path, lineno, "n must be non-negative")
        out[row["city_id"], _as_int(row["year"], path, lineno, "year")] = n
    return out


def write_cities(path, cities: Iterable[City]) -> None:
    write_rows(
        path,
        CITY_HEADER,
        ((c.city_id, c.country, c.point.latitude, c.point.longitude) for c in sorted(cities, key=lambda c: c.city_id)),
    )


def read_cities(path) -> dict[str, City]:
    out = {}
    for lineno, row in enumerate(read_rows(path, CITY_HEADER), 2):
        try:
            pt = GeoPoint(_as_float(row["lat"], path, lineno, "lat"), _as_float(row["lon"], path, lineno, "lon"))
        except SchemaError:
            raise
        except ValueError as exc:
            raise SchemaError(path, lineno, str(exc)) from None
        out[row["city_id"]] = City(row["city_id"], row["country"], pt)
    return out


def edges_path(directory, kind: str) -> Path:
    return Path(directory) / ("edges_cite.csv" if kind == CITATION else "edges_collab.csv")
