"""Small on-disk corpus and a driver that runs every CLI subcommand."""

import json
from pathlib import Path

import numpy as np

from geoflux import cli, mobility
from geoflux.geo import GeoPoint, destination

import mobility_fixture

# four countries, three raw cities each; "FR-1" holds two far-apart campuses
CAPITALS = {"FR": (48.8, 2.3), "DE": (52.5, 13.4), "US": (40.7, -74.0), "JP": (35.7, 139.7)}


def _cities():
    out = []
    for country, (lat, lon) in CAPITALS.items():
        for k in range(3):
            pt = destination(GeoPoint(lat, lon), 2.1 * k, 150.0 * k)
            out.append((f"{country}-{k}", country, pt))
    return out


def write_corpus(root: Path) -> dict[str, Path]:
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(2024)
    cities = _cities()
    orgs = []
    for raw, _, pt in cities:
        for k in range(3):
            orgs.append((f"{raw}/o{k}", raw, destination(pt, 1.0 * k, 2.0 * k)))
    far = destination(cities[1][2], 0.0, 120.0)
    orgs.append(("FR-1/far", "FR-1", far))
    with open(root / "orgs.csv", "w", encoding="utf-8") as fh:
        fh.write("org_id,raw_city_id,lat,lon\n")
        for oid, raw, pt in orgs:
            fh.write(f"{oid},{raw},{pt.latitude!r},{pt.longitude!r}\n")

    pubs = []
    for n in range(600):
        year = 2000 + int(rng.integers(0, 3))
        k = int(rng.integers(1, 4))
        picks = rng.choice(len(cities), size=k, replace=False)
        refs = []
        for c in picks:
            raw, country, pt = cities[c]
            jitter = destination(pt, float(rng.uniform(0, 6.28)), float(rng.uniform(0, 3)))
            if raw == "FR-1" and rng.random() < 0.3:
                jitter = far
            refs.append({"city_id": raw, "country": country, "lat": jitter.latitude, "lon": jitter.longitude})
        earlier = [p["work_id"] for p in pubs if p["year"] < year]
        cited = list(rng.choice(earlier, size=min(3, len(earlier)), replace=False)) if earlier else []
        pubs.append({
            "work_id": f"W{n:04d}",
            "year": year,
            "field": "phys" if n % 3 else "bio",
            "authors": [f"A{int(a)}" for a in rng.integers(0, 400, size=2)],
            "cities": refs,
            "refs": [str(c) for c in cited],
        })
    with open(root / "publications.jsonl", "w", encoding="utf-8") as fh:
        for p in pubs:
            fh.write(json.dumps(p, sort_keys=True) + "\n")

    with open(root / "scholars.jsonl", "w", encoding="utf-8") as fh:
        for p in mobility_fixture.scholars().values():
            fh.write(mobility.profile_to_json(p) + "\n")

    scenario = {"n_cities": 40, "n_countries": 3, "log_alpha": -5.0, "seed": 7}
    (root / "scenario.json").write_text(json.dumps(scenario))
    config = {
        "filters": {"city_threshold": 5, "min_cities_per_country": 3},
        "gravity": {"lower_km": 1.0, "upper_km": 20000.0, "n_bins": 12},
        "fit": {"max_lag": 2},
    }
    (root / "config.json").write_text(json.dumps(config))
    return {k: root / v for k, v in {
        "orgs": "orgs.csv", "publications": "publications.jsonl", "scholars": "scholars.jsonl",
        "scenario": "scenario.json", "config": "config.json",
    }.items()}


def run_pipeline(inputs: dict[str, Path], out: Path, jobs: int = 1) -> dict[str, bytes]:
    """Run every subcommand into ``out``; returns {relative path: bytes}."""
    common = ["--config", str(inputs["config"]), "--seed", "3", "--jobs", str(jobs)]
    d = {name: out / name for name in ("cluster", "network", "gravity", "fit", "sim", "recover", "mig")}
    steps = [
        ["cluster-cities", "--orgs", str(inputs["orgs"])],
        ["build-network", "--publications", str(inputs["publications"]), "--city-map", str(d["cluster"] / "city_map.csv")],
        ["gravity", "--edges", str(d["network"] / "edges_collab.csv")],
        ["fit", "--edges", str(d["network"] / "edges_collab.csv")],
        ["simulate", "--scenario", str(inputs["scenario"])],
        ["recover", "--scenario", str(inputs["scenario"]), "--n-seeds", "3"],
    ]
    outs = ["cluster", "network", "gravity", "fit", "sim", "recover"]
    for argv, key in zip(steps, outs):
        code = cli.main(argv + common + ["--out", str(d[key])])
        if code != 0:
            raise AssertionError(f"{argv[0]} exited {code}")
    sch = str(inputs["scholars"])
    mig = d["mig"]
    for argv, sub in (
        (["migrants", "identify", "--scholars", sch], "identify"),
        (["migrants", "match", "--scholars", sch, "--migrants", str(mig / "identify" / "migrants.csv")], "match"),
        (["migrants", "flows", "--scholars", sch, "--migrants", str(mig / "identify" / "migrants.csv"),
          "--matches", str(mig / "match" / "matches.csv")], "flows"),
    ):
        code = cli.main(argv + common + ["--out", str(mig / sub)])
        if code != 0:
            raise AssertionError(f"migrants {sub} exited {code}")
    return {str(p.relative_to(out)): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}
