"""Command-line entry point: ``geoflux <subcommand> [options]``.

Every subcommand writes its outputs plus ``manifest.json`` (input and output
hashes, resolved config, seed, tool version) into ``--out``.  Exit status is
0 on success, 1 for invalid usage or input, 2 for runtime failures.  Logs go
to stderr; set ``GEOFLUX_LOG`` to a level name (``INFO``, ``DEBUG``) for
more detail.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import re
import sys
from collections import Counter, defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from importlib import resources
from pathlib import Path

import jsonschema

from . import __version__, cluster, gravity, ingest, mobility, model, synth
from .geo import GeoPoint

log = logging.getLogger("geoflux")

DEFAULT_CONFIG = {
    "seed": 0,
    "jobs": 1,
    "filters": {"city_threshold": 50, "min_cities_per_country": 3, "remove_self_citations": True},
    "field_map": {},
    "cluster": {"gamma": cluster.DEFAULT_GAMMA, "n_restarts": 20},
    "gravity": {"lower_km": 1.0, "upper_km": 20000.0, "n_bins": 25},
    "fit": {"max_lag": 5},
    "mobility": {},
}


class UsageError(Exception):
    """Invalid flags, configuration or input files (exit status 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# config and provenance


def load_schema() -> dict:
    return json.loads(resources.files("geoflux").joinpath("config_schema.json").read_text(encoding="utf-8"))


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(path: str | None, overrides: dict) -> dict:
    user = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                user = json.load(fh)
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from None
        try:
            jsonschema.validate(user, load_schema())
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise UsageError(f"{path}: config error at {where}: {exc.message}") from None
    cfg = _merge(DEFAULT_CONFIG, user)
    return _merge(cfg, {k: v for k, v in overrides.items() if v is not None})


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, inputs: dict, outputs: list[Path]) -> Path:
    """Provenance record; contains nothing that varies between identical reruns."""
    cfg = {k: v for k, v in config.items() if k != "jobs"}
    manifest = {
        "tool": "geoflux",
        "version": __version__,
        "command": command,
        "seed": config.get("seed"),
        "config": cfg,
        "inputs": {k: {"file": Path(p).name, "sha256": sha256(p)} for k, p in sorted(inputs.items()) if p},
        "outputs": {Path(p).name: sha256(p) for p in sorted(outputs)},
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _require_file(path, what: str) -> str:
    if path is None or not Path(path).is_file():
        raise UsageError(f"{what} not found: {path}")
    return str(path)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _slug(s: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", s) or "all"


def _pool_map(fn, tasks, jobs: int):
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, tasks))
    return [fn(t) for t in tasks]


# --------------------------------------------------------------------------
# subcommands


ORG_HEADER = ["org_id", "raw_city_id", "lat", "lon"]
CITY_MAP_HEADER = ["org_id", "sub_city_id", "centroid_lat", "centroid_lon"]


def _cluster_task(task):
    orgs, gamma, seed, n_restarts = task
    graph = cluster.build_distance_graph(orgs)
    part = cluster.optimize_partition(graph, gamma, seed, n_restarts)
    by_id = {o.org_id: o for o in orgs}
    raw = orgs[0].raw_city_id
    return [
        cluster.SubCity(f"{raw}#{k}", cluster.centroid([by_id[m].point for m in members]), tuple(members))
        for k, members in enumerate(part.clusters())
    ]


def cmd_cluster_cities(args, cfg) -> tuple[dict, list[Path]]:
    path = _require_file(args.orgs, "orgs file")
    groups = defaultdict(list)
    seen = set()
    for lineno, row in enumerate(ingest.read_rows(path, ORG_HEADER), 2):
        if row["org_id"] in seen:
            raise ingest.SchemaError(path, lineno, f"duplicate org_id {row['org_id']!r}")
        seen.add(row["org_id"])
        try:
            pt = GeoPoint(float(row["lat"]), float(row["lon"]))
        except ValueError as exc:
            raise ingest.SchemaError(path, lineno, str(exc)) from None
        groups[row["raw_city_id"]].append(cluster.OrgLocation(row["org_id"], row["raw_city_id"], pt))
    c = cfg["cluster"]
    tasks = [(groups[k], c["gamma"], cfg["seed"], c["n_restarts"]) for k in sorted(groups)]
    results = _pool_map(_cluster_task, tasks, cfg["jobs"])
    rows = []
    for subs in results:
        for s in subs:
            for m in s.members:
                rows.append([m, s.sub_city_id, s.centroid.latitude, s.centroid.longitude])
    out = _out_dir(args)
    target = out / "city_map.csv"
    ingest.write_rows(target, CITY_MAP_HEADER, sorted(rows))
    return {"orgs": path}, [target]


def read_city_map(path) -> dict[str, list[tuple[str, GeoPoint]]]:
    subs: dict[str, dict[str, GeoPoint]] = defaultdict(dict)
    for lineno, row in enumerate(ingest.read_rows(path, CITY_MAP_HEADER), 2):
        sid = row["sub_city_id"]
        if "#" not in sid:
            raise ingest.SchemaError(path, lineno, f"sub_city_id {sid!r} lacks the raw#index form")
        raw = sid.rsplit("#", 1)[0]
        try:
            subs[raw][sid] = GeoPoint(float(row["centroid_lat"]), float(row["centroid_lon"]))
        except ValueError as exc:
            raise ingest.SchemaError(path, lineno, str(exc)) from None
    return {raw: sorted(d.items()) for raw, d in subs.items()}


def cmd_build_network(args, cfg) -> tuple[dict, list[Path]]:
    path = _require_file(args.publications, "publications file")
    pubs = ingest.read_publications(path)
    diag: Counter = Counter()
    f = cfg["filters"]
    lo, hi = f.get("year_min"), f.get("year_max")
    if lo is not None or hi is not None:
        kept = [p for p in pubs if (lo is None or p.year >= lo) and (hi is None or p.year <= hi)]
        diag["outside_year_window"] += len(pubs) - len(kept)
        pubs = kept
    fmap = cfg.get("field_map") or {}
    if fmap:
        mapped = []
        for p in pubs:
            if p.field_tag in fmap:
                mapped.append(ingest.Publication(p.work_id, p.year, fmap[p.field_tag], p.author_ids, p.city_refs, p.refs))
            else:
                diag["unmapped_field"] += 1
        pubs = mapped
    inputs = {"publications": path}
    if args.city_map:
        inputs["city_map"] = _require_file(args.city_map, "city map")
        pubs = ingest.apply_city_map(pubs, read_city_map(args.city_map))
    all_pubs = pubs
    counts = ingest.city_year_counts(pubs)
    table = ingest.city_table(pubs)
    cities = ingest.filter_cities(counts, f["city_threshold"])
    countries = ingest.filter_countries(cities, {c: table[c].country for c in table}, f["min_cities_per_country"])
    keep = {c for c in cities if table[c].country in countries}
    diag["cities_total"] = len(table)
    diag["cities_kept"] = len(keep)
    pubs = ingest.restrict_to_cities(pubs, keep)
    refs = ingest.references_of(pubs)
    if f.get("remove_self_citations", True):
        before = len(refs)
        refs = ingest.remove_self_citations(refs, {p.work_id: p.author_ids for p in all_pubs})
        diag["self_citation"] += before - len(refs)
    collab = ingest.build_collab_edges(pubs)
    cites = ingest.build_citation_edges(pubs, refs, diag)
    out = _out_dir(args)
    paths = [out / "cities.csv", out / "exposures.csv", out / "edges_collab.csv", out / "edges_cite.csv"]
    ingest.write_cities(paths[0], [table[c] for c in keep])
    ingest.write_exposures(paths[1], [c for c in counts if c.city_id in keep])
    ingest.write_collab_edges(paths[2], collab)
    ingest.write_citation_edges(paths[3], cites)
    paths.append(_write_json(out / "diagnostics.json", dict(sorted(diag.items()))))
    return inputs, paths


CURVE_HEADER = ["bin_lo", "bin_hi", "n_pairs", "n_linked", "p_link", "mean_ratio"]


def _curve_rows(curve):
    return [[b.lower_km, b.upper_km, b.n_pairs, b.n_linked, b.p_link, b.mean_ratio] for b in curve]


def cmd_gravity(args, cfg) -> tuple[dict, list[Path]]:
    epath = _require_file(args.edges, "edges file")
    kind = args.kind or ingest.sniff_edge_kind(epath)
    edges = ingest.read_edges(epath, kind)
    if not any(e.weight > 0 for e in edges):
        raise ValueError("insufficient bins")
    cpath = _require_file(args.cities or str(Path(epath).parent / "cities.csv"), "cities file")
    cities = ingest.read_cities(cpath)
    g = cfg["gravity"]
    analysis = gravity.analyze(edges, cities, gravity.BinSpec(g["lower_km"], g["upper_km"], g["n_bins"]), kind)
    out = _out_dir(args)
    paths = []
    for name, curve in analysis.curves.items():
        p = out / ("gravity_curve.csv" if name == "all" else f"gravity_curve_{name}.csv")
        ingest.write_rows(p, CURVE_HEADER, _curve_rows(curve))
        paths.append(p)
    top = analysis.primary
    fit = {
        "b": top.exponent_b,
        "stderr": top.stderr_b,
        "r2": top.r_squared,
        "n_bins": top.n_bins,
        "kind": kind,
        "fits": [f.to_dict() for f in analysis.fits],
        "diagnostics": dict(sorted(analysis.diagnostics.items())),
    }
    paths.append(_write_json(out / "gravity_fit.json", fit))
    return {"edges": epath, "cities": cpath}, paths


def _fit_task(task):
    data, config, kind = task
    return model.fit_map(data, config, kind)


def _fit_config(cfg) -> tuple[model.FitConfig, int]:
    f = dict(cfg["fit"])
    max_lag = f.pop("max_lag", 5)
    f["seed"] = cfg["seed"]
    return model.FitConfig.from_dict(f), max_lag


def cmd_fit(args, cfg) -> tuple[dict, list[Path]]:
    epath = _require_file(args.edges, "edges file")
    kind = args.kind or ingest.sniff_edge_kind(epath)
    edges = ingest.read_edges(epath, kind)
    base = Path(epath).parent
    cpath = _require_file(args.cities or str(base / "cities.csv"), "cities file")
    xpath = _require_file(args.exposures or str(base / "exposures.csv"), "exposures file")
    cities = ingest.read_cities(cpath)
    exposures = ingest.read_exposures(xpath)
    config, max_lag = _fit_config(cfg)
    if args.max_lag is not None:
        max_lag = args.max_lag
    keys = sorted({(e.field_tag, e.year_src) for e in edges})
    if args.field is not None:
        keys = [k for k in keys if k[0] == args.field]
    if args.year is not None:
        keys = [k for k in keys if k[1] == args.year]
    if not keys:
        raise ValueError("no edges match the requested field/year")
    tasks = []
    for field_tag, year in keys:
        data = model.build_dyads(cities, exposures, edges, kind, year, field_tag, max_lag)
        if len(data) == 0:
            raise ValueError(f"no dyads for field {field_tag!r}, year {year}")
        tasks.append((data, config, kind))
    results = _pool_map(_fit_task, tasks, cfg["jobs"])
    out = _out_dir(args)
    paths = []
    failed = []
    for (field_tag, year), res in zip(keys, results):
        stem = f"{_slug(field_tag)}_{year}"
        doc = res.to_dict()
        doc.update({"field": field_tag, "year": year, "max_lag": max_lag, "seed": cfg["seed"]})
        paths.append(_write_json(out / f"fit_{stem}.json", doc))
        pm = model.preference_matrix(res)
        p = out / f"preference_matrix_{stem}.csv"
        ingest.write_rows(p, pm.header(), pm.rows())
        paths.append(p)
        if not res.converged:
            failed.append(stem)
    if failed:
        log.warning("fits did not converge: %s", ", ".join(failed))
    return {"edges": epath, "cities": cpath, "exposures": xpath}, paths


def _scenario(args, cfg) -> tuple[synth.Scenario, str | None]:
    if args.scenario:
        path = _require_file(args.scenario, "scenario file")
        try:
            sc = synth.Scenario.load(path)
        except (TypeError, json.JSONDecodeError) as exc:
            raise UsageError(f"{path}: invalid scenario: {exc}") from None
    else:
        path, sc = None, synth.Scenario()
    if args.seed is not None:
        sc = replace(sc, seed=args.seed)
    cfg["seed"] = sc.seed
    return sc, path


def cmd_simulate(args, cfg) -> tuple[dict, list[Path]]:
    sc, path = _scenario(args, cfg)
    world = synth.simulate(sc, args.replicate)
    out = _out_dir(args)
    paths = synth.write_world(world, sc, out)
    cfg["scenario"] = asdict(sc)
    return {"scenario": path}, paths


def cmd_recover(args, cfg) -> tuple[dict, list[Path]]:
    sc, path = _scenario(args, cfg)
    config, _ = _fit_config(cfg)
    report = synth.recovery_experiment(sc, args.n_seeds, config, cfg["jobs"])
    out = _out_dir(args)
    p1 = out / "recovery.csv"
    ingest.write_rows(p1, synth.RECOVERY_HEADER, report.rows())
    p2 = _write_json(out / "recovery_summary.json", report.summary())
    cfg["scenario"] = asdict(sc)
    return {"scenario": path}, [p1, p2]


def _mobility_config(cfg) -> mobility.MobilityConfig:
    return mobility.MobilityConfig(**cfg.get("mobility", {}))


def _read_events(path) -> list[mobility.MigrationEvent]:
    return [mobility.event_from_row(r) for r in ingest.read_rows(path, mobility.MIGRANT_HEADER)]


def cmd_migrants(args, cfg) -> tuple[dict, list[Path]]:
    spath = _require_file(args.scholars, "scholars file")
    profiles = mobility.read_scholars(spath)
    mcfg = _mobility_config(cfg)
    out = _out_dir(args)
    inputs = {"scholars": spath}
    if args.action == "identify":
        diag: Counter = Counter()
        events = mobility.identify_migrants(profiles.values(), mcfg, diag)
        p = out / "migrants.csv"
        ingest.write_rows(p, mobility.MIGRANT_HEADER, [mobility.event_row(e) for e in events])
        return inputs, [p, _write_json(out / "migrants_diagnostics.json", dict(sorted(diag.items())))]
    inputs["migrants"] = _require_file(args.migrants, "migrants file")
    events = _read_events(args.migrants)
    unknown = [e.author_id for e in events if e.author_id not in profiles]
    if unknown:
        raise ValueError(f"migrants missing from scholars file: {', '.join(unknown)}")
    if args.action == "match":
        diag = Counter()
        matches = mobility.match_all(events, profiles, mcfg, diag)
        p = out / "matches.csv"
        ingest.write_rows(p, mobility.MATCH_HEADER, [mobility.match_row(m) for m in matches])
        return inputs, [p, _write_json(out / "matches_diagnostics.json", dict(sorted(diag.items())))]
    inputs["matches"] = _require_file(args.matches, "matches file")
    matches = [mobility.match_from_row(r) for r in ingest.read_rows(args.matches, mobility.MATCH_HEADER)]
    paths = []
    for kind, name in (("collaboration", "flows_collab.csv"), ("citation", "flows_cite.csv")):
        rows = mobility.aggregate_flows(profiles, events, matches, kind)
        p = out / name
        ingest.write_rows(p, mobility.FLOW_HEADER, [mobility.flow_row(r) for r in rows])
        paths.append(p)
    return inputs, paths


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (see config_schema.json)")
    common.add_argument("--seed", type=int, help="random seed; overrides the config")
    common.add_argument("--jobs", type=int, help="worker processes; never changes results")
    common.add_argument("--out", required=True, help="output directory")

    parser = _Parser(prog="geoflux", description="Distance and country effects in collaboration and citation networks.")
    parser.add_argument("--version", action="version", version=f"geoflux {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("cluster-cities", parents=[common], help="split raw cities into sub-cities (CPM)")
    p.add_argument("--orgs", required=True, help="orgs.csv: org_id,raw_city_id,lat,lon")
    p.add_argument("--gamma", type=float, help="CPM resolution (default -30)")

    p = sub.add_parser("build-network", parents=[common], help="filter publications and build edge lists")
    p.add_argument("--publications", required=True, help="publications.jsonl")
    p.add_argument("--city-map", help="city_map.csv from cluster-cities")
    p.add_argument("--threshold", type=int, help="minimum publications in some year (default 50)")

    p = sub.add_parser("gravity", parents=[common], help="binned distance curves and power-law fits")
    p.add_argument("--edges", required=True)
    p.add_argument("--cities", help="cities.csv (default: next to the edges file)")
    p.add_argument("--kind", choices=model.KINDS)

    p = sub.add_parser("fit", parents=[common], help="MAP fit of the latent gravity model")
    p.add_argument("--edges", required=True)
    p.add_argument("--cities", help="cities.csv (default: next to the edges file)")
    p.add_argument("--exposures", help="exposures.csv (default: next to the edges file)")
    p.add_argument("--kind", choices=model.KINDS)
    p.add_argument("--field", help="fit only this field tag")
    p.add_argument("--year", type=int, help="fit only this year")
    p.add_argument("--max-lag", type=int, help="largest citation lag in the dyad universe")
    p.add_argument("--no-intervals", action="store_true", help="skip Laplace intervals")

    for name, helptext in (("simulate", "sample a synthetic network"), ("recover", "parameter recovery study")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--scenario", help="scenario.json (default: built-in desk-scale scenario)")
        if name == "simulate":
            p.add_argument("--replicate", type=int, default=0)
        else:
            p.add_argument("--n-seeds", type=int, default=20)

    p = sub.add_parser("migrants", help="migrant identification, matching and flows")
    msub = p.add_subparsers(dest="action", required=True, parser_class=_Parser)
    for action in ("identify", "match", "flows"):
        q = msub.add_parser(action, parents=[common])
        q.add_argument("--scholars", required=True, help="scholars.jsonl")
        if action in ("match", "flows"):
            q.add_argument("--migrants", required=True, help="migrants.csv from identify")
        if action == "flows":
            q.add_argument("--matches", required=True, help="matches.csv from match")
    return parser


COMMANDS = {
    "cluster-cities": cmd_cluster_cities,
    "build-network": cmd_build_network,
    "gravity": cmd_gravity,
    "fit": cmd_fit,
    "simulate": cmd_simulate,
    "recover": cmd_recover,
    "migrants": cmd_migrants,
}


def _overrides(args) -> dict:
    o = {"seed": args.seed, "jobs": args.jobs}
    if getattr(args, "gamma", None) is not None:
        o["cluster"] = {"gamma": args.gamma}
    if getattr(args, "threshold", None) is not None:
        o["filters"] = {"city_threshold": args.threshold}
    if getattr(args, "no_intervals", False):
        o["fit"] = {"intervals": False}
    return o


def _configure_logging():
    level = os.environ.get("GEOFLUX_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING), stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s"
    )


def main(argv=None) -> int:
    _configure_logging()
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    try:
        cfg = resolve_config(args.config, _overrides(args))
        if cfg["jobs"] < 1:
            raise UsageError("--jobs must be at least 1")
        inputs, outputs = COMMANDS[args.command](args, cfg)
        if args.config:
            inputs["config"] = args.config
        command = args.command + (f" {args.action}" if args.command == "migrants" else "")
        manifest = write_manifest(Path(args.out), command, cfg, inputs, outputs)
    except (UsageError, ingest.SchemaError, ValueError) as exc:
        print(f"geoflux: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - report any runtime failure as exit 2
        log.debug("runtime failure", exc_info=True)
        print(f"geoflux: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    for p in [*outputs, manifest]:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
