"""Synthetic spatially embedded dyadic networks drawn from the gravity model.

Every random draw comes from a ``numpy`` Generator seeded by
``SeedSequence([seed, replicate])``, so a replicate's data never depends
on how many replicates run or in which process.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ingest, model
from .geo import GeoPoint, destination, haversine_matrix

log = logging.getLogger(__name__)

MAX_RATE = 1e12
JITTER_FLOOR_KM = 1.0


@dataclass
class Scenario:
    """A synthetic world plus the parameters that generate its interactions.

    ``log_alpha``/``beta``/``domestic`` and ``theta_sd`` define the true
    parameters; ``log_theta`` is drawn per replicate so that each seed sees
    a fresh set of city propensities.  ``domestic`` is the planted
    diagonal of ``log_C``; off-diagonal entries take ``-domestic/(K-1)``
    so every row sums to zero.
    """

    n_cities: int = 200
    n_countries: int = 5
    dispersion_km: float = 300.0
    exposure_median: float = 100.0
    exposure_sigma: float = 1.0
    kind: str = model.COLLABORATION
    log_alpha: float = -7.0
    beta: float = 0.45
    domestic: float = 0.5
    theta_sd: float | None = None
    mu: float = 1.0
    sigma: float = 1.0
    max_lag: int = 5
    year: int = 2000
    field_tag: str = "synthetic"
    seed: int = 0

    def __post_init__(self):
        if not self.n_cities >= self.n_countries >= 1:
            raise ValueError("need n_cities >= n_countries >= 1")
        if self.dispersion_km < 0 or self.exposure_sigma < 0 or self.exposure_median <= 0:
            raise ValueError("invalid placement or exposure parameters")
        if self.beta < 0 or self.sigma <= 0 or self.max_lag < 0:
            raise ValueError("invalid model parameters")
        if self.kind not in model.KINDS:
            raise ValueError(f"unknown kind {self.kind!r}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d) -> "Scenario":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown scenario keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "Scenario":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def citation_scenario(**kw) -> Scenario:
    """Default citation world: weak distance decay, strong volume."""
    base = dict(kind=model.CITATION, beta=0.02, log_alpha=-9.0, max_lag=3)
    base.update(kw)
    return Scenario(**base)


@dataclass
class SynthCity:
    city_id: str
    country: str
    point: GeoPoint
    n: int


@dataclass
class SynthWorld:
    cities: list[SynthCity]
    truth: model.ModelParams
    data: model.DyadData

    @property
    def city_country(self) -> np.ndarray:
        return self.data.city_country


def replicate_rng(seed: int, replicate: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(replicate)]))


def country_code(k: int) -> str:
    if k >= 26 * 26:
        raise ValueError("at most 676 synthetic countries")
    return chr(65 + k // 26) + chr(65 + k % 26)


def generate_cities(scenario: Scenario, rng: np.random.Generator | None = None) -> list[SynthCity]:
    """Place capitals uniformly on the sphere and scatter cities around them.

    Every country gets at least one city; remaining cities go to countries
    uniformly at random.  A city lies at a uniform-area random position
    within ``dispersion_km`` of its capital, but never closer than 1 km.
    """
    rng = rng if rng is not None else replicate_rng(scenario.seed)
    K, N = scenario.n_countries, scenario.n_cities
    z = rng.uniform(-1.0, 1.0, K)
    caps_lat = np.degrees(np.arcsin(z))
    caps_lon = rng.uniform(-180.0, 180.0, K)
    country = np.concatenate([np.arange(K), rng.integers(0, K, N - K)])
    radius = np.maximum(scenario.dispersion_km * np.sqrt(rng.random(N)), JITTER_FLOOR_KM)
    bearing = rng.uniform(0.0, 2 * math.pi, N)
    n = np.exp(math.log(scenario.exposure_median) + scenario.exposure_sigma * rng.standard_normal(N))
    n = np.maximum(np.rint(n), 1).astype(int)
    width = len(str(N - 1))
    out = []
    for k in range(N):
        c = int(country[k])
        pt = destination(GeoPoint(caps_lat[c], caps_lon[c]), bearing[k], radius[k])
        out.append(SynthCity(f"c{k:0{width}d}", country_code(c), pt, int(n[k])))
    return out


def true_params(scenario: Scenario, rng: np.random.Generator | None = None) -> model.ModelParams:
    rng = rng if rng is not None else replicate_rng(scenario.seed)
    N, K = scenario.n_cities, scenario.n_countries
    sd = scenario.theta_sd if scenario.theta_sd is not None else math.sqrt(1.0 / N)
    lt = sd * rng.standard_normal(N)
    lt -= lt.mean()
    if K == 1:
        lc = np.zeros((1, 1))
    else:
        lc = np.full((K, K), -scenario.domestic / (K - 1))
        np.fill_diagonal(lc, scenario.domestic)
    return model.ModelParams(scenario.log_alpha, scenario.beta, lt, lc, scenario.mu, scenario.sigma)


# --------------------------------------------------------------------------
# Poisson sampling


def _ptrs(lam: float, rng: np.random.Generator) -> int:
    # transformed rejection with squeeze (Hormann 1993); valid for lam >= 10
    slam = math.sqrt(lam)
    loglam = math.log(lam)
    b = 0.931 + 2.53 * slam
    a = -0.059 + 0.02483 * b
    invalpha = 1.1239 + 1.1328 / (b - 3.4)
    vr = 0.9277 - 3.6224 / (b - 2)
    while True:
        u = rng.random() - 0.5
        v = rng.random()
        us = 0.5 - abs(u)
        k = math.floor((2 * a / us + b) * u + lam + 0.43)
        if us >= 0.07 and v <= vr:
            return k
        if k < 0 or (us < 0.013 and v > us):
            continue
        if math.log(v) + math.log(invalpha) - math.log(a / (us * us) + b) <= -lam + k * loglam - math.lgamma(k + 1):
            return k


def poisson(lam, rng: np.random.Generator) -> np.ndarray:
    """Poisson draws with a fixed algorithm: inversion below 10, PTRS above.

    Inversion consumes one uniform per element, in order; PTRS elements
    are then drawn in index order from the same stream.
    """
    lam = np.asarray(lam, dtype=float)
    if np.any(lam < 0) or not np.all(np.isfinite(lam)):
        raise ValueError("Poisson rates must be finite and non-negative")
    flat = lam.ravel()
    out = np.zeros(flat.shape, dtype=np.int64)
    small = flat < 10
    idx = np.flatnonzero(small)
    if len(idx):
        ls = flat[idx]
        u = rng.random(len(idx))
        p = np.exp(-ls)
        cdf = p.copy()
        k = np.zeros(len(idx), dtype=np.int64)
        active = u > cdf
        step = 0
        while active.any() and step < 200:
            step += 1
            k[active] += 1
            p[active] *= ls[active] / k[active]
            cdf[active] += p[active]
            active &= u > cdf
        out[idx] = k
    for i in np.flatnonzero(~small):
        out[i] = _ptrs(float(flat[i]), rng)
    return out.reshape(lam.shape)


# --------------------------------------------------------------------------
# networks


def dyad_universe(cities: Sequence[SynthCity], kind: str, max_lag: int = 0) -> model.DyadData:
    """All dyads over ``cities`` with zero weights; cities keep their list order."""
    ids = [c.city_id for c in cities]
    countries = sorted({c.country for c in cities})
    cidx = {c: k for k, c in enumerate(countries)}
    cc = np.array([cidx[c.country] for c in cities], dtype=np.int64)
    D = haversine_matrix([c.point.latitude for c in cities], [c.point.longitude for c in cities])
    n = np.array([c.n for c in cities], dtype=float)
    N = len(cities)
    if kind == model.COLLABORATION:
        i, j = np.triu_indices(N, 1)
        t = np.zeros(len(i), dtype=np.int64)
    else:
        a, b = np.nonzero(~np.eye(N, dtype=bool))
        lags = max_lag + 1
        i, j = np.repeat(a, lags), np.repeat(b, lags)
        t = np.tile(np.arange(lags), len(a))
    keep = D[i, j] > 0
    if not keep.all():
        log.warning("%d co-located dyads dropped", int((~keep).sum()))
        i, j, t = i[keep], j[keep], t[keep]
    return model.DyadData(i, j, n[i], n[j], D[i, j], cc[i], cc[j], np.zeros(len(i)), t, ids, countries, city_country=cc)


def sample_network(
    cities: Sequence[SynthCity],
    params: model.ModelParams,
    kind: str,
    rng: np.random.Generator | int = 0,
    max_lag: int = 5,
) -> model.DyadData:
    """Poisson weights for the full dyad universe, zero-weight dyads retained."""
    if not isinstance(rng, np.random.Generator):
        rng = replicate_rng(rng)
    data = dyad_universe(cities, kind, max_lag if kind == model.CITATION else 0)
    lam = model.rate(params, data, kind) if len(data) else np.zeros(0)
    lam = np.asarray(lam, dtype=float)
    if np.any(~np.isfinite(lam)) or np.any(lam > MAX_RATE):
        raise ValueError("scenario produces degenerate rates")
    return data.with_weights(poisson(lam, rng))


def simulate(scenario: Scenario, replicate: int = 0) -> SynthWorld:
    rng = replicate_rng(scenario.seed, replicate)
    cities = generate_cities(scenario, rng)
    truth = true_params(scenario, rng)
    data = sample_network(cities, truth, scenario.kind, rng, scenario.max_lag)
    return SynthWorld(cities, truth, data)


def expected_total(cities: Sequence[SynthCity], params: model.ModelParams, kind: str, max_lag: int = 5) -> float:
    data = dyad_universe(cities, kind, max_lag if kind == model.CITATION else 0)
    return float(np.sum(model.rate(params, data, kind)))


def mean_loglik_per_dyad(data: model.DyadData, params: model.ModelParams, kind: str) -> float:
    return model.log_likelihood(params, data, kind) / max(len(data), 1)


# --------------------------------------------------------------------------
# file output, same schemas as ingest


def world_edges(world: SynthWorld, scenario: Scenario) -> list[ingest.EdgeRecord]:
    d = world.data
    out = []
    for k in np.flatnonzero(d.w > 0):
        a, b = d.cities[d.i[k]], d.cities[d.j[k]]
        if scenario.kind == model.COLLABORATION:
            y = scenario.year
            out.append(ingest.EdgeRecord(min(a, b), max(a, b), y, y, scenario.field_tag, model.COLLABORATION, int(d.w[k])))
        else:
            y = scenario.year
            out.append(ingest.EdgeRecord(a, b, y, y - int(d.t[k]), scenario.field_tag, model.CITATION, int(d.w[k])))
    return out


def write_world(world: SynthWorld, scenario: Scenario, out_dir) -> list[Path]:
    """Write cities, exposures, edges and truth; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [out_dir / "cities.csv", out_dir / "exposures.csv", ingest.edges_path(out_dir, scenario.kind), out_dir / "truth.json"]
    ingest.write_cities(paths[0], [ingest.City(c.city_id, c.country, c.point) for c in world.cities])
    lags = scenario.max_lag if scenario.kind == model.CITATION else 0
    counts = [
        ingest.CityYearCount(c.city_id, scenario.year - t, c.n) for c in world.cities for t in range(lags + 1)
    ]
    ingest.write_exposures(paths[1], counts)
    edges = world_edges(world, scenario)
    if scenario.kind == model.COLLABORATION:
        ingest.write_collab_edges(paths[2], edges)
    else:
        ingest.write_citation_edges(paths[2], edges)
    truth = world.truth.to_dict()
    truth["cities"] = [c.city_id for c in world.cities]
    truth["countries"] = list(world.data.countries)
    paths[3].write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths


# --------------------------------------------------------------------------
# recovery


@dataclass
class SeedOutcome:
    replicate: int
    converged: bool
    beta_hat: float
    beta_lo: float
    beta_hi: float
    log_alpha_hat: float
    diag_above_offdiag: bool
    diag: list[float] = field(default_factory=list)
    error: str = ""


@dataclass
class RecoveryReport:
    scenario: Scenario
    outcomes: list[SeedOutcome]

    @property
    def n_converged(self) -> int:
        return sum(o.converged for o in self.outcomes)

    def beta_hats(self) -> np.ndarray:
        return np.array([o.beta_hat for o in self.outcomes])

    @property
    def bias(self) -> float:
        return float(np.nanmean(self.beta_hats() - self.scenario.beta))

    @property
    def rmse(self) -> float:
        return float(np.sqrt(np.nanmean((self.beta_hats() - self.scenario.beta) ** 2)))

    def n_within(self, tol: float) -> int:
        return int(np.sum(np.abs(self.beta_hats() - self.scenario.beta) <= tol))

    @property
    def n_covered(self) -> int:
        b = self.scenario.beta
        return sum(o.beta_lo <= b <= o.beta_hi for o in self.outcomes)

    @property
    def n_diag_above(self) -> int:
        return sum(o.diag_above_offdiag for o in self.outcomes)

    def summary(self) -> dict:
        return {
            "n_seeds": len(self.outcomes),
            "n_converged": self.n_converged,
            "beta_true": self.scenario.beta,
            "beta_bias": self.bias,
            "beta_rmse": self.rmse,
            "beta_within_0.05": self.n_within(0.05),
            "beta_ci_coverage": self.n_covered,
            "diag_above_offdiag": self.n_diag_above,
        }

    def rows(self) -> list[list]:
        return [
            [o.replicate, int(o.converged), o.beta_hat, o.beta_lo, o.beta_hi, o.log_alpha_hat, int(o.diag_above_offdiag), o.error]
            for o in self.outcomes
        ]


RECOVERY_HEADER = ["seed", "converged", "beta_hat", "beta_lo", "beta_hi", "log_alpha_hat", "diag_above_offdiag", "error"]


def diag_above_offdiag(log_C: np.ndarray) -> bool:
    """Every diagonal entry exceeds the mean of its row's off-diagonal entries."""
    K = log_C.shape[0]
    if K == 1:
        return False
    off = (log_C.sum(axis=1) - np.diag(log_C)) / (K - 1)
    return bool(np.all(np.diag(log_C) > off))


def run_replicate(scenario: Scenario, replicate: int, config: model.FitConfig | None = None) -> SeedOutcome:
    config = config or model.FitConfig()
    world = simulate(scenario, replicate)
    try:
        res = model.fit_map(world.data, config, scenario.kind)
    except (ValueError, RuntimeError) as exc:
        nan = float("nan")
        return SeedOutcome(replicate, False, nan, nan, nan, nan, False, error=str(exc))
    lo, hi = res.intervals["beta"] if res.intervals else (float("nan"), float("nan"))
    return SeedOutcome(
        replicate,
        res.converged,
        res.params.beta,
        float(lo),
        float(hi),
        res.params.log_alpha,
        diag_above_offdiag(res.params.log_C),
        [float(x) for x in np.diag(res.params.log_C)],
        "" if res.converged else res.message,
    )


def _run_star(args):
    return run_replicate(*args)


def recovery_experiment(
    scenario: Scenario, n_seeds: int = 20, config: model.FitConfig | None = None, jobs: int = 1
) -> RecoveryReport:
    """Simulate and refit ``n_seeds`` replicates; results are ordered by replicate."""
    tasks = [(scenario, r, config) for r in range(n_seeds)]
    if jobs > 1 and n_seeds > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_star, tasks))
    else:
        outcomes = [_run_star(t) for t in tasks]
    for o in outcomes:
        if o.error:
            log.warning("replicate %d: %s", o.replicate, o.error)
    return RecoveryReport(scenario, outcomes)


def scaled(scenario: Scenario, factor: float) -> Scenario:
    """Scenario with every rate multiplied by ``factor`` through ``alpha``."""
    return replace(scenario, log_alpha=scenario.log_alpha + math.log(factor))

