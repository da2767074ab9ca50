"""Latent Poisson gravity model for city-to-city collaboration and citation counts.

Collaboration rate between cities ``i`` and ``j``::

    lambda = alpha * n_i theta_i * n_j theta_j / d_ij**beta * C[c_i, c_j]

Citation rate from citing city ``i`` to cited city ``j`` at lag ``t``::

    lambda = alpha * f(t + 0.5) * n_i * n_j theta_j / d_ij**beta * C[c_i, c_j]

with ``f`` a lognormal density.  Counts are Poisson with these rates.  The
geometric means of ``theta`` and of every row of ``C`` are pinned to one,
i.e. ``sum(log_theta) == 0`` and ``log_C.sum(axis=1) == 0``.

Fitting works in reduced coordinates where the last city's ``log_theta``
and the last entry of every ``log_C`` row are implied by the sum-to-zero
constraints, so every point the optimizer visits satisfies them exactly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import gammaln

log = logging.getLogger(__name__)

COLLABORATION = "collaboration"
CITATION = "citation"
KINDS = (COLLABORATION, CITATION)

_LOG_2PI = math.log(2 * math.pi)
_Z95 = 1.959963984540054
SIGMA_FLOOR = 1e-3


class DegenerateCurvature(RuntimeError):
    """Negative log-posterior Hessian is not positive definite at the mode."""

    def __init__(self, eigenvalues):
        self.eigenvalues = np.asarray(eigenvalues)
        super().__init__(
            "degenerate curvature: smallest Hessian eigenvalues "
            + ", ".join(f"{e:.3g}" for e in np.sort(self.eigenvalues)[:5])
        )


def _check_kind(kind: str) -> str:
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
    return kind


@dataclass
class ModelParams:
    log_alpha: float
    beta: float
    log_theta: np.ndarray
    log_C: np.ndarray
    mu: float = 1.0
    sigma: float = 1.0

    def __post_init__(self):
        self.log_theta = np.asarray(self.log_theta, dtype=float)
        self.log_C = np.atleast_2d(np.asarray(self.log_C, dtype=float))
        if self.log_C.shape[0] != self.log_C.shape[1]:
            raise ValueError("log_C must be square")

    @classmethod
    def zeros(cls, n_cities: int, n_countries: int, **kw) -> "ModelParams":
        kw.setdefault("log_alpha", 0.0)
        kw.setdefault("beta", 0.0)
        return cls(log_theta=np.zeros(n_cities), log_C=np.zeros((n_countries, n_countries)), **kw)

    def copy(self) -> "ModelParams":
        return replace(self, log_theta=self.log_theta.copy(), log_C=self.log_C.copy())

    def satisfies_constraints(self, atol: float = 1e-9) -> bool:
        return (
            abs(self.log_theta.sum()) <= atol * max(1, len(self.log_theta))
            and np.all(np.abs(self.log_C.sum(axis=1)) <= atol * max(1, len(self.log_C)))
            and self.beta >= 0
            and self.sigma > 0
        )

    def to_dict(self) -> dict:
        return {
            "log_alpha": float(self.log_alpha),
            "beta": float(self.beta),
            "log_theta": [float(x) for x in self.log_theta],
            "log_C": [[float(x) for x in row] for row in self.log_C],
            "mu": float(self.mu),
            "sigma": float(self.sigma),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelParams":
        return cls(d["log_alpha"], d["beta"], d["log_theta"], d["log_C"], d.get("mu", 1.0), d.get("sigma", 1.0))


@dataclass(frozen=True)
class DyadObservation:
    """One dyad; ``i``/``j`` and ``c_i``/``c_j`` index cities and countries."""

    i: int
    j: int
    n_i: float
    n_j: float
    d_ij: float
    c_i: int
    c_j: int
    w: int = 0
    t: int = 0

    @property
    def d(self) -> float:
        return self.d_ij


@dataclass
class DyadData:
    """Column-oriented dyad table over a fixed city and country indexing."""

    i: np.ndarray
    j: np.ndarray
    n_i: np.ndarray
    n_j: np.ndarray
    d: np.ndarray
    c_i: np.ndarray
    c_j: np.ndarray
    w: np.ndarray
    t: np.ndarray
    cities: tuple[str, ...]
    countries: tuple[str, ...]
    city_country: np.ndarray = field(default=None)

    def __post_init__(self):
        for name in ("i", "j", "c_i", "c_j", "t"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        for name in ("n_i", "n_j", "d", "w"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        self.cities = tuple(self.cities)
        self.countries = tuple(self.countries)
        if self.city_country is None:
            cc = np.full(len(self.cities), -1, dtype=np.int64)
            cc[self.i] = self.c_i
            cc[self.j] = self.c_j
            self.city_country = cc
        else:
            self.city_country = np.asarray(self.city_country, dtype=np.int64)
        if np.any(self.d <= 0):
            raise ValueError("dyads must have positive distance")
        if np.any(self.w < 0):
            raise ValueError("weights must be non-negative")
        if np.any(self.n_i <= 0) or np.any(self.n_j <= 0):
            raise ValueError("exposures must be positive")
        if np.any(self.t < 0):
            raise ValueError("citation lags must be non-negative")

    def __len__(self):
        return len(self.w)

    @property
    def n_cities(self) -> int:
        return len(self.cities)

    @property
    def n_countries(self) -> int:
        return len(self.countries)

    @classmethod
    def from_observations(
        cls, obs: Sequence[DyadObservation], cities: Sequence[str] | None = None, countries: Sequence[str] | None = None
    ) -> "DyadData":
        cols = {k: [getattr(o, k) for o in obs] for k in ("i", "j", "n_i", "n_j", "d_ij", "c_i", "c_j", "w", "t")}
        n_city = max([max(cols["i"], default=-1), max(cols["j"], default=-1)]) + 1
        n_country = max([max(cols["c_i"], default=-1), max(cols["c_j"], default=-1)]) + 1
        cities = cities if cities is not None else [str(k) for k in range(n_city)]
        countries = countries if countries is not None else [str(k) for k in range(n_country)]
        return cls(
            cols["i"], cols["j"], cols["n_i"], cols["n_j"], cols["d_ij"], cols["c_i"], cols["c_j"], cols["w"], cols["t"],
            cities, countries,
        )

    def observations(self) -> list[DyadObservation]:
        return [
            DyadObservation(int(a), int(b), float(ni), float(nj), float(dd), int(ca), int(cb), int(ww), int(tt))
            for a, b, ni, nj, dd, ca, cb, ww, tt in zip(
                self.i, self.j, self.n_i, self.n_j, self.d, self.c_i, self.c_j, self.w, self.t
            )
        ]

    def with_weights(self, w) -> "DyadData":
        return replace(self, w=np.asarray(w, dtype=float))


def _as_data(data) -> DyadData:
    if isinstance(data, DyadData):
        return data
    return DyadData.from_observations(list(data))


# --------------------------------------------------------------------------
# rates


def lognormal_aging(t_eff, mu: float, sigma: float):
    """Lognormal density of the (offset) citation lag."""
    t_eff = np.asarray(t_eff, dtype=float)
    if np.any(t_eff <= 0):
        raise ValueError("lognormal aging needs t_eff > 0")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    z = (np.log(t_eff) - mu) / sigma
    out = np.exp(-0.5 * z * z) / (t_eff * sigma * math.sqrt(2 * math.pi))
    return float(out) if out.ndim == 0 else out


def _log_aging(t_eff, mu, sigma):
    lt = np.log(t_eff)
    return -lt - math.log(sigma) - 0.5 * _LOG_2PI - (lt - mu) ** 2 / (2 * sigma * sigma)


def log_rate(params: ModelParams, obs, kind: str = COLLABORATION, lag_offset: float = 0.5):
    kind = _check_kind(kind)
    i, j = np.asarray(obs.i), np.asarray(obs.j)
    d = np.asarray(obs.d, dtype=float)
    eta = (
        params.log_alpha
        + np.log(np.asarray(obs.n_i, dtype=float))
        + np.log(np.asarray(obs.n_j, dtype=float))
        + params.log_theta[j]
        - params.beta * np.log(d)
        + params.log_C[np.asarray(obs.c_i), np.asarray(obs.c_j)]
    )
    if kind == COLLABORATION:
        eta = eta + params.log_theta[i]
    else:
        eta = eta + _log_aging(np.asarray(obs.t, dtype=float) + lag_offset, params.mu, params.sigma)
    return eta


def collab_rate(params: ModelParams, obs):
    """Expected collaboration count for one dyad or a :class:`DyadData` table."""
    out = np.exp(log_rate(params, obs, COLLABORATION))
    return float(out) if np.ndim(out) == 0 else out


def citation_rate(params: ModelParams, obs, lag_offset: float = 0.5):
    """Expected citation count; only the cited city's ``theta`` enters."""
    out = np.exp(log_rate(params, obs, CITATION, lag_offset))
    return float(out) if np.ndim(out) == 0 else out


def rate(params: ModelParams, obs, kind: str, lag_offset: float = 0.5):
    return collab_rate(params, obs) if kind == COLLABORATION else citation_rate(params, obs, lag_offset)


# --------------------------------------------------------------------------
# constraints


def project_constraints(params: ModelParams, kind: str = COLLABORATION, city_country=None) -> ModelParams:
    """Map parameters to the sum-to-zero representative with identical rates.

    The ``log_theta`` mean and a common offset of the ``log_C`` rows are
    moved into ``log_alpha``.  Rows with unequal sums need more than that:
    for collaboration the country gauge ``log_theta[i] += h[c_i]``,
    ``log_C[r, s] -= h[r] + h[s]`` zeroes them, which requires
    ``city_country`` (country index per city).  Citation rates contain only
    the cited city's ``theta`` so no such gauge exists there, and unequal
    row sums raise ``ValueError``, as they do without ``city_country``.
    """
    kind = _check_kind(kind)
    out = params.copy()
    K = out.log_C.shape[0]
    rows = out.log_C.sum(axis=1)
    uneven = np.ptp(rows) > 1e-12 * max(1.0, float(np.abs(rows).max()))
    if uneven and kind == COLLABORATION and city_country is not None:
        # solve K h_r + sum(h) = rows_r
        h = (rows - rows.sum() / (2 * K)) / K
        out.log_C = out.log_C - h[:, None] - h[None, :]
        out.log_theta = out.log_theta + h[np.asarray(city_country)]
        rows = out.log_C.sum(axis=1)
    elif uneven:
        raise ValueError("log_C row sums differ; centering them would change rates")
    offset = rows.mean() / K
    out.log_C = out.log_C - offset
    out.log_alpha = out.log_alpha + offset
    g = out.log_theta.mean()
    out.log_theta = out.log_theta - g
    out.log_alpha = out.log_alpha + (2 * g if kind == COLLABORATION else g)
    return out


def gauge_transform(params: ModelParams, g: float, kind: str = COLLABORATION) -> ModelParams:
    """Scale every ``theta`` by ``exp(g)`` and compensate through ``alpha``."""
    out = params.copy()
    out.log_theta = out.log_theta + g
    out.log_alpha = out.log_alpha - (2 * g if _check_kind(kind) == COLLABORATION else g)
    return out


# --------------------------------------------------------------------------
# posterior


@dataclass(frozen=True)
class FitConfig:
    beta_prior_sd: float = 1.0
    log_alpha_prior_mean: float = -10.0
    log_alpha_prior_var: float = 20.0
    # None means 1 / n_countries and 1 / n_cities (variances)
    log_C_prior_var: float | None = None
    log_theta_prior_var: float | None = None
    mu_prior_mean: float = 1.0
    mu_prior_sd: float = 1.0
    sigma_prior_sd: float = 1.0
    lag_offset: float = 0.5
    tol: float = 1e-9
    grad_tol: float = 1e-4
    max_iter: int = 2000
    seed: int = 0
    # any of "log_alpha", "beta", "log_theta", "log_C", "aging" held at their initial values
    fixed: frozenset = frozenset()
    intervals: bool = True
    fd_step: float = 1e-5

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        object.__setattr__(self, "fixed", frozenset(self.fixed))
        unknown = self.fixed - {"log_alpha", "beta", "log_theta", "log_C", "aging"}
        if unknown:
            raise ValueError(f"unknown fixed parameter groups {sorted(unknown)}")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["fixed"] = sorted(self.fixed)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "FitConfig":
        d = dict(d)
        if "fixed" in d:
            d["fixed"] = frozenset(d["fixed"])
        return cls(**d)


def _normal_logpdf(x, mean, var):
    return -0.5 * (_LOG_2PI + np.log(var)) - (x - mean) ** 2 / (2 * var)


def log_prior(params: ModelParams, config: FitConfig | None = None, kind: str = COLLABORATION) -> float:
    config = config or FitConfig()
    N, K = len(params.log_theta), params.log_C.shape[0]
    if params.beta < 0:
        return -np.inf
    c_var = config.log_C_prior_var or 1.0 / K
    t_var = config.log_theta_prior_var or 1.0 / max(N, 1)
    lp = math.log(2) + _normal_logpdf(params.beta, 0.0, config.beta_prior_sd**2)
    lp += _normal_logpdf(params.log_alpha, config.log_alpha_prior_mean, config.log_alpha_prior_var)
    lp += np.sum(_normal_logpdf(params.log_C, 0.0, c_var))
    lp += np.sum(_normal_logpdf(params.log_theta, 0.0, t_var))
    if kind == CITATION:
        if params.sigma <= 0:
            return -np.inf
        lp += _normal_logpdf(params.mu, config.mu_prior_mean, config.mu_prior_sd**2)
        lp += math.log(2) + _normal_logpdf(params.sigma, 0.0, config.sigma_prior_sd**2)
    return float(lp)


def log_likelihood(params: ModelParams, data, kind: str = COLLABORATION, lag_offset: float = 0.5) -> float:
    """Poisson log-likelihood ``sum(w log lambda - lambda - log w!)``."""
    data = _as_data(data)
    if len(data) == 0:
        return 0.0
    eta = log_rate(params, data, kind, lag_offset)
    with np.errstate(over="ignore"):
        lam = np.exp(eta)
    bad = np.flatnonzero(~np.isfinite(lam) | ~np.isfinite(eta) & (data.w > 0))
    if len(bad):
        k = int(bad[0])
        raise ValueError(
            f"non-finite rate for dyad {k} ({data.cities[data.i[k]]} -> {data.cities[data.j[k]]}): lambda={lam[k]}"
        )
    wlog = np.where(data.w > 0, data.w * eta, 0.0)
    return float(np.sum(wlog - lam - gammaln(data.w + 1)))


def log_posterior(params: ModelParams, data, config: FitConfig | None = None, kind: str = COLLABORATION) -> float:
    """Log-likelihood plus log-prior (normal priors parameterized by variance)."""
    config = config or FitConfig()
    return log_likelihood(params, data, kind, config.lag_offset) + log_prior(params, config, kind)


class Posterior:
    """Log-posterior and analytic gradient in reduced coordinates.

    Layout of the reduced vector ``z``: ``log_alpha, beta,
    log_theta[:-1], log_C[:, :-1] (row-major), mu, sigma`` with the aging
    pair present only for citation.  Groups listed in ``config.fixed``
    are removed from ``z`` and held at ``base``.
    """

    def __init__(self, data, config: FitConfig | None = None, kind: str = COLLABORATION, base: ModelParams | None = None):
        self.data = _as_data(data)
        self.config = config or FitConfig()
        self.kind = _check_kind(kind)
        N, K = self.data.n_cities, self.data.n_countries
        self.N, self.K = N, K
        self.base = base.copy() if base is not None else ModelParams.zeros(N, K, beta=0.5)
        sizes = {
            "log_alpha": 1,
            "beta": 1,
            "log_theta": max(N - 1, 0),
            "log_C": K * (K - 1),
            "aging": 2 if self.kind == CITATION else 0,
        }
        self.slices: dict[str, slice] = {}
        pos = 0
        for name, size in sizes.items():
            if name in self.config.fixed or size == 0:
                continue
            self.slices[name] = slice(pos, pos + size)
            pos += size
        self.dim = pos
        d = self.data
        self._log_d = np.log(d.d)
        self._log_nn = np.log(d.n_i) + np.log(d.n_j)
        self._cell = d.c_i * K + d.c_j
        self._lgw = gammaln(d.w + 1).sum()
        self._pos = d.w > 0
        if self.kind == CITATION:
            self._log_t = np.log(d.t + self.config.lag_offset)
        self.c_var = self.config.log_C_prior_var or 1.0 / K
        self.t_var = self.config.log_theta_prior_var or 1.0 / max(N, 1)

    # ---- packing -------------------------------------------------------
    def pack(self, params: ModelParams) -> np.ndarray:
        z = np.empty(self.dim)
        s = self.slices
        if "log_alpha" in s:
            z[s["log_alpha"]] = params.log_alpha
        if "beta" in s:
            z[s["beta"]] = params.beta
        if "log_theta" in s:
            z[s["log_theta"]] = params.log_theta[:-1]
        if "log_C" in s:
            z[s["log_C"]] = params.log_C[:, :-1].ravel()
        if "aging" in s:
            z[s["aging"]] = [params.mu, params.sigma]
        return z

    def unpack(self, z: np.ndarray) -> ModelParams:
        p = self.base.copy()
        s = self.slices
        if "log_alpha" in s:
            p.log_alpha = float(z[s["log_alpha"]][0])
        if "beta" in s:
            p.beta = float(z[s["beta"]][0])
        if "log_theta" in s:
            free = z[s["log_theta"]]
            p.log_theta = np.append(free, -free.sum())
        if "log_C" in s:
            free = z[s["log_C"]].reshape(self.K, self.K - 1)
            p.log_C = np.hstack([free, -free.sum(axis=1, keepdims=True)])
        if "aging" in s:
            p.mu, p.sigma = (float(x) for x in z[s["aging"]])
        return p

    def bounds(self) -> list[tuple[float | None, float | None]]:
        b: list[tuple[float | None, float | None]] = [(None, None)] * self.dim
        if "beta" in self.slices:
            b[self.slices["beta"].start] = (0.0, None)
        if "aging" in self.slices:
            b[self.slices["aging"].start + 1] = (SIGMA_FLOOR, None)
        return b

    # ---- evaluation ----------------------------------------------------
    def _eta(self, p: ModelParams):
        d = self.data
        eta = p.log_alpha + self._log_nn + p.log_theta[d.j] - p.beta * self._log_d + p.log_C.ravel()[self._cell]
        aging = None
        if self.kind == COLLABORATION:
            eta = eta + p.log_theta[d.i]
        else:
            aging = (self._log_t - p.mu) / p.sigma
            eta = eta - self._log_t - math.log(p.sigma) - 0.5 * _LOG_2PI - 0.5 * aging**2
        return eta, aging

    def value(self, z) -> float:
        p = self.unpack(np.asarray(z, dtype=float))
        eta, _ = self._eta(p)
        lam = np.exp(eta)
        if not np.all(np.isfinite(lam)):
            return -np.inf
        ll = float(np.dot(self.data.w[self._pos], eta[self._pos]) - lam.sum() - self._lgw)
        return ll + log_prior(p, self.config, self.kind)

    def value_and_grad(self, z) -> tuple[float, np.ndarray]:
        z = np.asarray(z, dtype=float)
        p = self.unpack(z)
        d, cfg = self.data, self.config
        eta, aging = self._eta(p)
        lam = np.exp(eta)
        if not np.all(np.isfinite(lam)):
            return -np.inf, np.full(self.dim, np.nan)
        ll = float(np.dot(d.w[self._pos], eta[self._pos]) - lam.sum() - self._lgw)
        lp = ll + log_prior(p, cfg, self.kind)
        r = d.w - lam
        g = np.empty(self.dim)
        s = self.slices
        if "log_alpha" in s:
            g[s["log_alpha"]] = r.sum() - (p.log_alpha - cfg.log_alpha_prior_mean) / cfg.log_alpha_prior_var
        if "beta" in s:
            g[s["beta"]] = -np.dot(r, self._log_d) - p.beta / cfg.beta_prior_sd**2
        if "log_theta" in s:
            gt = np.bincount(d.j, weights=r, minlength=self.N)
            if self.kind == COLLABORATION:
                gt += np.bincount(d.i, weights=r, minlength=self.N)
            gt -= p.log_theta / self.t_var
            # chain rule through log_theta[-1] = -sum(free)
            g[s["log_theta"]] = gt[:-1] - gt[-1]
        if "log_C" in s:
            gc = np.bincount(self._cell, weights=r, minlength=self.K * self.K).reshape(self.K, self.K)
            gc -= p.log_C / self.c_var
            g[s["log_C"]] = (gc[:, :-1] - gc[:, -1:]).ravel()
        if "aging" in s:
            g_mu = np.dot(r, aging) / p.sigma - (p.mu - cfg.mu_prior_mean) / cfg.mu_prior_sd**2
            g_sigma = np.dot(r, aging**2 - 1.0) / p.sigma - p.sigma / cfg.sigma_prior_sd**2
            g[s["aging"]] = [g_mu, g_sigma]
        return lp, g

    def grad(self, z) -> np.ndarray:
        return self.value_and_grad(z)[1]

    def hessian(self, z, step: float | None = None) -> np.ndarray:
        """Central finite differences of the analytic gradient, symmetrized."""
        return fd_hessian(self.grad, z, step or self.config.fd_step)


def fd_hessian(grad_fn, z, step: float = 1e-5) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    n = len(z)
    H = np.empty((n, n))
    for k in range(n):
        h = step * max(1.0, abs(z[k]))
        zp, zm = z.copy(), z.copy()
        zp[k] += h
        zm[k] -= h
        H[:, k] = (grad_fn(zp) - grad_fn(zm)) / (2 * h)
    return (H + H.T) / 2


def gaussian_intervals(mean, cov, level_z: float = _Z95) -> tuple[np.ndarray, np.ndarray]:
    sd = np.sqrt(np.diag(cov))
    return mean - level_z * sd, mean + level_z * sd


def laplace_covariance(grad_fn, z, step: float = 1e-5) -> np.ndarray:
    """Inverse of the negative Hessian of a log density at its mode."""
    H = -fd_hessian(grad_fn, z, step)
    eig = np.linalg.eigvalsh(H)
    if eig.min() <= 0:
        raise DegenerateCurvature(eig)
    return np.linalg.inv(H)


# --------------------------------------------------------------------------
# fitting


@dataclass
class FitResult:
    params: ModelParams
    log_posterior: float
    converged: bool
    kind: str
    cities: tuple[str, ...]
    countries: tuple[str, ...]
    intervals: dict | None = None
    iterations: int = 0
    grad_norm: float = float("nan")
    message: str = ""
    trace: list[float] = field(default_factory=list, repr=False)
    covariance: np.ndarray | None = field(default=None, repr=False)
    n_dyads: int = 0

    def interval(self, name: str):
        if self.intervals is None:
            raise ValueError("no intervals available")
        return self.intervals[name]

    def to_dict(self) -> dict:
        out = {
            "kind": self.kind,
            "cities": list(self.cities),
            "countries": list(self.countries),
            "params": self.params.to_dict(),
            "log_posterior": float(self.log_posterior),
            "converged": bool(self.converged),
            "diagnostics": {
                "iterations": int(self.iterations),
                "grad_norm": float(self.grad_norm),
                "message": self.message,
                "n_dyads": int(self.n_dyads),
            },
            "intervals": None,
        }
        if self.intervals is not None:
            out["intervals"] = {k: [np.asarray(v[0]).tolist(), np.asarray(v[1]).tolist()] for k, v in self.intervals.items()}
        return out


def initial_params(data: DyadData, kind: str, beta0: float = 0.5, config: FitConfig | None = None) -> ModelParams:
    """Start at zero effects with ``alpha`` matching the total observed weight."""
    config = config or FitConfig()
    p = ModelParams.zeros(data.n_cities, data.n_countries, beta=beta0, mu=config.mu_prior_mean, sigma=1.0)
    if len(data):
        eta = log_rate(p, data, kind, config.lag_offset)
        p.log_alpha = float(np.log(data.w.sum() + 0.5) - np.log(np.exp(eta).sum()))
    else:
        p.log_alpha = config.log_alpha_prior_mean
    return p


def _projected_grad_norm(g: np.ndarray, z: np.ndarray, bounds) -> float:
    g = g.copy()
    for k, (lo, _) in enumerate(bounds):
        if lo is not None and z[k] <= lo and g[k] < 0:
            g[k] = 0.0
    return float(np.max(np.abs(g))) if len(g) else 0.0


def fit_map(data, config: FitConfig | None = None, kind: str = COLLABORATION, init: ModelParams | None = None) -> FitResult:
    """Posterior mode by bounded L-BFGS on the negative log-posterior.

    ``beta >= 0`` and ``sigma >= SIGMA_FLOOR`` are box constraints.
    Converged means the optimizer stopped on its tolerance test and the
    projected gradient max-norm is at most ``config.grad_tol``.  Laplace
    intervals are attached when ``config.intervals`` is set and the mode
    has positive-definite curvature.
    """
    data = _as_data(data)
    config = config or FitConfig()
    kind = _check_kind(kind)
    if len(data) == 0:
        raise ValueError("no dyads to fit")
    start = init.copy() if init is not None else initial_params(data, kind, config=config)
    post = Posterior(data, config, kind, base=start)
    z0 = post.pack(start)
    bounds = post.bounds()
    trace: list[float] = []

    def objective(z):
        lp, g = post.value_and_grad(z)
        if not np.isfinite(lp):
            return np.inf, np.zeros_like(z)
        return -lp, -g

    def callback(intermediate_result):
        trace.append(-float(intermediate_result.fun))

    trace.append(post.value(z0))
    res = minimize(
        objective,
        z0,
        jac=True,
        method="L-BFGS-B",
        bounds=bounds,
        callback=callback,
        options={"maxiter": config.max_iter, "ftol": config.tol, "gtol": config.grad_tol, "maxcor": 20},
    )
    z = res.x
    lp, g = post.value_and_grad(z)
    gnorm = _projected_grad_norm(g, z, bounds)
    converged = bool(res.success) and gnorm <= config.grad_tol
    if not converged:
        # L-BFGS often stops on relative f-change first; polish with Newton steps
        z, lp, gnorm, converged = _newton_polish(post, z, bounds, config)
    params = post.unpack(z)
    result = FitResult(
        params=params,
        log_posterior=float(lp),
        converged=converged,
        kind=kind,
        cities=data.cities,
        countries=data.countries,
        iterations=int(res.nit),
        grad_norm=gnorm,
        message=str(res.message),
        trace=trace,
        n_dyads=len(data),
    )
    if not converged:
        log.warning("fit did not converge: %s (|grad|=%.3g)", res.message, gnorm)
    if config.intervals and converged:
        try:
            laplace_intervals(result, data, config, _posterior=post)
        except DegenerateCurvature as exc:
            log.warning("%s", exc)
            result.message += f"; {exc}"
    return result


def _newton_polish(post: Posterior, z, bounds, config: FitConfig, max_steps: int = 100):
    """Damped Newton steps with a finite-difference Hessian, monotone in the posterior."""
    lp, g = post.value_and_grad(z)
    gnorm = _projected_grad_norm(g, z, bounds)
    lower = np.array([-np.inf if b[0] is None else b[0] for b in bounds])
    for _ in range(max_steps):
        if gnorm <= config.grad_tol:
            return z, lp, gnorm, True
        H = -post.hessian(z)
        free = ~((z <= lower) & (g < 0))
        try:
            step = np.zeros_like(z)
            step[free] = np.linalg.solve(H[np.ix_(free, free)], g[free])
        except np.linalg.LinAlgError:
            break
        # near the mode the gain drops below rounding of the posterior, so a
        # step that loses at most that rounding but shrinks the gradient counts
        noise = 64 * np.finfo(float).eps * max(1.0, abs(lp))
        t = 1.0
        while t > 1e-8:
            zn = np.maximum(z + t * step, lower)
            lpn, gn = post.value_and_grad(zn)
            gnorm_n = _projected_grad_norm(gn, zn, bounds)
            if lpn > lp or (lpn >= lp - noise and gnorm_n < gnorm):
                break
            t /= 2
        else:
            break
        z, lp, g, gnorm = zn, lpn, gn, gnorm_n
    return z, lp, gnorm, gnorm <= config.grad_tol


def laplace_intervals(result: FitResult, data, config: FitConfig | None = None, _posterior: Posterior | None = None) -> dict:
    """95% intervals from the inverse negative Hessian in reduced coordinates.

    Eliminated coordinates get their variance through the linear map
    back to full parameters.  Fixed groups get degenerate intervals at
    their value.  ``beta`` and ``sigma`` intervals are clipped at their
    lower bounds.  The intervals are also stored on ``result``.
    """
    config = config or FitConfig()
    post = _posterior or Posterior(_as_data(data), config, result.kind, base=result.params)
    z = post.pack(result.params)
    cov = laplace_covariance(post.grad, z, config.fd_step)
    result.covariance = cov
    sd_z = np.sqrt(np.diag(cov))
    p = result.params
    s = post.slices
    out: dict = {}

    def pair(v, sd):
        return (v - _Z95 * sd, v + _Z95 * sd)

    out["log_alpha"] = pair(p.log_alpha, sd_z[s["log_alpha"]][0]) if "log_alpha" in s else (p.log_alpha, p.log_alpha)
    if "beta" in s:
        lo, hi = pair(p.beta, sd_z[s["beta"]][0])
        out["beta"] = (max(lo, 0.0), hi)
    else:
        out["beta"] = (p.beta, p.beta)
    if "log_theta" in s:
        block = cov[s["log_theta"], s["log_theta"]]
        n = block.shape[0]
        T = np.vstack([np.eye(n), -np.ones((1, n))])
        sd = np.sqrt(np.einsum("ij,jk,ik->i", T, block, T))
        out["log_theta"] = pair(p.log_theta, sd)
    else:
        out["log_theta"] = (p.log_theta.copy(), p.log_theta.copy())
    if "log_C" in s:
        K = post.K
        block = cov[s["log_C"], s["log_C"]]
        sd = np.zeros((K, K))
        for r in range(K):
            rb = block[r * (K - 1) : (r + 1) * (K - 1), r * (K - 1) : (r + 1) * (K - 1)]
            T = np.vstack([np.eye(K - 1), -np.ones((1, K - 1))])
            sd[r] = np.sqrt(np.einsum("ij,jk,ik->i", T, rb, T))
        out["log_C"] = pair(p.log_C, sd)
    else:
        out["log_C"] = (p.log_C.copy(), p.log_C.copy())
    if post.kind == CITATION:
        if "aging" in s:
            sd_mu, sd_sigma = sd_z[s["aging"]]
            out["mu"] = pair(p.mu, sd_mu)
            lo, hi = pair(p.sigma, sd_sigma)
            out["sigma"] = (max(lo, SIGMA_FLOOR), hi)
        else:
            out["mu"] = (p.mu, p.mu)
            out["sigma"] = (p.sigma, p.sigma)
    result.intervals = out
    return out


@dataclass
class PreferenceMatrix:
    countries: tuple[str, ...]
    values: np.ndarray
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def domestic(self) -> np.ndarray:
        return np.diag(self.values).copy()

    def rows(self) -> list[list]:
        return [[c] + [float(v) for v in row] for c, row in zip(self.countries, self.values)]

    def header(self) -> list[str]:
        return ["country"] + list(self.countries)


def preference_matrix(result: FitResult) -> PreferenceMatrix:
    """Centered ``log_C`` labelled by country; the diagonal is domestic preference."""
    lo = hi = None
    if result.intervals is not None:
        lo, hi = (np.asarray(x) for x in result.intervals["log_C"])
    return PreferenceMatrix(tuple(result.countries), result.params.log_C.copy(), lo, hi)


# --------------------------------------------------------------------------
# cross-check sampler


def metropolis(post: Posterior, z0, n_samples: int, proposal_cov, seed: int = 0, burn: int = 0) -> np.ndarray:
    """Random-walk Metropolis over the reduced coordinates.

    Meant for small instances only, as an independent check on the
    Laplace approximation.  Proposals outside the box bounds are rejected.
    """
    rng = np.random.default_rng(seed)
    z = np.asarray(z0, dtype=float).copy()
    lp = post.value(z)
    chol = np.linalg.cholesky(np.atleast_2d(proposal_cov))
    lower = np.array([-np.inf if b[0] is None else b[0] for b in post.bounds()])
    out = np.empty((n_samples, len(z)))
    for k in range(burn + n_samples):
        prop = z + chol @ rng.standard_normal(len(z))
        if np.all(prop >= lower):
            lpp = post.value(prop)
            if np.log(rng.random()) < lpp - lp:
                z, lp = prop, lpp
        if k >= burn:
            out[k - burn] = z
    return out


# --------------------------------------------------------------------------
# dyad construction from edge lists


def build_dyads(
    cities: Mapping,
    exposures: Mapping[tuple[str, int], int],
    edges: Iterable,
    kind: str,
    year: int,
    field_tag: str | None = None,
    max_lag: int = 5,
) -> DyadData:
    """Full dyad universe for one fit year, zero-weight dyads included.

    ``cities`` maps city id to an object with ``country`` and ``point``.
    Only cities with positive exposure in the relevant year enter.  For
    citation, dyads cover lags ``0..max_lag`` with the cited city's
    exposure taken in the cited year.  Pairs at zero distance are skipped.
    """
    from .geo import haversine_matrix

    kind = _check_kind(kind)
    ids = sorted(cities)
    countries = sorted({cities[c].country for c in ids})
    cidx = {c: k for k, c in enumerate(countries)}
    lats = np.array([cities[c].point.latitude for c in ids])
    lons = np.array([cities[c].point.longitude for c in ids])
    D = haversine_matrix(lats, lons) if ids else np.zeros((0, 0))
    country = np.array([cidx[cities[c].country] for c in ids], dtype=np.int64)
    pos = {c: k for k, c in enumerate(ids)}

    weights: dict[tuple[int, int, int], int] = {}
    for e in edges:
        if field_tag is not None and e.field_tag != field_tag:
            continue
        if e.year_src != year:
            continue
        a, b = pos.get(e.src_city), pos.get(e.dst_city)
        if a is None or b is None or a == b:
            continue
        if kind == COLLABORATION:
            a, b = min(a, b), max(a, b)
            t = 0
        else:
            t = e.year_src - e.year_dst
            if t < 0 or t > max_lag:
                continue
        weights[a, b, t] = weights.get((a, b, t), 0) + e.weight

    def n_of(k, y):
        return exposures.get((ids[k], y), 0)

    rows = []
    n = len(ids)
    if kind == COLLABORATION:
        for a in range(n):
            na = n_of(a, year)
            if na <= 0:
                continue
            for b in range(a + 1, n):
                nb = n_of(b, year)
                if nb <= 0 or D[a, b] <= 0:
                    continue
                rows.append((a, b, na, nb, D[a, b], weights.get((a, b, 0), 0), 0))
    else:
        for a in range(n):
            na = n_of(a, year)
            if na <= 0:
                continue
            for b in range(n):
                if a == b or D[a, b] <= 0:
                    continue
                for t in range(max_lag + 1):
                    nb = n_of(b, year - t)
                    if nb <= 0:
                        continue
                    rows.append((a, b, na, nb, D[a, b], weights.get((a, b, t), 0), t))
    dropped = sum(1 for key in weights if key not in {(r[0], r[1], r[6]) for r in rows}) if weights else 0
    if dropped:
        log.warning("%d weighted dyads fall outside the exposure universe and are ignored", dropped)
    arr = np.array(rows, dtype=float).reshape(-1, 7)
    ii, jj = arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64)
    return DyadData(
        ii, jj, arr[:, 2], arr[:, 3], arr[:, 4], country[ii], country[jj], arr[:, 5], arr[:, 6].astype(np.int64),
        ids, countries, city_country=country,
    )
