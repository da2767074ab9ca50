"""City disambiguation by Constant Potts Model clustering of organization sites.

Distances (km) enter the graph as negative edge weights.  With a negative
resolution ``gamma`` every internal pair ``(u, v)`` contributes
``-d_uv - gamma``, i.e. ``30 - d_uv`` at the default ``gamma = -30``, so a
cluster is worth keeping only while its members sit on average within 30 km
of each other.

The optimizer follows the Leiden scheme (fast local moving, refinement of
each community into well-connected sub-communities, aggregation of the
refined partition) and finishes with node-level moves on the flat graph so
the returned partition is a single-node local optimum.
"""

from __future__ import annotations

import random
from collections import deque
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geo import GeoPoint, centroid, haversine_matrix

DEFAULT_GAMMA = -30.0
# moves must gain strictly more than this; quality-neutral moves keep the finer partition
_EPS = 1e-10


@dataclass(frozen=True)
class OrgLocation:
    org_id: str
    raw_city_id: str
    point: GeoPoint


@dataclass
class DistanceGraph:
    """Complete graph over organizations with ``weights[u, v] = -distance``."""

    nodes: list[str]
    weights: np.ndarray

    def __len__(self):
        return len(self.nodes)

    def edges(self) -> list[tuple[str, str, float]]:
        n = len(self.nodes)
        return [(self.nodes[u], self.nodes[v], float(self.weights[u, v])) for u in range(n) for v in range(u + 1, n)]


@dataclass
class ClusterPartition:
    assignment: dict[str, int]
    quality: float

    @property
    def n_clusters(self) -> int:
        return len(set(self.assignment.values()))

    def clusters(self) -> list[list[str]]:
        out: list[list[str]] = [[] for _ in range(self.n_clusters)]
        for node, c in self.assignment.items():
            out[c].append(node)
        return [sorted(c) for c in out]


def build_distance_graph(orgs: Sequence[OrgLocation]) -> DistanceGraph:
    if not orgs:
        raise ValueError("no organizations")
    if len({o.raw_city_id for o in orgs}) > 1:
        raise ValueError("organizations span several raw cities")
    lats = [o.point.latitude for o in orgs]
    lons = [o.point.longitude for o in orgs]
    return DistanceGraph([o.org_id for o in orgs], -haversine_matrix(lats, lons))


def cpm_quality(graph: DistanceGraph, partition, gamma: float = DEFAULT_GAMMA) -> float:
    """Sum over clusters of internal edge weight minus ``gamma * n_c (n_c - 1) / 2``.

    ``partition`` is either a :class:`ClusterPartition`, a mapping from node
    label to cluster, or a sequence of cluster labels aligned with
    ``graph.nodes``.
    """
    labels = _labels(graph, partition)
    same = labels[:, None] == labels[None, :]
    internal = np.triu(np.where(same, graph.weights, 0.0), k=1).sum()
    sizes = np.unique(labels, return_counts=True)[1]
    return float(internal - gamma * np.sum(sizes * (sizes - 1) / 2))


def _labels(graph: DistanceGraph, partition) -> np.ndarray:
    if isinstance(partition, ClusterPartition):
        partition = partition.assignment
    if isinstance(partition, dict):
        missing = set(graph.nodes) - set(partition)
        if missing:
            raise ValueError(f"partition does not cover nodes {sorted(missing)}")
        return np.array([partition[n] for n in graph.nodes])
    labels = np.asarray(partition)
    if labels.shape != (len(graph),):
        raise ValueError("partition length does not match graph")
    return labels


class _Level:
    """One level of the Leiden hierarchy: aggregate nodes carrying sizes."""

    def __init__(self, weights: np.ndarray, sizes: np.ndarray, gamma: float):
        self.w = weights  # inter-node weights, zero diagonal
        self.size = np.asarray(sizes, dtype=float)
        self.gamma = gamma
        self.n = len(self.size)


def _renumber(member: np.ndarray) -> np.ndarray:
    _, inv = np.unique(member, return_inverse=True)
    return inv


def _move_nodes(level: _Level, member: np.ndarray, rng: random.Random) -> bool:
    """Queue-driven single-node moves; ``member`` is updated in place.

    A node moves only for a strictly positive gain, so quality-neutral
    choices keep the current (finer) assignment.
    """
    n = level.n
    comm_size = np.bincount(member, weights=level.size, minlength=n)
    queue = deque(rng.sample(range(n), n))
    queued = np.ones(n, dtype=bool)
    changed = False
    while queue:
        v = queue.popleft()
        queued[v] = False
        old = member[v]
        comm_size[old] -= level.size[v]
        gain = np.bincount(member, weights=level.w[v], minlength=n) - level.gamma * level.size[v] * comm_size
        occupied = comm_size > 0
        best, best_gain = old, (gain[old] if occupied[old] else 0.0)
        if occupied.any():
            c = int(np.flatnonzero(occupied)[np.argmax(gain[occupied])])
            if gain[c] > best_gain + _EPS:
                best, best_gain = c, gain[c]
        if occupied[old] and 0.0 > best_gain + _EPS:
            best = int(np.flatnonzero(~occupied)[0])
        member[v] = best
        comm_size[best] += level.size[v]
        if best != old:
            changed = True
            for u in np.flatnonzero((member != best) & ~queued):
                if u != v:
                    queue.append(int(u))
                    queued[u] = True
    return changed


def _refine(level: _Level, member: np.ndarray, rng: random.Random, theta: float) -> np.ndarray:
    """Split each community into well-connected sub-communities.

    Nodes start as singletons.  A node that is still alone and well
    connected to its community joins the well-connected sub-community of
    that community, picked among strictly positive gains with probability
    proportional to ``exp(gain / theta)``.
    """
    gamma = level.gamma
    refined = np.arange(level.n)
    for comm in np.unique(member):
        nodes = np.flatnonzero(member == comm)
        if len(nodes) == 1:
            continue
        size = level.size[nodes]
        total = size.sum()
        w = level.w[np.ix_(nodes, nodes)]
        local = np.arange(len(nodes))  # local refined labels
        sub_size = size.copy()
        # weight from each refined sub-community to the rest of its community
        ext = w.sum(axis=1)
        alone = np.ones(len(nodes), dtype=bool)
        for k in rng.sample(range(len(nodes)), len(nodes)):
            if not alone[k] or ext[k] < gamma * size[k] * (total - size[k]) - _EPS:
                continue
            to_sub = np.bincount(local, weights=w[k], minlength=len(nodes))
            gain = to_sub - gamma * size[k] * sub_size
            ok = (sub_size > 0) & (ext >= gamma * sub_size * (total - sub_size) - _EPS)
            ok[k] = False
            if not ok.any():
                continue
            ok &= gain > _EPS
            if not ok.any():
                continue
            cand = np.flatnonzero(ok)
            # randomized choice as in Leiden: P(r) proportional to exp(gain / theta)
            p = np.exp((gain[cand] - gain[cand].max()) / theta)
            r = int(cand[_choice(rng, p)])
            ext[r] = ext[r] + ext[k] - 2 * to_sub[r]
            sub_size[r] += size[k]
            sub_size[k] = 0.0
            ext[k] = 0.0
            alone[local == r] = False
            alone[k] = False
            local[k] = r
        refined[nodes] = nodes[local]
    return _renumber(refined)


def _choice(rng: random.Random, weights: np.ndarray) -> int:
    x = rng.random() * weights.sum()
    return min(int(np.searchsorted(np.cumsum(weights), x, side="right")), len(weights) - 1)


def _aggregate(level: _Level, groups: np.ndarray) -> _Level:
    m = groups.max() + 1
    onehot = np.zeros((level.n, m))
    onehot[np.arange(level.n), groups] = 1.0
    w = onehot.T @ level.w @ onehot
    np.fill_diagonal(w, 0.0)
    return _Level(w, onehot.T @ level.size, level.gamma)


def _leiden_pass(weights: np.ndarray, member: np.ndarray, gamma: float, rng: random.Random, theta: float) -> np.ndarray:
    """Leiden iterations from an initial flat partition until no level changes."""
    level = _Level(weights, np.ones(len(member)), gamma)
    flat_to_node = np.arange(len(member))
    member = member.copy()
    while True:
        _move_nodes(level, member, rng)
        member = _renumber(member)
        if member.max() + 1 == level.n:
            break
        refined = _refine(level, member, rng, theta)
        if refined.max() + 1 == level.n:
            # nothing merged during refinement; aggregate communities directly
            refined = member.copy()
        agg_member = np.zeros(refined.max() + 1, dtype=int)
        agg_member[refined] = member
        level = _aggregate(level, refined)
        flat_to_node = refined[flat_to_node]
        member = agg_member
    return _renumber(member[flat_to_node])


def _canonical(labels: np.ndarray, nodes: Sequence[str]) -> np.ndarray:
    """Renumber clusters by descending size, ties by smallest member label."""
    groups: dict[int, list[str]] = {}
    for lab, node in zip(labels, nodes):
        groups.setdefault(int(lab), []).append(node)
    order = sorted(groups, key=lambda g: (-len(groups[g]), min(groups[g])))
    remap = {g: k for k, g in enumerate(order)}
    return np.array([remap[int(lab)] for lab in labels], dtype=int)


def _optimize_from(graph: DistanceGraph, member: np.ndarray, gamma: float, rng: random.Random, theta: float) -> np.ndarray:
    """Leiden passes plus flat node moves until neither changes anything."""
    flat = _Level(graph.weights, np.ones(len(graph)), gamma)
    member = _renumber(member)
    while True:
        member = _leiden_pass(graph.weights, member, gamma, rng, theta)
        moved = _move_nodes(flat, member, rng)
        member = _renumber(member)
        if not moved:
            return member


def _perturb(member: np.ndarray, rng: random.Random) -> np.ndarray:
    """Send a random 10-50% of nodes to random (possibly new) communities."""
    out = member.copy()
    n = len(out)
    for v in rng.sample(range(n), max(1, int(round(rng.uniform(0.1, 0.5) * n)))):
        out[v] = rng.randrange(n)
    return out


def optimize_partition(
    graph: DistanceGraph,
    gamma: float = DEFAULT_GAMMA,
    seed: int = 0,
    n_restarts: int = 20,
    theta: float = 5.0,
) -> ClusterPartition:
    """Maximize CPM quality with a Leiden-style optimizer.

    The first run starts from singletons.  Each of the ``n_restarts``
    further runs starts from a random perturbation of the best partition
    found so far (iterated local search); a run replaces the incumbent only
    on a strict quality gain, so ties keep the earlier, finer solution.
    Deterministic for a given ``(graph, gamma, seed, n_restarts, theta)``.
    The result admits no strictly improving single-node move and is never
    worse than the all-singleton or all-merged partitions.
    """
    n = len(graph)
    if n == 0:
        return ClusterPartition({}, 0.0)
    rng = random.Random(seed)
    best = np.arange(n)
    best_q = 0.0
    merged_q = cpm_quality(graph, np.zeros(n, dtype=int), gamma)
    if merged_q > best_q + _EPS:
        best, best_q = np.zeros(n, dtype=int), merged_q
    starts = [np.arange(n)] + [None] * n_restarts
    for start in starts:
        init = start if start is not None else _perturb(best, rng)
        labels = _optimize_from(graph, init, gamma, rng, theta)
        q = cpm_quality(graph, labels, gamma)
        if q > best_q + _EPS:
            best, best_q = labels, q
    labels = _canonical(best, graph.nodes)
    return ClusterPartition({node: int(lab) for node, lab in zip(graph.nodes, labels)}, best_q)


@dataclass(frozen=True)
class SubCity:
    sub_city_id: str
    centroid: GeoPoint
    members: tuple[str, ...]


def disambiguate_city(orgs: Sequence[OrgLocation], gamma: float = DEFAULT_GAMMA, seed: int = 0) -> list[SubCity]:
    """Split one raw city into geographically coherent sub-cities."""
    if not orgs:
        return []
    graph = build_distance_graph(orgs)
    part = optimize_partition(graph, gamma, seed)
    by_id = {o.org_id: o for o in orgs}
    raw = orgs[0].raw_city_id
    out = []
    for k, members in enumerate(part.clusters()):
        out.append(SubCity(f"{raw}#{k}", centroid([by_id[m].point for m in members]), tuple(members)))
    return out


def mean_pairwise_distance(graph: DistanceGraph, members: Sequence[str]) -> float:
    idx = [graph.nodes.index(m) for m in members]
    if len(idx) < 2:
        return 0.0
    sub = -graph.weights[np.ix_(idx, idx)]
    return float(sub[np.triu_indices(len(idx), 1)].mean())
