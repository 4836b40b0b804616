"""Fiber network model, demands, link physics, and routing validation.

Topologies are undirected graphs whose links carry the physical constants
of elementary entanglement generation.  Solvers work on the directed
expansion: each undirected link j becomes the directed pair (2j, 2j+1).
Node and link ids are dense integers assigned in file order so that every
matrix in the toolkit is reproducible across runs.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass

import numpy as np

DEFAULT_KAPPA = 0.1
DEFAULT_PERIOD_T = 1e-3


class TopologyError(ValueError):
    """Malformed topology/demand input or an invalid routing."""


def transmissivity(length_km):
    """Fiber transmissivity to the midpoint station: 10^(-0.02 L)."""
    if length_km < 0:
        raise TopologyError("link length must be nonnegative")
    return 10.0 ** (-0.02 * length_km)


def compute_link_constant(length_km, kappa, period_T):
    """Rate-fidelity trade-off constant d = 3*kappa*eta / (2*T).

    Evaluation order (3/(2T))*kappa*eta is fixed deliberately: it makes the
    reference parameter set (L=50 km, kappa=0.1, T=1e-3 s) come out as an
    exact 15.0 in binary floating point.
    """
    if not 0.0 < kappa < 1.0:
        raise TopologyError("kappa must lie in (0, 1)")
    if period_T <= 0.0:
        raise TopologyError("period_T must be positive")
    return (3.0 / (2.0 * period_T)) * kappa * transmissivity(length_km)


@dataclass(frozen=True)
class LinkPhysics:
    """Physical constants of one undirected link."""

    length_km: float
    kappa: float
    period_T: float
    transmissivity_eta: float
    d_const: float

    @classmethod
    def from_length(cls, length_km, kappa=DEFAULT_KAPPA,
                    period_T=DEFAULT_PERIOD_T):
        eta = transmissivity(length_km)
        d = compute_link_constant(length_km, kappa, period_T)
        return cls(length_km, kappa, period_T, eta, d)

    def __post_init__(self):
        if not 0.0 < self.kappa < 1.0:
            raise TopologyError("kappa must lie in (0, 1)")
        if self.period_T <= 0.0:
            raise TopologyError("period_T must be positive")
        if self.transmissivity_eta != transmissivity(self.length_km):
            raise TopologyError("transmissivity inconsistent with length")
        if self.d_const != compute_link_constant(
                self.length_km, self.kappa, self.period_T):
            raise TopologyError("d_const inconsistent with (L, kappa, T)")


class NetworkModel:
    """Undirected graph with per-link physics and its directed expansion.

    Directed link ids: undirected j expands to 2j (u->v as listed) and
    2j+1 (v->u).  delta_in[v] / delta_out[v] hold directed ids incoming to /
    outgoing from node v.
    """

    def __init__(self, node_ids, edges, physics, link_ids=None):
        self.node_ids = list(node_ids)
        self.edges = [(int(u), int(v)) for u, v in edges]
        self.physics = list(physics)
        self.link_ids = list(link_ids) if link_ids is not None \
            else [str(j) for j in range(len(self.edges))]
        n, l = len(self.node_ids), len(self.edges)
        if len(self.physics) != l or len(self.link_ids) != l:
            raise TopologyError("links, physics and ids must align")
        if len(set(self.node_ids)) != n:
            raise TopologyError("duplicate node ids")
        if len(set(self.link_ids)) != l:
            raise TopologyError("duplicate link ids")
        seen = set()
        for u, v in self.edges:
            if not (0 <= u < n and 0 <= v < n):
                raise TopologyError("link endpoint references unknown node")
            if u == v:
                raise TopologyError("self-loops are not allowed")
            key = (min(u, v), max(u, v))
            if key in seen:
                raise TopologyError("parallel links are not allowed")
            seen.add(key)

        self.dir_tail = np.empty(2 * l, dtype=np.int64)
        self.dir_head = np.empty(2 * l, dtype=np.int64)
        self.delta_out = [[] for _ in range(n)]
        self.delta_in = [[] for _ in range(n)]
        for j, (u, v) in enumerate(self.edges):
            self.dir_tail[2 * j], self.dir_head[2 * j] = u, v
            self.dir_tail[2 * j + 1], self.dir_head[2 * j + 1] = v, u
            self.delta_out[u].append(2 * j)
            self.delta_in[v].append(2 * j)
            self.delta_out[v].append(2 * j + 1)
            self.delta_in[u].append(2 * j + 1)
        self.d = np.array([p.d_const for p in self.physics], dtype=float)

    @property
    def n(self):
        return len(self.node_ids)

    @property
    def l(self):
        return len(self.edges)

    @staticmethod
    def directed_pair(j):
        """The two directed ids of undirected link j."""
        return (2 * j, 2 * j + 1)

    @staticmethod
    def undirected_of(jp):
        return jp // 2

    def node_index(self, node_id):
        try:
            return self.node_ids.index(node_id)
        except ValueError:
            raise TopologyError(f"unknown node id {node_id!r}") from None

    def neighbors(self, v):
        """Sorted (neighbor node, undirected link) pairs of node v."""
        out = [(self.dir_head[jp], jp // 2) for jp in self.delta_out[v]]
        return sorted(out)

    def link_between(self, u, v):
        for j, (a, b) in enumerate(self.edges):
            if (a, b) == (u, v) or (a, b) == (v, u):
                return j
        return None


@dataclass(frozen=True)
class DemandSet:
    """Ordered source-target node-index pairs."""

    pairs: tuple

    def __post_init__(self):
        if len(self.pairs) < 1:
            raise TopologyError("at least one demand is required")
        for s, t in self.pairs:
            if s == t:
                raise TopologyError("demand endpoints must differ")

    @property
    def k(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def __getitem__(self, i):
        return self.pairs[i]

    def validate_against(self, network):
        for s, t in self.pairs:
            if not (0 <= s < network.n and 0 <= t < network.n):
                raise TopologyError("demand endpoint outside network")
        return self

    def prefix(self, k):
        return DemandSet(self.pairs[:k])


@dataclass(frozen=True)
class RoutingMatrix:
    """Binary link-by-demand incidence matrix plus per-demand node paths."""

    matrix: np.ndarray
    node_paths: tuple

    @property
    def k(self):
        return self.matrix.shape[1]


# ---------------------------------------------------------------------------
# File ingestion
# ---------------------------------------------------------------------------

def load_topology(path, kappa=None, period_T=None):
    """Load a topology JSON file into a NetworkModel.

    Schema: {"nodes": [{"id": str}], "links": [{"id": str, "u": str,
    "v": str, "length_km": num, "kappa"?: num, "period_T"?: num}],
    "defaults"?: {"kappa": num, "period_T": num}}.  Per-link values beat
    file defaults; the kappa/period_T arguments override file defaults.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise TopologyError(f"cannot parse topology file {path}: {exc}") from exc
    if not isinstance(doc, dict) or "nodes" not in doc or "links" not in doc:
        raise TopologyError("topology file must contain 'nodes' and 'links'")
    defaults = doc.get("defaults", {})
    def_kappa = kappa if kappa is not None \
        else defaults.get("kappa", DEFAULT_KAPPA)
    def_T = period_T if period_T is not None \
        else defaults.get("period_T", DEFAULT_PERIOD_T)

    node_ids = []
    for entry in doc["nodes"]:
        if not isinstance(entry, dict) or "id" not in entry:
            raise TopologyError("each node needs an 'id'")
        node_ids.append(str(entry["id"]))
    if len(set(node_ids)) != len(node_ids):
        raise TopologyError("duplicate node ids")
    index = {nid: i for i, nid in enumerate(node_ids)}

    edges, physics, link_ids = [], [], []
    for entry in doc["links"]:
        for key in ("id", "u", "v", "length_km"):
            if key not in entry:
                raise TopologyError(f"link missing field {key!r}")
        u, v = str(entry["u"]), str(entry["v"])
        if u not in index or v not in index:
            raise TopologyError(
                f"link {entry['id']!r} references unknown node")
        length = float(entry["length_km"])
        if length < 0 or not math.isfinite(length):
            raise TopologyError(
                f"link {entry['id']!r} has invalid length {length}")
        edges.append((index[u], index[v]))
        physics.append(LinkPhysics.from_length(
            length,
            float(entry.get("kappa", def_kappa)),
            float(entry.get("period_T", def_T))))
        link_ids.append(str(entry["id"]))
    return NetworkModel(node_ids, edges, physics, link_ids)


def load_demands(path, network):
    """Load a demands JSON file: {"demands": [{"s": str, "t": str}]}."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise TopologyError(f"cannot parse demands file {path}: {exc}") from exc
    if not isinstance(doc, dict) or "demands" not in doc:
        raise TopologyError("demands file must contain 'demands'")
    pairs = []
    for entry in doc["demands"]:
        if "s" not in entry or "t" not in entry:
            raise TopologyError("each demand needs 's' and 't'")
        pairs.append((network.node_index(str(entry["s"])),
                      network.node_index(str(entry["t"]))))
    return DemandSet(tuple(pairs)).validate_against(network)


# ---------------------------------------------------------------------------
# Graph operations
# ---------------------------------------------------------------------------

def _components(network):
    comp = [-1] * network.n
    c = 0
    for start in range(network.n):
        if comp[start] != -1:
            continue
        queue = deque([start])
        comp[start] = c
        while queue:
            v = queue.popleft()
            for w, _ in network.neighbors(v):
                if comp[w] == -1:
                    comp[w] = c
                    queue.append(w)
        c += 1
    return comp


@dataclass(frozen=True)
class PruneResult:
    network: NetworkModel
    demands: DemandSet
    node_old_to_new: dict
    link_old_to_new: dict


def prune(network, demands):
    """Drop nodes/links that cannot serve any demand.

    Conservative two-stage rule: (1) keep only components containing both
    endpoints of at least one demand; (2) iteratively strip degree-1 nodes
    that are not demand endpoints.  Never removes a link usable by any
    simple route of any demand.
    """
    demands.validate_against(network)
    comp = _components(network)
    live_comps = set()
    for s, t in demands:
        if comp[s] != comp[t]:
            raise TopologyError(
                f"infeasible demand: nodes {network.node_ids[s]!r} and "
                f"{network.node_ids[t]!r} are disconnected")
        live_comps.add(comp[s])
    keep = [comp[v] in live_comps for v in range(network.n)]

    endpoints = {v for pair in demands for v in pair}
    degree = [0] * network.n
    live_edge = [False] * network.l
    for j, (u, v) in enumerate(network.edges):
        if keep[u] and keep[v]:
            live_edge[j] = True
            degree[u] += 1
            degree[v] += 1
    changed = True
    while changed:
        changed = False
        for v in range(network.n):
            if keep[v] and degree[v] <= 1 and v not in endpoints:
                keep[v] = False
                changed = True
                for j, (a, b) in enumerate(network.edges):
                    if live_edge[j] and (a == v or b == v):
                        live_edge[j] = False
                        degree[a] -= 1
                        degree[b] -= 1

    node_map, new_nodes = {}, []
    for v in range(network.n):
        if keep[v]:
            node_map[v] = len(new_nodes)
            new_nodes.append(network.node_ids[v])
    link_map, new_edges, new_phys, new_ids = {}, [], [], []
    for j in range(network.l):
        if live_edge[j]:
            link_map[j] = len(new_edges)
            u, v = network.edges[j]
            new_edges.append((node_map[u], node_map[v]))
            new_phys.append(network.physics[j])
            new_ids.append(network.link_ids[j])
    pruned = NetworkModel(new_nodes, new_edges, new_phys, new_ids)
    new_demands = DemandSet(tuple((node_map[s], node_map[t])
                                  for s, t in demands))
    return PruneResult(pruned, new_demands, node_map, link_map)


def bfs_path(network, s, t):
    """One shortest (hop-count) s-t node path; deterministic tie-breaks."""
    parent = {s: None}
    queue = deque([s])
    while queue and t not in parent:
        v = queue.popleft()
        for w, _ in network.neighbors(v):
            if w not in parent:
                parent[w] = v
                queue.append(w)
    if t not in parent:
        raise TopologyError(
            f"infeasible demand: no path from {network.node_ids[s]!r} "
            f"to {network.node_ids[t]!r}")
    path = [t]
    while parent[path[-1]] is not None:
        path.append(parent[path[-1]])
    return tuple(reversed(path))


def shortest_hop_lengths(network, demands):
    """Minimum hop count per demand (BFS); errors if disconnected."""
    return [len(bfs_path(network, s, t)) - 1 for s, t in demands]


def validate_routing(network, demands, candidate):
    """Check an l-by-k 0/1 matrix column-wise against the demands.

    Each column must be the link-incidence vector of a simple path from its
    demand's source to target; the reconstructed node sequences are stored
    on the returned RoutingMatrix.
    """
    cand = np.asarray(candidate)
    if cand.shape != (network.l, demands.k):
        raise TopologyError(
            f"routing must have shape ({network.l}, {demands.k})")
    if not np.all((cand == 0) | (cand == 1)):
        raise TopologyError("routing entries must be 0/1")
    cand = cand.astype(np.uint8)

    paths = []
    for i, (s, t) in enumerate(demands):
        chosen = [j for j in range(network.l) if cand[j, i]]
        if not chosen:
            raise TopologyError(
                f"demand {i}: endpoints not connected (empty column)")
        incident = {}
        for j in chosen:
            u, v = network.edges[j]
            incident.setdefault(u, []).append((v, j))
            incident.setdefault(v, []).append((u, j))
        for v, inc in incident.items():
            if len(inc) > 2:
                raise TopologyError(
                    f"demand {i}: non-simple (degree {len(inc)} at node "
                    f"{network.node_ids[v]!r})")
        if len(incident.get(s, [])) != 1 or len(incident.get(t, [])) != 1:
            raise TopologyError(
                f"demand {i}: column endpoints do not match demand "
                f"({network.node_ids[s]!r} -> {network.node_ids[t]!r})")
        # Walk from s; degrees <= 2 make the continuation unique.
        path = [s]
        used = set()
        v = s
        while v != t:
            nxt = [(w, j) for w, j in incident[v] if j not in used]
            if len(nxt) != 1:
                raise TopologyError(
                    f"demand {i}: non-simple column (broken walk at node "
                    f"{network.node_ids[v]!r})")
            w, j = nxt[0]
            used.add(j)
            path.append(w)
            v = w
        if len(used) != len(chosen):
            raise TopologyError(
                f"demand {i}: non-simple column (disconnected loop present)")
        paths.append(tuple(int(v) for v in path))
    return RoutingMatrix(cand, tuple(paths))


def routing_from_paths(network, demands, node_paths):
    """Build and validate a RoutingMatrix from per-demand node sequences."""
    mat = np.zeros((network.l, demands.k), dtype=np.uint8)
    for i, path in enumerate(node_paths):
        for u, v in zip(path[:-1], path[1:]):
            j = network.link_between(u, v)
            if j is None:
                raise TopologyError(
                    f"demand {i}: path uses missing link "
                    f"{network.node_ids[u]!r}-{network.node_ids[v]!r}")
            mat[j, i] = 1
    return validate_routing(network, demands, mat)
