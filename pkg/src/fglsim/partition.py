"""Federated data-simulation strategies.

Eight ways of carving a dataset into synthetic clients, grouped by which
graph property drives the heterogeneity:

  feature_skew             iid split + per-client feature perturbations
  label_dirichlet          class proportions drawn from Dirichlet(alpha)
  cross_domain             one or more whole datasets spread over clients
  topology_skew            graphs sorted by average degree, chunked
  metis_community          multilevel k-way partition of the node graph
  louvain_community        modularity communities balanced over clients
  metis_label_imbalance    k-way communities regrouped by label similarity
  louvain_label_imbalance  louvain communities regrouped by label similarity

The Louvain and multilevel k-way partitioners are built in-repo on the
kernels in `accel`; no external graph library is used.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .accel import fm_pass, hem_match, louvain_move_pass
from .errors import ConfigError, InfeasiblePartitionError
from .graph import Graph, GraphCollection, graph_replace, make_graph
from .seeding import rng_for

log = logging.getLogger("fglsim.partition")

STRATEGIES = (
    "feature_skew",
    "label_dirichlet",
    "cross_domain",
    "topology_skew",
    "metis_community",
    "louvain_community",
    "metis_label_imbalance",
    "louvain_label_imbalance",
)


@dataclass
class PartitionSpec:
    """Strategy selection plus the knobs the strategies consume."""

    strategy: str
    num_clients: int
    alpha: float = 1.0
    resolution: float = 1.0
    imbalance_eps: float = 0.05
    capacity_beta: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.num_clients < 1:
            raise ConfigError("num_clients must be >= 1")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if self.resolution <= 0:
            raise ConfigError("resolution must be positive")
        if self.imbalance_eps < 0:
            raise ConfigError("imbalance_eps must be >= 0")


@dataclass
class ClientAssignment:
    """Owner client index per sample (node or graph)."""

    owner: np.ndarray
    num_clients: int

    def __post_init__(self):
        self.owner = np.asarray(self.owner, dtype=np.int64)
        if self.owner.size and (self.owner.min() < 0 or self.owner.max() >= self.num_clients):
            raise ConfigError("owner index outside [0, num_clients)")
        counts = np.bincount(self.owner, minlength=self.num_clients)
        if np.any(counts == 0):
            empty = int(np.nonzero(counts == 0)[0][0])
            raise InfeasiblePartitionError(f"client {empty} owns no samples")

    def members(self, k: int) -> np.ndarray:
        return np.nonzero(self.owner == k)[0]


@dataclass
class CommunityDecomposition:
    """Node communities plus per-community label histograms."""

    community: np.ndarray
    num_communities: int
    members: list[np.ndarray]
    histograms: np.ndarray  # (M, num_classes), rows sum to 1 or are all zero


def _community_histograms(g: Graph, comm: np.ndarray, M: int) -> np.ndarray:
    c = max(g.num_classes, 1)
    hist = np.zeros((M, c), dtype=np.float64)
    labeled = g.labels >= 0
    if labeled.any():
        np.add.at(hist, (comm[labeled], g.labels[labeled]), 1.0)
    totals = hist.sum(axis=1, keepdims=True)
    nonzero = totals[:, 0] > 0
    hist[nonzero] /= totals[nonzero]
    return hist


def decompose(g: Graph, comm: np.ndarray) -> CommunityDecomposition:
    uniq, compact = np.unique(comm, return_inverse=True)
    M = uniq.size
    members = [np.nonzero(compact == i)[0] for i in range(M)]
    return CommunityDecomposition(compact, M, members, _community_histograms(g, compact, M))


# --------------------------------------------------------------- dirichlet ----


def dirichlet_label_split(
    labels: np.ndarray, num_clients: int, alpha: float, seed: int
) -> ClientAssignment:
    """Split samples so each class spreads over clients with Dirichlet(alpha)
    proportions. Smaller alpha concentrates classes on fewer clients.

    Redraws up to 50 times if some client ends up empty.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if np.any(labels < 0):
        raise ConfigError("dirichlet split requires every sample to be labeled")
    n = labels.size
    K = num_clients
    if K > n:
        raise InfeasiblePartitionError(f"{K} clients for {n} samples")
    if alpha <= 0:
        raise ConfigError("alpha must be positive")
    rng = rng_for(seed, "dirichlet")
    classes = np.unique(labels)
    for _ in range(50):
        owner = np.empty(n, dtype=np.int64)
        for cls in classes:
            members = np.nonzero(labels == cls)[0]
            members = members[rng.permutation(members.size)]
            props = rng.dirichlet(np.full(K, alpha))
            cuts = np.floor(np.cumsum(props)[:-1] * members.size).astype(np.int64)
            for k, chunk in enumerate(np.split(members, cuts)):
                owner[chunk] = k
        if np.bincount(owner, minlength=K).min() > 0:
            return ClientAssignment(owner, K)
    raise InfeasiblePartitionError(
        f"dirichlet split left a client empty after 50 draws (K={K}, alpha={alpha})"
    )


# ----------------------------------------------------------------- louvain ----


def partition_modularity(g: Graph, comm: np.ndarray, resolution: float = 1.0) -> float:
    """Newman modularity of a node partition at the given resolution."""
    m = g.num_edges
    if m == 0:
        return 0.0
    two_m = 2.0 * m
    rows = np.repeat(np.arange(g.num_nodes, dtype=np.int64), g.degrees())
    intra = comm[rows] == comm[g.indices]
    M = int(comm.max()) + 1
    sig_in = np.bincount(comm[rows[intra]], minlength=M).astype(np.float64)
    sig_tot = np.bincount(comm, weights=g.degrees().astype(np.float64), minlength=M)
    return float(np.sum(sig_in / two_m - resolution * (sig_tot / two_m) ** 2))


def _aggregate(indptr, indices, weights, loops, comm, M):
    rows = np.repeat(np.arange(indptr.size - 1, dtype=np.int64), np.diff(indptr))
    cs, cd = comm[rows], comm[indices]
    intra = cs == cd
    new_loops = np.bincount(comm, weights=loops, minlength=M)
    if intra.any():
        new_loops = new_loops + 0.5 * np.bincount(cs[intra], weights=weights[intra], minlength=M)
    es, ed, ew = cs[~intra], cd[~intra], weights[~intra]
    if es.size:
        key = es * M + ed
        uniq, inv = np.unique(key, return_inverse=True)
        w = np.bincount(inv, weights=ew)
        s, d = uniq // M, uniq % M
    else:
        s = d = np.zeros(0, dtype=np.int64)
        w = np.zeros(0, dtype=np.float64)
    new_indptr = np.zeros(M + 1, dtype=np.int64)
    np.add.at(new_indptr, s + 1, 1)
    np.cumsum(new_indptr, out=new_indptr)
    strength = np.bincount(s, weights=w, minlength=M) + 2.0 * new_loops
    return new_indptr, d.astype(np.int64), w, new_loops, strength


def louvain_communities(g: Graph, resolution: float, seed: int) -> CommunityDecomposition:
    """Two-phase Louvain: seeded local moving maximizing modularity gain,
    then graph aggregation, repeated to a fixed point.

    An edgeless graph decomposes into singletons. Modularity is asserted
    non-decreasing across phases.
    """
    n = g.num_nodes
    if g.num_edges == 0:
        return decompose(g, np.arange(n, dtype=np.int64))
    rng = rng_for(seed, "louvain")
    indptr, indices = g.indptr, g.indices
    weights = np.ones(indices.size, dtype=np.float64)
    loops = np.zeros(n, dtype=np.float64)
    strength = np.diff(indptr).astype(np.float64)
    two_m = float(weights.sum())
    node_map = np.arange(n, dtype=np.int64)
    prev_q = -math.inf
    while True:
        cur_n = indptr.size - 1
        comm = np.arange(cur_n, dtype=np.int64)
        comm_tot = strength.copy()
        while True:
            order = rng.permutation(cur_n).astype(np.int64)
            moves = louvain_move_pass(
                indptr, indices, weights, strength, comm, comm_tot, order, two_m, resolution
            )
            if moves == 0:
                break
        uniq, compact = np.unique(comm, return_inverse=True)
        M = uniq.size
        node_map = compact[node_map]
        q = _working_modularity(indptr, indices, weights, loops, strength, compact, M, two_m, resolution)
        assert q >= prev_q - 1e-9, f"modularity decreased across phases: {prev_q} -> {q}"
        prev_q = q
        if M == cur_n:
            break
        indptr, indices, weights, loops, strength = _aggregate(
            indptr, indices, weights, loops, compact, M
        )
    return decompose(g, node_map)


def _working_modularity(indptr, indices, weights, loops, strength, comm, M, two_m, resolution):
    rows = np.repeat(np.arange(indptr.size - 1, dtype=np.int64), np.diff(indptr))
    intra = comm[rows] == comm[indices]
    sig_in = np.bincount(comm[rows[intra]], weights=weights[intra], minlength=M)
    sig_in = sig_in + 2.0 * np.bincount(comm, weights=loops, minlength=M)
    sig_tot = np.bincount(comm, weights=strength, minlength=M)
    return float(np.sum(sig_in / two_m - resolution * (sig_tot / two_m) ** 2))


# -------------------------------------------------------- multilevel k-way ----


def _grow_region(indptr, indices, weights, node_w, nodes, target, min_keep, rng):
    """Greedy graph growing: from a random seed, repeatedly absorb the
    outside node with the heaviest connection to the region until `target`
    weight is reached, always leaving `min_keep` nodes outside."""
    local = {int(u): i for i, u in enumerate(nodes)}
    size = nodes.size
    in_region = np.zeros(size, dtype=bool)
    conn = np.zeros(size, dtype=np.float64)
    seed_i = int(rng.integers(size))
    picked = [seed_i]
    in_region[seed_i] = True
    weight = float(node_w[nodes[seed_i]])
    while weight < target and size - len(picked) > min_keep:
        u = nodes[picked[-1]]
        for jj in range(indptr[u], indptr[u + 1]):
            v = local.get(int(indices[jj]))
            if v is not None and not in_region[v]:
                conn[v] += weights[jj]
        conn[in_region] = -1.0
        best = int(np.argmax(conn))
        if conn[best] <= 0.0:
            # disconnected remainder: take the lowest-index outside node
            best = int(np.nonzero(~in_region)[0][0])
        in_region[best] = True
        picked.append(best)
        weight += float(node_w[nodes[best]])
    return nodes[in_region], nodes[~in_region]


def _initial_partition(indptr, indices, weights, node_w, K, rng):
    """Greedy recursive bisection into K parts (node ids -> part ids)."""
    n = indptr.size - 1
    part = np.zeros(n, dtype=np.int64)
    next_id = [0]

    def recurse(nodes: np.ndarray, k: int):
        if k == 1:
            part[nodes] = next_id[0]
            next_id[0] += 1
            return
        k1 = (k + 1) // 2
        k2 = k - k1
        total = float(node_w[nodes].sum())
        side_a, side_b = _grow_region(
            indptr, indices, weights, node_w, nodes, total * k1 / k, min_keep=k2, rng=rng
        )
        if side_a.size < k1:  # make every recursive call feasible
            need = k1 - side_a.size
            side_a = np.concatenate([side_a, side_b[:need]])
            side_b = side_b[need:]
        recurse(side_a, k1)
        recurse(side_b, k2)

    recurse(np.arange(n, dtype=np.int64), K)
    return part


def _cut_weight(indptr, indices, weights, part):
    rows = np.repeat(np.arange(indptr.size - 1, dtype=np.int64), np.diff(indptr))
    return float(weights[part[rows] != part[indices]].sum()) / 2.0


def _repair_balance(indptr, indices, weights, node_w, part, part_w, K, max_w):
    """Move nodes (cheapest connectivity loss first) until every part fits
    under max_w and none is empty. Only called when refinement could not."""
    for _ in range(part.size * K):
        over = np.nonzero(part_w > max_w)[0]
        empty = np.nonzero(part_w == 0)[0]
        if over.size == 0 and empty.size == 0:
            return
        if empty.size:
            src = int(np.argmax(part_w))
            dst = int(empty[0])
        else:
            src = int(over[0])
            dst = int(np.argmin(part_w))
        candidates = np.nonzero(part == src)[0]
        best, best_loss = -1, math.inf
        for u in candidates:
            loss = 0.0
            for jj in range(indptr[u], indptr[u + 1]):
                v = indices[jj]
                if part[v] == src:
                    loss += weights[jj]
                elif part[v] == dst:
                    loss -= weights[jj]
            if loss < best_loss:
                best, best_loss = int(u), loss
        part[best] = dst
        part_w[src] -= node_w[best]
        part_w[dst] += node_w[best]
    raise InfeasiblePartitionError("balance repair did not converge")


def metis_kway(
    g: Graph, num_clients: int, imbalance_eps: float = 0.05, seed: int = 0
) -> ClientAssignment:
    """Multilevel k-way partition: heavy-edge matching coarsens the graph to
    at most 30*K supernodes, greedy recursive bisection seeds the partition,
    and boundary Fiduccia-Mattheyses passes refine it at every level.

    Every part holds at most (1 + imbalance_eps) * ceil(n / K) nodes and all
    K parts are non-empty.
    """
    n = g.num_nodes
    K = num_clients
    if K > n:
        raise InfeasiblePartitionError(f"{K} parts for {n} nodes")
    if K == 1:
        return ClientAssignment(np.zeros(n, dtype=np.int64), 1)
    max_w = (1.0 + imbalance_eps) * math.ceil(n / K)
    rng = rng_for(seed, "metis")

    levels = []
    indptr, indices = g.indptr, g.indices
    weights = np.ones(indices.size, dtype=np.float64)
    node_w = np.ones(n, dtype=np.float64)
    while indptr.size - 1 > 30 * K:
        cur_n = indptr.size - 1
        match = np.full(cur_n, -1, dtype=np.int64)
        order = rng.permutation(cur_n).astype(np.int64)
        hem_match(indptr, indices, weights, node_w, max_w, order, match)
        pair_lo = np.minimum(np.arange(cur_n), match)
        uniq, cmap = np.unique(pair_lo, return_inverse=True)
        if uniq.size == cur_n:
            break
        levels.append((indptr, indices, weights, node_w, cmap))
        new_node_w = np.bincount(cmap, weights=node_w, minlength=uniq.size)
        indptr, indices, weights, _, _ = _aggregate(
            indptr, indices, weights, np.zeros(cur_n), cmap, uniq.size
        )
        node_w = new_node_w

    part = _initial_partition(indptr, indices, weights, node_w, K, rng)
    while True:
        part_w = np.bincount(part, weights=node_w, minlength=K)
        cap = part.size if part.size <= 4096 else 4096
        for _ in range(8):
            gain = fm_pass(indptr, indices, weights, node_w, part, part_w, K, max_w, cap)
            if gain <= 1e-9:
                break
        if np.any(part_w > max_w) or np.any(part_w == 0):
            _repair_balance(indptr, indices, weights, node_w, part, part_w, K, max_w)
        if not levels:
            break
        indptr, indices, weights, node_w, cmap = levels.pop()
        part = part[cmap]

    part_w = np.bincount(part, minlength=K)
    if np.any(part_w > max_w) or np.any(part_w == 0):
        raise InfeasiblePartitionError("k-way refinement failed balance constraints")
    return ClientAssignment(part, K)


# --------------------------------------------- communities -> K clients ----


def communities_to_clients_average(
    comms: CommunityDecomposition, num_clients: int
) -> ClientAssignment:
    """Longest-processing-time balancing: communities sorted by size
    descending go to the currently lightest client."""
    M, K = comms.num_communities, num_clients
    if M < K:
        raise InfeasiblePartitionError(f"{M} communities cannot fill {K} clients")
    sizes = np.array([m.size for m in comms.members], dtype=np.int64)
    order = np.lexsort((np.arange(M), -sizes))  # size desc, ties by community id
    loads = np.zeros(K, dtype=np.int64)
    owner = np.empty(comms.community.size, dtype=np.int64)
    for ci in order:
        k = int(np.argmin(loads))  # ties resolve to the lowest client index
        loads[k] += sizes[ci]
        owner[comms.members[ci]] = k
    return ClientAssignment(owner, K)


def communities_to_clients_label_cluster(
    comms: CommunityDecomposition, num_clients: int, capacity_beta: float = 0.3
) -> ClientAssignment:
    """Agglomerative merging by label-distribution similarity.

    Repeatedly merges the pair of groups with the largest cosine similarity
    between size-weighted label histograms, provided the merged group stays
    under (1 + capacity_beta) * ceil(n / K) nodes, until K groups remain.
    """
    M, K = comms.num_communities, num_clients
    if M < K:
        raise InfeasiblePartitionError(f"{M} communities cannot fill {K} clients")
    n = comms.community.size
    cap = (1.0 + capacity_beta) * math.ceil(n / K)
    sizes = [float(m.size) for m in comms.members]
    counts = [comms.histograms[i] * sizes[i] for i in range(M)]
    groups: list[list[int]] = [[i] for i in range(M)]
    alive = list(range(M))

    def cosine(a: np.ndarray, b: np.ndarray) -> float:
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0.0 or nb == 0.0:
            return 0.0
        return float(a @ b / (na * nb))

    while len(alive) > K:
        best = None
        best_sim = -math.inf
        for ai in range(len(alive)):
            for bi in range(ai + 1, len(alive)):
                i, j = alive[ai], alive[bi]
                if sizes[i] + sizes[j] > cap:
                    continue
                sim = cosine(counts[i], counts[j])
                if sim > best_sim + 1e-12:
                    best_sim = sim
                    best = (ai, bi)
        if best is None:
            raise InfeasiblePartitionError(
                f"cannot reach {K} groups: every merge exceeds the capacity "
                f"{cap:.0f} nodes (= (1+{capacity_beta})*ceil({n}/{K}))"
            )
        ai, bi = best
        i, j = alive[ai], alive[bi]
        groups[i].extend(groups[j])
        counts[i] = counts[i] + counts[j]
        sizes[i] += sizes[j]
        del alive[bi]
    owner = np.empty(n, dtype=np.int64)
    for k, gi in enumerate(alive):
        for ci in groups[gi]:
            owner[comms.members[ci]] = k
    return ClientAssignment(owner, K)


# ----------------------------------------------------- induced subgraphs ----


@dataclass
class ClientSplit:
    """Per-client induced subgraphs plus bookkeeping for reporting."""

    graphs: list[Graph]
    node_maps: list[np.ndarray] = field(default_factory=list)  # local -> global
    dropped_edges: int = 0


def build_client_subgraphs(g: Graph, assignment: ClientAssignment) -> ClientSplit:
    """Induced subgraph per client; edges crossing clients are dropped and
    counted. Features, labels, targets and masks are restricted and nodes
    re-indexed in ascending global order."""
    if assignment.owner.size != g.num_nodes:
        raise ConfigError("assignment does not cover the graph's nodes")
    edges = g.edge_array()
    same = assignment.owner[edges[:, 0]] == assignment.owner[edges[:, 1]]
    dropped = int(edges.shape[0] - same.sum())
    graphs, maps = [], []
    local_index = np.zeros(g.num_nodes, dtype=np.int64)
    for k in range(assignment.num_clients):
        nodes = assignment.members(k)
        local_index[nodes] = np.arange(nodes.size)
        ek = edges[same & (assignment.owner[edges[:, 0]] == k)]
        graphs.append(
            make_graph(
                nodes.size,
                local_index[ek],
                g.features[nodes].copy(),
                g.labels[nodes].copy(),
                num_classes=g.num_classes,
                targets=None if g.targets is None else g.targets[nodes].copy(),
                masks=(
                    g.train_mask[nodes].copy(),
                    g.val_mask[nodes].copy(),
                    g.test_mask[nodes].copy(),
                ),
            )
        )
        maps.append(nodes)
    if dropped:
        log.info("dropped %d cross-client edges during induction", dropped)
    return ClientSplit(graphs, maps, dropped)


# --------------------------------------------------- sample-level splits ----


def uniform_split(n: int, num_clients: int, seed: int) -> ClientAssignment:
    """Seeded iid split into near-equal chunks (used by feature_skew)."""
    if num_clients > n:
        raise InfeasiblePartitionError(f"{num_clients} clients for {n} samples")
    perm = rng_for(seed, "uniform").permutation(n)
    owner = np.empty(n, dtype=np.int64)
    for k, chunk in enumerate(np.array_split(perm, num_clients)):
        owner[chunk] = k
    return ClientAssignment(owner, num_clients)


def topology_skew_split(coll: GraphCollection, num_clients: int) -> ClientAssignment:
    """Sort graphs ascending by average degree (2m/n, ties by index) and cut
    into K contiguous chunks whose counts differ by at most one."""
    G = len(coll)
    if num_clients > G:
        raise InfeasiblePartitionError(f"{num_clients} clients for {G} graphs")
    avg_deg = np.array([2.0 * g.num_edges / g.num_nodes for g in coll.graphs])
    order = np.lexsort((np.arange(G), avg_deg))
    owner = np.empty(G, dtype=np.int64)
    for k, chunk in enumerate(np.array_split(order, num_clients)):
        owner[chunk] = k
    return ClientAssignment(owner, num_clients)


def cross_domain_split(dataset_sizes: list[int], num_clients: int) -> ClientAssignment:
    """Distribute D whole datasets over K >= D clients; round-robin client
    assignment, then each dataset's samples split evenly (contiguously)
    among its clients. A client never mixes domains."""
    D = len(dataset_sizes)
    if num_clients < D:
        raise InfeasiblePartitionError(
            f"{num_clients} clients cannot host {D} datasets without mixing domains"
        )
    client_of = [[] for _ in range(D)]
    for k in range(num_clients):
        client_of[k % D].append(k)
    owner = np.empty(int(sum(dataset_sizes)), dtype=np.int64)
    offset = 0
    for d, size in enumerate(dataset_sizes):
        chunks = np.array_split(np.arange(size, dtype=np.int64), len(client_of[d]))
        for k, chunk in zip(client_of[d], chunks):
            owner[offset + chunk] = k
        offset += size
    return ClientAssignment(owner, num_clients)


def _validate_skew(mode: str, params: tuple[float, float]) -> None:
    lo, hi = params
    if mode not in ("gaussian", "laplacian", "scale"):
        raise ConfigError(f"unknown feature skew mode {mode!r}")
    if lo > hi:
        raise ConfigError("feature skew range must satisfy lo <= hi")
    if mode in ("gaussian", "laplacian") and lo < 0:
        raise ConfigError("noise scale range must be non-negative")


def _transform_features(g: Graph, mode: str, p: float, rng) -> Graph:
    X = g.features.copy()
    if mode == "gaussian" and p > 0:
        X += rng.normal(0.0, p, size=X.shape)
    elif mode == "laplacian" and p > 0:
        X += rng.laplace(0.0, p, size=X.shape)
    elif mode == "scale":
        X *= p
    return graph_replace(g, features=X)


def feature_skew_apply(
    client_graphs: list[Graph],
    mode: str,
    params: tuple[float, float],
    seed: int,
) -> list[Graph]:
    """Give every client its own feature perturbation, drawn uniformly from
    `params = (lo, hi)`: additive gaussian/laplacian noise of that scale, or
    a multiplicative rescaling. Inputs are left untouched."""
    _validate_skew(mode, params)
    lo, hi = params
    out = []
    for k, g in enumerate(client_graphs):
        rng = rng_for(seed, "feature_skew", k)
        p = float(rng.uniform(lo, hi))
        out.append(_transform_features(g, mode, p, rng))
    return out


def feature_skew_apply_collections(
    client_collections: list[GraphCollection],
    mode: str,
    params: tuple[float, float],
    seed: int,
) -> list[GraphCollection]:
    """Collection variant: one parameter per client, shared by every graph
    that client holds."""
    _validate_skew(mode, params)
    lo, hi = params
    out = []
    for k, coll in enumerate(client_collections):
        rng = rng_for(seed, "feature_skew", k)
        p = float(rng.uniform(lo, hi))
        graphs = [_transform_features(g, mode, p, rng) for g in coll.graphs]
        if coll.labels is not None:
            out.append(GraphCollection(graphs, labels=coll.labels, num_classes=coll.num_classes))
        else:
            out.append(GraphCollection(graphs, targets=coll.targets))
    return out
