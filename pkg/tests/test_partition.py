import itertools
import math

import numpy as np
import pytest

from fglsim.errors import ConfigError, InfeasiblePartitionError
from fglsim.graph import GraphCollection, generate_sbm, make_graph
from fglsim.partition import (
    ClientAssignment,
    CommunityDecomposition,
    PartitionSpec,
    build_client_subgraphs,
    communities_to_clients_average,
    communities_to_clients_label_cluster,
    cross_domain_split,
    decompose,
    dirichlet_label_split,
    feature_skew_apply,
    louvain_communities,
    metis_kway,
    partition_modularity,
    topology_skew_split,
    uniform_split,
)


def two_cliques(size: int, labels=None):
    """Two `size`-cliques joined by a single bridge edge."""
    edges = []
    for block in (range(size), range(size, 2 * size)):
        edges.extend([u, v] for u, v in itertools.combinations(block, 2))
    edges.append([size - 1, size])
    n = 2 * size
    if labels is None:
        labels = [0] * size + [1] * size
    return make_graph(n, np.array(edges), np.eye(n), labels)


def dense_modularity(g, comm, resolution=1.0):
    """Independent dense-matrix modularity."""
    n = g.num_nodes
    A = np.zeros((n, n))
    for u, v in g.edge_array():
        A[u, v] = A[v, u] = 1.0
    two_m = A.sum()
    k = A.sum(axis=1)
    q = 0.0
    for i in range(n):
        for j in range(n):
            if comm[i] == comm[j]:
                q += A[i, j] / two_m - resolution * k[i] * k[j] / two_m**2
    return q


def all_partitions(items):
    """Every set partition of `items` (restricted growth strings)."""
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for smaller in all_partitions(rest):
        for i in range(len(smaller)):
            yield smaller[:i] + [[first] + smaller[i]] + smaller[i + 1 :]
        yield [[first]] + smaller


def blocks_to_comm(blocks, n):
    comm = np.zeros(n, dtype=np.int64)
    for i, block in enumerate(blocks):
        for u in block:
            comm[u] = i
    return comm


# ----------------------------------------------------------------- dirichlet ----


def test_dirichlet_single_client():
    labels = np.array([0, 1, 0, 1, 2])
    a = dirichlet_label_split(labels, 1, 1.0, seed=0)
    assert a.owner.tolist() == [0] * 5


def test_dirichlet_deterministic_and_complete():
    labels = np.repeat(np.arange(3), 40)
    a = dirichlet_label_split(labels, 4, 0.5, seed=9)
    b = dirichlet_label_split(labels, 4, 0.5, seed=9)
    assert np.array_equal(a.owner, b.owner)
    assert np.bincount(a.owner, minlength=4).min() >= 1
    assert a.owner.size == labels.size


def test_dirichlet_rejects_unlabeled():
    with pytest.raises(ConfigError):
        dirichlet_label_split(np.array([0, -1, 1]), 2, 1.0, seed=0)


def test_dirichlet_too_many_clients():
    with pytest.raises(InfeasiblePartitionError):
        dirichlet_label_split(np.array([0, 1]), 5, 1.0, seed=0)


def mean_pairwise_tv(labels, owner, K, num_classes):
    hists = np.zeros((K, num_classes))
    np.add.at(hists, (owner, labels), 1.0)
    hists /= hists.sum(axis=1, keepdims=True)
    dists = [
        0.5 * np.abs(hists[a] - hists[b]).sum()
        for a, b in itertools.combinations(range(K), 2)
    ]
    return float(np.mean(dists))


def test_dirichlet_alpha_controls_heterogeneity():
    # Monte-Carlo oracle: smaller alpha must yield more skewed client labels
    labels = np.repeat(np.arange(2), 10_000)
    K = 10

    def mean_tv(alpha):
        vals = [
            mean_pairwise_tv(labels, dirichlet_label_split(labels, K, alpha, seed=s).owner, K, 2)
            for s in range(5)
        ]
        return float(np.mean(vals))

    assert mean_tv(0.1) > mean_tv(100.0)


def test_dirichlet_huge_alpha_concentrates():
    labels = np.repeat(np.arange(2), 10_000)
    K = 10
    a = dirichlet_label_split(labels, K, 1e6, seed=3)
    hists = np.zeros((K, 2))
    np.add.at(hists, (a.owner, labels), 1.0)
    shares = hists / hists.sum(axis=0, keepdims=True)
    assert np.all(np.abs(shares - 1.0 / K) < 0.02)


# ------------------------------------------------------------------- louvain ----


def test_louvain_two_cliques_matches_bruteforce():
    g = two_cliques(3)
    comms = louvain_communities(g, resolution=1.0, seed=0)
    best_q, best_blocks = -math.inf, None
    for blocks in all_partitions(list(range(6))):
        q = dense_modularity(g, blocks_to_comm(blocks, 6))
        if q > best_q:
            best_q, best_blocks = q, blocks
    assert sorted(sorted(b) for b in best_blocks) == [[0, 1, 2], [3, 4, 5]]
    assert comms.num_communities == 2
    assert sorted(sorted(m.tolist()) for m in comms.members) == [[0, 1, 2], [3, 4, 5]]
    assert partition_modularity(g, comms.community) == pytest.approx(best_q)


def test_louvain_single_node():
    g = make_graph(1, np.zeros((0, 2)), [[1.0]], [0])
    comms = louvain_communities(g, 1.0, seed=0)
    assert comms.num_communities == 1


def test_louvain_edgeless_singletons():
    g = make_graph(4, np.zeros((0, 2)), np.eye(4), [0, 0, 1, 1])
    comms = louvain_communities(g, 1.0, seed=0)
    assert comms.num_communities == 4


def test_louvain_beats_singletons():
    for seed in range(3):
        g = generate_sbm([20, 20, 20], 0.5, 0.02, 2, seed=seed)
        comms = louvain_communities(g, 1.0, seed=seed)
        q = partition_modularity(g, comms.community)
        q0 = partition_modularity(g, np.arange(g.num_nodes))
        assert q >= q0


def test_louvain_deterministic():
    g = generate_sbm([15, 15], 0.4, 0.05, 2, seed=2)
    a = louvain_communities(g, 1.0, seed=5)
    b = louvain_communities(g, 1.0, seed=5)
    assert np.array_equal(a.community, b.community)


def test_louvain_modularity_matches_dense():
    g = generate_sbm([8, 8], 0.6, 0.1, 2, seed=1)
    comms = louvain_communities(g, 1.0, seed=1)
    assert partition_modularity(g, comms.community) == pytest.approx(
        dense_modularity(g, comms.community)
    )


def test_louvain_histograms():
    g = two_cliques(3, labels=[0, 0, 1, -1, 1, 1])
    comms = louvain_communities(g, 1.0, seed=0)
    for i, members in enumerate(comms.members):
        hist = comms.histograms[i]
        if 0 in members:
            assert hist.tolist() == pytest.approx([2 / 3, 1 / 3])
        else:
            assert hist.tolist() == pytest.approx([0.0, 1.0])


# ---------------------------------------------------------------- metis k-way ----


def brute_force_min_balanced_cut(g, K, eps):
    """Enumerate all K-colorings (K=2 here) under the balance cap."""
    n = g.num_nodes
    cap = (1 + eps) * math.ceil(n / K)
    edges = g.edge_array()
    best = math.inf
    for bits in range(1, 2**n - 1):
        part = np.array([(bits >> i) & 1 for i in range(n)])
        counts = np.bincount(part, minlength=2)
        if counts.max() > cap or counts.min() == 0:
            continue
        cut = int((part[edges[:, 0]] != part[edges[:, 1]]).sum())
        best = min(best, cut)
    return best


def cut_of(g, owner):
    edges = g.edge_array()
    return int((owner[edges[:, 0]] != owner[edges[:, 1]]).sum())


def test_metis_single_part():
    g = two_cliques(4)
    a = metis_kway(g, 1, 0.1, seed=0)
    assert cut_of(g, a.owner) == 0
    assert a.num_clients == 1


def test_metis_bridge_fixture_matches_bruteforce():
    g = two_cliques(4)
    oracle = brute_force_min_balanced_cut(g, 2, 0.1)
    assert oracle == 1
    a = metis_kway(g, 2, 0.1, seed=0)
    assert cut_of(g, a.owner) == oracle
    sizes = np.bincount(a.owner, minlength=2)
    assert sorted(sizes.tolist()) == [4, 4]


def test_metis_balance_and_cover():
    for seed in range(3):
        g = generate_sbm([40, 40, 40], 0.3, 0.02, 2, seed=seed)
        for K in (2, 3, 5):
            a = metis_kway(g, K, 0.05, seed=seed)
            sizes = np.bincount(a.owner, minlength=K)
            assert sizes.sum() == g.num_nodes
            assert sizes.min() >= 1
            assert sizes.max() <= (1 + 0.05) * math.ceil(g.num_nodes / K)


def test_metis_sbm_cut_at_most_planted():
    g = generate_sbm([50, 50], 0.5, 0.01, 2, seed=1)
    planted = np.repeat([0, 1], 50)
    edges = g.edge_array()
    planted_cut = int((planted[edges[:, 0]] != planted[edges[:, 1]]).sum())
    a = metis_kway(g, 2, 0.05, seed=1)
    assert cut_of(g, a.owner) <= planted_cut


def test_metis_coarsening_path():
    # large enough that 30*K forces at least one coarsening level
    g = generate_sbm([120, 120], 0.2, 0.01, 2, seed=4)
    a = metis_kway(g, 2, 0.05, seed=4)
    sizes = np.bincount(a.owner, minlength=2)
    assert sizes.max() <= (1 + 0.05) * math.ceil(240 / 2)
    planted = np.repeat([0, 1], 120)
    edges = g.edge_array()
    planted_cut = int((planted[edges[:, 0]] != planted[edges[:, 1]]).sum())
    assert cut_of(g, a.owner) <= planted_cut


def test_metis_infeasible():
    g = two_cliques(3)
    with pytest.raises(InfeasiblePartitionError):
        metis_kway(g, 7, 0.05, seed=0)


def test_metis_deterministic():
    g = generate_sbm([30, 30], 0.3, 0.05, 2, seed=6)
    a = metis_kway(g, 3, 0.05, seed=8)
    b = metis_kway(g, 3, 0.05, seed=8)
    assert np.array_equal(a.owner, b.owner)


# -------------------------------------------------- community reconciliation ----


def fake_comms(sizes, hists, num_classes=2):
    n = int(sum(sizes))
    community = np.empty(n, dtype=np.int64)
    members = []
    at = 0
    for i, s in enumerate(sizes):
        community[at : at + s] = i
        members.append(np.arange(at, at + s))
        at += s
    return CommunityDecomposition(community, len(sizes), members, np.asarray(hists, dtype=float))


def test_average_one_community_per_client():
    comms = fake_comms([4, 4, 4], [[1, 0]] * 3)
    a = communities_to_clients_average(comms, 3)
    loads = np.bincount(a.owner, minlength=3)
    assert loads.tolist() == [4, 4, 4]


def test_average_lpt_trace():
    comms = fake_comms([5, 3, 3, 1], [[1, 0]] * 4)
    a = communities_to_clients_average(comms, 2)
    loads = np.bincount(a.owner, minlength=2)
    assert sorted(loads.tolist()) == [6, 6]


def test_average_infeasible():
    comms = fake_comms([3, 3], [[1, 0]] * 2)
    with pytest.raises(InfeasiblePartitionError):
        communities_to_clients_average(comms, 3)


def test_label_cluster_pairs_identical_histograms():
    comms = fake_comms([2, 2, 2, 2], [[1, 0], [1, 0], [0, 1], [0, 1]])
    a = communities_to_clients_label_cluster(comms, 2, capacity_beta=0.3)
    # communities 0,1 merge and 2,3 merge
    assert a.owner[comms.members[0]].tolist() == a.owner[comms.members[1]].tolist()
    assert a.owner[comms.members[2]].tolist() == a.owner[comms.members[3]].tolist()
    assert a.owner[0] != a.owner[4]


def test_label_cluster_identity_when_m_equals_k():
    comms = fake_comms([2, 3, 4], [[1, 0], [0.5, 0.5], [0, 1]])
    a = communities_to_clients_label_cluster(comms, 3)
    assert len(set(a.owner[m[0]] for m in comms.members)) == 3


def exhaustive_best_grouping(comms, K, capacity_beta):
    """Oracle: maximize total within-group pairwise cosine of the
    size-weighted histograms over all K-groupings under the capacity."""
    M = comms.num_communities
    n = comms.community.size
    cap = (1 + capacity_beta) * math.ceil(n / K)
    sizes = np.array([m.size for m in comms.members], dtype=float)
    counts = comms.histograms * sizes[:, None]

    def cos(a, b):
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        return 0.0 if na == 0 or nb == 0 else float(a @ b / (na * nb))

    best_val, best_blocks = -math.inf, None
    for blocks in all_partitions(list(range(M))):
        if len(blocks) != K:
            continue
        if any(sizes[list(b)].sum() > cap for b in blocks if len(b) > 1):
            continue
        val = sum(
            cos(counts[i], counts[j])
            for b in blocks
            for i, j in itertools.combinations(sorted(b), 2)
        )
        if val > best_val:
            best_val, best_blocks = val, blocks
    return best_blocks


def grouping_signature(owner, members):
    groups = {}
    for ci, m in enumerate(members):
        groups.setdefault(int(owner[m[0]]), set()).add(ci)
    return sorted(tuple(sorted(s)) for s in groups.values())


def test_label_cluster_matches_exhaustive_oracle():
    # six communities in three clear histogram clusters
    hists = [
        [0.9, 0.1, 0.0],
        [0.85, 0.15, 0.0],
        [0.1, 0.9, 0.0],
        [0.05, 0.9, 0.05],
        [0.0, 0.1, 0.9],
        [0.05, 0.05, 0.9],
    ]
    comms = fake_comms([4, 5, 4, 5, 4, 5], hists, num_classes=3)
    a = communities_to_clients_label_cluster(comms, 3, capacity_beta=0.3)
    oracle = exhaustive_best_grouping(comms, 3, 0.3)
    assert grouping_signature(a.owner, comms.members) == sorted(
        tuple(sorted(b)) for b in oracle
    )


def test_label_cluster_capacity_infeasible():
    # cap = ceil(18/2) = 9 but every pairwise merge exceeds it
    comms = fake_comms([7, 6, 5], [[1, 0]] * 3)
    with pytest.raises(InfeasiblePartitionError, match="capacity"):
        communities_to_clients_label_cluster(comms, 2, capacity_beta=0.0)


# --------------------------------------------------------- induced subgraphs ----


def test_subgraphs_single_client_identity():
    g = two_cliques(3)
    split = build_client_subgraphs(g, ClientAssignment(np.zeros(6, dtype=np.int64), 1))
    assert split.dropped_edges == 0
    assert np.array_equal(split.graphs[0].edge_array(), g.edge_array())


def test_subgraphs_drop_cross_edges():
    g = make_graph(2, [[0, 1]], np.eye(2), [0, 1])
    split = build_client_subgraphs(g, ClientAssignment(np.array([0, 1]), 2))
    assert split.dropped_edges == 1
    assert split.graphs[0].num_edges == 0
    assert split.graphs[1].num_edges == 0


def test_subgraphs_bridge_split_keeps_cliques():
    g = two_cliques(4)
    owner = np.repeat([0, 1], 4)
    split = build_client_subgraphs(g, ClientAssignment(owner, 2))
    assert split.dropped_edges == 1
    total = sum(cg.num_edges for cg in split.graphs)
    assert total == g.num_edges - 1
    for cg in split.graphs:
        assert cg.num_edges == 6  # intact 4-clique


def test_subgraphs_restrict_everything():
    g = generate_sbm([6, 6], 0.8, 0.2, 3, seed=0)
    g.train_mask[:4] = True
    g.val_mask[4:6] = True
    owner = np.repeat([0, 1], 6)
    split = build_client_subgraphs(g, ClientAssignment(owner, 2))
    cg = split.graphs[0]
    assert np.array_equal(cg.features, g.features[:6])
    assert np.array_equal(cg.labels, g.labels[:6])
    assert cg.train_mask.sum() == 4
    assert np.array_equal(split.node_maps[1], np.arange(6, 12))


# ------------------------------------------------------- sample-level splits ----


def make_collection(avg_degrees):
    graphs = []
    for d in avg_degrees:
        # path graphs of varying length give varying average degree
        n = max(2, d)
        edges = [[i, i + 1] for i in range(n - 1)]
        graphs.append(make_graph(n, np.array(edges), np.ones((n, 2)), [-1] * n, num_classes=2))
    return GraphCollection(graphs, labels=np.zeros(len(avg_degrees), dtype=np.int64), num_classes=1)


def test_topology_skew_sorted_chunks():
    graphs = []
    for extra in (0, 1, 2, 3):  # increasing density
        n = 5
        edges = [[i, i + 1] for i in range(n - 1)] + [[0, 2 + e] for e in range(extra)]
        graphs.append(make_graph(n, np.array(edges), np.ones((n, 1)), [-1] * n, num_classes=1))
    coll = GraphCollection(graphs, labels=np.zeros(4, dtype=np.int64), num_classes=1)
    a = topology_skew_split(coll, 2)
    assert a.owner.tolist() == [0, 0, 1, 1]


def test_topology_skew_single_client():
    coll = make_collection([2, 3, 4])
    a = topology_skew_split(coll, 1)
    assert a.owner.tolist() == [0, 0, 0]


def test_topology_skew_chunk_sizes():
    coll = make_collection([2] * 10)
    a = topology_skew_split(coll, 3)
    counts = np.bincount(a.owner, minlength=3)
    assert sorted(counts.tolist(), reverse=True) == [4, 3, 3]


def test_topology_skew_infeasible():
    coll = make_collection([2, 3])
    with pytest.raises(InfeasiblePartitionError):
        topology_skew_split(coll, 3)


def test_cross_domain_identity():
    a = cross_domain_split([4, 5, 6], 3)
    assert a.owner[:4].tolist() == [0] * 4
    assert a.owner[4:9].tolist() == [1] * 5
    assert a.owner[9:].tolist() == [2] * 6


def test_cross_domain_even_split():
    a = cross_domain_split([10, 10], 4)
    counts = np.bincount(a.owner, minlength=4)
    assert counts.tolist() == [5, 5, 5, 5]
    # clients 0 and 2 serve dataset 0; 1 and 3 serve dataset 1
    assert set(a.owner[:10].tolist()) == {0, 2}
    assert set(a.owner[10:].tolist()) == {1, 3}


def test_cross_domain_infeasible():
    with pytest.raises(InfeasiblePartitionError):
        cross_domain_split([3, 3, 3], 2)


def test_uniform_split_cover():
    a = uniform_split(11, 3, seed=0)
    counts = np.bincount(a.owner, minlength=3)
    assert counts.sum() == 11
    assert counts.max() - counts.min() <= 1


# ----------------------------------------------------------- feature skew ----


def test_feature_skew_zero_noise():
    g = generate_sbm([5], 0.5, 0.0, 3, seed=0)
    out = feature_skew_apply([g], "gaussian", (0.0, 0.0), seed=1)
    assert np.array_equal(out[0].features, g.features)
    assert out[0] is not g


def test_feature_skew_scale_doubles():
    g = generate_sbm([5], 0.5, 0.0, 3, seed=0)
    out = feature_skew_apply([g], "scale", (2.0, 2.0), seed=1)
    assert np.allclose(out[0].features, 2.0 * g.features)


def test_feature_skew_originals_untouched():
    g = generate_sbm([5], 0.5, 0.0, 3, seed=0)
    before = g.features.copy()
    feature_skew_apply([g], "gaussian", (1.0, 1.0), seed=1)
    assert np.array_equal(g.features, before)


def test_feature_skew_gaussian_moments():
    g = make_graph(1000, np.zeros((0, 2)), np.zeros((1000, 100)), [-1] * 1000, num_classes=1)
    out = feature_skew_apply([g], "gaussian", (1.0, 1.0), seed=2)
    diff = out[0].features - g.features
    n = diff.size
    assert abs(diff.mean()) < 4.0 / math.sqrt(n)
    assert abs(diff.var() - 1.0) < 0.05


def test_feature_skew_negative_sigma_rejected():
    g = generate_sbm([4], 0.5, 0.0, 2, seed=0)
    with pytest.raises(ConfigError):
        feature_skew_apply([g], "gaussian", (-1.0, 1.0), seed=0)


def test_partition_spec_validation():
    with pytest.raises(ConfigError):
        PartitionSpec("unknown_strategy", 4)
    with pytest.raises(ConfigError):
        PartitionSpec("label_dirichlet", 4, alpha=0.0)
    spec = PartitionSpec("label_dirichlet", 4)
    assert spec.alpha == 1.0
