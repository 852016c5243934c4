"""Client-level heterogeneity analysis.

Quantifies how unevenly a partition spread features, labels and topology
over clients: per-client label histograms, a symmetric feature-KL matrix,
edge/node homophily and basic topology statistics. Undefined metrics (for
example homophily on an unlabeled client) are reported as None and encode
as JSON null.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError
from .graph import Graph, connected_components

KL_BINS_DEFAULT = 16


@dataclass
class TopologyRecord:
    degree_mean: float
    degree_std: float
    degree_max: int
    centrality_mean: float
    largest_component_fraction: float


@dataclass
class HeterogeneityReport:
    num_clients: int
    label_histograms: list[list[float]]
    feature_kl: list[list[float]]
    edge_homophily: list[float | None]
    node_homophily: list[float | None]
    topology: list[TopologyRecord]
    dropped_cross_edges: int

    def to_dict(self) -> dict:
        return asdict(self)


def label_distribution(client_graphs: list[Graph]) -> list[np.ndarray]:
    """Normalized label histogram per client (all-zero when unlabeled)."""
    c = max(g.num_classes for g in client_graphs)
    out = []
    for g in client_graphs:
        hist = np.zeros(c, dtype=np.float64)
        labeled = g.labels[g.labels >= 0]
        if labeled.size:
            hist[: g.num_classes] = np.bincount(labeled, minlength=g.num_classes)
            hist /= hist.sum()
        out.append(hist)
    return out


def feature_kl_matrix(client_graphs: list[Graph], bins: int = KL_BINS_DEFAULT) -> np.ndarray:
    """Mean symmetric KL divergence between per-client feature histograms.

    Each feature dimension is histogrammed over its global [min, max] range
    with add-one smoothing; entry (a, b) averages the symmetrized KL
    0.5*(KL(Pa||Pb) + KL(Pb||Pa)) over dimensions. Dimensions with zero
    global range contribute 0.
    """
    if bins < 2:
        raise ConfigError("feature KL needs at least 2 bins")
    K = len(client_graphs)
    f = client_graphs[0].feature_dim
    if any(g.feature_dim != f for g in client_graphs):
        raise ConfigError("clients disagree on feature_dim")
    out = np.zeros((K, K), dtype=np.float64)
    if K == 1 or f == 0:
        return out
    for d in range(f):
        cols = [g.features[:, d] for g in client_graphs]
        lo = min(c.min() for c in cols)
        hi = max(c.max() for c in cols)
        if hi <= lo:
            continue
        probs = np.empty((K, bins), dtype=np.float64)
        for k, col in enumerate(cols):
            counts, _ = np.histogram(col, bins=bins, range=(lo, hi))
            smoothed = counts + 1.0
            probs[k] = smoothed / smoothed.sum()
        logs = np.log(probs)
        for a in range(K):
            for b in range(a + 1, K):
                kl_ab = float(np.sum(probs[a] * (logs[a] - logs[b])))
                kl_ba = float(np.sum(probs[b] * (logs[b] - logs[a])))
                out[a, b] += 0.5 * (kl_ab + kl_ba)
    out /= f
    out += out.T
    return out


def edge_homophily(g: Graph) -> float | None:
    """Fraction of edges whose endpoints share a label; edges touching an
    unlabeled endpoint are excluded entirely. None when nothing counts."""
    edges = g.edge_array()
    if edges.shape[0] == 0:
        return None
    lu = g.labels[edges[:, 0]]
    lv = g.labels[edges[:, 1]]
    counted = (lu >= 0) & (lv >= 0)
    if not counted.any():
        return None
    return float((lu[counted] == lv[counted]).mean())


def node_homophily(g: Graph) -> float | None:
    """Mean over labeled nodes with at least one labeled neighbor of the
    same-label fraction among labeled neighbors. None when no node
    qualifies."""
    fractions = []
    for u in range(g.num_nodes):
        if g.labels[u] < 0:
            continue
        neigh = g.neighbors(u)
        lab = g.labels[neigh]
        lab = lab[lab >= 0]
        if lab.size == 0:
            continue
        fractions.append(float((lab == g.labels[u]).mean()))
    if not fractions:
        return None
    return float(np.mean(fractions))


def topology_report(g: Graph) -> TopologyRecord:
    deg = g.degrees()
    n = g.num_nodes
    _, sizes = connected_components(g)
    return TopologyRecord(
        degree_mean=float(deg.mean()),
        degree_std=float(deg.std()),
        degree_max=int(deg.max()),
        centrality_mean=0.0 if n == 1 else float((deg / (n - 1)).mean()),
        largest_component_fraction=float(sizes.max() / n),
    )


def heterogeneity_report(
    client_graphs: list[Graph],
    dropped_cross_edges: int = 0,
    bins: int = KL_BINS_DEFAULT,
) -> HeterogeneityReport:
    """Assemble the full per-partition heterogeneity report."""
    return HeterogeneityReport(
        num_clients=len(client_graphs),
        label_histograms=[h.tolist() for h in label_distribution(client_graphs)],
        feature_kl=feature_kl_matrix(client_graphs, bins).tolist(),
        edge_homophily=[edge_homophily(g) for g in client_graphs],
        node_homophily=[node_homophily(g) for g in client_graphs],
        topology=[topology_report(g) for g in client_graphs],
        dropped_cross_edges=dropped_cross_edges,
    )
