"""Controlled perturbations of client data.

Each injector is a pure function (graph, params, seed) -> new graph; the
originals are never touched and all graph invariants (symmetry, no
self-loops, no duplicates) hold on the outputs. The engine applies them
per client after partitioning, with seeds derived from
(master_seed, client_id, injector_name) so injectors compose independently
of worker scheduling.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .graph import Graph, graph_replace
from .seeding import rng_for

log = logging.getLogger("fglsim.robustness")


@dataclass
class RobustnessSpec:
    """Perturbation settings, all off by default."""

    feature_noise_kind: str = "gaussian"  # gaussian | laplacian
    feature_noise_sigma: float = 0.0
    feature_noise_channel_fraction: float = 1.0
    label_noise_rate: float = 0.0
    hetero_edge_fraction: float = 0.0
    feature_missing_rate: float = 0.0
    edge_drop_rate: float = 0.0
    label_keep_ratio: float = 1.0

    def __post_init__(self):
        for name in (
            "feature_noise_channel_fraction",
            "label_noise_rate",
            "hetero_edge_fraction",
            "feature_missing_rate",
            "edge_drop_rate",
            "label_keep_ratio",
        ):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.feature_noise_sigma < 0:
            raise ConfigError("feature_noise_sigma must be >= 0")
        if self.feature_noise_kind not in ("gaussian", "laplacian"):
            raise ConfigError(f"unknown noise kind {self.feature_noise_kind!r}")

    @property
    def is_noop(self) -> bool:
        return (
            self.feature_noise_sigma == 0.0
            and self.label_noise_rate == 0.0
            and self.hetero_edge_fraction == 0.0
            and self.feature_missing_rate == 0.0
            and self.edge_drop_rate == 0.0
            and self.label_keep_ratio == 1.0
        )


def add_feature_noise(
    g: Graph, kind: str, sigma: float, channel_fraction: float, seed: int
) -> Graph:
    """Additive iid noise on a seeded choice of floor(fraction * f) channels."""
    if kind not in ("gaussian", "laplacian"):
        raise ConfigError(f"unknown noise kind {kind!r}")
    if sigma < 0:
        raise ConfigError("sigma must be >= 0")
    n_channels = int(channel_fraction * g.feature_dim)
    if sigma == 0.0 or n_channels == 0:
        return graph_replace(g)
    rng = rng_for(seed, "feature_noise")
    channels = rng.choice(g.feature_dim, size=n_channels, replace=False)
    X = g.features.copy()
    noise_shape = (g.num_nodes, n_channels)
    if kind == "gaussian":
        X[:, np.sort(channels)] += rng.normal(0.0, sigma, size=noise_shape)
    else:
        X[:, np.sort(channels)] += rng.laplace(0.0, sigma, size=noise_shape)
    return graph_replace(g, features=X)


def add_label_noise(g: Graph, rate: float, seed: int) -> Graph:
    """Reassign floor(rate * |train|) training labels to a different class."""
    if not 0.0 <= rate <= 1.0:
        raise ConfigError("label noise rate must lie in [0, 1]")
    if rate == 0.0:
        return graph_replace(g)
    if g.num_classes < 2:
        raise ConfigError("label noise needs at least 2 classes")
    train_nodes = np.nonzero(g.train_mask & (g.labels >= 0))[0]
    n_flip = int(rate * train_nodes.size)
    if n_flip == 0:
        return graph_replace(g)
    rng = rng_for(seed, "label_noise")
    victims = rng.choice(train_nodes, size=n_flip, replace=False)
    labels = g.labels.copy()
    # uniform over the other classes via a shifted draw
    offsets = rng.integers(1, g.num_classes, size=n_flip)
    labels[victims] = (labels[victims] + offsets) % g.num_classes
    return graph_replace(g, labels=labels)


def add_heterophilous_edges(g: Graph, fraction: float, seed: int) -> Graph:
    """Add floor(fraction * m) edges between non-adjacent labeled node pairs
    with different labels (rejection sampling, capped tries per edge). When
    candidates run out the injection is partial and the shortfall logged."""
    if not 0.0 <= fraction:
        raise ConfigError("fraction must be >= 0")
    n_new = int(fraction * g.num_edges)
    if n_new == 0:
        return graph_replace(g)
    rng = rng_for(seed, "hetero_edges")
    existing = {(int(u), int(v)) for u, v in g.edge_array()}
    labeled = np.nonzero(g.labels >= 0)[0]
    added = []
    if labeled.size >= 2:
        for _ in range(n_new):
            placed = False
            for _ in range(10_000):
                u, v = labeled[rng.integers(labeled.size, size=2)]
                if u == v or g.labels[u] == g.labels[v]:
                    continue
                key = (int(min(u, v)), int(max(u, v)))
                if key in existing:
                    continue
                existing.add(key)
                added.append(key)
                placed = True
                break
            if not placed:
                break
    if len(added) < n_new:
        log.warning(
            "heterophilous injection short by %d of %d edges", n_new - len(added), n_new
        )
    if not added:
        return graph_replace(g)
    edges = np.concatenate([g.edge_array(), np.asarray(added, dtype=np.int64)])
    return graph_replace(g, edges=edges)


def sparsify_features(g: Graph, missing_rate: float, seed: int) -> Graph:
    """Zero each feature entry of non-training nodes with prob missing_rate."""
    if not 0.0 <= missing_rate <= 1.0:
        raise ConfigError("missing rate must lie in [0, 1]")
    if missing_rate == 0.0:
        return graph_replace(g)
    rng = rng_for(seed, "feature_missing")
    X = g.features.copy()
    outside = ~g.train_mask
    drop = rng.random((int(outside.sum()), g.feature_dim)) < missing_rate
    X[outside] = np.where(drop, 0.0, X[outside])
    return graph_replace(g, features=X)


def sparsify_edges(g: Graph, drop_rate: float, seed: int) -> Graph:
    """Remove floor(drop_rate * m) seeded-chosen undirected edges."""
    if not 0.0 <= drop_rate <= 1.0:
        raise ConfigError("drop rate must lie in [0, 1]")
    n_drop = int(drop_rate * g.num_edges)
    if n_drop == 0:
        return graph_replace(g)
    rng = rng_for(seed, "edge_drop")
    edges = g.edge_array()
    keep = np.ones(edges.shape[0], dtype=bool)
    keep[rng.choice(edges.shape[0], size=n_drop, replace=False)] = False
    return graph_replace(g, edges=edges[keep])


def sparsify_labels(g: Graph, keep_ratio: float, seed: int) -> Graph:
    """Shrink the train mask to a seeded subset of ceil(keep * |train|)
    nodes; removed nodes become unmasked."""
    if not 0.0 < keep_ratio <= 1.0:
        raise ConfigError("keep ratio must lie in (0, 1]")
    if keep_ratio == 1.0:
        return graph_replace(g)
    train_nodes = np.nonzero(g.train_mask)[0]
    n_keep = int(np.ceil(keep_ratio * train_nodes.size))
    if n_keep == 0:
        raise ConfigError("label sparsification would empty the train set")
    rng = rng_for(seed, "label_keep")
    kept = rng.choice(train_nodes, size=n_keep, replace=False)
    mask = np.zeros(g.num_nodes, dtype=bool)
    mask[kept] = True
    return graph_replace(g, train_mask=mask)


def apply_robustness(g: Graph, spec: RobustnessSpec, master_seed: int, client_id: int) -> Graph:
    """Apply the configured injectors in a fixed order with per-injector
    derived seeds. A no-op spec returns the graph unchanged."""
    if spec.is_noop:
        return g
    seed = lambda name: f"{master_seed}|client{client_id}|{name}"  # noqa: E731
    if spec.feature_noise_sigma > 0:
        g = add_feature_noise(
            g,
            spec.feature_noise_kind,
            spec.feature_noise_sigma,
            spec.feature_noise_channel_fraction,
            seed("feature_noise"),
        )
    if spec.hetero_edge_fraction > 0:
        g = add_heterophilous_edges(g, spec.hetero_edge_fraction, seed("hetero_edges"))
    if spec.edge_drop_rate > 0:
        g = sparsify_edges(g, spec.edge_drop_rate, seed("edge_drop"))
    if spec.feature_missing_rate > 0:
        g = sparsify_features(g, spec.feature_missing_rate, seed("feature_missing"))
    if spec.label_noise_rate > 0:
        g = add_label_noise(g, spec.label_noise_rate, seed("label_noise"))
    if spec.label_keep_ratio < 1.0:
        g = sparsify_labels(g, spec.label_keep_ratio, seed("label_keep"))
    return g
