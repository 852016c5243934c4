"""Graph data model, file ingestion, normalization and propagation.

A `Graph` is a sparse undirected graph held in CSR form with dense node
features, integer labels (-1 marks unlabeled nodes), optional regression
targets and three disjoint boolean masks. Graphs are immutable after
construction: every transformation elsewhere in the package returns a new
instance.

Dataset layout on disk (all indices 0-based, LF line endings):

    <dir>/edges.csv      one "src,dst" pair per line
    <dir>/features.csv   n rows of f comma-separated reals
    <dir>/labels.csv     n integers (-1 = unlabeled)
    <dir>/masks.json     optional {"train": [...], "val": [...], "test": [...]}

Collections of small graphs are stored as JSON lines (`graphs.jsonl`), one
graph per line with fields `edges`, `num_nodes`, `features` and `label`
(classification) or `target` (regression).
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .accel import cc_labels, spmm
from .errors import BoundsError, ConfigError, FormatError, ParseError, ShapeError
from .seeding import rng_for

log = logging.getLogger("fglsim.graph")

_uid_counter = itertools.count()


@dataclass
class Graph:
    """Undirected graph with node features, labels and split masks.

    `indptr`/`indices` hold the CSR adjacency with both edge directions and
    no self-loops; `num_edges` counts undirected edges.
    """

    num_nodes: int
    indptr: np.ndarray
    indices: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    targets: np.ndarray | None = None
    train_mask: np.ndarray = None
    val_mask: np.ndarray = None
    test_mask: np.ndarray = None
    uid: int = field(default_factory=lambda: next(_uid_counter))

    def __post_init__(self):
        n = self.num_nodes
        if self.train_mask is None:
            self.train_mask = np.zeros(n, dtype=bool)
        if self.val_mask is None:
            self.val_mask = np.zeros(n, dtype=bool)
        if self.test_mask is None:
            self.test_mask = np.zeros(n, dtype=bool)
        if self.features.shape[0] != n:
            raise ShapeError(
                f"feature rows ({self.features.shape[0]}) != num_nodes ({n})"
            )
        if self.labels.shape[0] != n:
            raise ShapeError(f"label count ({self.labels.shape[0]}) != num_nodes ({n})")
        labeled = self.labels[self.labels >= 0]
        if labeled.size and self.num_classes <= int(labeled.max()):
            raise BoundsError(
                f"label {int(labeled.max())} outside [0, {self.num_classes})"
            )
        if np.any((self.train_mask & self.val_mask) | (self.train_mask & self.test_mask) | (self.val_mask & self.test_mask)):
            raise ShapeError("train/val/test masks overlap")

    @property
    def num_edges(self) -> int:
        return self.indices.size // 2

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def neighbors(self, u: int) -> np.ndarray:
        return self.indices[self.indptr[u] : self.indptr[u + 1]]

    def edge_array(self) -> np.ndarray:
        """Undirected edges as an (m, 2) array with u < v, sorted."""
        rows = np.repeat(np.arange(self.num_nodes, dtype=np.int64), self.degrees())
        keep = rows < self.indices
        return np.column_stack((rows[keep], self.indices[keep]))


@dataclass
class GraphCollection:
    """An ordered list of small graphs with one label or target per graph."""

    graphs: list[Graph]
    labels: np.ndarray | None = None
    targets: np.ndarray | None = None
    num_classes: int = 0

    def __post_init__(self):
        n = len(self.graphs)
        if (self.labels is None) == (self.targets is None):
            raise FormatError("collection needs exactly one of labels/targets")
        ref = self.labels if self.labels is not None else self.targets
        if ref.shape[0] != n:
            raise ShapeError(f"{ref.shape[0]} labels for {n} graphs")
        dims = {g.feature_dim for g in self.graphs}
        if len(dims) > 1:
            raise ShapeError(f"inconsistent feature dims across graphs: {sorted(dims)}")

    def __len__(self) -> int:
        return len(self.graphs)

    @property
    def feature_dim(self) -> int:
        return self.graphs[0].feature_dim

    @property
    def is_regression(self) -> bool:
        return self.targets is not None


@dataclass
class NormalizedAdjacency:
    """Propagation operator in CSR form (self-loops included)."""

    num_nodes: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    scheme: str


def build_csr(num_nodes: int, edges: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """CSR arrays from an (m, 2) deduplicated undirected edge array."""
    if edges.size == 0:
        return np.zeros(num_nodes + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
    src = np.concatenate([edges[:, 0], edges[:, 1]])
    dst = np.concatenate([edges[:, 1], edges[:, 0]])
    order = np.lexsort((dst, src))
    src, dst = src[order], dst[order]
    indptr = np.zeros(num_nodes + 1, dtype=np.int64)
    np.add.at(indptr, src + 1, 1)
    np.cumsum(indptr, out=indptr)
    return indptr, dst.astype(np.int64)


def dedupe_edges(edges: np.ndarray, num_nodes: int) -> tuple[np.ndarray, int]:
    """Canonicalize an edge list: drop self-loops and duplicates.

    Returns the clean (m, 2) array with u < v plus the number of raw entries
    dropped.
    """
    if edges.size == 0:
        return edges.reshape(0, 2).astype(np.int64), 0
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    lo = np.minimum(edges[:, 0], edges[:, 1])
    hi = np.maximum(edges[:, 0], edges[:, 1])
    keep = lo != hi
    canon = np.unique(np.column_stack((lo[keep], hi[keep])), axis=0)
    return canon, int(edges.shape[0] - canon.shape[0])


def make_graph(
    num_nodes: int,
    edges: np.ndarray,
    features: np.ndarray,
    labels: np.ndarray,
    num_classes: int | None = None,
    targets: np.ndarray | None = None,
    masks: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
) -> Graph:
    """Construct a validated Graph from an edge list (dedup included)."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size and (edges.min() < 0 or edges.max() >= num_nodes):
        raise BoundsError(f"edge endpoint outside [0, {num_nodes})")
    clean, dropped = dedupe_edges(edges, num_nodes)
    if dropped:
        log.warning("dropped %d duplicate/self-loop edge entries", dropped)
    indptr, indices = build_csr(num_nodes, clean)
    labels = np.asarray(labels, dtype=np.int64)
    if num_classes is None:
        labeled = labels[labels >= 0]
        num_classes = int(labeled.max()) + 1 if labeled.size else 0
    g = Graph(
        num_nodes=num_nodes,
        indptr=indptr,
        indices=indices,
        features=np.asarray(features, dtype=np.float64),
        labels=labels,
        num_classes=num_classes,
        targets=None if targets is None else np.asarray(targets, dtype=np.float64),
    )
    if masks is not None:
        g.train_mask, g.val_mask, g.test_mask = (np.asarray(m, dtype=bool) for m in masks)
        Graph.__post_init__(g)
    return g


# ------------------------------------------------------------- loading ----


def _read_edges_csv(path: Path) -> np.ndarray:
    rows = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise ParseError(f"{path.name}:{lineno}: expected 'src,dst', got {line!r}")
            try:
                rows.append((int(parts[0]), int(parts[1])))
            except ValueError:
                raise ParseError(f"{path.name}:{lineno}: non-integer endpoint in {line!r}")
    return np.asarray(rows, dtype=np.int64).reshape(-1, 2)


def _read_matrix_csv(path: Path) -> np.ndarray:
    rows = []
    width = None
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = [float(tok) for tok in line.split(",")]
            except ValueError:
                raise ParseError(f"{path.name}:{lineno}: non-numeric value")
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise ParseError(
                    f"{path.name}:{lineno}: expected {width} columns, got {len(row)}"
                )
            rows.append(row)
    return np.asarray(rows, dtype=np.float64)


def load_subgraph_dataset(directory_path: str | Path) -> Graph:
    """Load a single-graph dataset directory into a Graph.

    Missing `masks.json` leaves all-false masks. Duplicate and self-loop
    edges are dropped with a logged warning count.
    """
    root = Path(directory_path)
    features = _read_matrix_csv(root / "features.csv")
    n = features.shape[0]
    labels_raw = _read_matrix_csv(root / "labels.csv").ravel()
    if labels_raw.shape[0] != n:
        raise ShapeError(
            f"labels.csv has {labels_raw.shape[0]} rows, features.csv has {n}"
        )
    labels = labels_raw.astype(np.int64)
    edges = _read_edges_csv(root / "edges.csv")
    if edges.size:
        bad = np.nonzero((edges < 0) | (edges >= n))[0]
        if bad.size:
            raise BoundsError(
                f"edges.csv:{int(bad[0]) + 1}: endpoint outside [0, {n})"
            )
    masks = None
    masks_path = root / "masks.json"
    if masks_path.exists():
        with masks_path.open("r", encoding="utf-8") as fh:
            raw = json.load(fh)
        masks = []
        for key in ("train", "val", "test"):
            m = np.zeros(n, dtype=bool)
            idx = np.asarray(raw.get(key, []), dtype=np.int64)
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise BoundsError(f"masks.json: {key} index outside [0, {n})")
            m[idx] = True
            masks.append(m)
        masks = tuple(masks)
    return make_graph(n, edges, features, labels, masks=masks)


def save_subgraph_dataset(g: Graph, directory_path: str | Path) -> None:
    """Write a Graph back out in the dataset directory layout."""
    root = Path(directory_path)
    root.mkdir(parents=True, exist_ok=True)
    edges = g.edge_array()
    with (root / "edges.csv").open("w", encoding="utf-8", newline="\n") as fh:
        for u, v in edges:
            fh.write(f"{u},{v}\n")
    with (root / "features.csv").open("w", encoding="utf-8", newline="\n") as fh:
        for row in g.features:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")
    with (root / "labels.csv").open("w", encoding="utf-8", newline="\n") as fh:
        for lab in g.labels:
            fh.write(f"{int(lab)}\n")
    masks = {
        "train": np.nonzero(g.train_mask)[0].tolist(),
        "val": np.nonzero(g.val_mask)[0].tolist(),
        "test": np.nonzero(g.test_mask)[0].tolist(),
    }
    with (root / "masks.json").open("w", encoding="utf-8", newline="\n") as fh:
        json.dump(masks, fh)
        fh.write("\n")


def load_graph_collection(file_path: str | Path) -> GraphCollection:
    """Load a JSON-lines collection of small labeled graphs."""
    path = Path(file_path)
    graphs: list[Graph] = []
    labels: list[int] = []
    targets: list[float] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path.name}:{lineno}: invalid JSON ({exc.msg})")
            for key in ("edges", "num_nodes", "features"):
                if key not in rec:
                    raise ParseError(f"{path.name}:{lineno}: missing field {key!r}")
            has_label = "label" in rec
            has_target = "target" in rec
            if has_label == has_target:
                raise FormatError(
                    f"{path.name}:{lineno}: need exactly one of 'label'/'target'"
                )
            n = int(rec["num_nodes"])
            features = np.asarray(rec["features"], dtype=np.float64).reshape(n, -1)
            edges = np.asarray(rec["edges"], dtype=np.int64).reshape(-1, 2)
            if edges.size and (edges.min() < 0 or edges.max() >= n):
                raise BoundsError(f"{path.name}:{lineno}: edge endpoint outside [0, {n})")
            node_labels = np.full(n, -1, dtype=np.int64)
            g = make_graph(n, edges, features, node_labels, num_classes=0)
            if graphs and g.feature_dim != graphs[0].feature_dim:
                raise ShapeError(
                    f"{path.name}:{lineno}: feature dim {g.feature_dim} != "
                    f"{graphs[0].feature_dim} of earlier graphs"
                )
            if has_label and targets:
                raise FormatError(f"{path.name}:{lineno}: mixes 'label' with earlier 'target'")
            if has_target and labels:
                raise FormatError(f"{path.name}:{lineno}: mixes 'target' with earlier 'label'")
            graphs.append(g)
            if has_label:
                labels.append(int(rec["label"]))
            else:
                targets.append(float(rec["target"]))
    if labels:
        arr = np.asarray(labels, dtype=np.int64)
        return GraphCollection(graphs, labels=arr, num_classes=int(arr.max()) + 1)
    return GraphCollection(graphs, targets=np.asarray(targets, dtype=np.float64))


def save_graph_collection(coll: GraphCollection, file_path: str | Path) -> None:
    path = Path(file_path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for i, g in enumerate(coll.graphs):
            rec = {
                "edges": g.edge_array().tolist(),
                "num_nodes": g.num_nodes,
                "features": g.features.tolist(),
            }
            if coll.labels is not None:
                rec["label"] = int(coll.labels[i])
            else:
                rec["target"] = float(coll.targets[i])
            fh.write(json.dumps(rec) + "\n")


# -------------------------------------------------------- normalization ----


def normalize_adjacency(g: Graph, scheme: str = "symmetric") -> NormalizedAdjacency:
    """Build the propagation operator over A + I.

    symmetric:      entry (u, v) = 1 / sqrt((d_u + 1)(d_v + 1))
    row_stochastic: row u = (A + I) row divided by (d_u + 1)

    Isolated nodes keep a unit self-loop in both schemes.
    """
    if scheme not in ("symmetric", "row_stochastic"):
        raise ConfigError(f"unknown normalization scheme {scheme!r}")
    n = g.num_nodes
    deg = g.degrees().astype(np.float64)
    rows = np.repeat(np.arange(n, dtype=np.int64), np.diff(g.indptr))
    # append the self-loops
    src = np.concatenate([rows, np.arange(n, dtype=np.int64)])
    dst = np.concatenate([g.indices, np.arange(n, dtype=np.int64)])
    if scheme == "symmetric":
        inv = 1.0 / np.sqrt(deg + 1.0)
        vals = inv[src] * inv[dst]
    else:
        vals = 1.0 / (deg[src] + 1.0)
    order = np.lexsort((dst, src))
    src, dst, vals = src[order], dst[order], vals[order]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, src + 1, 1)
    np.cumsum(indptr, out=indptr)
    return NormalizedAdjacency(n, indptr, dst, vals, scheme)


def propagate(adj: NormalizedAdjacency, X: np.ndarray, k: int) -> np.ndarray:
    """k-step feature propagation: returns adj^k @ X (k = 0 returns X)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != adj.num_nodes:
        raise ShapeError(f"X has {X.shape[0]} rows, operator expects {adj.num_nodes}")
    if k < 0:
        raise ConfigError("propagation steps must be >= 0")
    out = X
    for _ in range(k):
        out = spmm(adj.indptr, adj.indices, adj.data, out)
    return out


# ---------------------------------------------------------------- masks ----


def generate_masks(
    n: int, ratios: tuple[float, float, float], seed: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Seeded disjoint train/val/test masks cut from a uniform shuffle."""
    tr, va, te = ratios
    if tr < 0 or va < 0 or te < 0:
        raise ConfigError("mask ratios must be non-negative")
    if tr + va + te > 1.0 + 1e-12:
        raise ConfigError(f"mask ratios sum to {tr + va + te} > 1")
    perm = rng_for(seed).permutation(n)
    c1 = math.floor(tr * n)
    c2 = math.floor((tr + va) * n)
    c3 = math.floor((tr + va + te) * n)
    masks = []
    for sel in (perm[:c1], perm[c1:c2], perm[c2:c3]):
        m = np.zeros(n, dtype=bool)
        m[sel] = True
        masks.append(m)
    return tuple(masks)


def with_masks(g: Graph, masks: tuple[np.ndarray, np.ndarray, np.ndarray]) -> Graph:
    """Copy of `g` with the given masks installed."""
    return graph_replace(g, train_mask=masks[0], val_mask=masks[1], test_mask=masks[2])


_UNSET = object()


def graph_replace(
    g: Graph,
    *,
    edges=_UNSET,
    features=_UNSET,
    labels=_UNSET,
    targets=_UNSET,
    train_mask=_UNSET,
    val_mask=_UNSET,
    test_mask=_UNSET,
) -> Graph:
    """New Graph with some fields replaced; untouched per-node arrays are
    copied so the result never aliases mutable state of the original.
    The CSR adjacency is shared when `edges` is not replaced (graphs are
    immutable after construction)."""

    def pick(value, current):
        return current.copy() if value is _UNSET else np.asarray(value)

    labels_new = pick(labels, g.labels).astype(np.int64)
    if targets is _UNSET:
        targets_new = None if g.targets is None else g.targets.copy()
    else:
        targets_new = None if targets is None else np.asarray(targets, dtype=np.float64)
    if edges is _UNSET:
        out = Graph(
            num_nodes=g.num_nodes,
            indptr=g.indptr,
            indices=g.indices,
            features=pick(features, g.features).astype(np.float64),
            labels=labels_new,
            num_classes=g.num_classes,
            targets=targets_new,
            train_mask=pick(train_mask, g.train_mask).astype(bool),
            val_mask=pick(val_mask, g.val_mask).astype(bool),
            test_mask=pick(test_mask, g.test_mask).astype(bool),
        )
        return out
    return make_graph(
        g.num_nodes,
        np.asarray(edges, dtype=np.int64).reshape(-1, 2),
        pick(features, g.features).astype(np.float64),
        labels_new,
        num_classes=g.num_classes,
        targets=targets_new,
        masks=(
            pick(train_mask, g.train_mask).astype(bool),
            pick(val_mask, g.val_mask).astype(bool),
            pick(test_mask, g.test_mask).astype(bool),
        ),
    )


def union_graph(coll: GraphCollection) -> Graph:
    """Disjoint union of every graph in a collection (nodes re-indexed)."""
    n_total = sum(g.num_nodes for g in coll.graphs)
    feats = np.concatenate([g.features for g in coll.graphs])
    labels = np.concatenate([g.labels for g in coll.graphs])
    chunks = []
    offset = 0
    for g in coll.graphs:
        e = g.edge_array()
        if e.size:
            chunks.append(e + offset)
        offset += g.num_nodes
    edges = np.concatenate(chunks) if chunks else np.zeros((0, 2), dtype=np.int64)
    return make_graph(n_total, edges, feats, labels, num_classes=max(coll.num_classes, 0))


# ----------------------------------------------------------- components ----


def connected_components(g: Graph) -> tuple[np.ndarray, np.ndarray]:
    """Component id per node (first-seen order) and component sizes."""
    labels = np.full(g.num_nodes, -1, dtype=np.int64)
    n_comp = cc_labels(g.indptr, g.indices, labels)
    sizes = np.bincount(labels, minlength=n_comp)
    return labels, sizes


# ------------------------------------------------------------ synthetic ----


def _sample_pairs(rng: np.random.Generator, n_pairs: int, p: float) -> np.ndarray:
    """Indices of a Bernoulli(p) subset of range(n_pairs), without
    materializing all pairs (binomial count + uniform draw)."""
    if n_pairs == 0 or p <= 0.0:
        return np.zeros(0, dtype=np.int64)
    if p >= 1.0:
        return np.arange(n_pairs, dtype=np.int64)
    count = rng.binomial(n_pairs, p)
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    return rng.choice(n_pairs, size=count, replace=False).astype(np.int64)


def _tri_decode(idx: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    # Map flat index in [0, C(n,2)) to the (i, j) pair with i < j.
    i = (n - 2 - np.floor(np.sqrt(-8.0 * idx + 4.0 * n * (n - 1) - 7.0) / 2.0 - 0.5)).astype(np.int64)
    j = (idx + i + 1 - (i * (2 * n - i - 1)) // 2).astype(np.int64)
    return i, j


def generate_sbm(
    block_sizes: list[int],
    p_in: float,
    p_out: float,
    feature_dim: int,
    seed: int,
    feature_noise: float = 0.1,
) -> Graph:
    """Stochastic block model fixture: labels are block ids, features are a
    one-hot of the label plus seeded Gaussian jitter of scale `feature_noise`."""
    if not (0.0 <= p_in <= 1.0 and 0.0 <= p_out <= 1.0):
        raise ConfigError("SBM probabilities must lie in [0, 1]")
    rng = rng_for(seed, "sbm")
    sizes = np.asarray(block_sizes, dtype=np.int64)
    n = int(sizes.sum())
    starts = np.concatenate([[0], np.cumsum(sizes)])
    labels = np.repeat(np.arange(sizes.size, dtype=np.int64), sizes)
    chunks = []
    for b, s in enumerate(sizes):
        idx = _sample_pairs(rng, int(s * (s - 1) // 2), p_in)
        if idx.size:
            i, j = _tri_decode(idx, int(s))
            chunks.append(np.column_stack((i + starts[b], j + starts[b])))
    for a in range(sizes.size):
        for b in range(a + 1, sizes.size):
            idx = _sample_pairs(rng, int(sizes[a] * sizes[b]), p_out)
            if idx.size:
                i, j = idx // sizes[b], idx % sizes[b]
                chunks.append(np.column_stack((i + starts[a], j + starts[b])))
    edges = np.concatenate(chunks) if chunks else np.zeros((0, 2), dtype=np.int64)
    features = np.zeros((n, feature_dim), dtype=np.float64)
    features[np.arange(n), labels % feature_dim] = 1.0
    features += feature_noise * rng.standard_normal((n, feature_dim))
    return make_graph(n, edges, features, labels, num_classes=int(sizes.size))
