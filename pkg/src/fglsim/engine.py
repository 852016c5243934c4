"""Round-based federated orchestration.

One communication round is a synchronous barrier protocol over a message
pool: the server writes its entry, every sampled client executes locally
and writes its own entry, then the server aggregates. Clients may run on
parallel worker threads; the pool only accepts writes to distinct keys and
enforces that a client never reads another client's entry. All randomness
is derived from (master seed, role, id, round), so reports are bitwise
reproducible regardless of worker count.

Supported algorithms:

  fedavg      sample-weighted parameter averaging
  fedprox     fedavg plus a proximal pull toward the global model
  scaffold    control variates correct the raw gradient before each step
  fedproto    clients keep personal models and exchange class prototypes
  local_only  no exchange at all; the paper-style lower baseline
"""

from __future__ import annotations

import logging
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from threading import Lock

import numpy as np

from .errors import (
    AggregationError,
    ConfigError,
    ContractViolationError,
    InfeasiblePartitionError,
)
from .graph import Graph, GraphCollection, generate_masks, with_masks
from .learner import (
    PropagationCache,
    SGCModel,
    TrainConfig,
    TrainContext,
    TrainData,
    build_graph_data,
    build_node_data,
    compute_prototypes,
    evaluate_classification,
    evaluate_regression,
    local_train,
    params_flat,
    params_unflat,
    sgc_forward,
)
from .partition import (
    ClientAssignment,
    build_client_subgraphs,
    communities_to_clients_average,
    communities_to_clients_label_cluster,
    cross_domain_split,
    decompose,
    dirichlet_label_split,
    feature_skew_apply,
    feature_skew_apply_collections,
    louvain_communities,
    metis_kway,
    topology_skew_split,
    uniform_split,
)
from .privacy import (
    DPConfig,
    RDPAccountant,
    calibrate_sigma,
    clipped_gradient_sum,
    dp_release,
    ensure_dp_compatible,
)
from .robustness import RobustnessSpec, apply_robustness
from .seeding import derive_seed, rng_for

log = logging.getLogger("fglsim.engine")

ALGORITHMS = ("fedavg", "fedprox", "scaffold", "fedproto", "local_only")
EVAL_MODES = ("global_global", "global_local", "local_global", "local_local")
GLOBAL_MODEL_ALGOS = ("fedavg", "fedprox", "scaffold")


# ------------------------------------------------------------ message pool ----

_FIELD_ORDER = ("params", "num_samples", "prototypes", "control_delta")


@dataclass
class Message:
    """One pool entry. `params` and `control_delta` are flat float vectors;
    `prototypes` maps class id to (vector, count)."""

    params: np.ndarray | None = None
    num_samples: int | None = None
    prototypes: dict[int, tuple[np.ndarray, int]] | None = None
    control_delta: np.ndarray | None = None

    def serialize(self) -> bytes:
        """Canonical wire form: length-prefixed UTF-8 keys, little-endian
        64-bit counts and 8-byte reals."""
        chunks: list[bytes] = []

        def key(name: str):
            raw = name.encode("utf-8")
            chunks.append(struct.pack("<I", len(raw)))
            chunks.append(raw)

        if self.params is not None:
            key("params")
            chunks.append(struct.pack("<Q", self.params.size))
            chunks.append(np.asarray(self.params, dtype="<f8").tobytes())
        if self.num_samples is not None:
            key("num_samples")
            chunks.append(struct.pack("<Q", int(self.num_samples)))
        if self.prototypes is not None:
            key("prototypes")
            chunks.append(struct.pack("<Q", len(self.prototypes)))
            for cls in sorted(self.prototypes):
                vec, count = self.prototypes[cls]
                chunks.append(struct.pack("<QQQ", cls, count, vec.size))
                chunks.append(np.asarray(vec, dtype="<f8").tobytes())
        if self.control_delta is not None:
            key("control_delta")
            chunks.append(struct.pack("<Q", self.control_delta.size))
            chunks.append(np.asarray(self.control_delta, dtype="<f8").tobytes())
        return b"".join(chunks)

    @property
    def byte_size(self) -> int:
        return len(self.serialize())


class MessagePool:
    """Per-round associative store with ownership enforcement.

    Writers own exactly one key; clients may read only the server entry and
    their own. Client entries are cleared at round start."""

    def __init__(self):
        self.round = -1
        self.sampled_clients: list[int] = []
        self._entries: dict[str, Message] = {}
        self._lock = Lock()

    def begin_round(self, round_id: int, sampled_clients: list[int]) -> None:
        self.round = round_id
        self.sampled_clients = list(sampled_clients)
        with self._lock:
            self._entries = {k: v for k, v in self._entries.items() if k == "server"}

    def write(self, key: str, message: Message, actor: str) -> None:
        if actor != "server":
            if key != actor:
                raise ContractViolationError(f"{actor} tried to write {key!r}")
            cid = int(actor.split("_", 1)[1])
            if cid not in self.sampled_clients:
                raise ContractViolationError(f"unsampled {actor} wrote to the pool")
        elif key != "server":
            raise ContractViolationError("server may only write the server entry")
        with self._lock:
            self._entries[key] = message

    def read(self, key: str, actor: str) -> Message:
        if actor != "server" and key not in ("server", actor):
            raise ContractViolationError(f"{actor} tried to read {key!r}")
        with self._lock:
            if key == "server" and "server" not in self._entries:
                raise ContractViolationError("client executed before the server wrote")
            return self._entries[key]

    def client_entries(self) -> list[tuple[int, Message]]:
        with self._lock:
            out = []
            for key, msg in self._entries.items():
                if key.startswith("client_"):
                    out.append((int(key.split("_", 1)[1]), msg))
        return sorted(out)


def sample_clients(num_clients: int, fraction: float, round_id: int, master_seed) -> list[int]:
    """ceil(fraction * K) distinct indices, uniform without replacement,
    sorted ascending; the draw depends only on (master_seed, round)."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError("client fraction must lie in (0, 1]")
    count = int(np.ceil(fraction * num_clients))
    rng = rng_for(master_seed, "sample", round_id)
    return sorted(rng.choice(num_clients, size=count, replace=False).tolist())


# ------------------------------------------------------------- aggregation ----


def fedavg_aggregate(messages: list[Message]) -> np.ndarray:
    """Sample-size weighted mean of client parameter vectors."""
    total = sum(m.num_samples for m in messages if m.num_samples)
    if not messages or total == 0:
        raise AggregationError("no client carried training samples this round")
    out = np.zeros_like(messages[0].params)
    for m in messages:
        if m.num_samples:
            out += (m.num_samples / total) * m.params
    return out


def scaffold_server_aggregate(
    params: np.ndarray,
    control: np.ndarray,
    messages: list[Message],
    num_clients: int,
    server_lr: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """theta += lr/|S| * sum(dtheta); c += |S|/K * mean(dc)."""
    if not messages:
        log.warning("scaffold round had no client messages; no-op")
        return params, control
    n = len(messages)
    d_theta = np.zeros_like(params)
    d_control = np.zeros_like(control)
    for m in messages:
        d_theta += m.params
        d_control += m.control_delta
    new_params = params + (server_lr / n) * d_theta
    new_control = control + (n / num_clients) * (d_control / n)
    return new_params, new_control


def fedproto_server_aggregate(
    messages: list[Message],
) -> dict[int, tuple[np.ndarray, int]]:
    """Count-weighted mean prototype per class over reporting clients."""
    sums: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    for m in messages:
        if not m.prototypes:
            continue
        for cls, (vec, cnt) in m.prototypes.items():
            if cnt == 0:
                continue
            if cls not in sums:
                sums[cls] = np.zeros_like(vec)
                counts[cls] = 0
            sums[cls] += cnt * vec
            counts[cls] += cnt
    return {cls: (sums[cls] / counts[cls], counts[cls]) for cls in sorted(sums)}


def measure_communication(comm_log: list[dict[str, int]]) -> dict[str, int]:
    """Totals over the per-round communication records."""
    uplink = sum(r["uplink_bytes"] for r in comm_log)
    downlink = sum(r["downlink_bytes"] for r in comm_log)
    return {"uplink_bytes": uplink, "downlink_bytes": downlink, "total_bytes": uplink + downlink}


# ------------------------------------------------------------ client state ----


@dataclass
class ClientState:
    client_id: int
    data: TrainData
    graph: Graph | None = None  # subgraph scenario only
    collection: GraphCollection | None = None  # graph scenario only
    model: SGCModel | None = None  # personal model (fedproto / local_only)
    control: np.ndarray | None = None  # scaffold c_i
    accountant: RDPAccountant | None = None


@dataclass
class EngineSettings:
    """Everything run_rounds needs beyond the client list. Assembled by the
    CLI config layer or directly by tests."""

    algorithm: str
    rounds: int
    client_fraction: float = 1.0
    train: TrainConfig = field(default_factory=TrainConfig)
    eval_mode: str = "local_local"
    scaffold_server_lr: float = 1.0
    dp: DPConfig | None = None
    dp_sigma: float = 0.0
    dp_alpha: float = 0.0
    workers: int = 1
    is_regression: bool = False

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if self.eval_mode not in EVAL_MODES:
            raise ConfigError(f"unknown eval mode {self.eval_mode!r}")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if self.algorithm in ("fedproto", "local_only") and self.eval_mode in (
            "global_global",
            "global_local",
        ):
            raise ConfigError(
                f"{self.algorithm} keeps no global classifier; "
                f"eval mode {self.eval_mode!r} is undefined"
            )
        if self.dp is not None and self.algorithm not in ("fedavg", "fedprox"):
            raise ConfigError("DP training supports fedavg and fedprox only")


# -------------------------------------------------------------- evaluation ----


def _weighted_metric_mean(records: list[tuple[dict[str, float], int]]) -> dict[str, float]:
    total = sum(w for _, w in records if w > 0)
    if total == 0:
        return {}
    out: dict[str, float] = {}
    for metrics, w in records:
        if w <= 0:
            continue
        for k, v in metrics.items():
            out[k] = out.get(k, 0.0) + (w / total) * v
    if "mse" in out:
        out["rmse"] = float(np.sqrt(out["mse"]))
    return out


def _eval_model_on_data(
    model: SGCModel, data: TrainData, which: str, regression: bool
) -> tuple[dict[str, float], int]:
    idx = data.val_idx if which == "val" else data.test_idx
    if idx.size == 0:
        return {}, 0
    mask = np.zeros(data.X.shape[0], dtype=bool)
    mask[idx] = True
    out = sgc_forward(model, data.X)
    if regression:
        return evaluate_regression(out.ravel(), data.targets, mask), int(idx.size)
    return evaluate_classification(out, data.labels, mask), int(idx.size)


def evaluate_mode(
    mode: str,
    global_model: SGCModel | None,
    client_models: list[SGCModel],
    global_data: TrainData | None,
    client_data: list[TrainData],
    which: str,
    regression: bool = False,
) -> dict[str, float]:
    """The four evaluation strategies; `which` selects val or test masks.

    local_local (default): sample-weighted mean of each client's own model
    on its own mask. global_local: the global model on each client's mask.
    global_global / local_global: the retained pre-partition data."""
    if mode in ("global_global", "global_local") and global_model is None:
        raise ConfigError(f"eval mode {mode!r} needs a global model")
    if mode in ("global_global", "local_global"):
        if global_data is None:
            raise ConfigError(f"eval mode {mode!r} needs the retained global data")
        if mode == "global_global":
            metrics, _ = _eval_model_on_data(global_model, global_data, which, regression)
            return metrics
        records = [
            (_eval_model_on_data(m, global_data, which, regression)[0], 1)
            for m in client_models
        ]
        records = [(r, w) for r, w in records if r]
        return _weighted_metric_mean(records)
    records = []
    for k, data in enumerate(client_data):
        model = global_model if mode == "global_local" else client_models[k]
        records.append(_eval_model_on_data(model, data, which, regression))
    return _weighted_metric_mean(records)


# ------------------------------------------------------------- round logic ----


def _num_batches(n_train: int, batch_size: int) -> int:
    if n_train == 0:
        return 0
    if batch_size <= 0 or batch_size >= n_train:
        return 1
    return int(np.ceil(n_train / batch_size))


def scaffold_client_step(
    global_flat: np.ndarray,
    control: np.ndarray,
    control_i: np.ndarray,
    data: TrainData,
    cfg: TrainConfig,
    model_template: SGCModel,
    seed,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, int, list[float]]:
    """Local training with the c - c_i gradient correction; returns
    (theta_i, dtheta, dc_i, sample count, loss trace)."""
    f, c = model_template.W.shape
    steps = cfg.local_epochs * _num_batches(data.train_idx.size, cfg.batch_size)
    if steps == 0:
        raise ContractViolationError("scaffold client has no local steps")
    correction = params_unflat(control - control_i, f, c)
    ctx = TrainContext(
        global_params=params_unflat(global_flat, f, c),
        grad_correction=correction,
        seed=seed,
    )
    model, count, trace = local_train(model_template, data, cfg, ctx)
    theta_i = model.flat()
    new_control_i = control_i - control + (global_flat - theta_i) / (steps * cfg.lr)
    return theta_i, theta_i - global_flat, new_control_i - control_i, count, trace


def _dp_local_train(
    client: ClientState,
    global_flat: np.ndarray,
    settings: EngineSettings,
    seed,
) -> tuple[SGCModel, int, list[float]]:
    """Private variant of local training: one full-batch release per epoch.

    The released vector is the clipped per-sample gradient sum of the fit
    loss; regularizer gradients depend only on (public) parameters and are
    added after the noise, outside the privacy accounting."""
    from .learner import OptimizerState, adam_step, sgd_step

    data = client.data
    f = data.X.shape[1]
    c = data.num_outputs
    params = params_unflat(global_flat, f, c)
    n_train = int(data.train_idx.size)
    if n_train == 0:
        log.warning("client %d has no training samples; skipping", client.client_id)
        return SGCModel(0, params["W"], params["b"]), 0, []
    cfg = settings.train
    opt = OptimizerState()
    trace: list[float] = []
    target = data.targets if data.is_regression else data.labels
    for epoch in range(cfg.local_epochs):
        raw = clipped_gradient_sum(
            params["W"], params["b"], data.X, target, data.train_idx,
            settings.dp.clip_norm, regression=data.is_regression,
        )
        released = dp_release(
            raw, settings.dp, settings.dp_sigma,
            seed=f"{seed}|epoch{epoch}", accountant=client.accountant,
        )
        grads = params_unflat(released / n_train, f, c)
        grads["W"] += cfg.weight_decay * params["W"]
        if cfg.prox_mu > 0:
            g0 = params_unflat(global_flat, f, c)
            grads["W"] += cfg.prox_mu * (params["W"] - g0["W"])
            grads["b"] += cfg.prox_mu * (params["b"] - g0["b"])
        if cfg.optimizer == "adam":
            params = adam_step(params, grads, opt, cfg.lr)
        else:
            params = sgd_step(params, grads, cfg.lr)
        trace.append(float(np.linalg.norm(released) / n_train))
    return SGCModel(0, params["W"], params["b"]), n_train, trace


def run_rounds(
    clients: list[ClientState],
    settings: EngineSettings,
    master_seed,
    global_data: TrainData | None = None,
) -> dict:
    """Execute the full round loop for one repeat and return its report."""
    K = len(clients)
    f = clients[0].data.X.shape[1]
    c = clients[0].data.num_outputs
    template = SGCModel.zeros(0, f, c)
    regression = settings.is_regression
    for cl in clients:
        if cl.model is None:
            cl.model = SGCModel.zeros(0, f, c)
        if settings.algorithm == "scaffold" and cl.control is None:
            cl.control = np.zeros(f * c + c)
    global_flat = template.flat()
    server_control = np.zeros_like(global_flat)
    global_protos: dict[int, tuple[np.ndarray, int]] = {}
    pool = MessagePool()

    def global_model() -> SGCModel | None:
        if settings.algorithm in GLOBAL_MODEL_ALGOS:
            p = params_unflat(global_flat, f, c)
            return SGCModel(0, p["W"], p["b"])
        return None

    def snapshot(round_id: int, sampled: list[int], uplink: int, downlink: int, wall_ms: float):
        gm = global_model()
        models = [cl.model for cl in clients]
        datas = [cl.data for cl in clients]
        val = evaluate_mode(settings.eval_mode, gm, models, global_data, datas, "val", regression)
        test = evaluate_mode(settings.eval_mode, gm, models, global_data, datas, "test", regression)
        return {
            "round": round_id,
            "sampled_clients": sampled,
            "val": val,
            "test": test,
            "uplink_bytes": uplink,
            "downlink_bytes": downlink,
            "wall_ms": wall_ms,
        }

    def client_task(cid: int, round_id: int):
        client = clients[cid]
        actor = f"client_{cid}"
        server_msg = pool.read("server", actor)
        seed = f"{master_seed}|train|{cid}|{round_id}"
        if settings.dp is not None:
            model, count, _ = _dp_local_train(client, server_msg.params, settings, seed)
            client.model = model
            pool.write(actor, Message(params=model.flat(), num_samples=count), actor)
            return
        if settings.algorithm in ("fedavg", "fedprox"):
            mu = settings.train.prox_mu if settings.algorithm == "fedprox" else 0.0
            ctx = TrainContext(
                global_params=params_unflat(server_msg.params, f, c),
                prox_mu=mu,
                seed=seed,
            )
            model, count, _ = local_train(template, client.data, settings.train, ctx)
            client.model = model
            pool.write(actor, Message(params=model.flat(), num_samples=count), actor)
        elif settings.algorithm == "scaffold":
            try:
                theta_i, d_theta, d_control, count, _ = scaffold_client_step(
                    server_msg.params, server_msg.control_delta, client.control,
                    client.data, settings.train, template, seed,
                )
            except ContractViolationError:
                log.warning("scaffold client %d skipped (no local steps)", cid)
                zero = np.zeros_like(server_msg.params)
                pool.write(actor, Message(params=zero, num_samples=0, control_delta=zero), actor)
                return
            client.control = client.control + d_control
            p = params_unflat(theta_i, f, c)
            client.model = SGCModel(0, p["W"], p["b"])
            pool.write(
                actor,
                Message(params=d_theta, num_samples=count, control_delta=d_control),
                actor,
            )
        elif settings.algorithm == "fedproto":
            protos = {cls: vec for cls, (vec, _) in (server_msg.prototypes or {}).items()}
            ctx = TrainContext(
                prototypes=protos,
                proto_lambda=settings.train.proto_lambda,
                seed=seed,
            )
            model, count, _ = local_train(client.model, client.data, settings.train, ctx)
            client.model = model
            local_protos = compute_prototypes(
                model, client.data.X, client.data.labels, client.data.train_idx
            )
            pool.write(actor, Message(prototypes=local_protos, num_samples=count), actor)
        else:  # local_only
            ctx = TrainContext(seed=seed)
            model, count, _ = local_train(client.model, client.data, settings.train, ctx)
            client.model = model
            pool.write(actor, Message(), actor)

    rounds_out = [snapshot(0, [], 0, 0, 0.0)]
    comm_log: list[dict[str, int]] = []
    for round_id in range(1, settings.rounds + 1):
        t0 = time.perf_counter()
        sampled = sample_clients(K, settings.client_fraction, round_id, master_seed)
        pool.begin_round(round_id, sampled)
        if settings.algorithm in ("fedavg", "fedprox") or settings.dp is not None:
            server_msg = Message(params=global_flat)
        elif settings.algorithm == "scaffold":
            server_msg = Message(params=global_flat, control_delta=server_control)
        elif settings.algorithm == "fedproto":
            server_msg = Message(prototypes=global_protos)
        else:
            server_msg = Message()
        pool.write("server", server_msg, "server")
        if settings.workers > 1:
            with ThreadPoolExecutor(max_workers=settings.workers) as ex:
                list(ex.map(lambda cid: client_task(cid, round_id), sampled))
        else:
            for cid in sampled:
                client_task(cid, round_id)
        entries = pool.client_entries()
        messages = [m for _, m in entries]
        if settings.algorithm in ("fedavg", "fedprox"):
            try:
                global_flat = fedavg_aggregate(messages)
            except AggregationError as exc:
                log.warning("aggregation skipped: %s", exc)
        elif settings.algorithm == "scaffold":
            global_flat, server_control = scaffold_server_aggregate(
                global_flat, server_control, messages, K, settings.scaffold_server_lr
            )
        elif settings.algorithm == "fedproto":
            global_protos = fedproto_server_aggregate(messages)
        uplink = sum(m.byte_size for m in messages)
        downlink = server_msg.byte_size * len(sampled)
        comm_log.append({"uplink_bytes": uplink, "downlink_bytes": downlink})
        wall_ms = (time.perf_counter() - t0) * 1000.0
        rounds_out.append(snapshot(round_id, sampled, uplink, downlink, wall_ms))

    metric = "mse" if regression else "accuracy"
    best_round, best_val = 0, None
    for rec in rounds_out:
        v = rec["val"].get(metric)
        if v is None:
            continue
        better = best_val is None or (v < best_val if regression else v > best_val)
        if better:
            best_val, best_round = v, rec["round"]
    report = {
        "rounds": rounds_out,
        "metric": metric,
        "best_round": best_round,
        "best_val": best_val,
        "test_at_best": rounds_out[best_round]["test"],
        "communication": measure_communication(comm_log),
    }
    if settings.dp is not None:
        achieved = max(
            (cl.accountant.epsilon(settings.dp.delta) for cl in clients if cl.accountant and cl.accountant.steps),
            default=0.0,
        )
        report["dp"] = {
            "epsilon_target": settings.dp.epsilon,
            "epsilon_achieved": achieved,
            "delta": settings.dp.delta,
            "alpha": settings.dp_alpha,
            "sigma": settings.dp_sigma,
            "clip_norm": settings.dp.clip_norm,
            "d_max": settings.dp.d_max,
            "amplification": "none (conservative)",
        }
    return report


# ------------------------------------------------------- client preparation ----


@dataclass
class PreparedRun:
    clients: list[ClientState]
    global_data: TrainData | None
    assignment_owner: np.ndarray
    community: np.ndarray | None
    dropped_cross_edges: int
    is_regression: bool


def _ensure_node_masks(g: Graph, ratios, seed) -> Graph:
    if g.train_mask.any() or g.val_mask.any() or g.test_mask.any():
        return g
    return with_masks(g, generate_masks(g.num_nodes, ratios, seed))


def partition_subgraph(
    g: Graph,
    strategy: str,
    num_clients: int,
    *,
    alpha: float = 1.0,
    resolution: float = 1.0,
    imbalance_eps: float = 0.05,
    capacity_beta: float = 0.3,
    seed=0,
    feature_mode: str = "gaussian",
    feature_range: tuple[float, float] = (0.0, 0.0),
):
    """Run one node-level strategy; returns (assignment, community | None,
    client split)."""
    community = None
    if strategy == "label_dirichlet":
        assignment = dirichlet_label_split(g.labels, num_clients, alpha, seed)
    elif strategy == "feature_skew":
        assignment = uniform_split(g.num_nodes, num_clients, seed)
    elif strategy == "metis_community":
        assignment = metis_kway(g, num_clients, imbalance_eps, seed)
    elif strategy == "louvain_community":
        comms = louvain_communities(g, resolution, seed)
        community = comms.community
        assignment = communities_to_clients_average(comms, num_clients)
    elif strategy == "metis_label_imbalance":
        # k-way into 4K balanced communities first, then regroup by labels
        base = metis_kway(g, min(4 * num_clients, g.num_nodes), imbalance_eps, seed)
        comms = decompose(g, base.owner)
        community = comms.community
        assignment = communities_to_clients_label_cluster(comms, num_clients, capacity_beta)
    elif strategy == "louvain_label_imbalance":
        comms = louvain_communities(g, resolution, seed)
        community = comms.community
        assignment = communities_to_clients_label_cluster(comms, num_clients, capacity_beta)
    else:
        raise ConfigError(f"strategy {strategy!r} does not apply to node-level data")
    split = build_client_subgraphs(g, assignment)
    if strategy == "feature_skew":
        split.graphs = feature_skew_apply(split.graphs, feature_mode, feature_range, seed)
    return assignment, community, split


def partition_graph_collection(
    coll: GraphCollection,
    strategy: str,
    num_clients: int,
    *,
    alpha: float = 1.0,
    seed=0,
    feature_mode: str = "gaussian",
    feature_range: tuple[float, float] = (0.0, 0.0),
):
    """Graph-level strategies; returns (assignment, per-client collections)."""
    if strategy == "label_dirichlet":
        if coll.labels is None:
            raise ConfigError("label_dirichlet needs a labeled collection")
        assignment = dirichlet_label_split(coll.labels, num_clients, alpha, seed)
    elif strategy == "feature_skew":
        assignment = uniform_split(len(coll), num_clients, seed)
    elif strategy == "topology_skew":
        assignment = topology_skew_split(coll, num_clients)
    else:
        raise ConfigError(f"strategy {strategy!r} does not apply to graph-level data")
    subsets = []
    for k in range(num_clients):
        idx = assignment.members(k)
        graphs = [coll.graphs[i] for i in idx]
        if coll.labels is not None:
            subsets.append(
                GraphCollection(graphs, labels=coll.labels[idx], num_classes=coll.num_classes)
            )
        else:
            subsets.append(GraphCollection(graphs, targets=coll.targets[idx]))
    if strategy == "feature_skew":
        subsets = feature_skew_apply_collections(subsets, feature_mode, feature_range, seed)
    return assignment, subsets


# --------------------------------------------------------------- experiment ----


def _subgraph_robustness(graphs: list[Graph], spec: RobustnessSpec | None, master_seed):
    if spec is None or spec.is_noop:
        return graphs
    return [apply_robustness(g, spec, master_seed, i) for i, g in enumerate(graphs)]


def _collection_robustness(colls, spec: RobustnessSpec | None, master_seed):
    if spec is None or spec.is_noop:
        return colls
    out = []
    for ci, coll in enumerate(colls):
        graphs = [
            apply_robustness(g, spec, master_seed, f"{ci}|g{gi}")
            for gi, g in enumerate(coll.graphs)
        ]
        if coll.labels is not None:
            out.append(GraphCollection(graphs, labels=coll.labels, num_classes=coll.num_classes))
        else:
            out.append(GraphCollection(graphs, targets=coll.targets))
    return out


def prepare_run(cfg, data, master_seed) -> PreparedRun:
    """Partition the dataset for one repeat, apply robustness, and build the
    per-client training views. `cfg` is a config.ExperimentConfig."""
    cache = PropagationCache()
    part_seed = derive_seed(master_seed, "partition", cfg.partition.seed)
    mask_seed = derive_seed(cfg.seed, "masks")
    k, scheme = cfg.propagation_steps, cfg.scheme
    needs_global = cfg.eval_mode in ("global_global", "local_global")
    pc = cfg.partition
    if cfg.scenario == "subgraph_fl":
        community = None
        if pc.strategy == "cross_domain":
            if needs_global:
                raise ConfigError("cross_domain has no single global graph to evaluate on")
            graphs_in = [
                _ensure_node_masks(g, cfg.mask_ratios, derive_seed(mask_seed, i))
                for i, g in enumerate(data)
            ]
            if len({g.feature_dim for g in graphs_in}) > 1:
                raise ConfigError("cross_domain datasets disagree on feature_dim")
            if len({g.num_classes for g in graphs_in}) > 1:
                raise ConfigError("cross_domain datasets disagree on num_classes")
            assignment = cross_domain_split([g.num_nodes for g in graphs_in], cfg.num_clients)
            client_graphs: list[Graph | None] = [None] * cfg.num_clients
            dropped = 0
            offset = 0
            for g in graphs_in:
                owners = assignment.owner[offset : offset + g.num_nodes]
                local_ids = sorted(set(owners.tolist()))
                local_owner = np.searchsorted(local_ids, owners)
                split = build_client_subgraphs(g, ClientAssignment(local_owner, len(local_ids)))
                dropped += split.dropped_edges
                for i, kg in enumerate(local_ids):
                    client_graphs[kg] = split.graphs[i]
                offset += g.num_nodes
            owner = assignment.owner
            global_graph = None
        else:
            global_graph = _ensure_node_masks(data, cfg.mask_ratios, mask_seed)
            assignment, community, split = partition_subgraph(
                global_graph, pc.strategy, cfg.num_clients,
                alpha=pc.alpha, resolution=pc.resolution,
                imbalance_eps=pc.imbalance_eps, capacity_beta=pc.capacity_beta,
                seed=part_seed, feature_mode=pc.feature_mode,
                feature_range=(pc.feature_lo, pc.feature_hi),
            )
            client_graphs = split.graphs
            dropped = split.dropped_edges
            owner = assignment.owner
        client_graphs = _subgraph_robustness(client_graphs, cfg.robustness, master_seed)
        clients = [
            ClientState(i, build_node_data(g, k, scheme, cache), graph=g)
            for i, g in enumerate(client_graphs)
        ]
        global_data = (
            build_node_data(global_graph, k, scheme, cache)
            if needs_global and global_graph is not None
            else None
        )
        return PreparedRun(clients, global_data, owner, community, dropped, False)

    # graph_fl
    if pc.strategy == "cross_domain":
        if needs_global:
            raise ConfigError("cross_domain has no single global collection to evaluate on")
        colls = list(data)
        if len({c.feature_dim for c in colls}) > 1:
            raise ConfigError("cross_domain datasets disagree on feature_dim")
        if len({c.is_regression for c in colls}) > 1:
            raise ConfigError("cross_domain datasets mix classification and regression")
        regression = colls[0].is_regression
        if not regression and len({c.num_classes for c in colls}) > 1:
            raise ConfigError("cross_domain datasets disagree on num_classes")
        assignment = cross_domain_split([len(c) for c in colls], cfg.num_clients)
        all_masks = [
            generate_masks(len(c), cfg.mask_ratios, derive_seed(mask_seed, i))
            for i, c in enumerate(colls)
        ]
        subsets: list[GraphCollection | None] = [None] * cfg.num_clients
        client_masks: list = [None] * cfg.num_clients
        offset = 0
        for c, masks in zip(colls, all_masks):
            owners = assignment.owner[offset : offset + len(c)]
            for kg in sorted(set(owners.tolist())):
                idx = np.nonzero(owners == kg)[0]
                graphs = [c.graphs[i] for i in idx]
                if regression:
                    subsets[kg] = GraphCollection(graphs, targets=c.targets[idx])
                else:
                    subsets[kg] = GraphCollection(
                        graphs, labels=c.labels[idx], num_classes=c.num_classes
                    )
                client_masks[kg] = tuple(m[idx] for m in masks)
            offset += len(c)
        owner = assignment.owner
        global_coll = None
        global_masks = None
    else:
        coll: GraphCollection = data
        regression = coll.is_regression
        global_masks = generate_masks(len(coll), cfg.mask_ratios, mask_seed)
        assignment, subsets = partition_graph_collection(
            coll, pc.strategy, cfg.num_clients,
            alpha=pc.alpha, seed=part_seed,
            feature_mode=pc.feature_mode, feature_range=(pc.feature_lo, pc.feature_hi),
        )
        client_masks = [
            tuple(m[assignment.members(kg)] for m in global_masks)
            for kg in range(cfg.num_clients)
        ]
        owner = assignment.owner
        global_coll = coll
    subsets = _collection_robustness(subsets, cfg.robustness, master_seed)
    clients = [
        ClientState(i, build_graph_data(c, k, scheme, cache, client_masks[i]), collection=c)
        for i, c in enumerate(subsets)
    ]
    global_data = (
        build_graph_data(global_coll, k, scheme, cache, global_masks)
        if needs_global and global_coll is not None
        else None
    )
    return PreparedRun(clients, global_data, owner, None, 0, regression)


def _resolve_dp(cfg, clients: list[ClientState]):
    """Turn the raw DP section into calibrated engine settings."""
    raw = cfg.dp
    d_max = None
    if raw.sensitivity_rule == "node_level":
        d_max = 0
        for cl in clients:
            if cl.graph is not None and cl.graph.num_nodes:
                deg = cl.graph.degrees()
                if deg.size:
                    d_max = max(d_max, int(deg.max()))
    dp_cfg = DPConfig(
        clip_norm=raw.clip_norm,
        epsilon=raw.epsilon,
        delta=raw.delta,
        rounds=raw.rounds,
        alpha_grid=raw.alpha_grid,
        sensitivity_rule=raw.sensitivity_rule,
        d_max=d_max,
    )
    ensure_dp_compatible(cfg.propagation_steps, dp_cfg)
    cal = calibrate_sigma(dp_cfg)
    for cl in clients:
        cl.accountant = RDPAccountant(alpha=cal.alpha)
    return dp_cfg, cal


def run_experiment(cfg, data, workers: int | None = None) -> dict:
    """Run every repeat of the configured experiment and summarize.

    Repeat r derives its master seed from (cfg.seed, r); the partition,
    training batches, sampling and noise all flow from it, so two calls
    with the same config produce identical reports.
    """
    repeats_out = []
    for rep in range(cfg.repeats):
        master = derive_seed(cfg.seed, "repeat", rep)
        prep = prepare_run(cfg, data, master)
        settings = EngineSettings(
            algorithm=cfg.algorithm,
            rounds=cfg.rounds,
            client_fraction=cfg.client_fraction,
            train=cfg.train,
            eval_mode=cfg.eval_mode,
            scaffold_server_lr=cfg.scaffold_server_lr,
            workers=workers if workers is not None else cfg.workers,
            is_regression=prep.is_regression,
        )
        if cfg.dp is not None:
            dp_cfg, cal = _resolve_dp(cfg, prep.clients)
            settings.dp = dp_cfg
            settings.dp_sigma = cal.sigma
            settings.dp_alpha = cal.alpha
        report = run_rounds(prep.clients, settings, master, prep.global_data)
        report["repeat"] = rep
        report["client_train_sizes"] = [int(c.data.train_idx.size) for c in prep.clients]
        report["dropped_cross_edges"] = prep.dropped_cross_edges
        repeats_out.append(report)
    metric = repeats_out[0]["metric"]
    values = [r["test_at_best"].get(metric) for r in repeats_out]
    values = [v for v in values if v is not None]
    if values:
        mean = float(np.mean(values))
        std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    else:
        mean = std = None
    return {
        "repeats": repeats_out,
        "summary": {
            "metric": metric,
            "mean": mean,
            "std": std,
            "best_rounds": [r["best_round"] for r in repeats_out],
        },
        "communication": measure_communication(
            [r["communication"] for r in repeats_out]
        ),
        "dp": repeats_out[0].get("dp"),
    }
