"""Experiment configuration: JSON in, validated dataclasses out.

The JSON file is the primary interface (runs are sweep-generated); the CLI
only selects the command and paths. Unknown keys are rejected with the
offending JSON path. Omitted keys take the scenario defaults:

  subgraph_fl: lr 1e-2, 3 local epochs, full batch, masks 20%/40%/40%
  graph_fl:    lr 1e-3, 1 local epoch, batch 128, masks 80%/10%/10%
  both:        weight decay 5e-4, 100 rounds, Dirichlet alpha 1, 3 repeats

`parse_config(serialize_config(cfg))` reproduces the config exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .learner import TrainConfig
from .privacy import ALPHA_GRID_DEFAULT
from .robustness import RobustnessSpec

SCENARIOS = ("subgraph_fl", "graph_fl")

SCENARIO_DEFAULTS = {
    "subgraph_fl": {"lr": 1e-2, "local_epochs": 3, "batch_size": 0, "masks": (0.2, 0.4, 0.4)},
    "graph_fl": {"lr": 1e-3, "local_epochs": 1, "batch_size": 128, "masks": (0.8, 0.1, 0.1)},
}


@dataclass
class PartitionConfig:
    strategy: str = "louvain_community"
    alpha: float = 1.0
    resolution: float = 1.0
    imbalance_eps: float = 0.05
    capacity_beta: float = 0.3
    seed: int = 0
    feature_mode: str = "gaussian"
    feature_lo: float = 0.0
    feature_hi: float = 0.0


@dataclass
class DPSettings:
    """Raw DP section; the engine resolves d_max and noise at run time."""

    clip_norm: float
    epsilon: float
    delta: float
    rounds: int  # total noisy releases covered by the budget
    sensitivity_rule: str
    alpha_grid: tuple[float, ...]


@dataclass
class ExperimentConfig:
    scenario: str
    dataset: str | None = None
    datasets: list[str] | None = None
    algorithm: str = "fedavg"
    rounds: int = 100
    client_fraction: float = 1.0
    num_clients: int = 10
    eval_mode: str = "local_local"
    repeats: int = 3
    seed: int = 0
    workers: int = 1
    mask_ratios: tuple[float, float, float] = (0.2, 0.4, 0.4)
    propagation_steps: int = 2
    scheme: str = "symmetric"
    scaffold_server_lr: float = 1.0
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    robustness: RobustnessSpec | None = None
    dp: DPSettings | None = None


class _Section:
    """Dict wrapper that records consumed keys and reports leftovers."""

    def __init__(self, raw: dict, path: str):
        if not isinstance(raw, dict):
            raise ConfigError(f"{path or '<root>'}: expected a JSON object")
        self.raw = raw
        self.path = path
        self.seen: set[str] = set()

    def has(self, key: str) -> bool:
        return key in self.raw

    def get(self, key: str, default, kind=None):
        self.seen.add(key)
        if key not in self.raw:
            return default
        value = self.raw[key]
        if kind is not None:
            try:
                value = kind(value)
            except (TypeError, ValueError):
                raise ConfigError(f"{self._at(key)}: cannot interpret {value!r}")
        return value

    def section(self, key: str) -> "_Section | None":
        self.seen.add(key)
        if key not in self.raw:
            return None
        return _Section(self.raw[key], self._at(key))

    def _at(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def finish(self):
        unknown = sorted(set(self.raw) - self.seen)
        if unknown:
            raise ConfigError(f"unknown key {self._at(unknown[0])!r}")


def _parse_choice(sec: _Section, key: str, default, choices):
    value = sec.get(key, default, str)
    if value not in choices:
        raise ConfigError(f"{sec._at(key)}: expected one of {sorted(choices)}, got {value!r}")
    return value


def parse_config_dict(raw: dict) -> ExperimentConfig:
    root = _Section(raw, "")
    scenario = _parse_choice(root, "scenario", None, SCENARIOS + (None,))
    if scenario is None:
        raise ConfigError("scenario: required (subgraph_fl or graph_fl)")
    defaults = SCENARIO_DEFAULTS[scenario]

    algorithm = _parse_choice(
        root, "algorithm", "fedavg",
        ("fedavg", "fedprox", "scaffold", "fedproto", "local_only"),
    )
    dataset = root.get("dataset", None, str)
    datasets = root.get("datasets", None, list)
    if datasets is not None:
        datasets = [str(p) for p in datasets]
    if dataset is not None and datasets is not None:
        raise ConfigError("dataset: give either 'dataset' or 'datasets', not both")

    masks = root.section("masks")
    if masks is None:
        mask_ratios = defaults["masks"]
    else:
        mask_ratios = (
            float(masks.get("train", defaults["masks"][0], float)),
            float(masks.get("val", defaults["masks"][1], float)),
            float(masks.get("test", defaults["masks"][2], float)),
        )
        masks.finish()

    model = root.section("model")
    propagation_steps, scheme = 2, "symmetric"
    if model is not None:
        propagation_steps = int(model.get("propagation_steps", 2, int))
        scheme = _parse_choice(model, "scheme", "symmetric", ("symmetric", "row_stochastic"))
        model.finish()
    if propagation_steps < 0:
        raise ConfigError("model.propagation_steps: must be >= 0")

    part = root.section("partition")
    partition = PartitionConfig()
    if part is not None:
        partition = PartitionConfig(
            strategy=_parse_choice(
                part, "strategy", "louvain_community",
                (
                    "feature_skew", "label_dirichlet", "cross_domain", "topology_skew",
                    "metis_community", "louvain_community",
                    "metis_label_imbalance", "louvain_label_imbalance",
                ),
            ),
            alpha=float(part.get("alpha", 1.0, float)),
            resolution=float(part.get("resolution", 1.0, float)),
            imbalance_eps=float(part.get("imbalance_eps", 0.05, float)),
            capacity_beta=float(part.get("capacity_beta", 0.3, float)),
            seed=int(part.get("seed", 0, int)),
            feature_mode=_parse_choice(
                part, "feature_mode", "gaussian", ("gaussian", "laplacian", "scale")
            ),
            feature_lo=float(part.get("feature_lo", 0.0, float)),
            feature_hi=float(part.get("feature_hi", 0.0, float)),
        )
        part.finish()

    rounds = int(root.get("rounds", 100, int))
    train_sec = root.section("train")
    train_kwargs = {
        "local_epochs": defaults["local_epochs"],
        "batch_size": defaults["batch_size"],
        "lr": defaults["lr"],
        "weight_decay": 5e-4,
        "prox_mu": 0.0,
        "proto_lambda": 1.0,
        "optimizer": "sgd" if algorithm == "scaffold" else "adam",
    }
    if train_sec is not None:
        for key, cast in (
            ("local_epochs", int), ("batch_size", int), ("lr", float),
            ("weight_decay", float), ("prox_mu", float), ("proto_lambda", float),
        ):
            if train_sec.has(key):
                train_kwargs[key] = cast(train_sec.get(key, None, cast))
            else:
                train_sec.seen.add(key)
        if train_sec.has("optimizer"):
            train_kwargs["optimizer"] = _parse_choice(
                train_sec, "optimizer", train_kwargs["optimizer"], ("adam", "sgd")
            )
        else:
            train_sec.seen.add("optimizer")
        train_sec.finish()
    try:
        train = TrainConfig(**train_kwargs)
    except Exception as exc:
        raise ConfigError(f"train: {exc}")

    robustness = None
    client_fraction = float(root.get("client_fraction", 1.0, float))
    rob = root.section("robustness")
    if rob is not None:
        if rob.has("client_fraction"):
            client_fraction = float(rob.get("client_fraction", 1.0, float))
        kwargs = {}
        for key, cast in (
            ("feature_noise_kind", str), ("feature_noise_sigma", float),
            ("feature_noise_channel_fraction", float), ("label_noise_rate", float),
            ("hetero_edge_fraction", float), ("feature_missing_rate", float),
            ("edge_drop_rate", float), ("label_keep_ratio", float),
        ):
            if rob.has(key):
                kwargs[key] = cast(rob.get(key, None, cast))
            else:
                rob.seen.add(key)
        rob.finish()
        try:
            robustness = RobustnessSpec(**kwargs)
        except ConfigError as exc:
            raise ConfigError(f"robustness: {exc}")

    dp = None
    dp_sec = root.section("dp")
    if dp_sec is not None:
        rule_default = "node_level" if scenario == "subgraph_fl" else "graph_sample"
        grid = dp_sec.get("alpha_grid", None, list)
        dp = DPSettings(
            clip_norm=float(dp_sec.get("clip_norm", 1.0, float)),
            epsilon=float(dp_sec.get("epsilon", None, float) or 0.0),
            delta=float(dp_sec.get("delta", 1e-5, float)),
            rounds=int(dp_sec.get("rounds", rounds * train.local_epochs, int)),
            sensitivity_rule=_parse_choice(
                dp_sec, "sensitivity_rule", rule_default, ("node_level", "graph_sample")
            ),
            alpha_grid=tuple(float(a) for a in grid) if grid else ALPHA_GRID_DEFAULT,
        )
        dp_sec.finish()
        if dp.epsilon <= 0:
            raise ConfigError("dp.epsilon: required and positive")

    cfg = ExperimentConfig(
        scenario=scenario,
        dataset=dataset,
        datasets=datasets,
        algorithm=algorithm,
        rounds=rounds,
        client_fraction=client_fraction,
        num_clients=int(root.get("num_clients", 10, int)),
        eval_mode=_parse_choice(
            root, "eval_mode", "local_local",
            ("global_global", "global_local", "local_global", "local_local"),
        ),
        repeats=int(root.get("repeats", 3, int)),
        seed=int(root.get("seed", 0, int)),
        workers=int(root.get("workers", 1, int)),
        mask_ratios=mask_ratios,
        propagation_steps=propagation_steps,
        scheme=scheme,
        scaffold_server_lr=float(root.get("scaffold_server_lr", 1.0, float)),
        partition=partition,
        train=train,
        robustness=robustness,
        dp=dp,
    )
    root.finish()
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.rounds < 0:
        raise ConfigError("rounds: must be >= 0")
    if not 0.0 < cfg.client_fraction <= 1.0:
        raise ConfigError("client_fraction: must lie in (0, 1]")
    if cfg.repeats < 1:
        raise ConfigError("repeats: must be >= 1")
    if cfg.num_clients < 1:
        raise ConfigError("num_clients: must be >= 1")
    if cfg.workers < 1:
        raise ConfigError("workers: must be >= 1")
    if sum(cfg.mask_ratios) > 1.0 + 1e-12:
        raise ConfigError("masks: ratios sum above 1")
    if cfg.partition.strategy == "cross_domain" and cfg.datasets is None:
        raise ConfigError("partition.strategy: cross_domain needs 'datasets'")
    if cfg.partition.strategy != "cross_domain" and cfg.datasets is not None:
        raise ConfigError("datasets: only the cross_domain strategy takes several")
    graph_only = ("topology_skew",)
    node_only = (
        "metis_community", "louvain_community",
        "metis_label_imbalance", "louvain_label_imbalance",
    )
    if cfg.scenario == "graph_fl" and cfg.partition.strategy in node_only:
        raise ConfigError(f"partition.strategy: {cfg.partition.strategy} is node-level only")
    if cfg.scenario == "subgraph_fl" and cfg.partition.strategy in graph_only:
        raise ConfigError(f"partition.strategy: {cfg.partition.strategy} is graph-level only")
    if cfg.robustness is not None and cfg.scenario == "graph_fl":
        if cfg.robustness.label_noise_rate > 0 or cfg.robustness.label_keep_ratio < 1.0:
            raise ConfigError("robustness: label perturbations apply to subgraph_fl only")
    if cfg.dp is not None:
        if cfg.algorithm not in ("fedavg", "fedprox"):
            raise ConfigError("dp: supported with fedavg and fedprox only")
        if cfg.dp.sensitivity_rule == "node_level" and cfg.propagation_steps > 1:
            raise ConfigError("dp: node_level accounting requires model.propagation_steps <= 1")


def parse_config(path: str | Path) -> ExperimentConfig:
    with Path(path).open("r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})")
    return parse_config_dict(raw)


def serialize_config(cfg: ExperimentConfig) -> dict:
    """Full config with resolved defaults; parse_config_dict() round-trips."""
    out = {
        "scenario": cfg.scenario,
        "algorithm": cfg.algorithm,
        "rounds": cfg.rounds,
        "client_fraction": cfg.client_fraction,
        "num_clients": cfg.num_clients,
        "eval_mode": cfg.eval_mode,
        "repeats": cfg.repeats,
        "seed": cfg.seed,
        "workers": cfg.workers,
        "scaffold_server_lr": cfg.scaffold_server_lr,
        "masks": {
            "train": cfg.mask_ratios[0],
            "val": cfg.mask_ratios[1],
            "test": cfg.mask_ratios[2],
        },
        "model": {"propagation_steps": cfg.propagation_steps, "scheme": cfg.scheme},
        "partition": {
            "strategy": cfg.partition.strategy,
            "alpha": cfg.partition.alpha,
            "resolution": cfg.partition.resolution,
            "imbalance_eps": cfg.partition.imbalance_eps,
            "capacity_beta": cfg.partition.capacity_beta,
            "seed": cfg.partition.seed,
            "feature_mode": cfg.partition.feature_mode,
            "feature_lo": cfg.partition.feature_lo,
            "feature_hi": cfg.partition.feature_hi,
        },
        "train": {
            "local_epochs": cfg.train.local_epochs,
            "batch_size": cfg.train.batch_size,
            "lr": cfg.train.lr,
            "weight_decay": cfg.train.weight_decay,
            "prox_mu": cfg.train.prox_mu,
            "proto_lambda": cfg.train.proto_lambda,
            "optimizer": cfg.train.optimizer,
        },
    }
    if cfg.dataset is not None:
        out["dataset"] = cfg.dataset
    if cfg.datasets is not None:
        out["datasets"] = list(cfg.datasets)
    if cfg.robustness is not None:
        r = cfg.robustness
        out["robustness"] = {
            "feature_noise_kind": r.feature_noise_kind,
            "feature_noise_sigma": r.feature_noise_sigma,
            "feature_noise_channel_fraction": r.feature_noise_channel_fraction,
            "label_noise_rate": r.label_noise_rate,
            "hetero_edge_fraction": r.hetero_edge_fraction,
            "feature_missing_rate": r.feature_missing_rate,
            "edge_drop_rate": r.edge_drop_rate,
            "label_keep_ratio": r.label_keep_ratio,
            "client_fraction": cfg.client_fraction,
        }
    if cfg.dp is not None:
        out["dp"] = {
            "clip_norm": cfg.dp.clip_norm,
            "epsilon": cfg.dp.epsilon,
            "delta": cfg.dp.delta,
            "rounds": cfg.dp.rounds,
            "sensitivity_rule": cfg.dp.sensitivity_rule,
            "alpha_grid": list(cfg.dp.alpha_grid),
        }
    return out
