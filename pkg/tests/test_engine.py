import copy

import numpy as np
import pytest

from fglsim.config import parse_config_dict
from fglsim.engine import (
    ClientState,
    EngineSettings,
    Message,
    MessagePool,
    evaluate_mode,
    fedavg_aggregate,
    fedproto_server_aggregate,
    measure_communication,
    prepare_run,
    run_experiment,
    run_rounds,
    sample_clients,
    scaffold_client_step,
    scaffold_server_aggregate,
)
from fglsim.errors import (
    AggregationError,
    ConfigError,
    ContractViolationError,
)
from fglsim.graph import generate_masks, generate_sbm
from fglsim.learner import (
    PropagationCache,
    SGCModel,
    TrainConfig,
    TrainContext,
    TrainData,
    build_node_data,
    local_train,
    params_unflat,
)
from fglsim.seeding import derive_seed


def strip_volatile(obj):
    """Drop wall-clock fields before equality comparison."""
    if isinstance(obj, dict):
        return {k: strip_volatile(v) for k, v in obj.items() if k not in ("wall_ms", "timestamp")}
    if isinstance(obj, list):
        return [strip_volatile(v) for v in obj]
    return obj


def base_config(**overrides):
    raw = {
        "scenario": "subgraph_fl",
        "dataset": "unused",
        "algorithm": "fedavg",
        "rounds": 4,
        "repeats": 1,
        "num_clients": 4,
        "seed": 3,
        "partition": {"strategy": "louvain_community"},
        "train": {"local_epochs": 2, "lr": 0.05, "batch_size": 0},
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(raw.get(key), dict):
            raw[key].update(value)
        else:
            raw[key] = value
    return parse_config_dict(raw)


def fixture_graph(seed=0, n=80, f=6, blocks=4, noise=0.6):
    sizes = [n // blocks] * blocks
    g = generate_sbm(sizes, 0.4, 0.02, f, seed=seed, feature_noise=noise)
    g.train_mask, g.val_mask, g.test_mask = generate_masks(g.num_nodes, (0.4, 0.3, 0.3), seed)
    return g


# ------------------------------------------------------------ message pool ----


def test_message_bytes_params():
    msg = Message(params=np.zeros(10))
    # 4 + len("params") + 8 + 10*8
    assert msg.byte_size == 4 + 6 + 8 + 80
    assert msg.byte_size >= 80


def test_message_bytes_empty():
    assert Message().byte_size == 0


def test_message_prototypes_roundtrip_size():
    protos = {0: (np.zeros(3), 5), 2: (np.ones(3), 1)}
    msg = Message(prototypes=protos)
    expect = 4 + len("prototypes") + 8 + 2 * (24 + 3 * 8)
    assert msg.byte_size == expect


def test_pool_ownership():
    pool = MessagePool()
    pool.begin_round(1, [0, 1])
    pool.write("server", Message(params=np.zeros(2)), "server")
    pool.write("client_0", Message(num_samples=1), "client_0")
    with pytest.raises(ContractViolationError):
        pool.write("client_1", Message(), "client_0")
    with pytest.raises(ContractViolationError):
        pool.write("client_2", Message(), "client_2")  # not sampled
    with pytest.raises(ContractViolationError):
        pool.read("client_0", "client_1")
    assert pool.read("server", "client_1").params is not None
    assert pool.client_entries()[0][0] == 0


def test_pool_requires_server_first():
    pool = MessagePool()
    pool.begin_round(1, [0])
    with pytest.raises(ContractViolationError):
        pool.read("server", "client_0")


def test_pool_clears_client_entries():
    pool = MessagePool()
    pool.begin_round(1, [0])
    pool.write("server", Message(), "server")
    pool.write("client_0", Message(num_samples=3), "client_0")
    pool.begin_round(2, [0])
    assert pool.client_entries() == []


# ---------------------------------------------------------------- sampling ----


def test_sample_all_clients():
    assert sample_clients(5, 1.0, 3, 0) == [0, 1, 2, 3, 4]


def test_sample_ceiling():
    assert len(sample_clients(10, 0.1, 1, 0)) == 1
    assert len(sample_clients(10, 0.25, 1, 0)) == 3


def test_sample_deterministic_and_sorted():
    a = sample_clients(20, 0.4, 7, 123)
    b = sample_clients(20, 0.4, 7, 123)
    assert a == b == sorted(a)
    assert len(set(a)) == len(a)


# ------------------------------------------------------------- aggregation ----


def test_fedavg_weighted_mean():
    msgs = [
        Message(params=np.array([1.0, 1.0]), num_samples=1),
        Message(params=np.array([3.0, 3.0]), num_samples=3),
    ]
    assert np.allclose(fedavg_aggregate(msgs), [2.5, 2.5])


def test_fedavg_single_and_equal():
    one = [Message(params=np.array([2.0]), num_samples=7)]
    assert fedavg_aggregate(one).tolist() == [2.0]
    equal = [Message(params=np.array([float(i)]), num_samples=5) for i in range(3)]
    assert fedavg_aggregate(equal).tolist() == [1.0]


def test_fedavg_excludes_empty_and_errors():
    msgs = [
        Message(params=np.array([5.0]), num_samples=0),
        Message(params=np.array([1.0]), num_samples=2),
    ]
    assert fedavg_aggregate(msgs).tolist() == [1.0]
    with pytest.raises(AggregationError):
        fedavg_aggregate([Message(params=np.array([5.0]), num_samples=0)])


def test_scaffold_server_update():
    params = np.zeros(1)
    control = np.zeros(1)
    msgs = [Message(params=np.array([0.5]), control_delta=np.array([1.0]), num_samples=1)]
    new_p, new_c = scaffold_server_aggregate(params, control, msgs, num_clients=2)
    assert new_p.tolist() == [0.5]
    assert new_c.tolist() == [0.5]  # |S|/K * mean = 1/2 * 1


def test_scaffold_server_zero_deltas():
    params = np.array([1.0, 2.0])
    msgs = [Message(params=np.zeros(2), control_delta=np.zeros(2), num_samples=1)]
    new_p, _ = scaffold_server_aggregate(params, np.zeros(2), msgs, 3)
    assert np.array_equal(new_p, params)


def test_fedproto_weighted_prototypes():
    msgs = [
        Message(prototypes={0: (np.array([0.0, 0.0]), 1)}),
        Message(prototypes={0: (np.array([2.0, 2.0]), 3)}),
    ]
    out = fedproto_server_aggregate(msgs)
    assert np.allclose(out[0][0], [1.5, 1.5])
    assert out[0][1] == 4


def test_fedproto_single_reporter():
    msgs = [
        Message(prototypes={1: (np.array([4.0]), 2)}),
        Message(prototypes={}),
    ]
    out = fedproto_server_aggregate(msgs)
    assert list(out) == [1]
    assert out[1][0].tolist() == [4.0]


def test_measure_communication_empty():
    assert measure_communication([]) == {
        "uplink_bytes": 0,
        "downlink_bytes": 0,
        "total_bytes": 0,
    }


# ------------------------------------------------------------ scaffold step ----


def scalar_regression_data():
    # one sample x=1, target -1: at theta=0 both gradients equal 1
    return TrainData(
        X=np.array([[1.0]]),
        labels=None,
        targets=np.array([-1.0]),
        train_idx=np.array([0]),
        val_idx=np.zeros(0, dtype=np.int64),
        test_idx=np.zeros(0, dtype=np.int64),
        num_classes=0,
    )


def test_scaffold_client_hand_trace():
    data = scalar_regression_data()
    cfg = TrainConfig(local_epochs=1, batch_size=0, lr=0.1, weight_decay=0.0, optimizer="sgd")
    template = SGCModel.zeros(0, 1, 1)
    theta0 = np.zeros(2)
    theta_i, d_theta, d_control, count, _ = scaffold_client_step(
        theta0, np.zeros(2), np.zeros(2), data, cfg, template, seed=0
    )
    assert np.allclose(theta_i, [-0.1, -0.1])
    assert np.allclose(d_theta, [-0.1, -0.1])
    # c_i+ = c_i - c + (theta_g - theta_i)/(S*lr) = 0.1/0.1 = 1
    assert np.allclose(d_control, [1.0, 1.0])
    assert count == 1


def test_scaffold_step_requires_steps():
    data = scalar_regression_data()
    cfg = TrainConfig(local_epochs=0, lr=0.1, optimizer="sgd")
    with pytest.raises(ContractViolationError):
        scaffold_client_step(np.zeros(2), np.zeros(2), np.zeros(2), data,
                             cfg, SGCModel.zeros(0, 1, 1), seed=0)


def test_scaffold_zero_correction_equals_plain_step():
    data = scalar_regression_data()
    cfg = TrainConfig(local_epochs=1, lr=0.1, weight_decay=0.0, optimizer="sgd")
    template = SGCModel.zeros(0, 1, 1)
    theta_i, _, _, _, _ = scaffold_client_step(
        np.zeros(2), np.zeros(2), np.zeros(2), data, cfg, template, seed=4
    )
    ctx = TrainContext(global_params={"W": np.zeros((1, 1)), "b": np.zeros(1)}, seed=4)
    model, _, _ = local_train(template, data, cfg, ctx)
    assert np.allclose(theta_i, model.flat())


# ----------------------------------------------------------- reductions ----


def prepared_clients(cfg, g, master):
    return prepare_run(cfg, g, master)


def test_fedprox_mu_zero_equals_fedavg():
    g = fixture_graph(seed=1)
    master = derive_seed(3, "repeat", 0)
    cfg_avg = base_config(algorithm="fedavg")
    cfg_prox = base_config(algorithm="fedprox", train={"prox_mu": 0.0})
    prep_a = prepare_run(cfg_avg, g, master)
    prep_p = prepare_run(cfg_prox, g, master)
    rep_a = run_rounds(prep_a.clients, EngineSettings("fedavg", 4, train=cfg_avg.train), master)
    rep_p = run_rounds(prep_p.clients, EngineSettings("fedprox", 4, train=cfg_prox.train), master)
    for ca, cp in zip(prep_a.clients, prep_p.clients):
        assert np.allclose(ca.model.flat(), cp.model.flat(), atol=1e-12)
    assert strip_volatile(rep_a["rounds"]) == strip_volatile(rep_p["rounds"])


def test_fedprox_large_mu_pins_to_global():
    # several local steps so the proximal pull can act after the first one
    g = fixture_graph(seed=2)
    master = derive_seed(3, "repeat", 0)
    cfg0 = base_config(algorithm="fedprox", rounds=1, train={"prox_mu": 0.0, "local_epochs": 6})
    cfg1 = base_config(algorithm="fedprox", rounds=1, train={"prox_mu": 1e6, "local_epochs": 6})
    prep0 = prepare_run(cfg0, g, master)
    prep1 = prepare_run(cfg1, g, master)
    run_rounds(prep0.clients, EngineSettings("fedprox", 1, train=cfg0.train), master)
    run_rounds(prep1.clients, EngineSettings("fedprox", 1, train=cfg1.train), master)
    drift0 = np.linalg.norm(prep0.clients[0].model.flat())
    drift1 = np.linalg.norm(prep1.clients[0].model.flat())
    assert drift1 < drift0  # global params start at zero


def test_single_client_fedavg_equals_centralized():
    g = fixture_graph(seed=3)
    cfg = base_config(num_clients=1, rounds=5, partition={"strategy": "label_dirichlet"})
    master = derive_seed(cfg.seed, "repeat", 0)
    prep = prepare_run(cfg, g, master)
    data = prep.clients[0].data
    rep = run_rounds(prep.clients, EngineSettings("fedavg", 5, train=cfg.train), master)
    # centralized: same local_train calls chained on the same data
    template = SGCModel.zeros(0, data.X.shape[1], data.num_classes)
    params = {"W": template.W.copy(), "b": template.b.copy()}
    for round_id in range(1, 6):
        ctx = TrainContext(global_params=params, seed=f"{master}|train|0|{round_id}")
        model, _, _ = local_train(template, data, cfg.train, ctx)
        params = model.params()
    assert np.array_equal(prep.clients[0].model.flat(),
                          np.concatenate([params["W"].ravel(), params["b"].ravel()]))
    assert rep["rounds"][-1]["round"] == 5


def test_scaffold_pinned_zero_variates_equals_fedavg():
    g = fixture_graph(seed=4)
    cfg = base_config(
        algorithm="scaffold",
        partition={"strategy": "feature_skew"},  # equal client sizes
        train={"optimizer": "sgd", "lr": 0.05, "local_epochs": 2},
    )
    master = derive_seed(cfg.seed, "repeat", 0)
    prep_f = prepare_run(base_config(partition={"strategy": "feature_skew"},
                                     train={"optimizer": "sgd", "lr": 0.05, "local_epochs": 2}),
                         g, master)
    prep_s = prepare_run(cfg, g, master)
    # the fedavg side below aggregates with equalized (uniform) weights,
    # matching scaffold's unweighted server mean
    f = prep_f.clients[0].data.X.shape[1]
    c = prep_f.clients[0].data.num_classes
    template = SGCModel.zeros(0, f, c)
    theta_avg = template.flat()
    theta_sca = template.flat()
    zeros = np.zeros_like(theta_avg)
    for round_id in range(1, 5):
        locals_avg = []
        deltas = []
        for cl_f, cl_s in zip(prep_f.clients, prep_s.clients):
            seed = f"{master}|train|{cl_f.client_id}|{round_id}"
            ctx = TrainContext(global_params=params_unflat(theta_avg, f, c), seed=seed)
            model, _, _ = local_train(template, cl_f.data, cfg.train, ctx)
            locals_avg.append(model.flat())
            _, d_theta, _, _, _ = scaffold_client_step(
                theta_sca, zeros, zeros, cl_s.data, cfg.train, template, seed
            )
            deltas.append(d_theta)
        theta_avg = np.mean(locals_avg, axis=0)
        theta_sca = theta_sca + np.mean(deltas, axis=0)
        assert np.allclose(theta_avg, theta_sca, atol=1e-12)


def test_scaffold_engine_runs_and_beats_nan():
    g = fixture_graph(seed=5)
    cfg = base_config(algorithm="scaffold", rounds=3, train={"optimizer": "sgd", "lr": 0.05})
    rep = run_experiment(cfg, g)
    assert rep["summary"]["mean"] is not None
    assert np.isfinite(rep["summary"]["mean"])


def test_fedproto_engine_personal_models():
    g = fixture_graph(seed=6)
    cfg = base_config(algorithm="fedproto", rounds=3, train={"proto_lambda": 1.0})
    rep = run_experiment(cfg, g)
    assert rep["summary"]["mean"] is not None


def test_local_only_no_communication():
    g = fixture_graph(seed=7)
    cfg = base_config(algorithm="local_only", rounds=3)
    rep = run_experiment(cfg, g)
    assert rep["communication"]["total_bytes"] == 0


# ------------------------------------------------------------- evaluation ----


def toy_data(labels, val_idx, test_idx, f=2):
    n = len(labels)
    return TrainData(
        X=np.eye(n, f),
        labels=np.asarray(labels),
        targets=None,
        train_idx=np.arange(n),
        val_idx=np.asarray(val_idx, dtype=np.int64),
        test_idx=np.asarray(test_idx, dtype=np.int64),
        num_classes=2,
    )


def test_evaluate_mode_weighted_mean():
    # client 0: perfect on 10 test rows; client 1: all wrong on 30
    d0 = TrainData(np.zeros((10, 1)), np.zeros(10, dtype=np.int64), None,
                   np.arange(10), np.zeros(0, dtype=np.int64), np.arange(10), 2)
    d1 = TrainData(np.zeros((30, 1)), np.ones(30, dtype=np.int64), None,
                   np.arange(30), np.zeros(0, dtype=np.int64), np.arange(30), 2)
    perfect = SGCModel(0, np.zeros((1, 2)), np.array([1.0, 0.0]))  # argmax 0
    out = evaluate_mode("local_local", None, [perfect, perfect], None, [d0, d1], "test")
    assert out["accuracy"] == pytest.approx(0.25)


def test_evaluate_mode_k1_modes_coincide():
    d = toy_data([0, 1, 0, 1], val_idx=[0, 1], test_idx=[2, 3])
    model = SGCModel(0, np.array([[1.0, 0.0], [0.0, 1.0]]), np.zeros(2))
    out = {}
    for mode in ("global_global", "global_local", "local_global", "local_local"):
        out[mode] = evaluate_mode(mode, model, [model], d, [d], "test")
    assert len({tuple(sorted(v.items())) for v in out.values()}) == 1


def test_evaluate_mode_validation():
    with pytest.raises(ConfigError):
        EngineSettings("fedproto", 1, eval_mode="global_local")
    with pytest.raises(ConfigError):
        evaluate_mode("global_global", None, [], None, [], "test")


# ----------------------------------------------------------- determinism ----


def test_run_experiment_deterministic_across_workers():
    g = fixture_graph(seed=8)
    cfg = base_config(rounds=3, repeats=2, num_clients=4)
    rep1 = run_experiment(cfg, g, workers=1)
    rep8 = run_experiment(cfg, g, workers=8)
    assert strip_volatile(rep1) == strip_volatile(rep8)


def test_run_experiment_t0_initial_eval_only():
    g = fixture_graph(seed=9)
    cfg = base_config(rounds=0, repeats=1)
    rep = run_experiment(cfg, g)
    rounds = rep["repeats"][0]["rounds"]
    assert len(rounds) == 1
    assert rounds[0]["round"] == 0
    assert "accuracy" in rounds[0]["test"]


def test_fedproto_uplink_smaller_when_protos_small():
    # f=32 features vs c=4 classes: prototype payload << parameter payload
    g = fixture_graph(seed=10, f=32)
    cfg_avg = base_config(rounds=2, num_clients=4)
    cfg_proto = base_config(algorithm="fedproto", rounds=2, num_clients=4)
    rep_avg = run_experiment(cfg_avg, g)
    rep_proto = run_experiment(cfg_proto, g)
    assert rep_proto["communication"]["uplink_bytes"] < rep_avg["communication"]["uplink_bytes"]


def test_client_fraction_sampling_in_rounds():
    g = fixture_graph(seed=11)
    cfg = base_config(rounds=4, num_clients=4, client_fraction=0.5)
    rep = run_experiment(cfg, g)
    for rec in rep["repeats"][0]["rounds"][1:]:
        assert len(rec["sampled_clients"]) == 2
