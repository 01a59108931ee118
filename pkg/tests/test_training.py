import io
import math

import numpy as np
import pytest

from semignn import autograd as ag
from semignn.graph import BIPARTITE, RELATION, MissingRelationView, MultiViewGraph, build_view_graph
from semignn.model import ModelParams, init_params
from semignn.training import (EmptyBatch, NoLabeledUsers, StepReport, TrainConfig,
                              batch_objective, epoch_pairs, graph_loss, graph_term, prepare, sgd_update,
                              sup_loss, sup_term, total_loss, train)
from semignn.walker import NegativeSampler, WalkConfig

from conftest import tiny_graph

SMALL = dict(d0=4, mlp=(3,), d_final=2, walk=WalkConfig(walks_per_node=2, walk_length=4, window=2))


def const(x):
    return ag.Tape().const(np.asarray(x, dtype=np.float64))


def sup_of(rows, labels):
    t = ag.Tape()
    return float(sup_term(t.const(np.asarray(rows, float)), t.const(np.eye(2)), labels).value)


# --- sup loss -------------------------------------------------------------------

def test_sup_uniform_prediction_is_ln2():
    assert abs(sup_of([[0.0, 0.0]], [1]) - math.log(2)) < 1e-15


def test_sup_closed_forms():
    p9 = [math.log(9), 0.0]  # softmax -> (0.9, 0.1)
    assert abs(sup_of([p9], [0]) - 0.10536051565782628) < 1e-12
    assert abs(sup_of([p9, [0.0, 0.0]], [0, 1]) - (-math.log(0.9) - math.log(0.5)) / 2) < 1e-12
    assert round(sup_of([p9, [0.0, 0.0]], [0, 1]), 5) == 0.39925


def test_sup_on_graph_with_zero_theta(tiny, tiny_params):
    tiny_params.tensors["theta"][:] = 0.0
    assert abs(sup_loss(tiny, tiny_params, [0, 1]) - math.log(2)) < 1e-12
    with pytest.raises(EmptyBatch):
        sup_loss(tiny, tiny_params, [])
    with pytest.raises(ValueError):
        sup_loss(tiny, tiny_params, [2])


# --- graph loss -------------------------------------------------------------------

def test_zero_embeddings_give_four_ln2():
    a = const(np.zeros((4, 2)))
    v = graph_term(a, np.array([0, 1]), np.array([1, 2]), np.array([[2, 3, 3], [0, 3, 2]]))
    assert abs(float(v.value) - 4 * math.log(2)) < 1e-12


def test_graph_loss_saturates_at_clamp():
    a = const([[1.0, 0.0], [30.0, 0.0], [-30.0, 0.0]])
    v = graph_term(a, np.array([0]), np.array([1]), np.array([[2, 2, 2]]))
    assert abs(float(v.value)) < 1e-9 * 5  # 4 * log1p(exp(-30)) ~ 3.7e-13
    far = const([[1.0, 0.0], [500.0, 0.0], [-500.0, 0.0]])
    assert float(graph_term(far, np.array([0]), np.array([1]), np.array([[2, 2, 2]])).value) == float(v.value)


def test_graph_loss_single_negative():
    a = const([[1.0, 0.0], [1.0, 5.0], [1.0, -2.0]])
    v = float(graph_term(a, np.array([0]), np.array([1]), np.array([[2]])).value)
    expect = -math.log(1 / (1 + math.exp(-1))) - math.log(1 / (1 + math.exp(1)))
    assert abs(v - expect) < 1e-12 and round(v, 5) == 1.62652


def test_graph_loss_on_graph_with_zero_params(tiny, tiny_params):
    zero = ModelParams(tiny_params.dims, {k: np.zeros_like(v) for k, v in tiny_params.tensors.items()})
    s = NegativeSampler.from_relation(tiny.relation, range(5), Q=3)
    val = graph_loss(tiny, zero, [(0, 1), (1, 2), (2, 3)], s, np.random.default_rng(0))
    assert abs(val - 4 * math.log(2)) < 1e-9


def test_total_loss_examples():
    assert total_loss(0.7, 3.0, 9.0, TrainConfig(alpha=1.0, lam=0.0)) == 0.7
    assert total_loss(0.7, 3.0, 9.0, TrainConfig(alpha=0.0, lam=0.0)) == 3.0
    assert abs(total_loss(1.0, 2.0, 5.0, TrainConfig(alpha=0.6, lam=0.1)) - 1.9) < 1e-12


def test_config_validation():
    for bad in (dict(alpha=1.5), dict(lr=0.0), dict(batch_size=0), dict(lam=-1.0),
                dict(view_attention="x"), dict(edge_weight_transform="sqrt")):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


# --- objective and steps ----------------------------------------------------------

def objective_grads(graph, params, pairs, negs, cfg):
    tape, total, parts, n = batch_objective(graph, params, pairs, negs, cfg)
    return total, tape.backward(total), parts, n


PAIRS = np.array([[0, 1], [1, 2], [2, 3], [3, 0], [4, 4]])[:4]
NEGS = np.array([[2, 3, 1], [3, 0, 0], [0, 1, 1], [1, 2, 2]])


def test_objective_identity_and_reg(tiny, tiny_params):
    cfg = TrainConfig(alpha=0.7, lam=0.05, **SMALL)
    total, _, (sup, gl, reg), n = objective_grads(tiny, tiny_params, PAIRS, NEGS, cfg)
    assert n == 3  # users 0, 1, 3 are labeled
    assert abs(float(total.value) - total_loss(sup, gl, reg, cfg)) < 1e-12
    # reg covers touched non-bias tensors: all dense weights plus touched rows
    P = tiny_params
    expect = sum(float((P[k] ** 2).sum()) for k in ("W0.0", "W1.0", "Wf", "theta", "phi0", "phi1"))
    expect += sum(float((P[t][rows] ** 2).sum()) for t, rows in
                  (("M0", [0, 1, 2, 3]), ("H0", [0, 1, 2, 3]), ("M1", [0, 1, 2]), ("H1", [0, 1, 2])))
    assert abs(reg - expect) < 1e-10


def test_full_objective_matches_finite_differences(tiny, tiny_params):
    cfg = TrainConfig(alpha=0.6, lam=0.01, **SMALL)
    _, grads, _, _ = objective_grads(tiny, tiny_params, PAIRS, NEGS, cfg)

    def f(tensors):
        return float(batch_objective(tiny, ModelParams(tiny_params.dims, tensors), PAIRS, NEGS, cfg)[1].value)

    dense = {k: grads.dense(k, v.shape) for k, v in tiny_params.tensors.items()}
    rep = ag.fd_check(f, tiny_params.tensors, grads=dense)
    assert not rep.kinks
    assert rep.ok(1e-4), dict(rep)


def test_alpha_one_matches_supervised_only_gradients(tiny, tiny_params):
    cfg = TrainConfig(alpha=1.0, lam=0.0, **SMALL)
    _, grads, _, _ = objective_grads(tiny, tiny_params, PAIRS, NEGS, cfg)
    t = ag.Tape()
    from semignn.model import embed_batch
    lab = np.array([0, 1, 3])
    a = embed_batch(t, tiny, tiny_params, lab).a
    ref = t.backward(sup_term(a, t.param("theta", tiny_params["theta"]), [1, 0, 1]))
    assert set(grads) == set(ref)
    for k, v in tiny_params.tensors.items():
        assert np.allclose(grads.dense(k, v.shape), ref.dense(k, v.shape), rtol=0, atol=1e-14)


def test_sgd_step_descends_on_a_frozen_batch(tiny, tiny_params):
    cfg = TrainConfig(alpha=0.8, **SMALL)
    total, grads, _, _ = objective_grads(tiny, tiny_params, PAIRS, NEGS, cfg)
    before = float(total.value)
    decreased = []
    for eps in (1e-3, 1e-4, 1e-5):
        p = tiny_params.copy()
        sgd_update(p, grads, eps)
        after = float(batch_objective(tiny, p, PAIRS, NEGS, cfg)[1].value)
        decreased.append(after < before)
    assert any(decreased)


def test_sparse_update_touches_only_batch_rows(tiny, tiny_params):
    cfg = TrainConfig(alpha=0.5, **SMALL)
    _, grads, _, _ = objective_grads(tiny, tiny_params, [[0, 1]], [[3, 3, 3]], cfg)
    p = tiny_params.copy()
    sgd_update(p, grads, 0.1)
    # the batch users are 0, 1, 3; their relation neighbors are 0..3, never 4
    assert np.array_equal(p["M0"][4], tiny_params["M0"][4])
    assert not np.array_equal(p["M0"][[0, 1, 2, 3]], tiny_params["M0"][[0, 1, 2, 3]])


# --- train -----------------------------------------------------------------------

def test_training_errors():
    g = tiny_graph(labeled=())
    with pytest.raises(NoLabeledUsers):
        train(g, TrainConfig(**SMALL))
    words = build_view_graph(0, BIPARTITE, [(0, 0, 1.0)], 2, attr_node_count=1)
    with pytest.raises(MissingRelationView):  # such a graph cannot even be built
        train(MultiViewGraph(2, 2, (words,), ((0, 1),)), TrainConfig(**SMALL))


def test_zero_epochs_returns_initialization(tiny):
    cfg = TrainConfig(epochs=0, rng_seed=3, **SMALL)
    res = train(tiny, cfg)
    from semignn.training import _rng
    init = init_params(tiny, cfg.dims(tiny), _rng(3, 0))
    assert res.reports == []
    for k in init.tensors:
        assert np.array_equal(res.params[k], init[k])


def test_active_set_is_seeds_plus_one_hop():
    rel = build_view_graph(0, RELATION, [(0, 1, 1.0), (1, 2, 1.0), (2, 3, 1.0)], 5)
    words = build_view_graph(1, BIPARTITE, [(u, 0, 1.0) for u in range(5)], 5, attr_node_count=1)
    g = MultiViewGraph(5, 2, (rel, words), ((0, 1),))
    _, active, substrate, sampler = prepare(g, TrainConfig(**SMALL))
    assert sorted(active) == [0, 1]
    pairs = epoch_pairs(substrate, active, TrainConfig(**SMALL), 0)
    assert set(pairs.ravel().tolist()) <= {0, 1}
    assert sampler.users.tolist() == [0, 1]


def run_small(seed=5, **kw):
    from semignn.synth import SynthConfig, generate
    data = generate(SynthConfig(user_count=150, rng_seed=seed))
    buf = io.StringIO()
    cfg = TrainConfig(rng_seed=seed, epochs=2, **{**SMALL, **kw})
    res = train(data.graph, cfg, telemetry=buf)
    return res, buf.getvalue()


def test_training_is_deterministic_and_logs_every_step():
    r1, log1 = run_small()
    r2, log2 = run_small()
    assert log1 == log2
    for k in r1.params.tensors:
        assert np.array_equal(r1.params[k], r2.params[k])
    lines = log1.splitlines()
    assert len(lines) == len(r1.reports) == sum(math.ceil(n / 128) for n in r1.pair_counts)
    cfg = TrainConfig(**SMALL)
    for line, rep in zip(lines, r1.reports):
        f = line.split("\t")
        assert len(f) == 6 and int(f[0]) == rep.step and float(f[4]) == rep.total
        assert abs(rep.total - total_loss(rep.sup, rep.graph, rep.reg, cfg)) < 1e-9
        if rep.labeled_in_batch == 0:
            assert rep.sup == 0.0


def test_walks_once_reuses_the_first_corpus():
    from semignn.synth import SynthConfig, generate
    g = generate(SynthConfig(user_count=150, rng_seed=1)).graph
    cfg = TrainConfig(walks_once=True, **SMALL)
    graph, active, sub, _ = prepare(g, cfg)
    a, b = epoch_pairs(sub, active, cfg, 0), epoch_pairs(sub, active, cfg, 1)
    assert sorted(map(tuple, a.tolist())) == sorted(map(tuple, b.tolist()))
    c = epoch_pairs(sub, active, TrainConfig(**SMALL), 1)
    assert sorted(map(tuple, a.tolist())) != sorted(map(tuple, c.tolist()))


def test_step_report_line():
    r = StepReport(3, 0.5, 1.25, 2.0, 1.5, 7)
    assert r.line() == "3\t0.5\t1.25\t2.0\t1.5\t7"
