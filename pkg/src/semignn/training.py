"""Semi-supervised objective and the minibatch SGD loop over random-walk pairs.

Per batch of walk pairs the objective is::

    total = alpha * sup + (1 - alpha) * graph + lam * reg

``sup`` is softmax cross-entropy averaged over the distinct labeled users
appearing in the batch's pairs, ``graph`` is the skip-gram negative-sampling
loss averaged over pairs, and ``reg`` is the squared norm of the non-bias
parameters (table rows) the batch touched.
"""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels
from . import autograd as ag
from .graph import MultiViewGraph, expand_unlabeled, induced_relation, transform_weights
from .model import PER_USER, SHARED, ModelDims, ModelParams, embed_batch, init_params, is_bias
from .walker import NegativeSampler, WalkConfig, generate_walks, window_pairs

CLAMP = 30.0


class NoLabeledUsers(ValueError):
    pass


class NoRelationView(ValueError):
    pass


class EmptyBatch(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.8
    lam: float = 1e-4
    lr: float = 0.002
    lr_decay: float = 0.95
    batch_size: int = 128
    epochs: int = 3
    Q: int = 3
    walk: WalkConfig = field(default_factory=WalkConfig)
    d0: int = 128
    mlp: tuple = (64, 32)
    d_final: int = 32
    edge_weight_transform: str = "none"
    view_attention: str = SHARED
    walks_once: bool = False
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mlp", tuple(int(x) for x in self.mlp))
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha={self.alpha} must lie in [0, 1]")
        if not self.lr > 0:
            raise ValueError(f"lr={self.lr} must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.epochs < 0 or self.Q < 0:
            raise ValueError("epochs and Q must be >= 0")
        if self.view_attention not in (SHARED, PER_USER):
            raise ValueError(f"unknown view_attention mode {self.view_attention!r}")
        if self.edge_weight_transform not in ("none", "log1p", "per-user-normalize"):
            raise ValueError(f"unknown edge_weight_transform {self.edge_weight_transform!r}")

    def dims(self, graph: MultiViewGraph) -> ModelDims:
        return ModelDims(self.d0, self.mlp, self.d_final, graph.m, graph.class_count)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mlp"] = list(self.mlp)
        return d


@dataclass
class StepReport:
    step: int
    sup: float
    graph: float
    reg: float
    total: float
    labeled_in_batch: int

    def line(self) -> str:
        return (f"{self.step}\t{self.sup!r}\t{self.graph!r}\t{self.reg!r}\t"
                f"{self.total!r}\t{self.labeled_in_batch}")


@dataclass
class TrainResult:
    params: ModelParams
    reports: list
    epoch_seconds: list = field(default_factory=list)
    pair_counts: list = field(default_factory=list)
    reports_batch: int = 128

    def __iter__(self):
        return iter((self.params, self.reports))

    def epoch_means(self) -> list:
        out, start = [], 0
        for n in self.pair_counts:
            steps = math.ceil(n / self.reports_batch) if n else 0
            chunk = self.reports[start:start + steps]
            out.append(float(np.mean([r.total for r in chunk])) if chunk else float("nan"))
            start += steps
        return out


def _rng(seed, *key):
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(key)))


# --- loss terms ---------------------------------------------------------------

def sup_term(a_rows: ag.Var, theta: ag.Var, labels) -> ag.Var:
    """Mean softmax cross-entropy of rows of ``a`` against integer labels."""
    if len(labels) == 0:
        raise EmptyBatch("no labeled users")
    logp = ag.log_softmax_rows(ag.matmul(a_rows, theta))
    return ag.scale(ag.mean_all(ag.pick(logp, labels)), -1.0)


def graph_term(a: ag.Var, pos_u, pos_v, pos_neg) -> ag.Var:
    """Mean over pairs of ``-log s(a_u.a_v) - sum_q log s(-a_u.a_q)``, dots clamped to +-30."""
    B = len(pos_u)
    au = ag.gather(a, pos_u)
    av = ag.gather(a, pos_v)
    pos = ag.clip(ag.rowdot(au, av), -CLAMP, CLAMP)
    terms = ag.sum_all(ag.log_sigmoid(pos))
    if pos_neg.size:
        Q = pos_neg.shape[1]
        au_rep = ag.gather(a, np.repeat(pos_u, Q))
        aq = ag.gather(a, pos_neg.ravel())
        negd = ag.clip(ag.rowdot(au_rep, aq), -CLAMP, CLAMP)
        terms = ag.add(terms, ag.sum_all(ag.log_sigmoid(ag.neg(negd))))
    return ag.scale(terms, -1.0 / B)


def reg_term(tape: ag.Tape, params: ModelParams, loss: ag.Var):
    """Squared norm of every non-bias parameter the loss depends on (touched rows only)."""
    seen = tape.reachable(loss)
    parts = []
    by_table = {}
    for node in tape.leaves():
        if node.slot not in seen:
            continue
        name, rows = node.leaf
        if is_bias(name):
            continue
        if rows is None:
            parts.append(ag.sumsq(node))
        else:
            by_table.setdefault(name, []).append(node)
    for name, nodes in by_table.items():
        if len(nodes) == 1:
            parts.append(ag.sumsq(nodes[0]))
        else:
            rows = np.unique(np.concatenate([n.leaf[1] for n in nodes]))
            parts.append(ag.sumsq(tape.take(name, params[name], rows)))
    if not parts:
        return None
    out = parts[0]
    for p in parts[1:]:
        out = ag.add(out, p)
    return out


def total_loss(sup: float, graph_l: float, reg: float, cfg: TrainConfig) -> float:
    return cfg.alpha * sup + (1.0 - cfg.alpha) * graph_l + cfg.lam * reg


def batch_objective(graph: MultiViewGraph, params: ModelParams, pairs, negs, cfg: TrainConfig,
                    labels: dict | None = None, tape: ag.Tape | None = None):
    """Record one batch's objective on a tape.

    Returns ``(tape, total Var, (sup, graph, reg) floats, labeled count)``.
    Terms with a zero coefficient are left off the total so their parameters
    stay out of the gradient map.
    """
    tape = tape or ag.Tape()
    labels = graph.labels if labels is None else labels
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    negs = np.asarray(negs, dtype=np.int64).reshape(len(pairs), -1)
    users = np.unique(np.concatenate([pairs.ravel(), negs.ravel()]))
    trace = embed_batch(tape, graph, params, users)
    a = trace.a
    pos_u = np.searchsorted(users, pairs[:, 0])
    pos_v = np.searchsorted(users, pairs[:, 1])
    pos_n = np.searchsorted(users, negs)
    g_var = graph_term(a, pos_u, pos_v, pos_n)

    in_pairs = np.unique(pairs.ravel())
    lab = np.array([u for u in in_pairs.tolist() if u in labels], dtype=np.int64)
    s_var = None
    if len(lab):
        y = np.array([labels[u] for u in lab.tolist()], dtype=np.int64)
        s_var = sup_term(ag.gather(a, np.searchsorted(users, lab)),
                         tape.param("theta", params["theta"]), y)

    data = None
    if s_var is not None and cfg.alpha != 0.0:
        data = ag.scale(s_var, cfg.alpha)
    if cfg.alpha != 1.0:
        g_scaled = ag.scale(g_var, 1.0 - cfg.alpha)
        data = g_scaled if data is None else ag.add(data, g_scaled)
    if data is None:
        data = tape.const(0.0)
    reg_var = reg_term(tape, params, data) if data.parents else None
    total = data
    if reg_var is not None and cfg.lam != 0.0:
        total = ag.add(data, ag.scale(reg_var, cfg.lam))
    sup = float(s_var.value) if s_var is not None else 0.0
    reg = float(reg_var.value) if reg_var is not None else 0.0
    return tape, total, (sup, float(g_var.value), reg), len(lab)


def sup_loss(graph: MultiViewGraph, params: ModelParams, users) -> float:
    users = np.asarray(sorted(set(int(u) for u in users)), dtype=np.int64)
    labels = graph.labels
    missing = [u for u in users.tolist() if u not in labels]
    if missing:
        raise ValueError(f"users {missing[:5]} are not labeled")
    if len(users) == 0:
        raise EmptyBatch("sup_loss needs at least one labeled user")
    tape = ag.Tape()
    a = embed_batch(tape, graph, params, users).a
    y = [labels[u] for u in users.tolist()]
    return float(sup_term(a, tape.param("theta", params["theta"]), y).value)


def graph_loss(graph: MultiViewGraph, params: ModelParams, pairs, sampler: NegativeSampler, rng) -> float:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        raise EmptyBatch("graph_loss needs at least one pair")
    negs = sampler.sample_for(pairs[:, 0], rng) if sampler.Q else np.zeros((len(pairs), 0), dtype=np.int64)
    tape = ag.Tape()
    users = np.unique(np.concatenate([pairs.ravel(), negs.ravel()]))
    a = embed_batch(tape, graph, params, users).a
    val = graph_term(a, np.searchsorted(users, pairs[:, 0]), np.searchsorted(users, pairs[:, 1]),
                     np.searchsorted(users, negs))
    return float(val.value)


def sgd_update(params: ModelParams, grads: ag.GradMap, lr: float) -> None:
    for name, g in grads.items():
        p = params.tensors[name]
        if isinstance(g, ag.SparseRows):
            _kernels.rows_axpy_decay(p, g.rows, g.partial_values, -lr, g.decay)
        else:
            p -= lr * g


# --- training loop -----------------------------------------------------------

def prepare(graph: MultiViewGraph, cfg: TrainConfig):
    """Weight transform, active user set, walk substrate and negative sampler."""
    if not any(v.kind == "relation" for v in graph.views):
        raise NoRelationView("training needs a relation view")
    if not graph.labeled:
        raise NoLabeledUsers("training needs at least one labeled user")
    graph = transform_weights(graph, cfg.edge_weight_transform)
    active = expand_unlabeled(graph.relation, [u for u, _ in graph.labeled])
    substrate = induced_relation(graph.relation, active)
    sampler = NegativeSampler.from_relation(graph.relation, active, cfg.Q)
    return graph, active, substrate, sampler


def epoch_pairs(substrate, active, cfg: TrainConfig, epoch: int) -> np.ndarray:
    walk_epoch = 0 if cfg.walks_once else epoch
    corpus = generate_walks(substrate, active, cfg.walk, _rng(cfg.rng_seed, 1, walk_epoch))
    pairs = window_pairs(corpus, cfg.walk.window)
    return pairs[_rng(cfg.rng_seed, 2, epoch).permutation(len(pairs))]


def train(graph: MultiViewGraph, cfg: TrainConfig, telemetry=None, params: ModelParams | None = None,
          log=None) -> TrainResult:
    """Minibatch SGD over shuffled walk pairs; deterministic given ``cfg.rng_seed``.

    ``telemetry`` is an optional writable text stream receiving one
    tab-separated line per step.
    """
    graph, active, substrate, sampler = prepare(graph, cfg)
    if params is None:
        params = init_params(graph, cfg.dims(graph), _rng(cfg.rng_seed, 0), cfg.view_attention)
    labels = graph.labels
    reports, epoch_seconds, pair_counts = [], [], []
    lr = cfg.lr
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        pairs = epoch_pairs(substrate, active, cfg, epoch)
        pair_counts.append(len(pairs))
        neg_rng = _rng(cfg.rng_seed, 3, epoch)
        for start in range(0, len(pairs), cfg.batch_size):
            batch = pairs[start:start + cfg.batch_size]
            negs = sampler.sample_for(batch[:, 0], neg_rng) if cfg.Q else np.zeros((len(batch), 0), np.int64)
            tape, total, (sup, gl, reg), n_lab = batch_objective(graph, params, batch, negs, cfg, labels)
            if total.parents:
                sgd_update(params, tape.backward(total), lr)
            rep = StepReport(step, sup, gl, reg, float(total.value), n_lab)
            reports.append(rep)
            if telemetry is not None:
                telemetry.write(rep.line() + "\n")
            step += 1
        lr *= cfg.lr_decay
        epoch_seconds.append(time.perf_counter() - t0)
        if log is not None:
            chunk = reports[len(reports) - math.ceil(len(pairs) / cfg.batch_size):] if len(pairs) else []
            log(f"epoch {epoch}: {len(pairs)} pairs, mean total "
                f"{np.mean([r.total for r in chunk]) if chunk else float('nan'):.6f}, "
                f"{epoch_seconds[-1]:.1f}s")
    if not params.allfinite():
        raise FloatingPointError("training produced non-finite parameters")
    return TrainResult(params, reports, epoch_seconds, pair_counts, cfg.batch_size)
