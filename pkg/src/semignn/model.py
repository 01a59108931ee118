"""Hierarchical-attention user encoder.

Per view: node-level attention over a user's neighbors, then a ReLU MLP.
Across views: softmax view attention against preference vectors, weighted
concatenation, then a linear projection to the user embedding ``a_u``.

Two forward paths share the same parameters:

* :func:`forward` evaluates one user with plain numpy and returns every
  intermediate (used for interpretability and as a readable reference);
* :func:`embed_batch` evaluates many users on an autograd :class:`Tape`.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels
from . import autograd as ag
from .graph import MultiViewGraph, ViewGraph

CHECKPOINT_MAGIC = b"SEMIGNN-CKPT"
CHECKPOINT_VERSION = 1
SHARED = "shared"
PER_USER = "per_user"


@dataclass(frozen=True)
class ModelDims:
    d0: int = 128
    mlp: tuple = (64, 32)
    d_final: int = 32
    m: int = 2
    k: int = 2

    def __post_init__(self):
        object.__setattr__(self, "mlp", tuple(int(x) for x in self.mlp))
        if min((self.d0, self.d_final, self.m, self.k) + self.mlp) < 1 or not self.mlp:
            raise ValueError(f"all model widths must be >= 1: {self}")

    @property
    def d_view(self) -> int:
        return self.mlp[-1]

    @property
    def joint(self) -> int:
        return self.m * self.d_view


@dataclass
class ModelParams:
    dims: ModelDims
    tensors: dict
    view_attention: str = SHARED

    def __getitem__(self, name):
        return self.tensors[name]

    def copy(self) -> "ModelParams":
        return ModelParams(self.dims, {k: v.copy() for k, v in self.tensors.items()},
                           self.view_attention)

    def names(self):
        return list(self.tensors)

    def allfinite(self) -> bool:
        return all(np.isfinite(t).all() for t in self.tensors.values())


def is_bias(name: str) -> bool:
    return name.startswith("b")


def init_params(graph: MultiViewGraph, dims: ModelDims, rng, view_attention: str = SHARED) -> ModelParams:
    if dims.m != graph.m:
        raise ValueError(f"dims.m={dims.m} but graph has {graph.m} views")
    if view_attention not in (SHARED, PER_USER):
        raise ValueError(f"unknown view attention mode {view_attention!r}")
    t = {}
    emb = 0.5 / dims.d0
    for v in graph.views:
        n = v.node_count
        t[f"M{v.view_id}"] = rng.uniform(-emb, emb, (n, dims.d0))
        t[f"H{v.view_id}"] = rng.uniform(-emb, emb, (n, dims.d0))
        width = dims.d0
        for l, out in enumerate(dims.mlp):
            r = 1.0 / np.sqrt(width)
            t[f"W{v.view_id}.{l}"] = rng.uniform(-r, r, (width, out))
            t[f"b{v.view_id}.{l}"] = np.zeros(out)
            width = out
        if view_attention == SHARED:
            r = 1.0 / np.sqrt(dims.d_view)
            t[f"phi{v.view_id}"] = rng.uniform(-r, r, dims.d_view)
        else:
            t[f"phi{v.view_id}"] = np.zeros((graph.user_count, dims.d_view))
    r = 1.0 / np.sqrt(dims.joint)
    t["Wf"] = rng.uniform(-r, r, (dims.joint, dims.d_final))
    t["bf"] = np.zeros(dims.d_final)
    r = 1.0 / np.sqrt(dims.d_final)
    t["theta"] = rng.uniform(-r, r, (dims.d_final, dims.k))
    return ModelParams(dims, t, view_attention)


def _softmax(z):
    z = np.asarray(z, dtype=np.float64)
    if z.size == 0:
        return z
    e = np.exp(z - z.max())
    return e / e.sum()


# --- single-user reference path -------------------------------------------

@dataclass
class ForwardTrace:
    user: int
    node_alphas: list        # per view: list of (node, alpha)
    low: list                # per view h_u^v, width d0
    lifted: list             # per view MLP output, width d_view
    view_alphas: np.ndarray  # (m,)
    joint: np.ndarray        # (m * d_view,)
    a: np.ndarray            # (d_final,)


def node_attention(g: ViewGraph, params: ModelParams, u: int):
    """``(h_u, [(node, alpha), ...])`` for one user in one view.

    ``e_ui = w_ui * M[i]``, score ``e_ui . H[i]``, softmax over neighbors,
    ``h_u = sum_i alpha_i e_ui``. No neighbors gives a zero vector.
    """
    M = params[f"M{g.view_id}"]
    H = params[f"H{g.view_id}"]
    lo, hi = g.indptr[u], g.indptr[u + 1]
    nodes = g.indices[lo:hi]
    w = g.weights[lo:hi]
    if len(nodes) == 0:
        return np.zeros(params.dims.d0), []
    e = w[:, None] * M[nodes]
    alpha = _softmax(np.einsum("ij,ij->i", e, H[nodes]))
    return alpha @ e, list(zip(nodes.tolist(), alpha.tolist()))


def view_mlp(params: ModelParams, v: int, h):
    x = np.asarray(h, dtype=np.float64)
    for l in range(len(params.dims.mlp)):
        x = np.maximum(x @ params[f"W{v}.{l}"] + params[f"b{v}.{l}"], 0.0)
    return x


def view_attention(params: ModelParams, lifted, u: int | None = None):
    """Joint embedding (weighted concatenation) and the view weights."""
    scores = []
    for v, x in enumerate(lifted):
        phi = params[f"phi{v}"]
        if phi.ndim == 2:
            phi = phi[u]
        scores.append(float(np.dot(x, phi)))
    alphas = _softmax(scores)
    joint = np.concatenate([a * x for a, x in zip(alphas, lifted)])
    return joint, alphas


def forward(graph: MultiViewGraph, params: ModelParams, u: int) -> ForwardTrace:
    if not 0 <= u < graph.user_count:
        raise IndexError(f"user {u} outside [0, {graph.user_count})")
    node_alphas, low, lifted = [], [], []
    for g in graph.views:
        h, al = node_attention(g, params, u)
        node_alphas.append(al)
        low.append(h)
        lifted.append(view_mlp(params, g.view_id, h))
    joint, valphas = view_attention(params, lifted, u)
    a = joint @ params["Wf"] + params["bf"]
    return ForwardTrace(u, node_alphas, low, lifted, valphas, joint, a)


def predict_proba(params: ModelParams, a_u) -> np.ndarray:
    a_u = np.asarray(a_u, dtype=np.float64)
    logits = a_u @ params["theta"]
    if logits.ndim == 1:
        return _softmax(logits)
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


# --- batched tape path ------------------------------------------------------

@dataclass
class BatchTrace:
    users: np.ndarray
    a: ag.Var
    view_alphas: ag.Var
    node_alphas: list = field(default_factory=list)  # per view (rows, nodes, alpha array or None)


def _sub_csr(g: ViewGraph, users):
    return _kernels.sub_csr(g.indptr, g.indices, g.weights, users)


def _compact(ids, bound: int):
    """``np.unique(ids, return_inverse=True)`` for ids in ``[0, bound)``, in linear time."""
    mark = np.zeros(bound, dtype=bool)
    mark[ids] = True
    uniq = np.flatnonzero(mark)
    pos = np.cumsum(mark) - 1
    return uniq, pos[ids]


def embed_batch(tape: ag.Tape, graph: MultiViewGraph, params: ModelParams, users,
                fused: bool = True) -> BatchTrace:
    """User embeddings ``a`` for ``users`` (distinct ids) recorded on ``tape``.

    ``fused=False`` builds node attention from elementary tape operators
    instead of the fused kernel; both give the same values and gradients.
    """
    users = np.asarray(users, dtype=np.int64)
    n = len(users)
    dims = params.dims
    lifted, scores, node_alphas = [], [], []
    for g in graph.views:
        v = g.view_id
        rows, nodes, w = _sub_csr(g, users)
        if len(nodes) == 0:
            x = tape.const(np.zeros((n, dims.d0)))
            node_alphas.append((rows, nodes, None))
        else:
            uniq, inv = _compact(nodes, g.node_count)
            Mu = tape.take(f"M{v}", params[f"M{v}"], uniq)
            Hu = tape.take(f"H{v}", params[f"H{v}"], uniq)
            if fused:
                x, alpha = ag.neighbor_attention(Mu, Hu, rows, inv, w, n)
            else:
                score = ag.scale(ag.gather(ag.rowdot(Mu, Hu), inv), w)
                alpha_var = ag.seg_softmax(score, rows, n)
                alpha = alpha_var.value
                x = ag.spmm(ag.scale(alpha_var, w), rows, inv, n, Mu)
            node_alphas.append((rows, nodes, alpha))
        for l in range(len(dims.mlp)):
            W = tape.param(f"W{v}.{l}", params[f"W{v}.{l}"])
            b = tape.param(f"b{v}.{l}", params[f"b{v}.{l}"])
            x = ag.dense_relu(x, W, b)
        lifted.append(x)
        phi = params[f"phi{v}"]
        if phi.ndim == 2:
            scores.append(ag.rowdot(x, tape.take(f"phi{v}", phi, users)))
        else:
            scores.append(ag.rowdot(x, tape.param(f"phi{v}", phi)))
    valpha = ag.softmax_rows(ag.stack_cols(scores))
    joint = ag.concat_cols([ag.mul_col(x, ag.column(valpha, v)) for v, x in enumerate(lifted)])
    a = ag.add_bias(ag.matmul(joint, tape.param("Wf", params["Wf"])), tape.param("bf", params["bf"]))
    return BatchTrace(users, a, valpha, node_alphas)


def embed_users(graph: MultiViewGraph, params: ModelParams, users, chunk: int = 1024) -> np.ndarray:
    users = np.asarray(users, dtype=np.int64)
    out = np.zeros((len(users), params.dims.d_final))
    for s in range(0, len(users), chunk):
        tr = embed_batch(ag.Tape(), graph, params, users[s:s + chunk])
        out[s:s + chunk] = tr.a.value
    return out


def score_users(graph: MultiViewGraph, params: ModelParams, users, positive_class: int = 1) -> np.ndarray:
    """Predicted probability of ``positive_class`` for every user in ``users``."""
    return predict_proba(params, embed_users(graph, params, users))[:, positive_class]


# --- checkpoints --------------------------------------------------------------

class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: ModelParams, config: dict | None = None, seed: int | None = None) -> None:
    """Write a header line of JSON followed by the raw little-endian float64 tensors."""
    names = sorted(params.tensors)
    offset = 0
    entries = []
    for name in names:
        t = params.tensors[name]
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += t.size * 8
    header = {
        "version": CHECKPOINT_VERSION,
        "dims": {**asdict(params.dims), "mlp": list(params.dims.mlp)},
        "view_attention": params.view_attention,
        "config": config or {},
        "seed": seed,
        "dtype": "<f8",
        "tensors": entries,
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + b"\n")
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for name in names:
            fh.write(np.ascontiguousarray(params.tensors[name], dtype="<f8").tobytes())


def load_checkpoint(path, expected_dims: ModelDims | None = None):
    """Returns ``(params, header)``; rejects a version or dims mismatch."""
    with open(path, "rb") as fh:
        magic = fh.readline().rstrip(b"\n")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        header = json.loads(fh.readline().decode("utf-8"))
        blob = fh.read()
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    dims = ModelDims(**header["dims"])
    if expected_dims is not None and dims != expected_dims:
        raise CheckpointError(f"{path}: dims {dims} do not match expected {expected_dims}")
    tensors = {}
    for e in header["tensors"]:
        size = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=e["offset"])
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return ModelParams(dims, tensors, header.get("view_attention", SHARED)), header
