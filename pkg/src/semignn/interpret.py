"""Attention-based interpretability reports.

Node importance sums the node-level attention weights that a set of users
place on each attribute node of a bipartite view. View importance averages
the view-level attention weights over users.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .graph import BIPARTITE, MultiViewGraph
from .model import ModelParams, embed_batch


class NotBipartiteView(ValueError):
    pass


@dataclass(frozen=True)
class RankedNode:
    node: int
    importance: float
    name: str


def _unique_users(users):
    return np.unique(np.asarray(list(users), dtype=np.int64))


def _traces(graph, params, users, chunk=1024):
    for s in range(0, len(users), chunk):
        yield embed_batch(ag.Tape(), graph, params, users[s:s + chunk])


def node_importance(graph: MultiViewGraph, params: ModelParams, users, view: int,
                    mean: bool = False) -> list:
    """Ranking of the attribute nodes of ``view`` by attention received from ``users``.

    ``importance(i)`` is the sum over users of their attention weight on
    ``i``; with ``mean=True`` it is divided by the number of those users that
    have ``i`` as a neighbor. Ties are broken by ascending node id.
    """
    if not 0 <= view < graph.m:
        raise IndexError(f"view {view} outside [0, {graph.m})")
    g = graph.views[view]
    if g.kind != BIPARTITE:
        raise NotBipartiteView(f"view {view} ({g.name or g.kind}) is not bipartite")
    users = _unique_users(users)
    total = np.zeros(g.node_count)
    hits = np.zeros(g.node_count)
    for tr in _traces(graph, params, users):
        _, nodes, alpha = tr.node_alphas[view]
        if alpha is None:
            continue
        total += np.bincount(nodes, weights=alpha, minlength=g.node_count)
        hits += np.bincount(nodes, minlength=g.node_count)
    if mean:
        total = np.divide(total, hits, out=np.zeros_like(total), where=hits > 0)
    order = np.lexsort((np.arange(g.node_count), -total))
    return [RankedNode(int(i), float(total[i]), g.node_name(int(i))) for i in order]


def view_importance(graph: MultiViewGraph, params: ModelParams, users) -> np.ndarray:
    """Mean view-attention weight per view over ``users``."""
    users = _unique_users(users)
    if len(users) == 0:
        raise ValueError("view_importance needs at least one user")
    acc = np.zeros(graph.m)
    for tr in _traces(graph, params, users):
        acc += tr.view_alphas.value.sum(axis=0)
    return acc / len(users)


def view_importance_by_class(graph: MultiViewGraph, params: ModelParams, users) -> dict:
    """View importance split by the predicted class of each user."""
    from .model import predict_proba

    users = _unique_users(users)
    sums, counts = {}, {}
    for tr in _traces(graph, params, users):
        pred = predict_proba(params, tr.a.value).argmax(axis=1)
        va = tr.view_alphas.value
        for c in np.unique(pred).tolist():
            sel = pred == c
            sums[c] = sums.get(c, 0.0) + va[sel].sum(axis=0)
            counts[c] = counts.get(c, 0) + int(sel.sum())
    return {c: sums[c] / counts[c] for c in sorted(sums)}


def format_ranking(ranking, top: int = 15) -> str:
    """Tab-separated ``rank node_id name importance`` lines for the first ``top`` nodes."""
    lines = [f"{r}\t{n.node}\t{n.name}\t{n.importance!r}" for r, n in enumerate(ranking[:top], start=1)]
    return "\n".join(lines) + ("\n" if lines else "")


def parse_ranking(text: str) -> list:
    out = []
    for line in text.splitlines():
        if not line.strip():
            continue
        _, node, name, imp = line.split("\t")
        out.append(RankedNode(int(node), float(imp), name))
    return out
