"""Multiview graph: one user-user relation view plus user-attribute bipartite views.

Users share a single id space ``[0, user_count)`` across all views. Each
bipartite view owns its own attribute-node id space ``[0, attr_node_count)``.
Adjacency is stored CSR-style (``indptr``/``indices``/``weights``) with
neighbor ids sorted ascending inside every row.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

RELATION = "relation"
BIPARTITE = "bipartite"


class GraphError(Exception):
    """Base class for graph construction and loading failures."""


class ValidationError(GraphError):
    pass


class NegativeWeight(ValidationError):
    """Raised for any edge weight that is not strictly positive."""


class NodeOutOfRange(ValidationError):
    pass


class SelfLoopInRelationView(ValidationError):
    pass


class MissingRelationView(GraphError):
    pass


class ParseError(GraphError):
    def __init__(self, path, line, column, message):
        self.path = str(path)
        self.line = line
        self.column = column
        super().__init__(f"{path}:{line}:{column}: {message}")


@dataclass(frozen=True, eq=False)
class ViewGraph:
    view_id: int
    kind: str
    user_count: int
    attr_node_count: int
    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray
    # reverse adjacency (attribute node -> users); empty arrays for the relation view
    rev_indptr: np.ndarray
    rev_indices: np.ndarray
    rev_weights: np.ndarray
    name: str = ""
    node_names: tuple = ()

    @property
    def node_count(self) -> int:
        """Size of the neighbor namespace (rows of the view's embedding table)."""
        return self.user_count if self.kind == RELATION else self.attr_node_count

    @property
    def edge_count(self) -> int:
        n = len(self.indices)
        return n // 2 if self.kind == RELATION else n

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def weighted_degrees(self) -> np.ndarray:
        out = np.zeros(self.user_count)
        np.add.at(out, np.repeat(np.arange(self.user_count), self.degrees()), self.weights)
        return out

    @property
    def adjacency(self) -> list:
        return [neighbors(self, u) for u in range(self.user_count)]

    @property
    def reverse_adjacency(self) -> list:
        if self.kind == RELATION:
            return []
        out = []
        for i in range(self.attr_node_count):
            lo, hi = self.rev_indptr[i], self.rev_indptr[i + 1]
            out.append(list(zip(self.rev_indices[lo:hi].tolist(), self.rev_weights[lo:hi].tolist())))
        return out

    def node_name(self, i: int) -> str:
        if i < len(self.node_names) and self.node_names[i]:
            return self.node_names[i]
        return str(i)

    def edges(self):
        """Yield ``(user, node, weight)``; relation edges once with user < node."""
        rows = np.repeat(np.arange(self.user_count), self.degrees())
        for u, i, w in zip(rows.tolist(), self.indices.tolist(), self.weights.tolist()):
            if self.kind == RELATION and i < u:
                continue
            yield u, i, w


@dataclass(frozen=True, eq=False)
class MultiViewGraph:
    user_count: int
    class_count: int
    views: tuple
    labeled: tuple = ()  # (user, label) pairs, sorted by user

    def __post_init__(self):
        if not self.views:
            raise ValidationError("a multiview graph needs at least one view")
        kinds = [v.kind for v in self.views]
        if kinds.count(RELATION) != 1:
            raise MissingRelationView(f"expected exactly one relation view, got {kinds.count(RELATION)}")
        for i, v in enumerate(self.views):
            if v.view_id != i:
                raise ValidationError(f"view ids must be 0..m-1, view {i} has id {v.view_id}")
            if v.user_count != self.user_count:
                raise ValidationError(f"view {i} user count {v.user_count} != {self.user_count}")
        seen = set()
        for u, y in self.labeled:
            if not 0 <= u < self.user_count:
                raise NodeOutOfRange(f"labeled user {u} outside [0, {self.user_count})")
            if u in seen:
                raise ValidationError(f"user {u} labeled twice")
            if not 0 <= y < self.class_count:
                raise ValidationError(f"label {y} of user {u} outside [0, {self.class_count})")
            seen.add(u)

    @property
    def m(self) -> int:
        return len(self.views)

    @property
    def relation(self) -> ViewGraph:
        return next(v for v in self.views if v.kind == RELATION)

    @property
    def labels(self) -> dict:
        return dict(self.labeled)

    def with_labels(self, labeled) -> "MultiViewGraph":
        return MultiViewGraph(self.user_count, self.class_count, self.views,
                              tuple(sorted((int(u), int(y)) for u, y in labeled)))

    def summary(self) -> list:
        return [(v.name or f"view{v.view_id}", v.kind, v.node_count, v.edge_count) for v in self.views]


def _csr(rows, cols, weights, n_rows):
    order = np.lexsort((cols, rows))
    rows, cols, weights = rows[order], cols[order], weights[order]
    if len(rows):
        # merge duplicate (row, col) entries by summing their weights
        keep = np.ones(len(rows), dtype=bool)
        keep[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
        group = np.cumsum(keep) - 1
        merged = np.zeros(int(keep.sum()))
        np.add.at(merged, group, weights)
        rows, cols, weights = rows[keep], cols[keep], merged
    indptr = np.zeros(n_rows + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n_rows), out=indptr[1:])
    return indptr, cols.astype(np.int64), weights.astype(np.float64)


def build_view_graph(view_id: int, kind: str, edge_list, user_count: int,
                     attr_node_count: int = 0, name: str = "", node_names=()) -> ViewGraph:
    """Build a validated view from ``(user, node, weight)`` triples.

    Relation edges are stored in both directions. Repeated ``(user, node)``
    entries are merged by summing weights.
    """
    if kind not in (RELATION, BIPARTITE):
        raise ValidationError(f"unknown view kind {kind!r}")
    if kind == RELATION:
        attr_node_count = 0
    arr = np.asarray(list(edge_list) if not isinstance(edge_list, np.ndarray) else edge_list,
                     dtype=np.float64).reshape(-1, 3)
    users = arr[:, 0]
    nodes = arr[:, 1]
    w = arr[:, 2]
    if np.any(~np.isfinite(w)) or np.any(w <= 0):
        bad = int(np.flatnonzero(~(w > 0) | ~np.isfinite(w))[0])
        raise NegativeWeight(f"edge {bad} has non-positive weight {w[bad]}")
    if np.any(users != np.floor(users)) or np.any(nodes != np.floor(nodes)):
        raise ValidationError("node ids must be integers")
    users = users.astype(np.int64)
    nodes = nodes.astype(np.int64)
    node_limit = user_count if kind == RELATION else attr_node_count
    if np.any((users < 0) | (users >= user_count)):
        bad = int(users[(users < 0) | (users >= user_count)][0])
        raise NodeOutOfRange(f"user {bad} outside [0, {user_count})")
    if np.any((nodes < 0) | (nodes >= node_limit)):
        bad = int(nodes[(nodes < 0) | (nodes >= node_limit)][0])
        raise NodeOutOfRange(f"node {bad} outside [0, {node_limit})")
    empty_i = np.zeros(0, dtype=np.int64)
    if kind == RELATION:
        if np.any(users == nodes):
            raise SelfLoopInRelationView(f"self-loop on user {int(users[users == nodes][0])}")
        rows = np.concatenate([users, nodes])
        cols = np.concatenate([nodes, users])
        indptr, indices, weights = _csr(rows, cols, np.concatenate([w, w]), user_count)
        rev = (np.zeros(1, dtype=np.int64), empty_i, np.zeros(0))
    else:
        indptr, indices, weights = _csr(users, nodes, w, user_count)
        rev = _csr(nodes, users, w, attr_node_count)
    return ViewGraph(view_id, kind, user_count, attr_node_count, indptr, indices, weights,
                     rev[0], rev[1], rev[2], name=name, node_names=tuple(node_names))


def neighbors(g: ViewGraph, u: int) -> list:
    """``[(node, weight), ...]`` for user ``u`` in ascending node order."""
    if not 0 <= u < g.user_count:
        raise NodeOutOfRange(f"user {u} outside [0, {g.user_count})")
    lo, hi = g.indptr[u], g.indptr[u + 1]
    return list(zip(g.indices[lo:hi].tolist(), g.weights[lo:hi].tolist()))


def user_degree(relation: ViewGraph, u: int) -> float:
    if relation.kind != RELATION:
        raise ValidationError("user_degree is defined on the relation view")
    if not 0 <= u < relation.user_count:
        raise NodeOutOfRange(f"user {u} outside [0, {relation.user_count})")
    lo, hi = relation.indptr[u], relation.indptr[u + 1]
    return float(relation.weights[lo:hi].sum())


def expand_unlabeled(relation: ViewGraph, labeled_seeds) -> set:
    """Seeds plus their one-hop relation neighbors."""
    seeds = np.fromiter((int(s) for s in labeled_seeds), dtype=np.int64)
    if len(seeds) == 0:
        return set()
    starts, ends = relation.indptr[seeds], relation.indptr[seeds + 1]
    hops = [relation.indices[a:b] for a, b in zip(starts, ends)]
    return set(np.unique(np.concatenate([seeds] + hops)).tolist())


def induced_relation(relation: ViewGraph, users) -> ViewGraph:
    """Restrict the relation view to edges whose both endpoints are in ``users``."""
    mask = np.zeros(relation.user_count, dtype=bool)
    mask[np.fromiter(users, dtype=np.int64)] = True
    rows = np.repeat(np.arange(relation.user_count), relation.degrees())
    keep = mask[rows] & mask[relation.indices]
    rows, cols, w = rows[keep], relation.indices[keep], relation.weights[keep]
    indptr = np.zeros(relation.user_count + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=relation.user_count), out=indptr[1:])
    return ViewGraph(relation.view_id, RELATION, relation.user_count, 0, indptr, cols, w,
                     relation.rev_indptr, relation.rev_indices, relation.rev_weights,
                     name=relation.name)


def transform_weights(graph: MultiViewGraph, mode: str) -> MultiViewGraph:
    """Rescale bipartite edge weights: ``none``, ``log1p`` or ``per-user-normalize``."""
    if mode in (None, "none"):
        return graph
    views = []
    for v in graph.views:
        if v.kind == RELATION:
            views.append(v)
            continue
        if mode == "log1p":
            w = np.log1p(v.weights)
        elif mode == "per-user-normalize":
            rows = np.repeat(np.arange(v.user_count), v.degrees())
            tot = np.bincount(rows, weights=v.weights, minlength=v.user_count)
            w = v.weights / tot[rows]
        else:
            raise ValueError(f"unknown edge weight transform {mode!r}")
        rows = np.repeat(np.arange(v.user_count), v.degrees())
        views.append(build_view_graph(v.view_id, v.kind, np.column_stack([rows, v.indices, w]),
                                      v.user_count, v.attr_node_count, v.name, v.node_names))
    return MultiViewGraph(graph.user_count, graph.class_count, tuple(views), graph.labeled)


# --- files ---------------------------------------------------------------

def _data_lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            yield lineno, line


def _parse_number(path, lineno, col, text, kind):
    try:
        return kind(text)
    except ValueError:
        raise ParseError(path, lineno, col, f"expected {kind.__name__}, got {text!r}") from None


def read_edge_file(path) -> np.ndarray:
    rows = []
    for lineno, line in _data_lines(path):
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError(path, lineno, 1, f"expected 3 tab-separated fields, got {len(parts)}")
        col = 1
        vals = []
        for part, kind in zip(parts, (int, int, float)):
            vals.append(_parse_number(path, lineno, col, part, kind))
            col += len(part) + 1
        rows.append(vals)
    return np.asarray(rows, dtype=np.float64).reshape(-1, 3)


def read_label_file(path) -> list:
    out = []
    for lineno, line in _data_lines(path):
        parts = line.split("\t")
        if len(parts) < 2:
            raise ParseError(path, lineno, 1, "expected user_id<TAB>label")
        u = _parse_number(path, lineno, 1, parts[0], int)
        y = _parse_number(path, lineno, len(parts[0]) + 2, parts[1], int)
        out.append((u, y))
    return out


def read_names_file(path, size) -> tuple:
    names = [""] * size
    for lineno, line in _data_lines(path):
        parts = line.split("\t")
        if len(parts) != 2:
            raise ParseError(path, lineno, 1, "expected node_id<TAB>name")
        i = _parse_number(path, lineno, 1, parts[0], int)
        if not 0 <= i < size:
            raise NodeOutOfRange(f"{path}:{lineno}: node {i} outside [0, {size})")
        names[i] = parts[1]
    return tuple(names)


def read_manifest(path) -> list:
    """Ordered ``(key, value, lineno)`` entries of a ``key = value`` manifest."""
    entries = []
    for lineno, line in _data_lines(path):
        if "=" not in line:
            raise ParseError(path, lineno, 1, "expected 'key = value'")
        key, value = line.split("=", 1)
        entries.append((key.strip(), value.strip(), lineno))
    return entries


def load_multiview(manifest_path) -> MultiViewGraph:
    """Load and validate a graph described by a manifest file.

    Recognized keys: ``users``, ``classes``, ``relation``, ``view.<name>``
    (``path vocab_size``), ``labels`` and optionally ``names.<name>`` (a
    ``node_id<TAB>name`` display-name file for a bipartite view).
    """
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    users = classes = None
    relation = labels = None
    views = []
    names = {}
    for key, value, lineno in read_manifest(manifest_path):
        if key == "users":
            users = _parse_number(manifest_path, lineno, 1, value, int)
        elif key == "classes":
            classes = _parse_number(manifest_path, lineno, 1, value, int)
        elif key == "relation":
            relation = value
        elif key == "labels":
            labels = value
        elif key.startswith("view."):
            parts = value.split()
            if len(parts) != 2:
                raise ParseError(manifest_path, lineno, 1, f"{key} expects 'path vocab_size'")
            views.append((key[5:], parts[0], _parse_number(manifest_path, lineno, 1, parts[1], int)))
        elif key.startswith("names."):
            names[key[6:]] = value
        else:
            raise ParseError(manifest_path, lineno, 1, f"unknown manifest key {key!r}")
    if users is None or classes is None:
        raise ParseError(manifest_path, 0, 0, "manifest must set 'users' and 'classes'")
    if relation is None:
        raise MissingRelationView(f"{manifest_path}: no 'relation' entry")
    built = [build_view_graph(0, RELATION, read_edge_file(base / relation), users, name="relation")]
    for vid, (vname, vpath, vocab) in enumerate(views, 1):
        vnames = read_names_file(base / names[vname], vocab) if vname in names else ()
        built.append(build_view_graph(vid, BIPARTITE, read_edge_file(base / vpath), users,
                                      vocab, name=vname, node_names=vnames))
    labeled = read_label_file(base / labels) if labels else []
    return MultiViewGraph(users, classes, tuple(built), tuple(sorted(labeled)))


def _fmt_weight(w: float) -> str:
    # repr is the shortest string that round-trips the float exactly
    return repr(float(w))


def write_edge_file(path, edges: Iterable) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u, i, w in edges:
            fh.write(f"{u}\t{i}\t{_fmt_weight(w)}\n")


def write_label_file(path, labeled) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u, y in labeled:
            fh.write(f"{u}\t{y}\n")


def save_multiview(graph: MultiViewGraph, directory, manifest_name="manifest.txt") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"users = {graph.user_count}", f"classes = {graph.class_count}"]
    for v in graph.views:
        if v.kind == RELATION:
            write_edge_file(directory / "relation.tsv", v.edges())
            lines.append("relation = relation.tsv")
    for v in graph.views:
        if v.kind == RELATION:
            continue
        vname = v.name or f"view{v.view_id}"
        fname = f"view_{vname}.tsv"
        write_edge_file(directory / fname, v.edges())
        lines.append(f"view.{vname} = {fname} {v.attr_node_count}")
        if any(v.node_names):
            nname = f"names_{vname}.tsv"
            with open(directory / nname, "w", encoding="utf-8", newline="\n") as fh:
                for i, n in enumerate(v.node_names):
                    if n:
                        fh.write(f"{i}\t{n}\n")
            lines.append(f"names.{vname} = {nname}")
    write_label_file(directory / "labels.tsv", graph.labeled)
    lines.append("labels = labels.tsv")
    path = directory / manifest_name
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
