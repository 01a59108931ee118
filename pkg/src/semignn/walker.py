"""Random walks over the relation view, skip-gram window pairs, and d^0.75 negatives."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import RELATION, ViewGraph


class DegenerateDistribution(ValueError):
    pass


@dataclass(frozen=True)
class WalkConfig:
    walks_per_node: int = 5
    walk_length: int = 10
    window: int = 3
    rng_seed: int = 0

    def __post_init__(self):
        if self.walks_per_node < 1 or self.walk_length < 1 or self.window < 1:
            raise ValueError("walk parameters must be positive")
        if self.window >= self.walk_length:
            raise ValueError(f"window {self.window} must be < walk_length {self.walk_length}")


@dataclass
class WalkCorpus:
    """Walk paths as a padded ``(n_paths, walk_length)`` array, ``-1`` past the end."""

    paths: np.ndarray

    def __len__(self):
        return len(self.paths)

    def as_lists(self) -> list:
        return [row[row >= 0].tolist() for row in self.paths]

    def dump(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for p in self.as_lists():
                fh.write(" ".join(map(str, p)) + "\n")


def generate_walks(relation: ViewGraph, active_users, cfg: WalkConfig, rng=None) -> WalkCorpus:
    """``walks_per_node`` weighted random walks from every active user with a neighbor.

    Walkers advance in lockstep; start order is ascending user id, repeated
    ``walks_per_node`` times per user. A walker that reaches a node without
    neighbors stops early.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    starts = np.asarray(sorted(int(u) for u in active_users), dtype=np.int64)
    if len(starts) == 0:
        raise ValueError("active_users must be non-empty")
    deg = np.diff(relation.indptr)
    starts = starts[deg[starts] > 0]
    starts = np.repeat(starts, cfg.walks_per_node)
    paths = np.full((len(starts), cfg.walk_length), -1, dtype=np.int64)
    if len(starts) == 0:
        return WalkCorpus(paths)
    paths[:, 0] = starts
    # global cumulative weights; a row's block is cum[indptr[u]:indptr[u+1]]
    cum = np.cumsum(relation.weights)
    base = np.concatenate([[0.0], cum])
    alive = np.ones(len(starts), dtype=bool)
    cur = starts.copy()
    for step in range(1, cfg.walk_length):
        alive &= deg[np.maximum(cur, 0)] > 0
        idx = np.flatnonzero(alive)
        if len(idx) == 0:
            break
        c = cur[idx]
        lo, hi = relation.indptr[c], relation.indptr[c + 1]
        r = rng.random(len(idx))
        target = base[lo] + r * (base[hi] - base[lo])
        pos = np.searchsorted(cum, target, side="right")
        pos = np.clip(pos, lo, hi - 1)
        nxt = relation.indices[pos]
        cur[idx] = nxt
        paths[idx, step] = nxt
    return WalkCorpus(paths)


def window_pairs(corpus: WalkCorpus, window: int) -> np.ndarray:
    """All ``(path[i], path[j])`` with ``0 < |i - j| <= window``, self-pairs dropped.

    Returned as an ``(n, 2)`` array ordered by path, then position ``i``, then ``j``.
    """
    P = corpus.paths
    n, L = P.shape if P.ndim == 2 else (0, 0)
    if n == 0:
        return np.zeros((0, 2), dtype=np.int64)
    offsets = [d for d in range(-window, window + 1) if d != 0]
    i_idx = np.repeat(np.arange(L), len(offsets))
    j_idx = i_idx + np.tile(offsets, L)
    ok = (j_idx >= 0) & (j_idx < L)
    i_idx, j_idx = i_idx[ok], j_idx[ok]
    u = P[:, i_idx].ravel()
    v = P[:, j_idx].ravel()
    keep = (u >= 0) & (v >= 0) & (u != v)
    return np.column_stack([u[keep], v[keep]])


class NegativeSampler:
    """Draws users with probability proportional to ``degree ** 0.75``.

    Backed by a cumulative mass table and binary search.
    """

    def __init__(self, users, degrees, Q: int = 3, power: float = 0.75):
        self.users = np.asarray(users, dtype=np.int64)
        deg = np.asarray(degrees, dtype=np.float64)
        if len(deg) != len(self.users):
            raise ValueError("users and degrees differ in length")
        if np.any(deg < 0):
            raise ValueError("degrees must be non-negative")
        self.mass = deg ** power
        self.mass[deg == 0] = 0.0
        self.Q = int(Q)
        self.cum = np.cumsum(self.mass)
        self.total = float(self.cum[-1]) if len(self.cum) else 0.0

    @classmethod
    def from_relation(cls, relation: ViewGraph, active_users, Q: int = 3):
        if relation.kind != RELATION:
            raise ValueError("negative sampling uses the relation view")
        users = np.asarray(sorted(int(u) for u in active_users), dtype=np.int64)
        rows = np.repeat(np.arange(relation.user_count), relation.degrees())
        deg = np.bincount(rows, weights=relation.weights, minlength=relation.user_count)
        return cls(users, deg[users], Q)

    def probabilities(self) -> np.ndarray:
        return self.mass / self.total

    def _check(self):
        if not self.total > 0:
            raise DegenerateDistribution("negative sampling distribution has zero mass")

    def draw(self, n: int, rng) -> np.ndarray:
        """``n`` i.i.d. user ids, no rejection."""
        self._check()
        pos = np.searchsorted(self.cum, rng.random(n) * self.total, side="right")
        return self.users[np.minimum(pos, len(self.users) - 1)]

    def sample_for(self, centers, rng) -> np.ndarray:
        """``(len(centers), Q)`` negatives; a draw equal to its center is redrawn."""
        self._check()
        centers = np.asarray(centers, dtype=np.int64)
        out = self.draw(len(centers) * self.Q, rng).reshape(len(centers), self.Q)
        bad = out == centers[:, None]
        if bad.any():
            # only the center itself carrying all the mass makes rejection impossible
            others = self.total - self._mass_of(centers)
            if np.any(others[bad.any(axis=1)] <= 0):
                raise DegenerateDistribution("no user other than the center has mass")
        while bad.any():
            out[bad] = self.draw(int(bad.sum()), rng)
            bad = out == centers[:, None]
        return out

    def _mass_of(self, users):
        pos = np.searchsorted(self.users, users)
        pos = np.minimum(pos, len(self.users) - 1)
        hit = self.users[pos] == users
        return np.where(hit, self.mass[pos], 0.0)


def sample_negatives(s: NegativeSampler, center: int, rng) -> list:
    return s.sample_for([center], rng)[0].tolist()
