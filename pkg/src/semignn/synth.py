"""Planted-signal multiview fraud datasets.

Users are split into two communities joined by a stochastic block model.
Fraud users are drawn mostly from community 1. Each bipartite view is a bag
of word draws per user; a fraud user's draw comes from a small planted word
set with probability ``max(signal, background)``, everyone else's with
``background``. With ``signal = 0`` and ``p_in = p_out`` the labels carry no
information at all.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import BIPARTITE, RELATION, MultiViewGraph, build_view_graph, save_multiview

SPLITS = ("train", "test", "val")


class InvalidConfig(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    user_count: int = 2000
    fraud_rate: float = 0.05
    labeled_fraction: float = 0.5
    split: tuple = (0.5, 0.3, 0.2)
    p_in: float = 0.02
    p_out: float = 0.002
    fraud_block_prob: float = 0.9
    views: int = 1
    vocab_size: int = 500
    planted: int = 10
    draws: int = 20
    signal: float = 0.6
    background: float = 0.05
    rng_seed: int = 0

    def validate(self):
        for name in ("fraud_rate", "labeled_fraction", "signal", "background", "fraud_block_prob", "p_in", "p_out"):
            val = getattr(self, name)
            if not 0.0 <= val <= 1.0:
                raise InvalidConfig(f"{name}={val} must lie in [0, 1]")
        if self.p_in < self.p_out:
            raise InvalidConfig(f"p_in={self.p_in} must be >= p_out={self.p_out}")
        if self.user_count < 2:
            raise InvalidConfig("user_count must be >= 2")
        if self.views < 1:
            raise InvalidConfig("need at least one bipartite view")
        if not 0 < self.planted < self.vocab_size:
            raise InvalidConfig("planted word count must be in (0, vocab_size)")
        if self.draws < 1:
            raise InvalidConfig("draws must be >= 1")
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise InvalidConfig(f"split {self.split} must be three non-negative fractions summing to 1")


@dataclass
class SynthData:
    graph: MultiViewGraph          # labels = train split only
    truth: np.ndarray              # fraud label of every user
    blocks: np.ndarray             # community of every user
    planted: dict                  # view name -> planted node ids
    splits: dict                   # split name -> sorted user ids
    config: SynthConfig = field(default=None)

    def split_labels(self, name) -> list:
        return [(int(u), int(self.truth[u])) for u in self.splits[name]]


def _sbm_edges(blocks, p_in, p_out, rng):
    n = len(blocks)
    us, vs = [], []
    for i in range(n - 1):
        p = np.where(blocks[i + 1:] == blocks[i], p_in, p_out)
        hit = np.flatnonzero(rng.random(n - i - 1) < p)
        if len(hit):
            us.append(np.full(len(hit), i))
            vs.append(hit + i + 1)
    if not us:
        return np.zeros((0, 3))
    u = np.concatenate(us)
    v = np.concatenate(vs)
    return np.column_stack([u, v, np.ones(len(u))])


def _split_counts(n, fracs):
    counts = [int(np.floor(n * f)) for f in fracs]
    # hand the rounding remainder to the largest fractions first
    order = np.argsort(-np.asarray(fracs), kind="stable")
    for i in range(n - sum(counts)):
        counts[order[i % len(order)]] += 1
    return counts


def generate(cfg: SynthConfig = SynthConfig()) -> SynthData:
    cfg.validate()
    root = np.random.SeedSequence(cfg.rng_seed)
    s_block, s_fraud, s_label, s_rel, *s_views = [np.random.default_rng(s) for s in root.spawn(4 + cfg.views)]
    n = cfg.user_count

    blocks = np.zeros(n, dtype=np.int64)
    blocks[s_block.permutation(n)[: n // 2]] = 1

    n_fraud = int(round(cfg.fraud_rate * n))
    truth = np.zeros(n, dtype=np.int64)
    pools = [list(s_fraud.permutation(np.flatnonzero(blocks == b))) for b in (0, 1)]
    for _ in range(n_fraud):
        b = 1 if s_fraud.random() < cfg.fraud_block_prob else 0
        if not pools[b]:
            b = 1 - b
        truth[pools[b].pop()] = 1

    # labeled users: stratified by class so the labeled fraud rate tracks fraud_rate
    splits = {k: [] for k in SPLITS}
    for cls in (1, 0):
        members = s_label.permutation(np.flatnonzero(truth == cls))
        take = members[: int(round(cfg.labeled_fraction * len(members)))]
        counts = _split_counts(len(take), cfg.split)
        start = 0
        for name, c in zip(SPLITS, counts):
            splits[name].extend(take[start:start + c].tolist())
            start += c
    splits = {k: sorted(v) for k, v in splits.items()}

    views = [build_view_graph(0, RELATION, _sbm_edges(blocks, cfg.p_in, cfg.p_out, s_rel), n, name="relation")]
    planted = {}
    for vi, rng in enumerate(s_views, 1):
        name = "app" if cfg.views == 1 else f"app{vi}"
        words = np.sort(rng.choice(cfg.vocab_size, cfg.planted, replace=False))
        others = np.setdiff1d(np.arange(cfg.vocab_size), words)
        # fraud users never draw planted words less often than everyone else, so
        # signal = 0 leaves the two classes identically distributed
        p_plant = np.where(truth == 1, max(cfg.signal, cfg.background), cfg.background)
        from_plant = rng.random((n, cfg.draws)) < p_plant[:, None]
        draw = np.where(from_plant,
                        words[rng.integers(0, len(words), (n, cfg.draws))],
                        others[rng.integers(0, len(others), (n, cfg.draws))])
        users = np.repeat(np.arange(n), cfg.draws)
        edges = np.column_stack([users, draw.ravel(), np.ones(users.size)])
        names = tuple(f"{name}_{i:04d}" for i in range(cfg.vocab_size))
        views.append(build_view_graph(vi, BIPARTITE, edges, n, cfg.vocab_size, name=name, node_names=names))
        planted[name] = words

    labeled = [(u, int(truth[u])) for u in splits["train"]]
    graph = MultiViewGraph(n, 2, tuple(views), tuple(labeled))
    return SynthData(graph, truth, blocks, planted, splits, cfg)


def write_dataset(data: SynthData, out_dir) -> Path:
    """Write the manifest, edge files, ``truth.tsv``, ``splits.tsv`` and ``planted_words.txt``."""
    out = Path(out_dir)
    manifest = save_multiview(data.graph, out)
    with open(out / "truth.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for u, y in enumerate(data.truth.tolist()):
            fh.write(f"{u}\t{y}\n")
    with open(out / "splits.tsv", "w", encoding="utf-8", newline="\n") as fh:
        rows = sorted((u, name) for name in SPLITS for u in data.splits[name])
        for u, name in rows:
            fh.write(f"{u}\t{name}\t{int(data.truth[u])}\n")
    with open(out / "planted_words.txt", "w", encoding="utf-8", newline="\n") as fh:
        for view, words in data.planted.items():
            for w in words.tolist():
                fh.write(f"{view}\t{w}\n")
    return manifest


def read_splits(path) -> dict:
    """``split name -> [(user, label), ...]`` from a ``splits.tsv`` file."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip() or line.startswith("#"):
                continue
            u, name, y = line.rstrip("\n").split("\t")
            out.setdefault(name, []).append((int(u), int(y)))
    return out


def read_planted(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                view, w = line.rstrip("\n").split("\t")
                out.setdefault(view, []).append(int(w))
    return out
