import numpy as np
import pytest

from semignn.graph import BIPARTITE, RELATION, MultiViewGraph, build_view_graph
from semignn.model import ModelDims, init_params


def tiny_graph(labeled=((0, 1), (1, 0), (3, 1))) -> MultiViewGraph:
    """5 users, relation view plus one 3-word bipartite view. User 4 is
    isolated in the relation view and user 2 has no words."""
    rel = build_view_graph(0, RELATION, [(0, 1, 1.0), (1, 2, 1.0), (2, 3, 1.0), (0, 3, 1.0)], 5)
    words = build_view_graph(1, BIPARTITE, [(0, 0, 2.0), (0, 1, 1.0), (1, 1, 3.0), (3, 2, 1.0),
                                            (4, 0, 1.0), (4, 2, 2.0)], 5, attr_node_count=3,
                             name="app", node_names=("w0", "w1", "w2"))
    return MultiViewGraph(5, 2, (rel, words), tuple(labeled))


TINY_DIMS = dict(d0=4, mlp=(3,), d_final=2)


@pytest.fixture
def tiny():
    return tiny_graph()


@pytest.fixture
def tiny_params(tiny):
    rng = np.random.default_rng(7)
    params = init_params(tiny, ModelDims(m=2, k=2, **TINY_DIMS), rng)
    # the default embedding init is tiny; widen it so attention is non-uniform
    for k in params.tensors:
        params.tensors[k] = rng.normal(scale=0.7, size=params.tensors[k].shape)
    return params


# one line per acceptance criterion, printed after the test session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
