import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from graphcore import make_graph, random_graph  # noqa: E402


def one_hot(labels, width=None):
    labels = np.asarray(labels)
    width = width or int(labels.max()) + 1
    return np.eye(width)[labels]


@pytest.fixture
def path3():
    return make_graph(3, [(0, 1), (1, 2)], np.eye(3), [0, 1, 0])


@pytest.fixture
def triangle():
    return make_graph(3, [(0, 1), (1, 2), (0, 2)], np.eye(3), [0, 0, 0])


@pytest.fixture
def star():
    # center 0 in class 0, leaves in class 1
    return make_graph(4, [(0, 1), (0, 2), (0, 3)], np.eye(4), [0, 1, 1, 1])


@pytest.fixture
def two_cliques():
    """Two 5-cliques joined by the bridge (4, 5); class = clique."""
    edges = [(u, v) for block in (range(5), range(5, 10)) for u in block for v in block if u < v]
    edges.append((4, 5))
    labels = [0] * 5 + [1] * 5
    return make_graph(10, edges, np.eye(10), labels)


@pytest.fixture
def random10():
    return random_graph(10, edge_prob=0.3, feature_dim=3, class_count=2, seed=7)


@pytest.fixture
def small_config():
    from config import DEFAULT_TRAIN_CONFIG
    return dict(
        DEFAULT_TRAIN_CONFIG,
        hidden=4,
        heads=2,
        k=3,
        mlp_hidden=8,
        dropout=0.0,
        lr=0.01,
        weight_decay=0.0,
        max_epochs=40,
        patience=100,
        cheb_order=6,
        arma_p=1,
        arma_q=3,
        arma_iters=5,
    )


@pytest.fixture
def full_split():
    def build(n, train, val, test):
        masks = {}
        for name, nodes in (("train_mask", train), ("val_mask", val), ("test_mask", test)):
            mask = np.zeros(n, dtype=bool)
            mask[list(nodes)] = True
            masks[name] = mask
        masks["seed"] = None
        return masks
    return build
