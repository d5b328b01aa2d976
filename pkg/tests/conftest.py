import numpy as np
import pytest

from psr.kg import KnowledgeGraph, merge_graphs, split_seeds
from psr.synth import make_instance


def tiny_graph():
    """Two 4-entity KGs with 2 relations each and a few parallel/multi-relation edges."""
    g1 = KnowledgeGraph(4, 2, [[0, 0, 1], [1, 1, 2], [2, 0, 3], [0, 1, 1]])
    g2 = KnowledgeGraph(4, 2, [[0, 0, 1], [1, 1, 2], [3, 0, 2]])
    return merge_graphs(g1, g2)


def synthetic(n=200, delete_prob=0.02, ratios=(0.27, 0.03), seed=0):
    inst = make_instance(n, 5, 6.0, delete_prob=delete_prob, rng_seed=seed)
    graph = merge_graphs(inst.instance1, inst.instance2)
    seeds = split_seeds(inst.ground_truth + np.array([0, n]), ratios, seed)
    return inst, graph, seeds


@pytest.fixture
def graph():
    return tiny_graph()


@pytest.fixture(scope="session")
def small_synthetic():
    return synthetic()
