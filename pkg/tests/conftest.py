import json
from importlib import resources

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cutprobe.data import generate_synthetic, load_manifest
from cutprobe.graph import bundled_graph, generate_random_weights, parse_graph

settings.register_profile(
    "suite",
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")


def bundled_json(name):
    """Raw description dict, bypassing the package parser (for oracles)."""
    text = (resources.files("cutprobe") / "graphs" / f"{name}.graph.json").read_text()
    return json.loads(text)


@pytest.fixture(scope="session")
def smallnet():
    return bundled_graph("smallnet")


@pytest.fixture(scope="session")
def smallnet_store(smallnet):
    return generate_random_weights(smallnet, seed=7)


@pytest.fixture(scope="session")
def synth_manifest(tmp_path_factory):
    """A small shared synthetic dataset: 11 subjects x 12 images, 64px."""
    root = tmp_path_factory.mktemp("synth")
    path = generate_synthetic(root, subjects=11, images_per_subject=12, size=64, seed=3)
    return load_manifest(path)


def tiny_graph(with_bias=True):
    """A 2-conv toy graph used for hand-checkable forward tests."""
    doc = {
        "name": "tiny",
        "input_shape": [2, 6, 6],
        "nodes": [
            {"id": "input", "op_kind": "input"},
            {
                "id": "c1",
                "op_kind": "conv",
                "inputs": ["input"],
                "attrs": {
                    "out_channels": 3,
                    "in_channels": 2,
                    "kernel": [3, 3],
                    "stride": [1, 1],
                    "padding": [1, 1],
                    "bias": with_bias,
                },
                "weight_keys": (
                    {"weight": "c1.w", "bias": "c1.b"} if with_bias else {"weight": "c1.w"}
                ),
            },
            {"id": "r1", "op_kind": "relu", "inputs": ["c1"]},
            {
                "id": "p1",
                "op_kind": "maxpool",
                "inputs": ["r1"],
                "attrs": {"kernel": [2, 2], "stride": [2, 2], "padding": [0, 0]},
            },
            {
                "id": "c2",
                "op_kind": "conv",
                "inputs": ["p1"],
                "attrs": {
                    "out_channels": 4,
                    "in_channels": 3,
                    "kernel": [3, 3],
                    "stride": [1, 1],
                    "padding": [1, 1],
                    "bias": with_bias,
                },
                "weight_keys": (
                    {"weight": "c2.w", "bias": "c2.b"} if with_bias else {"weight": "c2.w"}
                ),
            },
            {"id": "r2", "op_kind": "relu", "inputs": ["c2"]},
        ],
        "cut_points": {"mid": "r1", "end": "r2"},
        "output": "r2",
    }
    return parse_graph(json.dumps(doc).encode())


@pytest.fixture
def tiny():
    graph = tiny_graph()
    store = generate_random_weights(graph, seed=11)
    return graph, store


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
