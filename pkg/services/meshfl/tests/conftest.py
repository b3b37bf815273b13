import copy

import pytest
import yaml

from meshfl.config import TOPOLOGIES_DIR
from meshfl.scenario import config_from_dict
from meshfl.topology import build_topology

TINY_SCENARIO = {
    "name": "tiny",
    "topology": {
        "routers": ["R1", "R2", "R3", "R4"],
        "links": [
            ["R1", "R2", 8, 0.5, 0.1],
            ["R2", "R4", 8, 0.5, 0.1],
            ["R1", "R3", 8, 0.5, 0.1],
            ["R3", "R4", 8, 0.5, 0.1],
        ],
    },
    "routing": {"report_period_ms": 50},
    "fl": {
        "server_router": "R1",
        "workers": {"R4": 2, "R2": 1},
        "model": "logistic",
        "eta": 0.2,
        "batch_size": 20,
        "max_rounds": 6,
        "per_batch_compute_ms": 5,
    },
    "data": {"n": 300, "d": 4, "classes": 3, "separation": 4.0},
    "seeds": {"sim": 7, "rl": 7, "data": 7, "model_init": 7},
}


@pytest.fixture
def tiny_raw():
    return copy.deepcopy(TINY_SCENARIO)


@pytest.fixture
def tiny_config(tiny_raw):
    return config_from_dict(tiny_raw)


@pytest.fixture
def line_topo():
    return build_topology(
        {
            "routers": ["S", "A", "T"],
            "links": [["S", "A", 40, 0.0], ["A", "T", 40, 0.0]],
            "hosts": {"src": "S", "dst": "T"},
        }
    )


@pytest.fixture
def diamond_topo():
    return build_topology(
        {
            "routers": ["S", "A", "B", "T"],
            "links": [["S", "A", 40, 0.0], ["A", "T", 40, 0.0], ["S", "B", 40, 0.0], ["B", "T", 40, 0.0]],
            "hosts": {"src": "S", "dst": "T"},
        }
    )


@pytest.fixture
def mixing_topo():
    """S-A, S-B, A-B, A-T, B-T: refined spaces let A and B bounce packets."""
    return build_topology(
        {
            "routers": ["S", "A", "B", "T"],
            "links": [
                ["S", "A", 40, 0.1],
                ["S", "B", 40, 0.1],
                ["A", "B", 40, 0.1],
                ["A", "T", 40, 0.1],
                ["B", "T", 40, 0.1],
            ],
            "hosts": {"src": "S", "dst": "T"},
        }
    )


@pytest.fixture
def mesh10_raw():
    raw = yaml.safe_load((TOPOLOGIES_DIR / "mesh10.yaml").read_text())
    raw["hosts"] = {**raw.get("hosts", {}), "SERVER": "R1", "W1": "R9", "W2": "R10", "W3": "R2"}
    return raw


@pytest.fixture
def mesh10_topo(mesh10_raw):
    return build_topology(mesh10_raw)
