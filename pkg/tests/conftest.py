from __future__ import annotations

import pytest

from dget.simharness import Scenario, SimCluster


def build_cluster(names, seed=1, overrides=None, links=None,
                  default_latency=5, default_drop=0.0) -> SimCluster:
    scenario = Scenario(
        seed=seed,
        node_names=list(names),
        node_overrides=overrides or {},
        links=links or [],
        default_latency=default_latency,
        default_drop=default_drop,
    )
    return SimCluster(scenario)


@pytest.fixture
def cluster3() -> SimCluster:
    c = build_cluster(["a", "b", "c"])
    c.run_for(1_000)  # let the mesh settle
    return c
