import numpy as np
import pytest

from dagsched.costmodel import (
    CostWeights,
    EnvironmentSpec,
    LinkMatrix,
    ServerSpec,
    Tier,
)
from dagsched.workload import AppDag, TaskSpec


def make_env(servers, prop=None, bw=None, weights=None):
    n = len(servers)
    if prop is None:
        prop = np.full((n, n), 10.0)
        np.fill_diagonal(prop, 0.0)
    if bw is None:
        bw = np.full((n, n), 14e6)
        np.fill_diagonal(bw, 0.0)
    return EnvironmentSpec(
        servers=tuple(servers),
        links=LinkMatrix(propagation_ms=np.asarray(prop, float),
                         bandwidth_bytes_per_s=np.asarray(bw, float)),
        weights=weights or CostWeights(),
    )


def edge_server(sid, freq=2000.0, ram=4.0, exec_w=5.0, tx_w=1.0, price=0.2):
    return ServerSpec(id=sid, tier=Tier.EDGE, freq_mhz=freq, ram_gb=ram,
                      exec_power_w=exec_w, tx_power_w=tx_w,
                      electricity_price_per_kwh=price)


def cloud_server(sid, freq=4000.0, ram=8.0, exec_w=50.0, tx_w=4.0, price=0.36):
    return ServerSpec(id=sid, tier=Tier.CLOUD, freq_mhz=freq, ram_gb=ram,
                      exec_power_w=exec_w, tx_power_w=tx_w,
                      cloud_price_per_hour=price)


@pytest.fixture
def two_server_env():
    """One edge box at 2000 MHz, one cloud box at 4000 MHz, 14 MB/s links
    with 10 ms propagation in both directions."""
    return make_env([edge_server(0), cloud_server(1)])


def chain_dag(cycles, app_id=0, data=1e6, ram=0.1):
    tasks = []
    n = len(cycles)
    for i, c in enumerate(cycles):
        edges = ((i + 1, data),) if i < n - 1 else ()
        tasks.append(TaskSpec(id=i, app_id=app_id, cycles=c, ram_demand=ram,
                              out_edges=edges))
    return AppDag(app_id=app_id, tasks=tasks)


def diamond_dag(cycles4, app_id=0, data=1e6, ram=0.1):
    c0, c1, c2, c3 = cycles4
    return AppDag(app_id=app_id, tasks=[
        TaskSpec(0, app_id, c0, ram, ((1, data), (2, data))),
        TaskSpec(1, app_id, c1, ram, ((3, data),)),
        TaskSpec(2, app_id, c2, ram, ((3, data),)),
        TaskSpec(3, app_id, c3, ram, ()),
    ])
