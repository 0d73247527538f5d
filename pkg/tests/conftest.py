import numpy as np
import pytest

from adcp import data_path
from adcp.costmodel import DeviceProfile, load_device
from adcp.demand import load_demand
from adcp.netgraph import infer_shapes, load_network, network_from_dict


def build_net(layers, input_shape=(1, 28, 28), name="test"):
    """Shaped network from a compact layer list; input/output are added."""
    doc = {"name": name, "input": list(input_shape),
           "layers": [{"kind": "input", "name": "input"}, *layers, {"kind": "output", "name": "output"}]}
    return infer_shapes(network_from_dict(doc))


def conv(n, k=3, padding="same", stride=1, name=None):
    d = {"kind": "conv", "out_channels": n, "kernel": [k, k], "padding": padding, "stride": stride}
    if name:
        d["name"] = name
    return d


def fc(b, name=None):
    d = {"kind": "fc", "out_size": b}
    if name:
        d["name"] = name
    return d


def pool(w=2):
    return {"kind": "pool", "window": w}


@pytest.fixture(scope="session")
def lenet():
    return load_network(data_path("networks", "lenet.json"))


@pytest.fixture(scope="session")
def alexnet():
    return load_network(data_path("networks", "alexnet.json"))


@pytest.fixture(scope="session")
def toy():
    return load_network(data_path("networks", "toy.json"))


@pytest.fixture(scope="session")
def redmi():
    return load_device(data_path("devices", "redmi3s.json"))


@pytest.fixture(scope="session")
def toy_demand(redmi):
    return load_demand(data_path("demands", "toy.json"), redmi)


@pytest.fixture(scope="session")
def default_demand(redmi):
    return load_demand(data_path("demands", "default.json"), redmi)


@pytest.fixture
def ref_device():
    return DeviceProfile("ref", macs_per_sec=1e9, cache_bits=8 * 2**20, battery_mAh=3000)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def single_w3f_problem(mu=(0.6, 0.4, 0.5, 0.5), device=None):
    """One tunable fc layer, demand budgets at twice the all-Skip costs.

    Returns (net, demand, device, layer index).
    """
    from adcp.costmodel import hardware_costs
    from adcp.demand import DemandSpec
    from adcp.plan import skip_plan

    net = build_net([conv(4), fc(512, name="fc1"), fc(10, name="fc2")], input_shape=(1, 16, 16), name="single")
    device = device or load_device(data_path("devices", "redmi3s.json"))
    skip = hardware_costs(net, skip_plan(net), device)
    demand = DemandSpec(A_min=0.5, E_max=2 * skip.E, T_bgt=2 * skip.T, S_bgt=2 * skip.S, mu=mu)
    index = next(i for i, layer in enumerate(net.layers) if layer.name == "fc1")
    return net, demand, device, index


# Acceptance criteria outcomes, printed once at the end of the run.
ACCEPTANCE: dict = {}


def record(n: int, ok: bool, detail: str) -> bool:
    ACCEPTANCE[n] = (ok, detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'} - {detail}")
