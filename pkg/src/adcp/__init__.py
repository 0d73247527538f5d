"""Usage-driven compression planning for deep networks on mobile devices."""

from .catalog import CatalogConfig, CompressionAction, Technique, apply_technique
from .costmodel import CostReport, DeviceProfile, evaluate_plan, load_device
from .demand import DemandSpec, load_demand
from .netgraph import NetworkSpec, load_network
from .oracle import ExternalOracle, SurrogateModel, SurrogateOracle
from .orchestrator import (
    SearchConfig,
    SearchResult,
    dqn_only_search,
    emit_plan,
    exhaustive_search,
    greedy_search,
    parse_plan,
    two_phase_search,
)
from .plan import CompressionPlan, skip_plan

__version__ = "0.1.0"


def data_path(*parts):
    """Path of a bundled fixture, e.g. ``data_path("networks", "lenet.json")``."""
    from importlib.resources import files

    return files(__name__).joinpath("data", *parts)
