"""Plan evaluation environment shared by every optimizer.

Holds the evaluation memo (plan key -> report) and the running
normalization bounds, turns reports into rewards, and encodes per-layer
agent states.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .catalog import (
    DEFAULT_CONFIG,
    TUNABLE,
    CatalogConfig,
    Technique,
    applicable_techniques,
    apply_technique,
    default_action,
)
from .costmodel import CostReport, DeviceProfile, hardware_costs
from .demand import DemandSpec, NormBounds, Violation, feasible, headrooms, objective, reward_split, violation_score
from .netgraph import CONV, NetworkSpec, compressible_layers, layer_mac_count, layer_weight_count, log_scale
from .oracle import OracleError
from .plan import CompressionPlan, resolve_layer_costs, skip_plan

log = logging.getLogger(__name__)

BASE_FEATURES = 7
STATE_DIM = {"dqn": BASE_FEATURES, "ddpg": BASE_FEATURES + len(TUNABLE)}


@dataclass(frozen=True)
class Evaluation:
    plan: CompressionPlan
    report: CostReport
    feasible: bool
    violations: tuple[Violation, ...] = ()
    failed: bool = False
    error: str | None = None


def _static_features(net: NetworkSpec) -> dict[int, tuple[float, ...]]:
    idx = [i for i, layer in enumerate(net.layers) if layer.is_weighted]
    if not idx:
        return {}
    top_in = max(net.layers[i].in_shape.size for i in idx)
    top_w = max(layer_weight_count(net.layers[i]) for i in idx)
    top_m = max(layer_mac_count(net.layers[i]) for i in idx)
    last = max(1, len(net.layers) - 1)
    return {
        i: (
            i / last,
            1.0 if net.layers[i].kind == CONV else 0.0,
            log_scale(net.layers[i].in_shape.size, top_in),
            log_scale(layer_weight_count(net.layers[i]), top_w),
            log_scale(layer_mac_count(net.layers[i]), top_m),
        )
        for i in idx
    }


def encode_state(net: NetworkSpec, index: int, partial: CompressionPlan, demand: DemandSpec,
                 device: DeviceProfile, for_agent: str = "dqn", technique=None, _static=None) -> np.ndarray:
    """Feature vector in [0, 1] for the agent about to act at ``net.layers[index]``.

    Budget-consumption features use the partial plan's running weight
    storage and MACs over layers before ``index``.
    """
    if not 0 <= index < len(net.layers) or not net.layers[index].is_weighted:
        raise IndexError(f"layer {index} is not a conv/fc layer of {net.name!r}")
    static = (_static or _static_features(net))[index]
    s_p = c = 0
    for cost in resolve_layer_costs(net, partial):
        if cost.index >= index:
            break
        s_p += cost.weights
        c += cost.macs
    storage_used = min(1.0, s_p * net.weight_bits / demand.S_bgt)
    latency_used = min(1.0, c / device.macs_per_sec / demand.T_bgt)
    feats = list(static) + [storage_used, latency_used]
    if for_agent == "ddpg":
        onehot = [0.0] * len(TUNABLE)
        if technique is not None:
            onehot[TUNABLE.index(Technique(technique))] = 1.0
        feats += onehot
    return np.asarray(feats, dtype=np.float64)


def max_compression_plan(net: NetworkSpec, config: CatalogConfig = DEFAULT_CONFIG) -> CompressionPlan:
    """Per compressible layer, the default-ratio technique with the smallest weights + MACs."""
    actions = {}
    for i in compressible_layers(net):
        layer = net.layers[i]
        best = None
        for tech in applicable_techniques(net, i):
            if tech == Technique.Skip:
                continue
            action = default_action(tech, layer, config)
            cost = apply_technique(layer, action)
            score = cost.weights + cost.macs
            if best is None or score < best[0]:
                best = (score, action)
        actions[i] = best[1]
    return CompressionPlan.from_mapping(net.name, actions)


@dataclass
class PlanningEnv:
    net: NetworkSpec
    demand: DemandSpec
    device: DeviceProfile
    oracle: object
    catalog: CatalogConfig = DEFAULT_CONFIG
    workers: int = 1
    bounds: NormBounds = field(default_factory=NormBounds)

    def __post_init__(self):
        self.memo: dict[tuple, Evaluation] = {}
        self.order: list[tuple] = []
        self.calls = 0
        self._static = _static_features(self.net)
        self._reward_floor = [None, None]

    # -- evaluation ---------------------------------------------------------

    def _compute(self, plan: CompressionPlan) -> Evaluation:
        hw = hardware_costs(self.net, plan, self.device)
        try:
            acc = float(self.oracle(self.net, plan))
        except OracleError as exc:
            log.warning("oracle failed for plan %s: %s", plan.digest(), exc)
            report = CostReport(hw.S_p, hw.S_f, hw.C, hw.T, hw.E, 0.0)
            return Evaluation(plan, report, False, (), failed=True, error=str(exc))
        report = CostReport(hw.S_p, hw.S_f, hw.C, hw.T, hw.E, acc)
        ok, violations = feasible(report, self.demand)
        return Evaluation(plan, report, ok, tuple(violations))

    def _record(self, key, ev: Evaluation):
        if key not in self.memo:
            self.memo[key] = ev
            self.order.append(key)
            if not ev.failed:
                self.bounds.observe(headrooms(ev.report, self.demand, self.device))

    def evaluate(self, plan: CompressionPlan) -> Evaluation:
        self.calls += 1
        key = plan.key()
        ev = self.memo.get(key)
        if ev is None:
            ev = self._compute(plan)
            self._record(key, ev)
        return ev

    def evaluate_many(self, plans) -> list[Evaluation]:
        """Evaluate in order; uses a thread pool when the oracle allows it."""
        plans = list(plans)
        pending = [k for k in dict.fromkeys(p.key() for p in plans) if k not in self.memo]
        by_key = {p.key(): p for p in plans}
        if self.workers > 1 and getattr(self.oracle, "thread_safe", False) and len(pending) > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                results = list(pool.map(self._compute, (by_key[k] for k in pending)))
        else:
            results = [self._compute(by_key[k]) for k in pending]
        for k, ev in zip(pending, results):
            self._record(k, ev)
        self.calls += len(plans)
        return [self.memo[p.key()] for p in plans]

    def seed_bounds(self):
        """Evaluate the all-Skip and maximal-compression plans."""
        return self.evaluate_many([skip_plan(self.net), max_compression_plan(self.net, self.catalog)])

    # -- scoring ------------------------------------------------------------

    def reward(self, ev: Evaluation) -> tuple[float, float]:
        if ev.failed:
            return tuple(0.0 if f is None else f for f in self._reward_floor)
        r1, r2 = reward_split(ev.report, self.demand, self.device, self.bounds)
        lo1, lo2 = self._reward_floor
        self._reward_floor = [r1 if lo1 is None else min(lo1, r1), r2 if lo2 is None else min(lo2, r2)]
        return r1, r2

    def objective(self, ev: Evaluation, bounds: NormBounds | None = None) -> float:
        return objective(ev.report, self.demand, bounds or self.bounds)

    def evaluations(self) -> list[Evaluation]:
        return [self.memo[k] for k in self.order]

    def best_feasible(self, bounds: NormBounds | None = None, among=None):
        """(evaluation, objective) of the best feasible evaluated plan, or None.

        Ties keep the earliest evaluated plan.
        """
        best = None
        for ev in among if among is not None else self.evaluations():
            if ev.failed or not ev.feasible:
                continue
            score = self.objective(ev, bounds)
            if best is None or score > best[1]:
                best = (ev, score)
        return best

    def nearest_infeasible(self, among=None):
        best = None
        for ev in among if among is not None else self.evaluations():
            if ev.failed:
                continue
            score = violation_score(ev.report, self.demand)
            if best is None or score < best[1]:
                best = (ev, score)
        return best

    def state(self, index: int, partial: CompressionPlan, for_agent="dqn", technique=None) -> np.ndarray:
        return encode_state(self.net, index, partial, self.demand, self.device,
                            for_agent, technique, _static=self._static)


def annotate_running_best(env: PlanningEnv, entries: list, evaluations: list, prior=()) -> None:
    """Add a ``best`` field to each log entry: the best feasible objective seen
    so far, scored under the environment's final bounds (non-decreasing)."""
    best = None
    for ev in prior:
        if ev.feasible and not ev.failed:
            score = env.objective(ev)
            best = score if best is None else max(best, score)
    for entry, ev in zip(entries, evaluations):
        if ev.feasible and not ev.failed:
            score = env.objective(ev)
            best = score if best is None else max(best, score)
        entry["best"] = best
