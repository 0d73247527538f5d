"""Search drivers: two-phase DQN/DDPG search, DQN-only, exhaustive and greedy
baselines, and the plan document format."""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import ddpg, dqn
from .catalog import DEFAULT_CONFIG, CatalogConfig, Technique, applicable_techniques, apply_technique, default_action, make_action
from .costmodel import CostReport, DeviceProfile, evaluate_plan
from .demand import DemandSpec, NormBounds, Violation, feasible
from .environment import Evaluation, PlanningEnv, encode_state
from .netgraph import CONV, FC, NetworkSpec, compressible_layers
from .plan import CompressionPlan, PlanError, resolve_layer_costs, skip_plan, validate_plan

__all__ = [
    "SearchConfig", "SearchResult", "SearchError", "PlanDocument",
    "two_phase_search", "dqn_only_search", "exhaustive_search", "greedy_search",
    "emit_plan", "parse_plan", "write_plan", "read_plan", "encode_state", "OPTIMIZERS",
]

log = logging.getLogger(__name__)

FULL_SEARCH_LIMIT = 10**6
# Pair mode mirrors the fixed two-technique combinations: W3c is left out of
# the conv side so one conv family and one fc family are combined.
PAIR_CONV = (Technique.W1c, Technique.C1, Technique.C2, Technique.C3, Technique.L1, Technique.L2, Technique.Skip)
PAIR_FC = (Technique.W1f, Technique.W2, Technique.W3f, Technique.L3, Technique.Skip)


class SearchError(ValueError):
    pass


@dataclass(frozen=True)
class SearchConfig:
    dqn_episodes: int = 1000
    ddpg_episodes: int = 1000
    rounds: int = 2
    seed: int = 0
    workers: int = 1
    hidden: tuple = (64, 64)
    epsilon: float = 0.001
    epsilon_start: float | None = 1.0
    epsilon_decay_fraction: float = 0.5
    gamma: float = 0.01
    dqn_lr: float = 1e-3
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    sigma: float = 0.1
    batch_size: int = 32
    sync_every: int = 50
    memory: int = 10000
    train_steps: int = 1

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        for key in ("dqn_episodes", "ddpg_episodes"):
            if getattr(self, key) < 0:
                raise SearchError(f"{key} must be non-negative")
        for key in ("rounds", "workers", "batch_size", "sync_every", "memory", "train_steps"):
            if getattr(self, key) < 1:
                raise SearchError(f"{key} must be positive")
        if not 0 < self.epsilon <= 1 or not 0 < self.gamma <= 1:
            raise SearchError("epsilon and gamma must lie in (0, 1]")
        if self.epsilon_start is not None and not 0 < self.epsilon_start <= 1:
            raise SearchError("epsilon_start must lie in (0, 1]")

    @classmethod
    def from_dict(cls, d: dict | None, **overrides) -> "SearchConfig":
        known = {f for f in cls.__dataclass_fields__}
        d = dict(d or {})
        unknown = set(d) - known
        if unknown:
            raise SearchError(f"unknown search settings: {', '.join(sorted(unknown))}")
        d.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class SearchResult:
    optimizer: str
    evaluation: Evaluation | None
    feasible: bool
    objective: float | None
    env: PlanningEnv
    log: list = field(default_factory=list)
    evaluations: int = 0
    seed: int | None = None
    config: SearchConfig | None = None
    agents: dict = field(default_factory=dict)

    @property
    def plan(self) -> CompressionPlan | None:
        return None if self.evaluation is None else self.evaluation.plan

    @property
    def report(self) -> CostReport | None:
        return None if self.evaluation is None else self.evaluation.report

    @property
    def violations(self):
        return () if self.evaluation is None else self.evaluation.violations

    def score(self, bounds: NormBounds) -> tuple:
        """Sort key for comparing results under common bounds: feasible first."""
        if self.evaluation is None or self.evaluation.failed:
            return (0, -math.inf)
        return (int(self.feasible), self.env.objective(self.evaluation, bounds))


def _finish(name, env: PlanningEnv, cfg, log_entries, evaluations, agents=None) -> SearchResult:
    best = env.best_feasible()
    if best is not None:
        ev, score = best
        return SearchResult(name, ev, True, score, env, log_entries, evaluations, cfg.seed if cfg else None,
                            cfg, agents or {})
    nearest = env.nearest_infeasible()
    ev = nearest[0] if nearest else None
    return SearchResult(name, ev, False, None, env, log_entries, evaluations, cfg.seed if cfg else None,
                        cfg, agents or {})


def _make_env(net, demand, device, oracle, catalog, workers):
    return PlanningEnv(net, demand, device, oracle, catalog or DEFAULT_CONFIG, workers)


def _seeds(seed: int):
    """Independent generators: conv agent, fc agent, DQN loop, DDPG agent, DDPG loop."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(5)]


def _dqn_agents(cfg: SearchConfig, rngs):
    kw = dict(epsilon=cfg.epsilon, gamma=cfg.gamma, lr=cfg.dqn_lr, batch_size=cfg.batch_size,
              sync_every=cfg.sync_every)
    return dqn.make_agents(rngs[:2], cfg.hidden, capacity=cfg.memory, **kw)


def _ddpg_agent(cfg: SearchConfig, rng):
    return ddpg.DdpgAgent.create(rng, cfg.hidden, capacity=cfg.memory, sigma=cfg.sigma, gamma=cfg.gamma,
                                 actor_lr=cfg.actor_lr, critic_lr=cfg.critic_lr,
                                 batch_size=cfg.batch_size, sync_every=cfg.sync_every)


def _run_dqn(agents, env, rng, cfg, fixed=None, offset=0):
    return dqn.optimize(agents, env, rng, cfg.dqn_episodes, fixed_ratios=fixed,
                        epsilon_start=cfg.epsilon_start, decay_fraction=cfg.epsilon_decay_fraction,
                        train_steps=cfg.train_steps, episode_offset=offset)


def dqn_only_search(net, demand, device, oracle, config: SearchConfig | None = None, catalog=None) -> SearchResult:
    """Technique selection alone, every tunable technique at its default ratio."""
    cfg = config or SearchConfig()
    env = _make_env(net, demand, device, oracle, catalog, cfg.workers)
    rngs = _seeds(cfg.seed)
    agents = _dqn_agents(cfg, rngs)
    calls0 = env.calls
    env.seed_bounds()
    res = _run_dqn(agents, env, rngs[2], cfg)
    return _finish("dqn-only", env, cfg, res.log, env.calls - calls0, agents)


def two_phase_search(net, demand, device, oracle, config: SearchConfig | None = None, catalog=None) -> SearchResult:
    """Alternate DQN technique selection and DDPG ratio tuning for ``rounds`` rounds.

    Round 1 of the DQN phase is identical to ``dqn_only_search`` with the same
    seed. Later DQN rounds use the ratios DDPG found for each (layer,
    technique) pair.
    """
    cfg = config or SearchConfig()
    env = _make_env(net, demand, device, oracle, catalog, cfg.workers)
    rngs = _seeds(cfg.seed)
    agents = _dqn_agents(cfg, rngs)
    actor = _ddpg_agent(cfg, rngs[3])
    calls0 = env.calls
    env.seed_bounds()
    fixed: dict = {}
    entries: list = []
    offset = 0
    for r in range(cfg.rounds):
        res = _run_dqn(agents, env, rngs[2], cfg, fixed, offset)
        for e in res.log:
            e["round"] = r
        entries += res.log
        offset += cfg.dqn_episodes
        base = res.plan
        if base is None:
            base = res.nearest.plan if res.nearest is not None else skip_plan(net)
        tuned = ddpg.optimize(actor, env, base, rngs[4], cfg.ddpg_episodes, cfg.train_steps, offset)
        for e in tuned.log:
            e["round"] = r
        entries += tuned.log
        offset += len(tuned.log)
        fixed.update(tuned.ratios)
        log.info("round %d: dqn best %s, ddpg best %s", r, res.objective, tuned.objective)
    agents = dict(agents, ddpg=actor)
    return _finish("two-phase", env, cfg, entries, env.calls - calls0, agents)


def candidate_count(net: NetworkSpec, pair_mode: bool) -> int:
    layers = compressible_layers(net)
    if pair_mode:
        kinds = {net.layers[i].kind for i in layers}
        return (len(PAIR_CONV) if CONV in kinds else 1) * (len(PAIR_FC) if FC in kinds else 1)
    return math.prod(len(applicable_techniques(net, i)) for i in layers)


def exhaustive_candidates(net: NetworkSpec, pair_mode: bool, catalog: CatalogConfig = DEFAULT_CONFIG):
    layers = compressible_layers(net)
    if pair_mode:
        conv = [i for i in layers if net.layers[i].kind == CONV]
        fc = [i for i in layers if net.layers[i].kind == FC]
        for tc in PAIR_CONV if conv else (None,):
            for tf in PAIR_FC if fc else (None,):
                actions = {i: default_action(tc, net.layers[i], catalog) for i in conv}
                actions.update({i: default_action(tf, net.layers[i], catalog) for i in fc})
                yield CompressionPlan.from_mapping(net.name, actions)
        return
    options = [[(i, default_action(t, net.layers[i], catalog)) for t in applicable_techniques(net, i)]
               for i in layers]
    for combo in itertools.product(*options):
        yield CompressionPlan(net.name, combo)


def exhaustive_search(net, demand, device, oracle, pair_mode: bool = True, config: SearchConfig | None = None,
                      catalog=None, limit: int = FULL_SEARCH_LIMIT) -> SearchResult:
    """Evaluate every candidate at default ratios; best feasible objective wins."""
    cfg = config or SearchConfig()
    catalog = catalog or DEFAULT_CONFIG
    n = candidate_count(net, pair_mode)
    if not pair_mode and n > limit:
        raise SearchError(f"full search space has {n} plans, above the limit of {limit}")
    env = _make_env(net, demand, device, oracle, catalog, cfg.workers)
    evs = env.evaluate_many(exhaustive_candidates(net, pair_mode, catalog))
    entries = [{"candidate": j, "plan": dqn.plan_entries(ev.plan), "feasible": ev.feasible,
                "objective": env.objective(ev)} for j, ev in enumerate(evs)]
    return _finish("exhaustive" if not pair_mode else "exhaustive-pair", env, cfg, entries, len(evs))


def _prefix_violation(env: PlanningEnv, plan: CompressionPlan, upto: int) -> bool:
    """Budget check on the layers loaded so far (indices <= ``upto``)."""
    net = env.net
    s = c = 0
    for cost in resolve_layer_costs(net, plan):
        if cost.index > upto:
            break
        s += cost.weights * net.weight_bits + cost.activations * net.activation_bits
        c += cost.macs
    return c / env.device.macs_per_sec > env.demand.T_bgt or s > env.demand.S_bgt


def greedy_search(net, demand, device, oracle, config: SearchConfig | None = None, catalog=None) -> SearchResult:
    """Layer by layer, keep the default-ratio technique with the largest R1 + R2
    (later layers Skip); stop once the loaded prefix breaks a budget."""
    cfg = config or SearchConfig()
    env = _make_env(net, demand, device, oracle, catalog, cfg.workers)
    env.seed_bounds()
    calls0 = env.calls
    plan = skip_plan(net)
    entries = []
    for i in compressible_layers(net):
        techs = applicable_techniques(net, i)
        candidates = [plan.with_action(i, default_action(t, net.layers[i], env.catalog)) for t in techs]
        evs = env.evaluate_many(candidates)

        def gain(ev):
            if ev.failed:
                return -math.inf
            r1, r2 = env.reward(ev)
            return r1 + r2

        scores = [gain(ev) for ev in evs]
        j = int(np.argmax(scores))
        plan = candidates[j]
        stop = _prefix_violation(env, plan, i)
        entries.append({"layer": i, "tech": techs[j].value, "reward": scores[j], "stopped": stop})
        if stop:
            break
    final = env.evaluate(plan)
    evaluations = env.calls - calls0 - 1
    ok = final.feasible and not final.failed
    score = env.objective(final) if ok else None
    return SearchResult("greedy", final, ok, score, env, entries, evaluations, cfg.seed, cfg)


OPTIMIZERS = {
    "two-phase": two_phase_search,
    "dqn-only": dqn_only_search,
    "exhaustive": lambda *a, **kw: exhaustive_search(*a, pair_mode=False, **kw),
    "greedy": greedy_search,
}


# -- plan documents -----------------------------------------------------------


@dataclass(frozen=True)
class PlanDocument:
    network: str
    device: str
    demand: dict
    optimizer: str
    seed: int | None
    plan: tuple
    report: dict
    feasible: bool
    violations: tuple
    objective: float | None = None
    baseline: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    created: str = ""

    def to_dict(self) -> dict:
        return {
            "network": self.network,
            "device": self.device,
            "demand": dict(self.demand),
            "optimizer": self.optimizer,
            "seed": self.seed,
            "plan": [dict(e) for e in self.plan],
            "report": dict(self.report),
            "feasible": self.feasible,
            "violations": [dict(v) for v in self.violations],
            "objective": self.objective,
            "baseline": dict(self.baseline),
            "provenance": dict(self.provenance),
            "created": self.created,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PlanDocument":
        try:
            return cls(
                network=str(d["network"]),
                device=str(d["device"]),
                demand=dict(d["demand"]),
                optimizer=str(d["optimizer"]),
                seed=None if d.get("seed") is None else int(d["seed"]),
                plan=tuple(_freeze(e) for e in d["plan"]),
                report=dict(d["report"]),
                feasible=bool(d["feasible"]),
                violations=tuple(_freeze(v) for v in d.get("violations", [])),
                objective=d.get("objective"),
                baseline=dict(d.get("baseline", {})),
                provenance=dict(d.get("provenance", {})),
                created=str(d.get("created", "")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise PlanError(f"plan document: bad or missing field {exc}") from None

    def compression_plan(self) -> CompressionPlan:
        actions = {}
        for e in self.plan:
            try:
                actions[int(e["layer"])] = make_action(e["tech"], float(e["ratio"]))
            except (KeyError, ValueError) as exc:
                raise PlanError(f"plan entry {dict(e)}: {exc}") from None
        return CompressionPlan.from_mapping(self.network, actions, optimizer=self.optimizer, seed=self.seed)

    def canonical(self) -> str:
        """Serialized form without the timestamp, for byte comparisons."""
        d = self.to_dict()
        d.pop("created")
        return json.dumps(d, sort_keys=True, indent=2)


class _FrozenDict(dict):
    def __hash__(self):
        return hash(tuple(sorted(self.items())))


def _freeze(d) -> _FrozenDict:
    return _FrozenDict(d)


def plan_entries_with_resolution(net: NetworkSpec, plan: CompressionPlan) -> list[dict]:
    out = []
    for i in compressible_layers(net):
        action = plan.action_at(i)
        resolved = apply_technique(net.layers[i], action).resolved
        out.append({"layer": i, "name": net.layers[i].name, "tech": action.technique.value,
                    "ratio": action.ratio, "resolved": resolved})
    return out


def emit_plan(result: SearchResult, device: DeviceProfile, demand: DemandSpec, created: str | None = None) -> PlanDocument:
    ev = result.evaluation
    if ev is None:
        raise SearchError("search produced no plan at all")
    net = result.env.net
    provenance = {"optimizer": result.optimizer,
                  "config_hash": result.config.digest() if result.config else None,
                  "evaluations": result.evaluations}
    baseline = result.env.evaluate(skip_plan(net)).report.to_dict()
    if created is None:
        created = datetime.now(timezone.utc).replace(microsecond=0).isoformat()
    return PlanDocument(
        network=net.name,
        device=device.name,
        demand=demand.to_dict(),
        optimizer=result.optimizer,
        seed=result.seed,
        plan=tuple(_freeze(e) for e in plan_entries_with_resolution(net, ev.plan)),
        report=ev.report.to_dict(),
        feasible=bool(result.feasible),
        violations=tuple(_freeze(v.to_dict()) for v in ev.violations),
        objective=result.objective,
        baseline=baseline,
        provenance=provenance,
        created=created,
    )


def parse_plan(doc: dict | str) -> PlanDocument:
    if isinstance(doc, str):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            raise PlanError(f"plan file: line {exc.lineno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise PlanError("plan file must hold a JSON object")
    return PlanDocument.from_dict(doc)


def write_plan(path, doc: PlanDocument):
    path = Path(path)
    try:
        path.write_text(json.dumps(doc.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"{path}: cannot write plan: {exc.strerror}") from exc
    return path


def read_plan(path) -> PlanDocument:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise PlanError(f"{path}: {exc.strerror}") from None
    try:
        return parse_plan(text)
    except PlanError as exc:
        raise PlanError(f"{path}: {exc}") from None


def check_plan_document(doc: PlanDocument, net: NetworkSpec | None = None) -> list[str]:
    """Every invariant violation of a parsed plan document, as messages."""
    problems = []
    for e in doc.plan:
        ratio = e.get("ratio")
        if not isinstance(ratio, (int, float)) or not 0.0 <= ratio <= 1.0:
            problems.append(f"layer {e.get('layer')}: ratio {ratio!r} outside [0, 1]")
        try:
            Technique(e.get("tech"))
        except ValueError:
            problems.append(f"layer {e.get('layer')}: unknown technique {e.get('tech')!r}")
    for key in ("A", "S_p", "S_f", "C", "T", "E"):
        if key not in doc.report:
            problems.append(f"report is missing {key}")
    if problems or net is None:
        return problems
    try:
        validate_plan(net, doc.compression_plan())
    except PlanError as exc:
        problems.append(str(exc))
    return problems


def reevaluate(doc: PlanDocument, net, device, oracle) -> CostReport:
    return evaluate_plan(net, doc.compression_plan(), device, oracle)


def demand_satisfied(report: CostReport, demand: DemandSpec) -> bool:
    return feasible(report, demand)[0]
