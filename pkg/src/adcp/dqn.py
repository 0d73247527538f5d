"""Technique selection with dueling double-DQN agents (one for conv, one for fc layers)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .catalog import CONV_TECHNIQUES, FC_TECHNIQUES, default_action, make_action
from .environment import STATE_DIM, Evaluation, PlanningEnv, annotate_running_best
from .netgraph import CONV, compressible_layers
from .neural import Mlp, ReplayMemory, Transition, sgd_step
from .plan import CompressionPlan

log = logging.getLogger(__name__)


class DuelingQNet:
    """Shared ReLU trunk feeding a gain head G and a constraint head H; Q = G + H."""

    def __init__(self, n_in, n_actions, hidden=(64, 64), rng=None, zero=False):
        self.trunk = Mlp((n_in, *hidden), output="relu", rng=rng, zero=zero)
        self.g_head = Mlp((hidden[-1], n_actions), rng=rng, zero=zero)
        self.h_head = Mlp((hidden[-1], n_actions), rng=rng, zero=zero)

    def nets(self):
        return [self.trunk, self.g_head, self.h_head]

    def values(self, o):
        z = self.trunk(o)
        g = self.g_head(z)
        h = self.h_head(z)
        return g, h, g + h

    def forward_cached(self, o):
        z, c_trunk = self.trunk.forward_cached(o)
        g, c_g = self.g_head.forward_cached(z)
        h, c_h = self.h_head.forward_cached(z)
        return g, h, (c_trunk, c_g, c_h)

    def backward(self, cache, dg, dh):
        """Parameter gradients for (trunk, G head, H head) plus the input gradient."""
        c_trunk, c_g, c_h = cache
        grads_g, dz_g = self.g_head.backward(c_g, dg)
        grads_h, dz_h = self.h_head.backward(c_h, dh)
        grads_t, dx = self.trunk.backward(c_trunk, dz_g + dz_h)
        return [grads_t, grads_g, grads_h], dx

    def step(self, grads, lr):
        for net, g in zip(self.nets(), grads):
            sgd_step(net, g, lr)

    def copy(self) -> "DuelingQNet":
        other = DuelingQNet.__new__(DuelingQNet)
        other.trunk, other.g_head, other.h_head = (n.copy() for n in self.nets())
        return other

    def load_from(self, other: "DuelingQNet"):
        for mine, theirs in zip(self.nets(), other.nets()):
            mine.load_from(theirs)


@dataclass
class DqnAgent:
    kind: str
    actions: tuple
    net: DuelingQNet
    target: DuelingQNet
    memory: ReplayMemory
    epsilon: float = 0.001
    gamma: float = 0.01
    lr: float = 1e-3
    batch_size: int = 32
    sync_every: int = 50
    steps: int = 0

    @classmethod
    def create(cls, kind, rng, hidden=(64, 64), capacity=10000, zero=False, **kw) -> "DqnAgent":
        actions = CONV_TECHNIQUES if kind == CONV else FC_TECHNIQUES
        net = DuelingQNet(STATE_DIM["dqn"], len(actions), hidden, rng=rng, zero=zero)
        return cls(kind, actions, net, net.copy(), ReplayMemory(capacity), **kw)

    def q_values(self, state):
        return self.net.values(state)

    def select_action(self, state, rng, epsilon=None) -> int:
        eps = self.epsilon if epsilon is None else epsilon
        if rng.random() < eps:
            return int(rng.integers(len(self.actions)))
        _, _, q = self.net.values(state)
        return int(np.argmax(q))  # argmax returns the first maximum

    def split_targets(self, batch):
        """Per-head TD targets; their sum is the double-DQN target."""
        r1 = np.array([t.r1 for t in batch])
        r2 = np.array([t.r2 for t in batch])
        live = np.array([not t.terminal for t in batch], dtype=np.float64)
        o_next = np.stack([t.o_next for t in batch])
        _, _, q_pred = self.net.values(o_next)
        best = np.argmax(q_pred, axis=1)
        g_bar, h_bar, _ = self.target.values(o_next)
        rows = np.arange(len(batch))
        y_g = r1 + self.gamma * live * g_bar[rows, best]
        y_h = r2 + self.gamma * live * h_bar[rows, best]
        return y_g, y_h

    def td_target(self, transition: Transition) -> float:
        y_g, y_h = self.split_targets([transition])
        return float(y_g[0] + y_h[0])

    def train_step(self, batch):
        """One SGD step on the batch; returns the pre-step mean squared TD error."""
        if not batch:
            return None
        o = np.stack([t.o for t in batch])
        a = np.array([t.a for t in batch], dtype=int)
        y_g, y_h = self.split_targets(batch)
        g, h, cache = self.net.forward_cached(o)
        rows = np.arange(len(batch))
        err_g = y_g - g[rows, a]
        err_h = y_h - h[rows, a]
        loss = float(np.mean((err_g + err_h) ** 2))
        n = len(batch)
        dg = np.zeros_like(g)
        dh = np.zeros_like(h)
        dg[rows, a] = -2.0 * err_g / n
        dh[rows, a] = -2.0 * err_h / n
        grads, _ = self.net.backward(cache, dg, dh)
        self.net.step(grads, self.lr)
        self.steps += 1
        if self.steps % self.sync_every == 0:
            self.target.load_from(self.net)
        return loss

    def train_from_memory(self, rng):
        batch = self.memory.sample(self.batch_size, rng)
        if batch is None:
            return None
        return self.train_step(batch)


@dataclass
class Episode:
    plan: CompressionPlan
    evaluation: Evaluation
    r1: float
    r2: float
    transitions: dict = field(default_factory=dict)


def _chain(steps, r1, r2, dim):
    """Transitions for one agent's consecutive (state, action) pairs; the last is terminal."""
    out = []
    for j, (o, a) in enumerate(steps):
        last = j == len(steps) - 1
        o_next = np.zeros(dim) if last else steps[j + 1][0]
        out.append(Transition(o, a, r1, r2, o_next, last))
    return out


def run_episode(agents: dict, env: PlanningEnv, rng, fixed_ratios=None, epsilon=None, store=True) -> Episode:
    """Walk the compressible layers, pick one technique per layer, evaluate once,
    and hand every transition the same episode reward."""
    fixed_ratios = fixed_ratios or {}
    net = env.net
    plan = CompressionPlan(net.name)
    steps = {kind: [] for kind in agents}
    for i in compressible_layers(net):
        agent = agents[net.layers[i].kind]
        o = env.state(i, plan, "dqn")
        a = agent.select_action(o, rng, epsilon)
        tech = agent.actions[a]
        if (i, tech) in fixed_ratios:
            action = make_action(tech, fixed_ratios[(i, tech)], env.catalog)
        else:
            action = default_action(tech, net.layers[i], env.catalog)
        plan = plan.with_action(i, action)
        steps[agent.kind].append((o, a))
    ev = env.evaluate(plan)
    r1, r2 = env.reward(ev)
    transitions = {kind: _chain(s, r1, r2, STATE_DIM["dqn"]) for kind, s in steps.items()}
    if store:
        for kind, ts in transitions.items():
            for t in ts:
                agents[kind].memory.push(t)
    return Episode(plan, ev, r1, r2, transitions)


@dataclass
class DqnResult:
    evaluation: Evaluation | None
    objective: float | None
    log: list
    nearest: Evaluation | None = None

    @property
    def plan(self):
        return None if self.evaluation is None else self.evaluation.plan


def epsilon_at(episode, episodes, epsilon, epsilon_start, decay_fraction):
    """Linear decay from ``epsilon_start`` to ``epsilon`` over the first part of the run."""
    horizon = decay_fraction * episodes
    if epsilon_start is None or horizon <= 0 or episode >= horizon:
        return epsilon
    return epsilon_start + (epsilon - epsilon_start) * episode / horizon


def plan_entries(plan: CompressionPlan):
    return [[i, a.technique.value, a.ratio] for i, a in plan.actions]


def optimize(agents: dict, env: PlanningEnv, rng, episodes=1000, fixed_ratios=None,
             epsilon_start=None, decay_fraction=0.5, train_steps=1, episode_offset=0) -> DqnResult:
    """Run ``episodes`` episodes with training after each. Returns the best
    feasible plan over everything the environment has evaluated."""
    if not env.memo:
        env.seed_bounds()
    eps_final = next(iter(agents.values())).epsilon if agents else 0.0
    prior = env.evaluations()
    entries, seen = [], []
    for ep in range(episodes):
        eps = epsilon_at(ep, episodes, eps_final, epsilon_start, decay_fraction)
        episode = run_episode(agents, env, rng, fixed_ratios, epsilon=eps)
        seen.append(episode.evaluation)
        for _ in range(train_steps):
            for kind in sorted(agents):
                agents[kind].train_from_memory(rng)
        entries.append({
            "episode": episode_offset + ep,
            "phase": "dqn",
            "R1": episode.r1,
            "R2": episode.r2,
            "objective": env.objective(episode.evaluation),
            "feasible": episode.evaluation.feasible,
            "plan": plan_entries(episode.plan),
        })
    annotate_running_best(env, entries, seen, prior)
    best = env.best_feasible()
    nearest = None if best else env.nearest_infeasible()
    if best is None:
        return DqnResult(None, None, entries, nearest[0] if nearest else None)
    return DqnResult(best[0], best[1], entries)


def make_agents(rngs, hidden=(64, 64), **kw) -> dict:
    """Conv and fc agents, each initialized from its own generator."""
    from .netgraph import FC

    return {
        CONV: DqnAgent.create(CONV, rngs[0], hidden, **kw),
        FC: DqnAgent.create(FC, rngs[1], hidden, **kw),
    }
