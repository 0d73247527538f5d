"""Ratio tuning with a single DDPG agent shared by every tunable layer."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.stats import truncnorm

from .catalog import TUNABLE, make_action
from .environment import STATE_DIM, Evaluation, PlanningEnv, annotate_running_best
from .dqn import DuelingQNet
from .neural import Mlp, ReplayMemory, Transition, sgd_step
from .plan import CompressionPlan

log = logging.getLogger(__name__)


def truncated_noise(mean, sigma, rng, size=None):
    """Zero-mean normal noise truncated so that ``mean + noise`` stays in [0, 1]."""
    lo = (0.0 - mean) / sigma
    hi = (1.0 - mean) / sigma
    return truncnorm.rvs(lo, hi, loc=0.0, scale=sigma, size=size, random_state=rng)


@dataclass
class DdpgAgent:
    actor: Mlp
    critic: DuelingQNet
    actor_target: Mlp
    critic_target_net: DuelingQNet
    memory: ReplayMemory
    sigma: float = 0.1
    gamma: float = 0.01
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    batch_size: int = 32
    sync_every: int = 50
    steps: int = 0

    @classmethod
    def create(cls, rng, hidden=(64, 64), capacity=10000, state_dim=STATE_DIM["ddpg"], zero=False, **kw):
        actor = Mlp((state_dim, *hidden, 1), output="logistic", rng=rng, zero=zero)
        critic = DuelingQNet(state_dim + 1, 1, hidden, rng=rng, zero=zero)
        return cls(actor, critic, actor.copy(), critic.copy(), ReplayMemory(capacity), **kw)

    def nets(self):
        return [self.actor] + self.critic.nets()

    def act(self, state, explore: bool, rng) -> float:
        a = float(self.actor(state)[0])
        if explore:
            a += float(truncated_noise(a, self.sigma, rng))
        return min(1.0, max(0.0, a))

    def q_values(self, state, action):
        """(G, H, Q) of the online critic for one state and ratio."""
        x = np.append(np.asarray(state, dtype=np.float64), action)
        g, h, q = self.critic.values(x)
        return float(g[0]), float(h[0]), float(q[0])

    def split_targets(self, batch):
        r1 = np.array([t.r1 for t in batch])
        r2 = np.array([t.r2 for t in batch])
        live = np.array([not t.terminal for t in batch], dtype=np.float64)
        o_next = np.stack([t.o_next for t in batch])
        a_next = self.actor_target(o_next)
        g_bar, h_bar, _ = self.critic_target_net.values(np.hstack([o_next, a_next]))
        return r1 + self.gamma * live * g_bar[:, 0], r2 + self.gamma * live * h_bar[:, 0]

    def critic_target(self, transition: Transition) -> float:
        y_g, y_h = self.split_targets([transition])
        return float(y_g[0] + y_h[0])

    def actor_gradients(self, o):
        """Actor parameter gradients of -mean Q(o, A(o)), plus that mean."""
        n = len(o)
        a, actor_cache = self.actor.forward_cached(o)
        g, h, cache = self.critic.forward_cached(np.hstack([o, a]))
        ones = np.full_like(g, 1.0 / n)
        _, dx = self.critic.backward(cache, ones, ones)
        grads, _ = self.actor.backward(actor_cache, -dx[:, -1:])
        return grads, float(np.mean(g + h))

    def train_step(self, batch):
        """Critic regression step, then one policy-gradient step through the
        updated critic. Returns the pre-step (critic loss, actor objective)."""
        if not batch:
            return None
        o = np.stack([t.o for t in batch])
        a = np.array([[t.a] for t in batch], dtype=np.float64)
        n = len(batch)
        _, objective_before = self.actor_gradients(o)

        y_g, y_h = self.split_targets(batch)
        g, h, cache = self.critic.forward_cached(np.hstack([o, a]))
        err_g = y_g - g[:, 0]
        err_h = y_h - h[:, 0]
        loss = float(np.mean((err_g + err_h) ** 2))
        dg = (-2.0 * err_g / n)[:, None]
        dh = (-2.0 * err_h / n)[:, None]
        grads, _ = self.critic.backward(cache, dg, dh)
        self.critic.step(grads, self.critic_lr)

        actor_grads, _ = self.actor_gradients(o)
        sgd_step(self.actor, actor_grads, self.actor_lr)

        self.steps += 1
        if self.steps % self.sync_every == 0:
            self.actor_target.load_from(self.actor)
            self.critic_target_net.load_from(self.critic)
        return loss, objective_before

    def train_from_memory(self, rng):
        batch = self.memory.sample(self.batch_size, rng)
        if batch is None:
            return None
        return self.train_step(batch)


@dataclass
class DdpgResult:
    evaluation: Evaluation | None
    objective: float | None
    log: list
    ratios: dict
    nearest: Evaluation | None = None
    trained: bool = True

    @property
    def plan(self):
        return None if self.evaluation is None else self.evaluation.plan


def tunable_layers(plan: CompressionPlan):
    return [(i, a.technique) for i, a in plan.actions if a.technique in TUNABLE]


def ratio_map(plan: CompressionPlan) -> dict:
    """(layer index, technique) -> ratio for the plan's tunable actions."""
    return {(i, a.technique): a.ratio for i, a in plan.actions if a.technique in TUNABLE}


def run_episode(agent: DdpgAgent, env: PlanningEnv, base: CompressionPlan, rng, explore=True, store=True):
    """One ratio per tunable layer of ``base``; other actions are kept as-is."""
    plan = CompressionPlan(base.network)
    steps = []
    for i, action in base.actions:
        if action.technique in TUNABLE:
            o = env.state(i, plan, "ddpg", action.technique)
            r = agent.act(o, explore, rng)
            action = make_action(action.technique, r, env.catalog)
            steps.append((o, r))
        plan = plan.with_action(i, action)
    ev = env.evaluate(plan)
    r1, r2 = env.reward(ev)
    transitions = []
    for j, (o, r) in enumerate(steps):
        last = j == len(steps) - 1
        o_next = np.zeros_like(o) if last else steps[j + 1][0]
        transitions.append(Transition(o, r, r1, r2, o_next, last))
    if store:
        for t in transitions:
            agent.memory.push(t)
    return plan, ev, r1, r2, transitions


def optimize(agent: DdpgAgent, env: PlanningEnv, base: CompressionPlan, rng, episodes=1000,
             train_steps=1, episode_offset=0) -> DdpgResult:
    """Tune the ratios of ``base``'s tunable layers; techniques stay fixed.

    Returns the best feasible plan among this phase's evaluations.
    """
    if not env.memo:
        env.seed_bounds()
    if not tunable_layers(base):
        ev = env.evaluate(base)
        ok = ev.feasible and not ev.failed
        return DdpgResult(ev if ok else None, env.objective(ev) if ok else None, [], {},
                          None if ok else ev, trained=False)
    seen = []
    entries = []
    for ep in range(episodes):
        plan, ev, r1, r2, _ = run_episode(agent, env, base, rng)
        seen.append(ev)
        for _ in range(train_steps):
            agent.train_from_memory(rng)
        entries.append({
            "episode": episode_offset + ep,
            "phase": "ddpg",
            "R1": r1,
            "R2": r2,
            "objective": env.objective(ev),
            "feasible": ev.feasible,
            "plan": [[i, a.technique.value, a.ratio] for i, a in plan.actions],
        })
    annotate_running_best(env, entries, seen)
    best = env.best_feasible(among=seen)
    if best is not None:
        return DdpgResult(best[0], best[1], entries, ratio_map(best[0].plan))
    nearest = env.nearest_infeasible(among=seen)
    ratios = ratio_map(nearest[0].plan) if nearest else {}
    return DdpgResult(None, None, entries, ratios, nearest[0] if nearest else None)
