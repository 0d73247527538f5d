"""CompressionPlan and resolution of a plan into per-layer costs."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from .catalog import (
    CatalogError,
    CompressedLayerCost,
    CompressionAction,
    Technique,
    applicable_techniques,
    apply_technique,
)
from .netgraph import FC, NetworkSpec, compressible_layers, layer_activation_count, weighted_layers

SKIP = CompressionAction(Technique.Skip)


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class CompressionPlan:
    """Per-layer actions, keyed by network layer index.

    Weighted layers absent from ``actions`` are Skip.
    """

    network: str
    actions: tuple[tuple[int, CompressionAction], ...] = ()
    optimizer: str = ""
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(sorted(self.actions, key=lambda kv: kv[0])))

    @classmethod
    def from_mapping(cls, network: str, actions: dict, **kw) -> "CompressionPlan":
        return cls(network, tuple(actions.items()), **kw)

    def action_at(self, index: int) -> CompressionAction:
        for i, a in self.actions:
            if i == index:
                return a
        return SKIP

    def as_dict(self) -> dict[int, CompressionAction]:
        return dict(self.actions)

    def with_action(self, index: int, action: CompressionAction) -> "CompressionPlan":
        d = self.as_dict()
        d[index] = action
        return CompressionPlan(self.network, tuple(d.items()), self.optimizer, self.seed)

    def key(self) -> tuple:
        """Structural identity, ignoring provenance; Skip entries are dropped."""
        return (self.network,) + tuple(
            (i, a.technique.value, a.ratio, a.fixed_params)
            for i, a in self.actions
            if a.technique != Technique.Skip
        )

    def digest(self) -> str:
        return hashlib.sha256(repr(self.key()).encode()).hexdigest()[:16]

    def techniques(self) -> dict[int, Technique]:
        return {i: a.technique for i, a in self.actions}


def skip_plan(net: NetworkSpec, **kw) -> CompressionPlan:
    return CompressionPlan(net.name, tuple((i, SKIP) for i in compressible_layers(net)), **kw)


def validate_plan(net: NetworkSpec, plan: CompressionPlan):
    if plan.network != net.name:
        raise PlanError(f"plan is for network {plan.network!r}, not {net.name!r}")
    weighted = set(weighted_layers(net))
    for i, action in plan.actions:
        if i not in weighted:
            raise PlanError(f"layer {i} is not a conv/fc layer of {net.name!r}")
        if action.technique not in applicable_techniques(net, i):
            raise PlanError(f"{action.technique} not applicable at layer {i} ({net.layers[i].name})")


@dataclass(frozen=True)
class LayerCost:
    index: int
    weights: int
    macs: int
    activations: int
    eliminated: bool = False
    compressed: CompressedLayerCost | None = field(default=None, compare=False)


def resolve_layer_costs(net: NetworkSpec, plan: CompressionPlan) -> list[LayerCost]:
    """Cost of every layer of ``net`` under ``plan``.

    A compressed block keeps its layer's output interface. L3 on an fc layer
    eliminates every later fc layer; the pooled output has one value per
    class, i.e. the size of the network output.
    """
    validate_plan(net, plan)
    out = []
    gap_active = False
    n_classes = net.layers[-1].out_shape.size
    for i, layer in enumerate(net.layers):
        if layer.kind == FC and gap_active:
            out.append(LayerCost(i, 0, 0, 0, eliminated=True))
            continue
        if not layer.is_weighted:
            out.append(LayerCost(i, 0, 0, layer_activation_count(layer)))
            continue
        action = plan.action_at(i)
        try:
            cost = apply_technique(layer, action)
        except CatalogError as exc:
            raise PlanError(f"layer {i}: {exc}") from exc
        acts = layer_activation_count(layer)
        if action.technique == Technique.L3:
            gap_active = True
            acts = n_classes
        out.append(LayerCost(i, cost.weights, cost.macs, acts, compressed=cost))
    return out
