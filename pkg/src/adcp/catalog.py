"""The compression techniques as cost transformers over a single shaped layer.

Every technique maps (layer, ratio) to a compressed weight count and MAC
count. Nothing here touches real weights; it is cost algebra only.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

from .netgraph import CONV, FC, LayerSpec, NetworkSpec, compressible_layers, layer_mac_count, layer_weight_count


class Technique(str, enum.Enum):
    W1f = "W1f"
    W1c = "W1c"
    W2 = "W2"
    W3f = "W3f"
    W3c = "W3c"
    C1 = "C1"
    C2 = "C2"
    C3 = "C3"
    L1 = "L1"
    L2 = "L2"
    L3 = "L3"
    Skip = "Skip"

    def __str__(self):
        return self.value


T = Technique

# Order matters: it is the DQN action index order.
FC_TECHNIQUES = (T.W1f, T.W2, T.W3f, T.L3, T.Skip)
CONV_TECHNIQUES = (T.W1c, T.C1, T.C2, T.C3, T.L1, T.L2, T.W3c, T.Skip)
TUNABLE = (T.W1f, T.W1c, T.W2, T.W3f, T.W3c, T.C2, T.C3)


class CatalogError(ValueError):
    pass


def round_half_away(x: float) -> int:
    """Round to nearest integer, halves away from zero."""
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


@dataclass(frozen=True)
class CatalogConfig:
    """Technique constants; overridable via the planner config ``catalog`` section."""

    squeeze_ratio: float = 0.125
    c1_theta: float = 0.5
    default_ratios: dict = field(default_factory=lambda: {
        T.W1f: 1 / 12, T.W1c: 1 / 12, T.W2: 1 / 6,
        T.W3f: 0.5, T.W3c: 0.5, T.C2: 0.5, T.C3: 0.75,
    })

    @classmethod
    def from_dict(cls, d: dict | None) -> "CatalogConfig":
        if not d:
            return cls()
        base = cls()
        ratios = dict(base.default_ratios)
        for name, value in d.get("default_ratios", {}).items():
            ratios[Technique(name)] = float(value)
        return cls(
            squeeze_ratio=float(d.get("squeeze_ratio", base.squeeze_ratio)),
            c1_theta=float(d.get("c1_theta", base.c1_theta)),
            default_ratios=ratios,
        )


DEFAULT_CONFIG = CatalogConfig()


@dataclass(frozen=True)
class CompressionAction:
    technique: Technique
    ratio: float = 0.0
    fixed_params: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "technique", Technique(self.technique))
        if not (0.0 <= self.ratio <= 1.0) or math.isnan(self.ratio):
            raise CatalogError(f"ratio must lie in [0, 1], got {self.ratio}")

    def param(self, key, default):
        return dict(self.fixed_params).get(key, default)


@dataclass(frozen=True)
class CompressedLayerCost:
    weights: int
    macs: int
    technique: Technique
    resolved: float | int | None = None


def applicable_techniques(net: NetworkSpec, index: int) -> tuple[Technique, ...]:
    """Techniques allowed at ``net.layers[index]`` in action-index order."""
    layer = net.layers[index]
    if not layer.is_weighted:
        return ()
    if index not in compressible_layers(net):
        return (T.Skip,)
    return CONV_TECHNIQUES if layer.kind == CONV else FC_TECHNIQUES


def _check_pairing(technique: Technique, layer: LayerSpec):
    allowed = FC_TECHNIQUES if layer.kind == FC else CONV_TECHNIQUES if layer.kind == CONV else ()
    if technique not in allowed:
        raise CatalogError(f"{technique} cannot be applied to {layer.kind} layer {layer.name!r}")


def ratio_to_hyperparam(technique, ratio: float, layer: LayerSpec):
    """Denormalize a [0, 1] ratio into the technique's own hyperparameter.

    Returns k (inserted neurons) for W1f/W1c/W2, the kept fraction for W3,
    the width multiplier for C2, the sparsity for C3, and None otherwise.
    """
    technique = Technique(technique)
    _check_pairing(technique, layer)
    if technique in (T.W1f, T.W2):
        return max(1, round_half_away(ratio * layer.A))
    if technique == T.W1c:
        return max(1, round_half_away(ratio * layer.M))
    if technique in (T.W3f, T.W3c, T.C3):
        return float(ratio)
    if technique == T.C2:
        return min(1.0, max(1.0 / layer.N, float(ratio)))
    return None


def default_action(technique, layer: LayerSpec | None = None, config: CatalogConfig = DEFAULT_CONFIG) -> CompressionAction:
    technique = Technique(technique)
    if layer is not None:
        _check_pairing(technique, layer)
    return make_action(technique, config.default_ratios.get(technique, 0.0), config)


def make_action(technique, ratio: float = 0.0, config: CatalogConfig = DEFAULT_CONFIG) -> CompressionAction:
    """Action with the technique's fixed constants attached from ``config``."""
    technique = Technique(technique)
    if technique == T.C1:
        fixed = (("theta", config.c1_theta),)
    elif technique == T.L1:
        fixed = (("squeeze", config.squeeze_ratio),)
    else:
        fixed = ()
    if technique not in TUNABLE:
        ratio = 0.0
    return CompressionAction(technique, float(ratio), fixed)


def _frac(x: float) -> int:
    return max(0, round_half_away(x))


def apply_technique(layer: LayerSpec, action: CompressionAction) -> CompressedLayerCost:
    tech = action.technique
    _check_pairing(tech, layer)
    resolved = ratio_to_hyperparam(tech, action.ratio, layer)

    if tech == T.Skip:
        return CompressedLayerCost(layer_weight_count(layer), layer_mac_count(layer), tech)

    if layer.kind == FC:
        A, B = layer.A, layer.B
        if tech in (T.W1f, T.W2):
            w = (A + B) * resolved
            return CompressedLayerCost(w, w, tech, resolved)
        if tech == T.W3f:
            w = _frac(resolved * A * B)
            return CompressedLayerCost(w, w, tech, resolved)
        # L3: global average pooling has no weights and no MACs.
        return CompressedLayerCost(0, 0, tech, None)

    M, N, U, V = layer.M, layer.N, layer.U, layer.V
    hw_out = layer.out_shape.height * layer.out_shape.width
    hw_in = layer.in_shape.height * layer.in_shape.width
    if tech == T.W1c:
        w = (M + N) * resolved
        return CompressedLayerCost(w, w * hw_out, tech, resolved)
    if tech == T.W3c:
        w = _frac(resolved * M * N * U * V)
        return CompressedLayerCost(w, w * hw_out, tech, resolved)
    if tech == T.C1:
        theta = action.param("theta", DEFAULT_CONFIG.c1_theta)
        w = _frac((1 - theta) * M * N * U * V)
        m = _frac((1 - theta) * hw_out * U * V * M * N)
        return CompressedLayerCost(w, m, tech, theta)
    if tech == T.C2:
        a = resolved
        w = _frac(a * M * U * V) + _frac(a * a * M * N)
        m = _frac(U * V * a * M * hw_in) + _frac(a * a * M * N * hw_in)
        return CompressedLayerCost(w, m, tech, a)
    if tech == T.C3:
        s = resolved
        w = _frac((1 - s) * M * N * U * V)
        m = _frac((1 - s) * hw_out * U * V * M * N)
        return CompressedLayerCost(w, m, tech, s)
    if tech == T.L1:
        n1, m1, n_exp = fire_dims(layer, action.param("squeeze", DEFAULT_CONFIG.squeeze_ratio))
        w = m1 * n1 + n1 * n_exp + 9 * n1 * n_exp
        return CompressedLayerCost(w, hw_out * w, tech, n1)
    # L2: original conv followed by a 1x1 conv N -> N.
    w = M * N * U * V + N * N
    return CompressedLayerCost(w, hw_out * (U * V * M * N + N * N), tech, None)


def fire_dims(layer: LayerSpec, squeeze: float) -> tuple[int, int, int]:
    """(squeeze filters N1, squeeze input M1, filters per expand branch)."""
    n1 = max(1, round_half_away(squeeze * layer.N))
    return n1, layer.M, -(-layer.N // 2)
