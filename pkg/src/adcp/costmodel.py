"""Whole-plan storage, computation, latency and energy on a device."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

from .netgraph import NetworkSpec
from .plan import CompressionPlan, resolve_layer_costs

PJ = 1e-12
BITS_PER_MB = 8 * 2**20


class DeviceError(ValueError):
    pass


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    macs_per_sec: float
    cache_bits: float
    battery_mAh: float
    eps1_pJ: float = 52.8
    cache_factor: float = 6.0
    dram_factor: float = 200.0

    def __post_init__(self):
        for key in ("macs_per_sec", "cache_bits", "battery_mAh", "eps1_pJ", "cache_factor", "dram_factor"):
            if not getattr(self, key) > 0:
                raise DeviceError(f"device {self.name!r}: {key} must be positive")
        if not self.cache_factor < self.dram_factor:
            raise DeviceError(f"device {self.name!r}: cache_factor must be below dram_factor")

    @property
    def cache_MB(self) -> float:
        return self.cache_bits / BITS_PER_MB

    @classmethod
    def from_dict(cls, d: dict) -> "DeviceProfile":
        try:
            return cls(
                name=str(d["name"]),
                macs_per_sec=float(d["macs_per_sec"]),
                cache_bits=float(d["cache_bits"]),
                battery_mAh=float(d["battery_mAh"]),
                eps1_pJ=float(d.get("eps1_pJ", 52.8)),
                cache_factor=float(d.get("cache_factor", 6.0)),
                dram_factor=float(d.get("dram_factor", 200.0)),
            )
        except KeyError as exc:
            raise DeviceError(f"device document missing field {exc.args[0]!r}") from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, DeviceError):
                raise
            raise DeviceError(f"device document: {exc}") from None

    def to_dict(self) -> dict:
        return asdict(self)


def load_device(path) -> DeviceProfile:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise DeviceError(f"{path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise DeviceError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    try:
        return DeviceProfile.from_dict(doc)
    except DeviceError as exc:
        raise DeviceError(f"{path}: {exc}") from None


@dataclass(frozen=True)
class CostReport:
    """Plan metrics: bits for storage, MACs, seconds, joules, accuracy fraction."""

    S_p: float
    S_f: float
    C: float
    T: float
    E: float
    A: float = 0.0

    @property
    def S(self) -> float:
        return self.S_p + self.S_f

    def to_dict(self) -> dict:
        return {"A": self.A, "S_p": self.S_p, "S_f": self.S_f, "C": self.C, "T": self.T, "E": self.E}

    @classmethod
    def from_dict(cls, d: dict) -> "CostReport":
        return cls(**{k: float(d[k]) for k in ("S_p", "S_f", "C", "T", "E", "A")})


def plan_storage(net: NetworkSpec, plan: CompressionPlan) -> tuple[int, int]:
    costs = resolve_layer_costs(net, plan)
    s_p = sum(c.weights for c in costs) * net.weight_bits
    s_f = sum(c.activations for c in costs) * net.activation_bits
    return s_p, s_f


def plan_macs(net: NetworkSpec, plan: CompressionPlan) -> int:
    return sum(c.macs for c in resolve_layer_costs(net, plan))


def latency(C: float, device: DeviceProfile) -> float:
    """Seconds for one inference at batch size 1."""
    return C / device.macs_per_sec


def energy(C: float, S_p: float, S_f: float, device: DeviceProfile) -> float:
    """Joules: MAC energy plus cache traffic for weights and DRAM traffic for activations."""
    return device.eps1_pJ * PJ * (C + device.cache_factor * S_p + device.dram_factor * S_f)


def energy_pj(C: float, S_p: float, S_f: float, device: DeviceProfile) -> float:
    return device.eps1_pJ * C + device.cache_factor * device.eps1_pJ * S_p + device.dram_factor * device.eps1_pJ * S_f


def hardware_costs(net: NetworkSpec, plan: CompressionPlan, device: DeviceProfile) -> CostReport:
    """Everything except accuracy."""
    costs = resolve_layer_costs(net, plan)
    s_p = sum(c.weights for c in costs) * net.weight_bits
    s_f = sum(c.activations for c in costs) * net.activation_bits
    c = sum(c.macs for c in costs)
    return CostReport(S_p=float(s_p), S_f=float(s_f), C=float(c),
                      T=latency(c, device), E=energy(c, s_p, s_f, device))


def evaluate_plan(net: NetworkSpec, plan: CompressionPlan, device: DeviceProfile, oracle) -> CostReport:
    """Full report; ``oracle(net, plan)`` supplies the accuracy."""
    from .oracle import OracleError

    report = hardware_costs(net, plan, device)
    try:
        acc = float(oracle(net, plan))
    except OracleError as exc:
        raise OracleError(f"plan {plan.digest()} on {net.name!r}: {exc}", payload=exc.payload) from exc
    return CostReport(report.S_p, report.S_f, report.C, report.T, report.E, acc)
