"""User demands: objective, reward split, normalization and feasibility."""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass
from pathlib import Path

from .costmodel import BITS_PER_MB, CostReport, DeviceProfile

METRICS = ("accuracy", "energy", "latency", "cache")


class DemandError(ValueError):
    pass


@dataclass(frozen=True)
class DemandSpec:
    """Accuracy floor, energy ceiling (J), latency budget (s), storage budget (bits), weights."""

    A_min: float
    E_max: float
    T_bgt: float
    S_bgt: float
    mu: tuple[float, float, float, float] = (0.6, 0.4, 0.5, 0.5)

    def __post_init__(self):
        object.__setattr__(self, "mu", tuple(float(m) for m in self.mu))
        if len(self.mu) != 4 or any(m < 0 for m in self.mu):
            raise DemandError("mu must be four non-negative weights")
        if not math.isclose(self.mu[0] + self.mu[1], 1.0, abs_tol=1e-9):
            raise DemandError("mu1 + mu2 must equal 1")
        if not math.isclose(self.mu[2] + self.mu[3], 1.0, abs_tol=1e-9):
            raise DemandError("mu3 + mu4 must equal 1")
        if not (self.E_max > 0 and self.T_bgt > 0 and self.S_bgt > 0):
            raise DemandError("budgets must be positive")
        if not 0.0 <= self.A_min <= 1.0:
            raise DemandError("A_min must be an accuracy fraction")

    def to_dict(self) -> dict:
        return {"a_min": self.A_min, "e_max_mj": self.E_max * 1e3, "t_bgt_ms": self.T_bgt * 1e3,
                "s_bgt_bits": self.S_bgt, "mu": list(self.mu)}


def device_mu(device: DeviceProfile, cache_MB: float | None = None) -> tuple[float, float, float, float]:
    """Weights derived from battery capacity (mAh) and cache size (MB)."""
    if cache_MB is None:
        cache_MB = device.cache_MB
    mu2 = max((4000 - device.battery_mAh) / 4000, 0.6)
    mu4 = max((8 - cache_MB) / 8, 0.6)
    return (1 - mu2, mu2, 1 - mu4, mu4)


def demand_from_dict(d: dict, device: DeviceProfile | None = None) -> DemandSpec:
    try:
        if "s_bgt_bits" in d:
            s_bgt = float(d["s_bgt_bits"])
        else:
            s_bgt = float(d["s_bgt_mb"]) * BITS_PER_MB
        mu = d.get("mu", [0.6, 0.4, 0.5, 0.5])
        if mu == "auto":
            if device is None:
                raise DemandError("mu 'auto' needs a device profile")
            mu = device_mu(device)
        return DemandSpec(
            A_min=float(d["a_min"]),
            E_max=float(d["e_max_mj"]) * 1e-3,
            T_bgt=float(d["t_bgt_ms"]) * 1e-3,
            S_bgt=s_bgt,
            mu=tuple(mu),
        )
    except KeyError as exc:
        raise DemandError(f"demand document missing field {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, DemandError):
            raise
        raise DemandError(f"demand document: {exc}") from None


def load_demand(path, device: DeviceProfile | None = None) -> DemandSpec:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise DemandError(f"{path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise DemandError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    try:
        return demand_from_dict(doc, device)
    except DemandError as exc:
        raise DemandError(f"{path}: {exc}") from None


class NormBounds:
    """Running (min, max) of each headroom quantity over one search.

    Bounds only ever widen. Updates take a lock so evaluations may run in
    worker threads.
    """

    def __init__(self, bounds: dict | None = None):
        self._lock = threading.Lock()
        self._b = {k: tuple(v) for k, v in (bounds or {}).items()}

    def observe(self, values: dict):
        with self._lock:
            for k, x in values.items():
                if not math.isfinite(x):
                    continue
                lo, hi = self._b.get(k, (x, x))
                self._b[k] = (min(lo, x), max(hi, x))

    def get(self, metric):
        return self._b.get(metric)

    def copy(self) -> "NormBounds":
        with self._lock:
            return NormBounds(dict(self._b))

    def to_dict(self) -> dict:
        with self._lock:
            return {k: list(v) for k, v in sorted(self._b.items())}

    def __repr__(self):
        return f"NormBounds({self._b})"


def normalize(x: float, bounds) -> float:
    """Min-max scaling clamped to [0, 1]; degenerate or missing bounds give 0.5."""
    if bounds is None:
        return 0.5
    lo, hi = bounds
    if hi <= lo:
        return 0.5
    return min(1.0, max(0.0, (x - lo) / (hi - lo)))


def headrooms(report: CostReport, demand: DemandSpec, device: DeviceProfile) -> dict:
    return {
        "accuracy": report.A - demand.A_min,
        "energy": demand.E_max - report.E,
        "latency": demand.T_bgt - report.C / device.macs_per_sec,
        "cache": device.cache_bits - report.S_p,
    }


def objective(report: CostReport, demand: DemandSpec, bounds: NormBounds) -> float:
    mu1, mu2 = demand.mu[0], demand.mu[1]
    return (mu1 * normalize(report.A - demand.A_min, bounds.get("accuracy"))
            + mu2 * normalize(demand.E_max - report.E, bounds.get("energy")))


def reward_split(report: CostReport, demand: DemandSpec, device: DeviceProfile,
                 bounds: NormBounds) -> tuple[float, float]:
    """(objective-gain reward, constraint-satisfaction reward)."""
    h = headrooms(report, demand, device)
    mu1, mu2, mu3, mu4 = demand.mu
    r1 = mu1 * normalize(h["accuracy"], bounds.get("accuracy")) + mu2 * normalize(h["energy"], bounds.get("energy"))
    r2 = mu3 * normalize(h["latency"], bounds.get("latency")) + mu4 * normalize(h["cache"], bounds.get("cache"))
    return r1, r2


@dataclass(frozen=True)
class Violation:
    constraint: str
    value: float
    budget: float

    @property
    def margin(self) -> float:
        return self.budget - self.value

    def __str__(self):
        unit = "s" if self.constraint == "latency" else "bit"
        return f"{self.constraint}, margin {self.margin:g} {unit}"

    def to_dict(self) -> dict:
        return {"constraint": self.constraint, "value": self.value, "budget": self.budget, "margin": self.margin}


def feasible(report: CostReport, demand: DemandSpec) -> tuple[bool, list[Violation]]:
    violations = []
    if not report.T <= demand.T_bgt:
        violations.append(Violation("latency", report.T, demand.T_bgt))
    if not report.S <= demand.S_bgt:
        violations.append(Violation("storage", report.S, demand.S_bgt))
    return not violations, violations


def violation_score(report: CostReport, demand: DemandSpec) -> float:
    """Relative budget overshoot; 0 for feasible plans."""
    return (max(0.0, report.T - demand.T_bgt) / demand.T_bgt
            + max(0.0, report.S - demand.S_bgt) / demand.S_bgt)
