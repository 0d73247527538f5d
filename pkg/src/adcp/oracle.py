"""Accuracy oracles.

``SurrogateOracle`` is a deterministic analytical stand-in for training;
``ExternalOracle`` talks newline-delimited JSON to a trainer subprocess
(see docs/oracle-protocol.md).
"""

from __future__ import annotations

import json
import logging
import queue
import shlex
import subprocess
import threading
from dataclasses import dataclass, field

import numpy as np

from .catalog import CompressionAction, Technique, apply_technique
from .netgraph import LayerSpec, NetworkSpec, layer_mac_count, layer_weight_count
from .plan import CompressionPlan, resolve_layer_costs

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1


class OracleError(RuntimeError):
    def __init__(self, message, payload=None):
        super().__init__(message)
        self.payload = payload


class ProtocolError(OracleError):
    pass


def _aggressiveness(weights, macs, orig_weights, orig_macs) -> float:
    total = orig_weights + orig_macs
    if total == 0:
        return 0.0
    return min(1.0, max(0.0, 1.0 - (weights + macs) / total))


def compression_aggressiveness(layer: LayerSpec, action: CompressionAction) -> float:
    """How much of the layer's (weights + MACs) the action removes, in [0, 1]."""
    if action.technique == Technique.Skip:
        return 0.0
    cost = apply_technique(layer, action)
    return _aggressiveness(cost.weights, cost.macs, layer_weight_count(layer), layer_mac_count(layer))


@dataclass(frozen=True)
class SurrogateModel:
    base_accuracy: float = 0.9
    knee: float = 0.3
    gain: float = 0.02
    seed: int = 0
    # Optional explicit per-layer sensitivities, keyed by layer index.
    sensitivities: tuple = ()

    def sensitivity(self, layer_index: int) -> float:
        explicit = dict(self.sensitivities)
        if layer_index in explicit:
            return float(explicit[layer_index])
        # Counter-based generator keyed on (seed, layer): no shared stream state.
        bitgen = np.random.Philox(key=np.array([self.seed, layer_index], dtype=np.uint64))
        return float(np.random.Generator(bitgen).uniform(0.2, 0.8))

    @classmethod
    def from_dict(cls, d: dict | None, seed: int = 0) -> "SurrogateModel":
        d = d or {}
        return cls(base_accuracy=float(d.get("base_accuracy", 0.9)), knee=float(d.get("knee", 0.3)),
                   gain=float(d.get("gain", 0.02)), seed=int(d.get("seed", seed)))


def surrogate_accuracy(net: NetworkSpec, plan: CompressionPlan, model: SurrogateModel) -> float:
    """Base accuracy, plus a small gain for mild compression, minus a
    quadratic penalty past the knee. Layers removed by L3 are folded into
    the L3 layer's own term."""
    acc = model.base_accuracy
    for cost in resolve_layer_costs(net, plan):
        layer = net.layers[cost.index]
        if not layer.is_weighted or cost.eliminated:
            continue
        c = _aggressiveness(cost.weights, cost.macs, layer_weight_count(layer), layer_mac_count(layer))
        acc += model.gain * min(c, model.knee)
        acc -= model.sensitivity(cost.index) * max(0.0, c - model.knee) ** 2
    return min(1.0, max(0.0, acc))


class SurrogateOracle:
    thread_safe = True

    def __init__(self, model: SurrogateModel | None = None):
        self.model = model or SurrogateModel()

    def __call__(self, net, plan) -> float:
        return surrogate_accuracy(net, plan, self.model)

    def describe(self) -> str:
        m = self.model
        return f"surrogate(A0={m.base_accuracy},knee={m.knee},gain={m.gain},seed={m.seed})"

    def close(self):
        pass


@dataclass(frozen=True)
class OracleRequest:
    network: str
    plan: tuple[tuple[int, str, float], ...] = ()

    @classmethod
    def from_plan(cls, plan: CompressionPlan) -> "OracleRequest":
        return cls(plan.network, tuple((i, a.technique.value, a.ratio) for i, a in plan.actions))


@dataclass(frozen=True)
class OracleResponse:
    accuracy: float | None = None
    error: str | None = None

    def __post_init__(self):
        if (self.accuracy is None) == (self.error is None):
            raise ProtocolError("response needs exactly one of accuracy or error")


def encode_request(req: OracleRequest) -> str:
    doc = {"v": PROTOCOL_VERSION, "network": req.network,
           "plan": [{"layer": i, "tech": t, "ratio": r} for i, t, r in req.plan]}
    return json.dumps(doc, separators=(",", ":"))


def decode_request(line: str) -> OracleRequest:
    try:
        doc = json.loads(line)
        if doc.get("v") != PROTOCOL_VERSION:
            raise ProtocolError(f"unsupported protocol version {doc.get('v')!r}", payload=line)
        entries = tuple((int(e["layer"]), str(e["tech"]), float(e["ratio"])) for e in doc["plan"])
        return OracleRequest(str(doc["network"]), entries)
    except (ValueError, KeyError, TypeError, AttributeError) as exc:
        if isinstance(exc, ProtocolError):
            raise
        raise ProtocolError(f"malformed request: {exc}", payload=line) from None


def encode_response(resp: OracleResponse) -> str:
    doc = {"v": PROTOCOL_VERSION}
    if resp.error is not None:
        doc["error"] = resp.error
    else:
        doc["accuracy"] = resp.accuracy
    return json.dumps(doc, separators=(",", ":"))


def decode_response(line: str) -> OracleResponse:
    try:
        doc = json.loads(line)
    except ValueError:
        raise ProtocolError("response is not JSON", payload=line) from None
    if not isinstance(doc, dict) or doc.get("v") != PROTOCOL_VERSION:
        raise ProtocolError("response has wrong or missing protocol version", payload=line)
    if "error" in doc and "accuracy" not in doc:
        return OracleResponse(error=str(doc["error"]))
    if "accuracy" not in doc or "error" in doc:
        raise ProtocolError("response must carry exactly one of 'accuracy' or 'error'", payload=line)
    acc = doc["accuracy"]
    if isinstance(acc, bool) or not isinstance(acc, (int, float)) or not 0.0 <= acc <= 1.0:
        raise ProtocolError(f"accuracy {acc!r} is not a fraction in [0, 1]", payload=line)
    return OracleResponse(accuracy=float(acc))


@dataclass
class ExternalOracle:
    """One trainer subprocess with one request in flight at a time.

    A dead or timed-out subprocess is killed and relaunched on the next call.
    """

    command: str | list
    timeout: float = 600.0
    memo: dict = field(default_factory=dict)
    thread_safe = False

    def __post_init__(self):
        self._proc = None
        self._lines = None
        self._lock = threading.Lock()

    def _start(self):
        argv = shlex.split(self.command) if isinstance(self.command, str) else list(self.command)
        log.debug("starting oracle subprocess %s", argv)
        self._proc = subprocess.Popen(argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                      stderr=subprocess.DEVNULL, text=True, bufsize=1)
        self._lines = queue.Queue()
        threading.Thread(target=self._pump, args=(self._proc.stdout, self._lines), daemon=True).start()

    @staticmethod
    def _pump(stream, sink):
        for line in stream:
            sink.put(line)
        sink.put(None)

    def _kill(self):
        if self._proc is not None:
            self._proc.kill()
            self._proc.wait()
            self._proc = None

    def request(self, req: OracleRequest) -> float:
        with self._lock:
            if req in self.memo:
                return self.memo[req]
            if self._proc is None or self._proc.poll() is not None:
                self._start()
            line = encode_request(req)
            try:
                self._proc.stdin.write(line + "\n")
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError) as exc:
                self._kill()
                raise OracleError(f"oracle subprocess not accepting input: {exc}", payload=line) from None
            try:
                raw = self._lines.get(timeout=self.timeout)
            except queue.Empty:
                self._kill()
                raise OracleError(f"oracle timed out after {self.timeout} s", payload=line) from None
            if raw is None:
                self._kill()
                raise OracleError("oracle subprocess exited mid-request", payload=line)
            resp = decode_response(raw.strip())
            if resp.error is not None:
                raise OracleError(f"oracle reported: {resp.error}", payload=raw)
            self.memo[req] = resp.accuracy
            return resp.accuracy

    def __call__(self, net, plan) -> float:
        return self.request(OracleRequest.from_plan(plan))

    def describe(self) -> str:
        return f"external({self.command})"

    def close(self):
        with self._lock:
            if self._proc is not None:
                try:
                    self._proc.stdin.close()
                    self._proc.wait(timeout=5)
                except (OSError, subprocess.TimeoutExpired):
                    pass
                self._kill()


class OraclePool:
    """Several external oracles, one request in flight on each."""

    thread_safe = True

    def __init__(self, command, size: int, timeout: float = 600.0):
        self.members = [ExternalOracle(command, timeout) for _ in range(max(1, size))]
        self._idle = queue.Queue()
        for m in self.members:
            self._idle.put(m)

    def __call__(self, net, plan) -> float:
        member = self._idle.get()
        try:
            return member(net, plan)
        finally:
            self._idle.put(member)

    def describe(self) -> str:
        return f"{self.members[0].describe()} x{len(self.members)}"

    def close(self):
        for m in self.members:
            m.close()


def make_oracle(choice: str, surrogate: SurrogateModel | None = None, workers: int = 1, timeout: float = 600.0):
    """Oracle from a command-line choice: ``surrogate`` or ``external:<command>``."""
    if choice == "surrogate":
        return SurrogateOracle(surrogate)
    if choice.startswith("external:"):
        command = choice[len("external:"):].strip()
        if not command:
            raise OracleError("external oracle needs a command after 'external:'")
        if workers > 1:
            return OraclePool(command, workers, timeout)
        return ExternalOracle(command, timeout)
    raise OracleError(f"unknown oracle {choice!r}; expected 'surrogate' or 'external:<command>'")
