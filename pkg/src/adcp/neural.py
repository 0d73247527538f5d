"""Small fully-connected networks with hand-written backprop, plain SGD,
a FIFO replay memory and a flat binary checkpoint format."""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"ADCP"
CHECKPOINT_VERSION = 1


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_ACTIVATIONS = ("identity", "relu", "logistic")


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "logistic":
        return sigmoid(z)
    return z


def _act_grad(name, z, a):
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "logistic":
        return a * (1.0 - a)
    return np.ones_like(z)


class Mlp:
    """Affine layers with ReLU between them and a configurable output activation.

    Weights are stored as (fan_in, fan_out) so a batch ``x`` of shape
    (n, fan_in) maps as ``x @ W + b``.
    """

    def __init__(self, sizes, output="identity", rng=None, zero=False):
        if output not in _ACTIVATIONS:
            raise ValueError(f"unknown output activation {output!r}")
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ValueError(f"bad layer sizes {sizes}")
        self.sizes = tuple(int(s) for s in sizes)
        self.output = output
        self.rejected_updates = 0
        if rng is None:
            rng = np.random.default_rng(0)
        self.weights, self.biases = [], []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            if zero:
                self.weights.append(np.zeros((fan_in, fan_out)))
                self.biases.append(np.zeros(fan_out))
            else:
                bound = 1.0 / np.sqrt(fan_in)
                self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
                self.biases.append(rng.uniform(-bound, bound, size=fan_out))

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    def _activation(self, layer):
        return self.output if layer == len(self.weights) - 1 else "relu"

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n_in:
            raise ValueError(f"input has dimension {x.shape[-1]}, network expects {self.n_in}")
        return x

    def forward(self, x):
        x = self._check(x)
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            x = _act(self._activation(i), x @ W + b)
        return x

    __call__ = forward

    def forward_cached(self, x):
        """Forward pass that also returns what ``backward`` needs."""
        x = self._check(x)
        cache = [(x, None)]
        a = x
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ W + b
            a = _act(self._activation(i), z)
            cache.append((a, z))
        return a, cache

    def backward(self, cache, grad_out):
        """Gradients of sum(grad_out * y) w.r.t. every parameter and the input.

        Returns ``(grads, grad_input)`` with ``grads`` a list of (dW, db).
        Works for a single vector or a batch; batch gradients are summed.
        """
        delta = np.asarray(grad_out, dtype=np.float64)
        grads = [None] * len(self.weights)
        for i in range(len(self.weights) - 1, -1, -1):
            a, z = cache[i + 1]
            delta = delta * _act_grad(self._activation(i), z, a)
            a_prev = cache[i][0]
            if delta.ndim == 1:
                dW = np.outer(a_prev, delta)
                db = delta.copy()
            else:
                dW = a_prev.T @ delta
                db = delta.sum(axis=0)
            grads[i] = (dW, db)
            delta = delta @ self.weights[i].T
        return grads, delta

    def params(self):
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        pos = 0
        for p in self.params():
            n = p.size
            p[...] = flat[pos:pos + n].reshape(p.shape)
            pos += n
        if pos != flat.size:
            raise ValueError(f"expected {pos} parameters, got {flat.size}")

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> "Mlp":
        other = Mlp.__new__(Mlp)
        other.sizes = self.sizes
        other.output = self.output
        other.rejected_updates = 0
        other.weights = [W.copy() for W in self.weights]
        other.biases = [b.copy() for b in self.biases]
        return other

    def load_from(self, other: "Mlp"):
        for p, q in zip(self.params(), other.params()):
            p[...] = q

    def all_finite(self) -> bool:
        return all(np.isfinite(p).all() for p in self.params())


def sgd_step(mlp: Mlp, grads, lr: float) -> bool:
    """In-place ``theta -= lr * g``. Non-finite gradients are rejected whole."""
    if not all(np.isfinite(dW).all() and np.isfinite(db).all() for dW, db in grads):
        mlp.rejected_updates += 1
        return False
    with np.errstate(over="ignore", invalid="ignore"):
        new = [(W - lr * dW, b - lr * db) for (dW, db), W, b in zip(grads, mlp.weights, mlp.biases)]
    if not all(np.isfinite(W).all() and np.isfinite(b).all() for W, b in new):
        mlp.rejected_updates += 1
        return False
    for (W_new, b_new), W, b in zip(new, mlp.weights, mlp.biases):
        W[...] = W_new
        b[...] = b_new
    return True


@dataclass(frozen=True)
class Transition:
    o: np.ndarray
    a: int | float
    r1: float
    r2: float
    o_next: np.ndarray
    terminal: bool


class ReplayMemory:
    def __init__(self, capacity: int = 10000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items = deque(maxlen=capacity)

    def push(self, item: Transition):
        self._items.append(item)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]

    def ready(self, batch_size: int) -> bool:
        return len(self._items) >= batch_size

    def sample(self, batch_size: int, rng: np.random.Generator):
        """Uniform batch without replacement, or None while underfilled."""
        if not self.ready(batch_size):
            return None
        idx = rng.choice(len(self._items), size=batch_size, replace=False)
        return [self._items[i] for i in idx]


def save_checkpoint(path, nets):
    """Write ``nets`` to ``path``: header, then float64 little-endian parameters."""
    header = [MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(nets))]
    for net in nets:
        header.append(struct.pack("<I", len(net.sizes)))
        header.append(struct.pack(f"<{len(net.sizes)}I", *net.sizes))
    body = [net.get_flat().astype("<f8").tobytes() for net in nets]
    Path(path).write_bytes(b"".join(header + body))


def read_checkpoint(path):
    """Return a list of (layer sizes, flat parameter vector)."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not an ADCP checkpoint")
    version, n_nets = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    shapes = []
    for _ in range(n_nets):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shapes.append(struct.unpack_from(f"<{n}I", data, pos))
        pos += 4 * n
    out = []
    for sizes in shapes:
        count = sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
        flat = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(np.float64)
        pos += 8 * count
        out.append((tuple(sizes), flat))
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return out


def load_checkpoint(path, nets):
    """Restore parameters into ``nets`` (architectures must match)."""
    stored = read_checkpoint(path)
    if len(stored) != len(nets):
        raise ValueError(f"{path}: holds {len(stored)} networks, expected {len(nets)}")
    for net, (sizes, flat) in zip(nets, stored):
        if tuple(sizes) != net.sizes:
            raise ValueError(f"{path}: layer sizes {sizes} != {net.sizes}")
        net.set_flat(flat)
    return nets
