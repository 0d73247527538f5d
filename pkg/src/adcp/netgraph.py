"""Linear layer graphs, shape inference and baseline weight/MAC counts."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

CONV = "conv"
FC = "fc"
POOL = "pool"
INPUT = "input"
OUTPUT = "output"
LAYER_KINDS = (INPUT, CONV, POOL, FC, OUTPUT)


class NetworkError(ValueError):
    pass


class NetworkParseError(NetworkError):
    pass


class NetworkValidationError(NetworkError):
    pass


class ShapeError(NetworkError):
    pass


@dataclass(frozen=True)
class TensorShape:
    channels: int
    height: int = 1
    width: int = 1

    @property
    def size(self) -> int:
        return self.channels * self.height * self.width

    @property
    def spatial(self) -> bool:
        return self.height > 1 or self.width > 1

    def to_list(self) -> list[int]:
        return [self.channels, self.height, self.width]


@dataclass(frozen=True)
class LayerSpec:
    """One layer. Dimension fields not relevant to ``kind`` stay ``None``.

    ``in_channels`` (conv) and ``in_size`` (fc) may be omitted in the file;
    ``infer_shapes`` fills them from the incoming tensor.
    """

    kind: str
    name: str = ""
    in_channels: int | None = None
    out_channels: int | None = None
    kernel: tuple[int, int] | None = None
    stride: int = 1
    padding: str = "valid"
    in_size: int | None = None
    out_size: int | None = None
    window: int | None = None
    pool_kind: str = "max"
    in_shape: TensorShape | None = None
    out_shape: TensorShape | None = None

    @property
    def is_weighted(self) -> bool:
        return self.kind in (CONV, FC)

    # Symbol-style accessors for the cost formulas.
    @property
    def M(self) -> int:
        return self.in_channels

    @property
    def N(self) -> int:
        return self.out_channels

    @property
    def U(self) -> int:
        return self.kernel[0]

    @property
    def V(self) -> int:
        return self.kernel[1]

    @property
    def A(self) -> int:
        return self.in_size

    @property
    def B(self) -> int:
        return self.out_size


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    layers: tuple[LayerSpec, ...]
    input_shape: TensorShape
    weight_bits: int = 32
    activation_bits: int = 32
    shaped: bool = field(default=False, compare=False)

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i) -> LayerSpec:
        return self.layers[i]

    def indices(self, kind: str) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.kind == kind]

    def total_weights(self) -> int:
        return sum(layer_weight_count(layer) for layer in self.layers)

    def total_macs(self) -> int:
        return sum(layer_mac_count(layer) for layer in self.layers)


def _positive_int(value, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise NetworkParseError(f"{where}: expected an integer, got {value!r}")
    if value <= 0:
        raise NetworkValidationError(f"{where}: must be >= 1, got {value}")
    return value


def _layer_from_dict(d: dict, where: str) -> LayerSpec:
    if not isinstance(d, dict):
        raise NetworkParseError(f"{where}: expected an object")
    kind = d.get("kind")
    if kind not in LAYER_KINDS:
        raise NetworkParseError(f"{where}.kind: unknown layer kind {kind!r}")
    name = str(d.get("name", ""))
    if kind == CONV:
        if "out_channels" not in d or "kernel" not in d:
            raise NetworkParseError(f"{where}: conv needs out_channels and kernel")
        kernel = d["kernel"]
        if isinstance(kernel, int):
            kernel = [kernel, kernel]
        if not isinstance(kernel, list) or len(kernel) != 2:
            raise NetworkParseError(f"{where}.kernel: expected int or [U, V]")
        padding = d.get("padding", "valid")
        if padding not in ("same", "valid"):
            raise NetworkParseError(f"{where}.padding: expected 'same' or 'valid', got {padding!r}")
        in_ch = d.get("in_channels")
        return LayerSpec(
            kind=CONV,
            name=name,
            in_channels=None if in_ch is None else _positive_int(in_ch, f"{where}.in_channels"),
            out_channels=_positive_int(d["out_channels"], f"{where}.out_channels"),
            kernel=(_positive_int(kernel[0], f"{where}.kernel[0]"),
                    _positive_int(kernel[1], f"{where}.kernel[1]")),
            stride=_positive_int(d.get("stride", 1), f"{where}.stride"),
            padding=padding,
        )
    if kind == FC:
        if "out_size" not in d:
            raise NetworkParseError(f"{where}: fc needs out_size")
        in_size = d.get("in_size")
        return LayerSpec(
            kind=FC,
            name=name,
            in_size=None if in_size is None else _positive_int(in_size, f"{where}.in_size"),
            out_size=_positive_int(d["out_size"], f"{where}.out_size"),
        )
    if kind == POOL:
        if "window" not in d:
            raise NetworkParseError(f"{where}: pool needs window")
        window = _positive_int(d["window"], f"{where}.window")
        pool_kind = d.get("pool_kind", "max")
        if pool_kind not in ("max", "avg"):
            raise NetworkParseError(f"{where}.pool_kind: expected 'max' or 'avg'")
        padding = d.get("padding", "valid")
        if padding not in ("same", "valid"):
            raise NetworkParseError(f"{where}.padding: expected 'same' or 'valid', got {padding!r}")
        return LayerSpec(
            kind=POOL,
            name=name,
            window=window,
            stride=_positive_int(d.get("stride", window), f"{where}.stride"),
            padding=padding,
            pool_kind=pool_kind,
        )
    return LayerSpec(kind=kind, name=name)


def network_from_dict(doc: dict) -> NetworkSpec:
    """Build an (unshaped) NetworkSpec from a decoded network document."""
    if not isinstance(doc, dict):
        raise NetworkParseError("network document must be a JSON object")
    for key in ("name", "input", "layers"):
        if key not in doc:
            raise NetworkParseError(f"missing field {key!r}")
    dims = doc["input"]
    if not isinstance(dims, list) or len(dims) != 3:
        raise NetworkParseError("input: expected [C, H, W]")
    input_shape = TensorShape(*(_positive_int(v, f"input[{i}]") for i, v in enumerate(dims)))
    bits = doc.get("precision_bits", {})
    w_bits = _positive_int(bits.get("weights", 32), "precision_bits.weights")
    a_bits = _positive_int(bits.get("activations", 32), "precision_bits.activations")
    raw_layers = doc["layers"]
    if not isinstance(raw_layers, list):
        raise NetworkParseError("layers: expected a list")
    layers = []
    for i, d in enumerate(raw_layers):
        layer = _layer_from_dict(d, f"layers[{i}]")
        if not layer.name:
            layer = replace(layer, name=f"{layer.kind}{i}")
        layers.append(layer)
    if not layers or layers[0].kind != INPUT:
        raise NetworkValidationError("first layer must be 'input'")
    if layers[-1].kind != OUTPUT:
        raise NetworkValidationError("last layer must be 'output'")
    for i, layer in enumerate(layers[1:-1], start=1):
        if layer.kind in (INPUT, OUTPUT):
            raise NetworkValidationError(f"layers[{i}]: {layer.kind} only allowed at the ends")
    return NetworkSpec(
        name=str(doc["name"]),
        layers=tuple(layers),
        input_shape=input_shape,
        weight_bits=w_bits,
        activation_bits=a_bits,
    )


def parse_network_spec(text: str) -> NetworkSpec:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise NetworkParseError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return network_from_dict(doc)


def load_network(path) -> NetworkSpec:
    """Parse and shape-infer a network file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise NetworkError(f"{path}: {exc.strerror}") from exc
    try:
        return infer_shapes(parse_network_spec(text))
    except NetworkError as exc:
        raise type(exc)(f"{path}: {exc}") from exc


def network_to_dict(net: NetworkSpec) -> dict:
    layers = []
    for layer in net.layers:
        d = {"kind": layer.kind, "name": layer.name}
        if layer.kind == CONV:
            d.update(out_channels=layer.out_channels, kernel=list(layer.kernel),
                     stride=layer.stride, padding=layer.padding)
        elif layer.kind == FC:
            d.update(out_size=layer.out_size)
        elif layer.kind == POOL:
            d.update(window=layer.window, stride=layer.stride,
                     padding=layer.padding, pool_kind=layer.pool_kind)
        layers.append(d)
    return {
        "name": net.name,
        "input": net.input_shape.to_list(),
        "precision_bits": {"weights": net.weight_bits, "activations": net.activation_bits},
        "layers": layers,
    }


def _spatial_out(size: int, kernel: int, stride: int, padding: str) -> int:
    if padding == "same":
        return -(-size // stride)
    return (size - kernel) // stride + 1


def infer_shapes(net: NetworkSpec) -> NetworkSpec:
    """Annotate every layer with its input and output tensor shapes."""
    shape = net.input_shape
    shaped = []
    for i, layer in enumerate(net.layers):
        where = f"layer {i} ({layer.name})"
        if layer.kind == INPUT:
            shaped.append(replace(layer, in_shape=shape, out_shape=shape))
            continue
        if layer.kind in (CONV, POOL):
            if shaped[-1].kind == FC:
                raise ShapeError(f"{where}: {layer.kind} cannot follow an fc layer")
            if layer.kind == CONV:
                if layer.in_channels is not None and layer.in_channels != shape.channels:
                    raise ShapeError(f"{where}: in_channels {layer.in_channels} "
                                     f"!= incoming channels {shape.channels}")
                kh, kw = layer.kernel
                channels = layer.out_channels
            else:
                kh = kw = layer.window
                channels = shape.channels
            h = _spatial_out(shape.height, kh, layer.stride, layer.padding)
            w = _spatial_out(shape.width, kw, layer.stride, layer.padding)
            if h < 1 or w < 1:
                raise ShapeError(f"{where}: kernel {kh}x{kw} exceeds input "
                                 f"{shape.height}x{shape.width}")
            out = TensorShape(channels, h, w)
            extra = {"in_channels": shape.channels} if layer.kind == CONV else {}
            shaped.append(replace(layer, in_shape=shape, out_shape=out, **extra))
            shape = out
        elif layer.kind == FC:
            if layer.in_size is not None and layer.in_size != shape.size:
                raise ShapeError(f"{where}: in_size {layer.in_size} != incoming size {shape.size}")
            out = TensorShape(layer.out_size)
            shaped.append(replace(layer, in_size=shape.size, in_shape=shape, out_shape=out))
            shape = out
        else:
            shaped.append(replace(layer, in_shape=shape, out_shape=shape))
    return replace(net, layers=tuple(shaped), shaped=True)


def _require_shaped(layer: LayerSpec):
    if layer.out_shape is None:
        raise ShapeError(f"layer {layer.name!r} has no inferred shapes; call infer_shapes first")


def layer_weight_count(layer: LayerSpec) -> int:
    """Weights of the uncompressed layer, biases excluded."""
    _require_shaped(layer)
    if layer.kind == FC:
        return layer.A * layer.B
    if layer.kind == CONV:
        return layer.M * layer.N * layer.U * layer.V
    return 0


def layer_mac_count(layer: LayerSpec) -> int:
    """Multiply-accumulates of the uncompressed layer; pooling counts as zero."""
    _require_shaped(layer)
    if layer.kind == FC:
        return layer.A * layer.B
    if layer.kind == CONV:
        out = layer.out_shape
        return out.height * out.width * layer.U * layer.V * layer.N * layer.M
    return 0


def layer_activation_count(layer: LayerSpec) -> int:
    _require_shaped(layer)
    return layer.out_shape.size


def weighted_layers(net: NetworkSpec) -> list[int]:
    return [i for i, layer in enumerate(net.layers) if layer.is_weighted]


def compressible_layers(net: NetworkSpec) -> list[int]:
    """Weighted layers other than the first conv and the final fc."""
    convs = net.indices(CONV)
    fcs = net.indices(FC)
    frozen = set(convs[:1]) | set(fcs[-1:])
    return [i for i in weighted_layers(net) if i not in frozen]


def log_scale(value: float, top: float) -> float:
    """log1p(value) / log1p(top), clipped to [0, 1]."""
    if top <= 0:
        return 0.0
    return min(1.0, max(0.0, math.log1p(value) / math.log1p(top)))
