"""Feed-forward ReLU networks: representation, file formats, concrete execution."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

import numpy as np

from .interval import DimensionError

NodeId = tuple[int, int]


class NetworkFormatError(ValueError):
    """Malformed network file. ``line`` is 1-based when known."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True, eq=False)
class Dense:
    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        b = np.array(self.bias, dtype=np.float64).reshape(-1)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise DimensionError(f"dense layer weights {w.shape} incompatible with bias {b.shape}")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_size(self) -> int:
        return self.weights.shape[1]

    @property
    def out_size(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True, eq=False)
class Conv:
    """Valid (unpadded) 2-D convolution; kernels are ``(out_c, in_c, kh, kw)``."""

    kernels: np.ndarray
    bias: np.ndarray
    stride: int = 1

    def __post_init__(self):
        k = np.array(self.kernels, dtype=np.float64)
        b = np.array(self.bias, dtype=np.float64).reshape(-1)
        if k.ndim != 4 or b.shape != (k.shape[0],):
            raise DimensionError(f"conv kernels {k.shape} incompatible with bias {b.shape}")
        if int(self.stride) < 1:
            raise ValueError("stride must be a positive integer")
        k.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "kernels", k)
        object.__setattr__(self, "bias", b)
        object.__setattr__(self, "stride", int(self.stride))

    def output_shape(self, in_shape: tuple[int, int, int]) -> tuple[int, int, int]:
        c, h, w = in_shape
        oc, ic, kh, kw = self.kernels.shape
        if c != ic:
            raise DimensionError(f"conv expects {ic} input channels, got {c}")
        if kh > h or kw > w:
            raise DimensionError(f"kernel {kh}x{kw} larger than input {h}x{w}")
        return oc, (h - kh) // self.stride + 1, (w - kw) // self.stride + 1

    def as_dense(self, in_shape: tuple[int, int, int]) -> tuple[np.ndarray, np.ndarray]:
        """Equivalent dense matrix over channel-major flattened grids."""
        oc, oh, ow = self.output_shape(in_shape)
        c, h, w = in_shape
        _, _, kh, kw = self.kernels.shape
        mat = np.zeros((oc, oh, ow, c, h, w))
        s = self.stride
        for i in range(oh):
            for j in range(ow):
                mat[:, i, j, :, i * s:i * s + kh, j * s:j * s + kw] = self.kernels
        bias = np.repeat(self.bias, oh * ow)
        return mat.reshape(oc * oh * ow, c * h * w), bias


@dataclass(frozen=True)
class Relu:
    pass


Layer = Union[Dense, Conv, Relu]


@dataclass(frozen=True, eq=False)
class Normalization:
    """NNet-style input metadata. ``means``/``ranges`` carry one extra output entry."""

    mins: np.ndarray
    maxes: np.ndarray
    means: np.ndarray
    ranges: np.ndarray

    def __post_init__(self):
        for name in ("mins", "maxes", "means", "ranges"):
            arr = np.array(getattr(self, name), dtype=np.float64).reshape(-1)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def normalize(self, x) -> np.ndarray:
        d = self.mins.shape[0]
        return (np.asarray(x, dtype=np.float64) - self.means[:d]) / self.ranges[:d]


@dataclass(frozen=True, eq=False)
class Network:
    input_dim: int
    layers: tuple
    input_shape: Optional[tuple[int, int, int]] = None
    normalization: Optional[Normalization] = None
    _affine: tuple = field(init=False, repr=False)
    _relu_sizes: tuple = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.input_shape is not None:
            shape = tuple(int(v) for v in self.input_shape)
            object.__setattr__(self, "input_shape", shape)
            if int(np.prod(shape)) != self.input_dim:
                raise DimensionError(f"input_shape {shape} does not match input_dim {self.input_dim}")
        if not self.layers or not isinstance(self.layers[-1], Dense):
            raise ValueError("final layer must be Dense")
        affine = []
        relu_sizes = []
        size = self.input_dim
        grid = self.input_shape
        prev = None
        for idx, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                if layer.in_size != size:
                    raise DimensionError(f"layer {idx}: dense expects {layer.in_size} inputs, got {size}")
                affine.append((layer.weights, layer.bias))
                size, grid = layer.out_size, None
            elif isinstance(layer, Conv):
                if grid is None:
                    raise DimensionError(f"layer {idx}: conv layer needs a (channels, height, width) input")
                w, b = layer.as_dense(grid)
                affine.append((w, b))
                grid = layer.output_shape(grid)
                size = w.shape[0]
            elif isinstance(layer, Relu):
                if not isinstance(prev, (Dense, Conv)):
                    raise ValueError(f"layer {idx}: ReLU must follow a dense or conv layer")
                affine.append(None)
                relu_sizes.append((idx, size))
            else:
                raise TypeError(f"layer {idx}: unknown layer type {type(layer).__name__}")
            prev = layer
        object.__setattr__(self, "_affine", tuple(affine))
        object.__setattr__(self, "_relu_sizes", tuple(relu_sizes))

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_size

    def affine(self, idx: int) -> tuple[np.ndarray, np.ndarray]:
        """``(W, b)`` of an affine layer; conv layers come back densified."""
        pair = self._affine[idx]
        if pair is None:
            raise IndexError(f"layer {idx} is not affine")
        return pair

    @property
    def relu_layers(self) -> tuple[tuple[int, int], ...]:
        """``(layer index, width)`` for every ReLU layer, in order."""
        return self._relu_sizes

    @property
    def relu_count(self) -> int:
        return sum(n for _, n in self._relu_sizes)

    def node_ids(self) -> list[NodeId]:
        return [(li, j) for li, n in self._relu_sizes for j in range(n)]


def forward(net: Network, x) -> np.ndarray:
    """Concrete output scores for one input (or a batch of rows)."""
    z = np.asarray(x, dtype=np.float64)
    if z.shape[-1] != net.input_dim:
        raise DimensionError(f"input has {z.shape[-1]} entries, network expects {net.input_dim}")
    for idx, layer in enumerate(net.layers):
        if isinstance(layer, Relu):
            z = np.maximum(z, 0.0)
        else:
            w, b = net.affine(idx)
            z = z @ w.T + b
    return z


def forward_trace(net: Network, x, perturb: Optional[tuple[NodeId, float]] = None):
    """Forward pass recording pre-activations of every ReLU layer.

    ``perturb=((layer, node), h)`` adds ``h`` to that node's pre-activation.
    Returns ``(outputs, {relu layer index: pre-activation vector})``.
    """
    z = np.asarray(x, dtype=np.float64).copy()
    if z.shape != (net.input_dim,):
        raise DimensionError(f"input has shape {z.shape}, network expects ({net.input_dim},)")
    pre = {}
    for idx, layer in enumerate(net.layers):
        if isinstance(layer, Relu):
            if perturb is not None and perturb[0][0] == idx:
                z = z.copy()
                z[perturb[0][1]] += perturb[1]
            pre[idx] = z
            z = np.maximum(z, 0.0)
        else:
            w, b = net.affine(idx)
            z = w @ z + b
    return z, pre


# -- NNet text format -------------------------------------------------------

def _numbers(text: str, lineno: int) -> list[float]:
    out = []
    for tok in text.strip().strip(",").split(","):
        tok = tok.strip()
        if not tok:
            continue
        try:
            out.append(float(tok))
        except ValueError:
            raise NetworkFormatError(f"non-numeric token {tok!r}", lineno) from None
    return out


def parse_nnet(text: Union[str, bytes]) -> Network:
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    lines = [(i + 1, ln) for i, ln in enumerate(text.splitlines())
             if ln.strip() and not ln.lstrip().startswith("//")]
    cursor = iter(lines)

    def take(what: str) -> tuple[int, list[float]]:
        try:
            lineno, ln = next(cursor)
        except StopIteration:
            raise NetworkFormatError(f"unexpected end of file while reading {what}") from None
        return lineno, _numbers(ln, lineno)

    lineno, head = take("header")
    if len(head) < 4 or any(v != int(v) or v < 1 for v in head[:4]):
        raise NetworkFormatError("header must hold numLayers, inputSize, outputSize, maxLayerSize", lineno)
    n_layers, in_size, out_size = (int(v) for v in head[:3])

    lineno, sizes = take("layer sizes")
    if len(sizes) < n_layers + 1 or any(v != int(v) or v < 1 for v in sizes[:n_layers + 1]):
        raise NetworkFormatError(f"expected {n_layers + 1} positive layer sizes", lineno)
    sizes = [int(v) for v in sizes[:n_layers + 1]]
    if sizes[0] != in_size or sizes[-1] != out_size:
        raise NetworkFormatError(
            f"layer sizes {sizes} disagree with inputSize {in_size}/outputSize {out_size}", lineno)

    take("flag line")
    meta = {}
    for name, count in (("mins", in_size), ("maxes", in_size),
                        ("means", in_size + 1), ("ranges", in_size + 1)):
        lineno, vals = take(f"input {name}")
        if len(vals) != count:
            raise NetworkFormatError(f"expected {count} input {name}, found {len(vals)}", lineno)
        meta[name] = vals

    layers: list = []
    for k in range(n_layers):
        rows = []
        for _ in range(sizes[k + 1]):
            lineno, vals = take(f"weights of layer {k + 1}")
            if len(vals) != sizes[k]:
                raise NetworkFormatError(
                    f"layer {k + 1} weight row has {len(vals)} entries, expected {sizes[k]}", lineno)
            rows.append(vals)
        bias = []
        for _ in range(sizes[k + 1]):
            lineno, vals = take(f"biases of layer {k + 1}")
            if len(vals) != 1:
                raise NetworkFormatError(f"bias line must hold one value, found {len(vals)}", lineno)
            bias.append(vals[0])
        layers.append(Dense(np.array(rows), np.array(bias)))
        if k < n_layers - 1:
            layers.append(Relu())
    rest = next(cursor, None)
    if rest is not None:
        raise NetworkFormatError("trailing data after last layer", rest[0])
    return Network(in_size, layers, normalization=Normalization(**meta))


def serialize_nnet(net: Network) -> str:
    if any(isinstance(l, Conv) for l in net.layers):
        raise ValueError("NNet format only holds dense layers")
    dense = [l for l in net.layers if isinstance(l, Dense)]
    sizes = [net.input_dim] + [l.out_size for l in dense]
    d = net.input_dim
    norm = net.normalization
    if norm is None:
        norm = Normalization(np.full(d, -np.finfo(float).max), np.full(d, np.finfo(float).max),
                             np.zeros(d + 1), np.ones(d + 1))

    def row(vals: Iterable[float]) -> str:
        return ",".join(repr(float(v)) for v in vals) + ","

    out = ["// serialized by reluverify",
           ",".join(str(v) for v in (len(dense), d, net.output_dim, max(sizes))) + ",",
           ",".join(str(s) for s in sizes) + ",",
           "0,",
           row(norm.mins), row(norm.maxes), row(norm.means), row(norm.ranges)]
    for layer in dense:
        out.extend(row(r) for r in layer.weights)
        out.extend(row([b]) for b in layer.bias)
    return "\n".join(out) + "\n"


# -- JSON format -----------------------------------------------------------

def network_from_dict(doc: dict) -> Network:
    try:
        layers = []
        for i, spec in enumerate(doc["layers"]):
            kind = spec.get("type")
            if kind == "dense":
                layers.append(Dense(np.array(spec["weights"]), np.array(spec["bias"])))
            elif kind == "conv":
                layers.append(Conv(np.array(spec["kernels"]), np.array(spec["bias"]), spec.get("stride", 1)))
            elif kind == "relu":
                layers.append(Relu())
            else:
                raise NetworkFormatError(f"layers[{i}].type: unknown layer type {kind!r}")
        norm = doc.get("normalization")
        shape = doc.get("input_shape")
        return Network(
            int(doc["input_dim"]),
            layers,
            input_shape=tuple(shape) if shape else None,
            normalization=Normalization(**norm) if norm else None,
        )
    except KeyError as exc:
        raise NetworkFormatError(f"missing field {exc.args[0]!r}") from None


def network_to_dict(net: Network) -> dict:
    layers = []
    for layer in net.layers:
        if isinstance(layer, Dense):
            layers.append({"type": "dense", "weights": layer.weights.tolist(), "bias": layer.bias.tolist()})
        elif isinstance(layer, Conv):
            layers.append({"type": "conv", "kernels": layer.kernels.tolist(),
                           "bias": layer.bias.tolist(), "stride": layer.stride})
        else:
            layers.append({"type": "relu"})
    doc = {"input_dim": net.input_dim, "layers": layers}
    if net.input_shape is not None:
        doc["input_shape"] = list(net.input_shape)
    if net.normalization is not None:
        n = net.normalization
        doc["normalization"] = {"mins": n.mins.tolist(), "maxes": n.maxes.tolist(),
                                "means": n.means.tolist(), "ranges": n.ranges.tolist()}
    return doc


def load_network(path) -> Network:
    """Load ``.nnet`` text or the JSON layout, picked by content."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw.lstrip().startswith(b"{"):
        try:
            return network_from_dict(json.loads(raw))
        except json.JSONDecodeError as exc:
            raise NetworkFormatError(f"invalid JSON: {exc.msg}", exc.lineno) from None
    return parse_nnet(raw)
