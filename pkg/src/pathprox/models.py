"""Architectures, parameters and the homogeneous-unit grouping.

A network is a flat sequence of layer descriptors. Parametric layers
(:class:`Linear`, :class:`Conv`) are numbered ``0..P-1`` in order; the
:class:`WeightStore` keeps one weight tensor and one optional bias per
parametric layer.

Grouping pairs consecutive parametric layers ``(in, out)`` separated by a
ReLU (and, for convolutions, at most one homogeneous pooling layer). Hidden
neuron/channel ``i`` between them is a homogeneous unit with input weights
``w_i`` (row/filter ``i`` of the input layer) and output weights ``v_i``
(column/input-slice ``i`` of the output layer). A parametric layer left
unpaired at the end goes to the residual set, which carries the plain
sum-of-squares term.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, FormatError
from .tensor import Tape, Tensor, conv2d_forward, flatten, linear_forward, pool2x2, relu


# ---------------------------------------------------------------------------
# layer descriptors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Linear:
    n_in: int
    n_out: int
    bias: bool = True


@dataclass(frozen=True)
class Conv:
    c_in: int
    c_out: int
    kh: int
    kw: int
    bias: bool = True
    padding: str = "valid"


@dataclass(frozen=True)
class Pool:
    kind: str = "max"


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


Layer = Union[Linear, Conv, Pool, ReLU, Flatten]
_LAYER_TYPES = {cls.__name__: cls for cls in (Linear, Conv, Pool, ReLU, Flatten)}


def _conv_out(size: int, k: int, padding: str) -> int:
    return size if padding == "same" else size - k + 1


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[Layer, ...]
    input_shape: tuple[int, ...]
    output_dim: int
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        self.validate()

    @property
    def param_layers(self) -> list[Layer]:
        return [l for l in self.layers if isinstance(l, (Linear, Conv))]

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    def validate(self) -> None:
        """Propagate shapes through the stack; raise :class:`ConfigError` on any mismatch."""
        shape = self.input_shape
        for pos, layer in enumerate(self.layers):
            if isinstance(layer, Linear):
                if len(shape) != 1 or shape[0] != layer.n_in:
                    raise ConfigError(f"layer {pos}: Linear expects ({layer.n_in},), got {shape}")
                shape = (layer.n_out,)
            elif isinstance(layer, Conv):
                if len(shape) != 3 or shape[0] != layer.c_in:
                    raise ConfigError(f"layer {pos}: Conv expects {layer.c_in} channels, got {shape}")
                if layer.padding not in ("valid", "same"):
                    raise ConfigError(f"layer {pos}: unknown padding {layer.padding!r}")
                h, w = _conv_out(shape[1], layer.kh, layer.padding), _conv_out(shape[2], layer.kw, layer.padding)
                if h < 1 or w < 1:
                    raise ConfigError(f"layer {pos}: kernel {layer.kh}x{layer.kw} larger than input {shape}")
                shape = (layer.c_out, h, w)
            elif isinstance(layer, Pool):
                if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
                    raise ConfigError(f"layer {pos}: pooling needs spatial dims >= 2, got {shape}")
                if layer.kind not in ("max", "avg"):
                    raise ConfigError(f"layer {pos}: unknown pooling kind {layer.kind!r}")
                shape = (shape[0], shape[1] // 2, shape[2] // 2)
            elif isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
            elif not isinstance(layer, ReLU):
                raise ConfigError(f"layer {pos}: unknown layer {layer!r}")
        params = self.param_layers
        if not params or not isinstance(params[-1], Linear) or not isinstance(self.layers[-1], Linear):
            raise ConfigError("network must end in a linear layer")
        if shape != (self.output_dim,):
            raise ConfigError(f"network output {shape} does not match output_dim {self.output_dim}")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "output_dim": self.output_dim,
            "layers": [{"type": type(l).__name__, **l.__dict__} for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        layers = []
        for ld in d["layers"]:
            ld = dict(ld)
            kind = ld.pop("type")
            if kind not in _LAYER_TYPES:
                raise ConfigError(f"unknown layer type {kind!r}")
            layers.append(_LAYER_TYPES[kind](**ld))
        return cls(tuple(layers), tuple(d["input_shape"]), int(d["output_dim"]), d.get("name", ""))


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def build_mlp(depth: int, width: int, input_dim: int, output_dim: int, factorized: bool = False) -> NetworkSpec:
    """MLP with ``depth`` hidden ReLU layers of ``width`` neurons.

    The plain network has ``depth + 1`` weight matrices, all with bias. The
    factorized network splits every internal matrix into two bias-free
    ``width x width`` factors, keeping the first and last matrices (and
    their biases) whole, so it has ``2 * depth`` matrices and a ReLU only
    inside each factor pair.
    """
    if depth < 1 or width < 1:
        raise ConfigError(f"MLP needs depth >= 1 and width >= 1, got depth={depth}, width={width}")
    layers: list[Layer] = []
    if not factorized:
        dims = [input_dim] + [width] * depth + [output_dim]
        for k in range(depth + 1):
            if k:
                layers.append(ReLU())
            layers.append(Linear(dims[k], dims[k + 1]))
        name = f"MLP-{depth}-{width}"
    else:
        layers.append(Linear(input_dim, width))
        for _ in range(depth - 1):
            layers += [ReLU(), Linear(width, width, bias=False), Linear(width, width, bias=False)]
        layers += [ReLU(), Linear(width, output_dim)]
        name = f"MLP-{depth}-{width} factorized"
    return NetworkSpec(tuple(layers), (input_dim,), output_dim, name)


# Architectures from the reference experiments, keyed by their published names.
# The published MLP-6-400 has six weight matrices (five hidden layers), while
# MLP-3-800 has four; the layer counts follow the architecture table.
NAMED_MLPS = {
    "MLP-3-400 factorized": dict(depth=3, width=400, factorized=True),
    "MLP-6-400": dict(depth=5, width=400, factorized=False),
    "MLP-3-800": dict(depth=3, width=800, factorized=False),
    "MLP-3-800 factorized": dict(depth=3, width=800, factorized=True),
}


def named_mlp(name: str, input_dim: int = 784, output_dim: int = 10) -> NetworkSpec:
    if name not in NAMED_MLPS:
        raise ConfigError(f"unknown named architecture {name!r}")
    spec = build_mlp(input_dim=input_dim, output_dim=output_dim, **NAMED_MLPS[name])
    return NetworkSpec(spec.layers, spec.input_shape, spec.output_dim, name)


def build_toy_cnn(
    channels: Sequence[int],
    kernel_size: int,
    pool_after: Sequence[int],
    output_dim: int,
    input_hw: tuple[int, int],
    padding: str = "valid",
    pool_kind: str = "max",
    grouped: bool = True,
) -> NetworkSpec:
    """Conv/ReLU(/pool) stack followed by flatten and one linear head.

    ``channels = (C_in, C_1, ..., C_m)`` gives ``m`` conv layers; a pooling
    layer follows the ReLU of every conv index listed in ``pool_after``.
    """
    n_conv = len(channels) - 1
    if n_conv < 0:
        raise ConfigError("channels must include the input channel count")
    if grouped and n_conv % 2:
        raise ConfigError(f"grouping needs an even number of conv layers, got {n_conv}")
    bad = [p for p in pool_after if not 0 <= p < n_conv]
    if bad:
        raise ConfigError(f"pool positions {bad} out of range for {n_conv} conv layers")
    layers: list[Layer] = []
    for k in range(n_conv):
        layers += [Conv(channels[k], channels[k + 1], kernel_size, kernel_size, True, padding), ReLU()]
        if k in pool_after:
            layers.append(Pool(pool_kind))
    layers.append(Flatten())
    # shape propagation for the head; validate() re-checks everything
    c, h, w = channels[0], *input_hw
    for layer in layers:
        if isinstance(layer, Conv):
            c, h, w = layer.c_out, _conv_out(h, layer.kh, padding), _conv_out(w, layer.kw, padding)
            if h < 1 or w < 1:
                raise ConfigError(f"kernel {kernel_size} too large for feature map")
        elif isinstance(layer, Pool):
            if h < 2 or w < 2:
                raise ConfigError(f"pooling on a {h}x{w} feature map")
            h, w = h // 2, w // 2
    layers.append(Linear(c * h * w, output_dim))
    return NetworkSpec(tuple(layers), (channels[0], *input_hw), output_dim, f"CNN-{'-'.join(map(str, channels))}")


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _param_shapes(spec: NetworkSpec) -> list[tuple[tuple[int, ...], int | None]]:
    out = []
    for l in spec.param_layers:
        if isinstance(l, Linear):
            out.append(((l.n_out, l.n_in), l.n_out if l.bias else None))
        else:
            out.append(((l.c_out, l.c_in, l.kh, l.kw), l.c_out if l.bias else None))
    return out


@dataclass
class WeightStore:
    """Trainable parameters of one network. ``version`` increases on every mutation."""

    spec: NetworkSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray | None]
    version: int = 0

    @classmethod
    def zeros(cls, spec: NetworkSpec) -> "WeightStore":
        ws, bs = [], []
        for wshape, bdim in _param_shapes(spec):
            ws.append(np.zeros(wshape))
            bs.append(None if bdim is None else np.zeros(bdim))
        return cls(spec, ws, bs)

    def copy(self) -> "WeightStore":
        return WeightStore(
            self.spec,
            [w.copy() for w in self.weights],
            [None if b is None else b.copy() for b in self.biases],
            self.version,
        )

    def bump(self) -> None:
        self.version += 1

    def param_dict(self) -> dict[str, np.ndarray]:
        d = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            d[f"W{k}"] = w
            if b is not None:
                d[f"b{k}"] = b
        return d

    def load_param_dict(self, params: dict[str, np.ndarray]) -> None:
        for k in range(len(self.weights)):
            self.weights[k] = np.array(params[f"W{k}"], dtype=np.float64)
            if self.biases[k] is not None:
                self.biases[k] = np.array(params[f"b{k}"], dtype=np.float64)
        self.bump()

    def identical_to(self, other: "WeightStore") -> bool:
        if len(self.weights) != len(other.weights):
            return False
        for a, b in zip(self.weights + self.biases, other.weights + other.biases):
            if (a is None) != (b is None):
                return False
            if a is not None and (a.shape != b.shape or not np.array_equal(a, b)):
                return False
        return True


def init_weights(store: WeightStore, seed: int) -> None:
    """Fan-in scaled normal weights (variance ``2 / fan_in``) and zero biases."""
    rng = np.random.default_rng(seed)
    for k, w in enumerate(store.weights):
        fan_in = int(np.prod(w.shape[1:]))
        store.weights[k] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=w.shape)
        if store.biases[k] is not None:
            store.biases[k] = np.zeros_like(store.biases[k])
    store.bump()


def init_store(spec: NetworkSpec, seed: int) -> WeightStore:
    store = WeightStore.zeros(spec)
    init_weights(store, seed)
    return store


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def forward(spec: NetworkSpec, store: WeightStore, x, tape: Tape | None = None, watch_input: bool = False) -> Tensor:
    """Logits for a batch ``x`` of shape ``(N, *spec.input_shape)``.

    With a tape, parameters are watched under the names of
    :meth:`WeightStore.param_dict` (and the input as ``"input"`` when
    ``watch_input``).
    """
    xd = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if xd.shape[1:] != spec.input_shape:
        raise DimensionError(f"input batch {xd.shape} does not match network input {spec.input_shape}")
    if tape is not None:
        h = tape.watch("input", xd) if watch_input else Tensor(xd)
        params = {name: tape.watch(name, arr) for name, arr in store.param_dict().items()}
    else:
        h = Tensor(xd)
        params = {name: Tensor(arr) for name, arr in store.param_dict().items()}
    k = 0
    for layer in spec.layers:
        if isinstance(layer, (Linear, Conv)):
            W, b = params[f"W{k}"], params.get(f"b{k}")
            if isinstance(layer, Linear):
                h = linear_forward(h, W, b)
            else:
                h = conv2d_forward(h, W, b, layer.padding)
            k += 1
        elif isinstance(layer, ReLU):
            h = relu(h)
        elif isinstance(layer, Pool):
            h = pool2x2(h, layer.kind)
        elif isinstance(layer, Flatten):
            h = flatten(h)
    return h


def predict(spec: NetworkSpec, store: WeightStore, x) -> np.ndarray:
    return forward(spec, store, x).data


# ---------------------------------------------------------------------------
# grouping
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Group:
    in_layer: int
    out_layer: int
    n_units: int
    kind: str  # "linear" | "conv"
    pool: str | None = None


@dataclass(frozen=True)
class GroupingScheme:
    groups: tuple[Group, ...]
    residual: tuple[int, ...]
    n_layers: int

    @property
    def c(self) -> int:
        return 1 if self.residual else 0

    @property
    def n_units(self) -> int:
        return sum(g.n_units for g in self.groups)

    def grouped_layers(self) -> list[int]:
        return [k for g in self.groups for k in (g.in_layer, g.out_layer)]


def derive_grouping(spec: NetworkSpec) -> GroupingScheme:
    """Pair consecutive parametric layers into coupled groups, front to back."""
    layers = spec.layers
    positions = [i for i, l in enumerate(layers) if isinstance(l, (Linear, Conv))]
    groups, residual = [], []
    k = 0
    while k < len(positions):
        if k + 1 < len(positions):
            a, b = layers[positions[k]], layers[positions[k + 1]]
            between = layers[positions[k] + 1:positions[k + 1]]
            pools = [l for l in between if isinstance(l, Pool)]
            pairable = (
                type(a) is type(b)
                and between[:1] == (ReLU(),)
                and all(isinstance(l, (ReLU, Pool)) for l in between)
                and sum(isinstance(l, ReLU) for l in between) == 1
                and len(pools) <= (1 if isinstance(a, Conv) else 0)
            )
            if pairable:
                n = a.n_out if isinstance(a, Linear) else a.c_out
                groups.append(Group(k, k + 1, n, "linear" if isinstance(a, Linear) else "conv",
                                    pools[0].kind if pools else None))
                k += 2
                continue
        residual.append(k)
        k += 1
    return GroupingScheme(tuple(groups), tuple(residual), len(positions))


# Vectorized access to all units of a group: rows of the returned matrices are units.


def group_w(store: WeightStore, group: Group, include_bias: bool = False) -> np.ndarray:
    W = store.weights[group.in_layer]
    mat = W.reshape(W.shape[0], -1)
    b = store.biases[group.in_layer]
    if include_bias and b is not None:
        mat = np.concatenate([mat, b[:, None]], axis=1)
    return mat.copy()


def group_v(store: WeightStore, group: Group) -> np.ndarray:
    V = store.weights[group.out_layer]
    return np.swapaxes(V, 0, 1).reshape(V.shape[1], -1).copy()


def set_group_w(store: WeightStore, group: Group, mat: np.ndarray, include_bias: bool = False) -> None:
    W = store.weights[group.in_layer]
    b = store.biases[group.in_layer]
    ncols = int(np.prod(W.shape[1:]))
    store.weights[group.in_layer] = np.ascontiguousarray(mat[:, :ncols]).reshape(W.shape)
    if include_bias and b is not None:
        store.biases[group.in_layer] = mat[:, ncols].copy()
    store.bump()


def set_group_v(store: WeightStore, group: Group, mat: np.ndarray) -> None:
    V = store.weights[group.out_layer]
    swapped = (V.shape[1], V.shape[0]) + V.shape[2:]
    store.weights[group.out_layer] = np.ascontiguousarray(np.swapaxes(mat.reshape(swapped), 0, 1))
    store.bump()


def unit_bias_in_w(store: WeightStore, group: Group, include_bias: bool) -> bool:
    return include_bias and store.biases[group.in_layer] is not None


@dataclass
class HomogeneousUnitView:
    """Copies of one unit's weights; :meth:`write` stores them back.

    ``w`` carries the unit's bias as its last coordinate iff
    ``include_bias`` is set; otherwise the bias (if the layer has one) is
    in ``bias`` so rescaling can keep it in step with ``w``.
    """

    store: WeightStore
    scheme: GroupingScheme
    group: int
    unit: int
    include_bias: bool
    w: np.ndarray = field(repr=False)
    v: np.ndarray = field(repr=False)
    bias: float | None = None

    def write(self) -> None:
        g = self.scheme.groups[self.group]
        i = self.unit
        W = self.store.weights[g.in_layer]
        ncols = int(np.prod(W.shape[1:]))
        W[i] = self.w[:ncols].reshape(W.shape[1:])
        b = self.store.biases[g.in_layer]
        if b is not None:
            b[i] = self.w[ncols] if self.include_bias else self.bias
        V = self.store.weights[g.out_layer]
        V[:, i] = self.v.reshape(V[:, i].shape)
        self.store.bump()


def unit_view(store: WeightStore, scheme: GroupingScheme, group: int, unit: int,
              include_bias: bool = False) -> HomogeneousUnitView:
    if not 0 <= group < len(scheme.groups):
        raise IndexError(f"group {group} out of range ({len(scheme.groups)} groups)")
    g = scheme.groups[group]
    if not 0 <= unit < g.n_units:
        raise IndexError(f"unit {unit} out of range ({g.n_units} units)")
    W = store.weights[g.in_layer]
    w = W.reshape(W.shape[0], -1)[unit].copy()
    b = store.biases[g.in_layer]
    bias = None
    if b is not None:
        if include_bias:
            w = np.append(w, b[unit])
        else:
            bias = float(b[unit])
    v = store.weights[g.out_layer][:, unit].reshape(-1).copy()
    return HomogeneousUnitView(store, scheme, group, unit, include_bias, w, v, bias)


def rescale_unit(store: WeightStore, group: Group, unit: int, alpha: float) -> None:
    """``(w, b, v) -> (alpha w, alpha b, v / alpha)``; leaves the network function unchanged."""
    if alpha <= 0:
        raise ContractError("rescaling factor must be positive")
    store.weights[group.in_layer][unit] *= alpha
    b = store.biases[group.in_layer]
    if b is not None:
        b[unit] *= alpha
    store.weights[group.out_layer][:, unit] /= alpha
    store.bump()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, store: WeightStore, seed: int, extra: dict | None = None) -> None:
    doc = {
        "spec": store.spec.to_dict(),
        "seed": seed,
        "version": store.version,
        "layers": [
            {"W": w.tolist(), "b": None if b is None else b.tolist()}
            for w, b in zip(store.weights, store.biases)
        ],
    }
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> tuple[WeightStore, dict]:
    """Read a checkpoint; returns the store and the full document (for seed and extras)."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"checkpoint {path} is not valid JSON: {exc.msg}", exc.pos) from exc
    spec = NetworkSpec.from_dict(doc["spec"])
    store = WeightStore.zeros(spec)
    if len(doc["layers"]) != len(store.weights):
        raise FormatError(f"checkpoint has {len(doc['layers'])} layers, spec needs {len(store.weights)}")
    for k, entry in enumerate(doc["layers"]):
        w = np.array(entry["W"], dtype=np.float64)
        if w.shape != store.weights[k].shape:
            raise FormatError(f"layer {k}: weight shape {w.shape} != {store.weights[k].shape}")
        store.weights[k] = w
        want_b = store.biases[k]
        got_b = entry.get("b")
        if (want_b is None) != (got_b is None):
            raise FormatError(f"layer {k}: bias presence does not match the network layout")
        if got_b is not None:
            b = np.array(got_b, dtype=np.float64)
            if b.shape != want_b.shape:
                raise FormatError(f"layer {k}: bias shape {b.shape} != {want_b.shape}")
            store.biases[k] = b
    store.version = int(doc["version"])
    return store, doc
