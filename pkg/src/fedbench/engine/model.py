"""Layered model state plus hand-written forward/backward passes.

All arithmetic is float64 numpy.  A model is an ordered list of named layers;
parameters are addressed as ``"<layer>.<param>"``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator

import numpy as np

from ..errors import ConfigError, InvalidTraceError

LAYER_KINDS = ("dense", "conv", "batchnorm", "activation", "pool", "flatten")
BN_MOMENTUM = 0.1
BN_EPS = 1e-5


class Role(str, Enum):
    TRAINABLE = "trainable"
    BN_STATISTIC = "bn_statistic"
    BN_COUNTER = "bn_counter"


_BN_ROLES = {
    "gamma": Role.TRAINABLE,
    "beta": Role.TRAINABLE,
    "running_mean": Role.BN_STATISTIC,
    "running_var": Role.BN_STATISTIC,
    "batches_tracked": Role.BN_COUNTER,
}


@dataclass
class Layer:
    name: str
    kind: str
    params: dict[str, np.ndarray] = field(default_factory=dict)
    attrs: dict = field(default_factory=dict)

    def role(self, key: str) -> Role:
        if self.kind == "batchnorm":
            return _BN_ROLES[key]
        return Role.TRAINABLE


class ModelState:
    """Ordered, named layers with a declared input shape and representation tap."""

    def __init__(self, layers: list[Layer], input_shape: tuple[int, ...], rep_layer: str):
        names = [layer.name for layer in layers]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate layer names in {names}")
        for layer in layers:
            if layer.kind not in LAYER_KINDS:
                raise ConfigError(f"layer {layer.name!r}: unknown kind {layer.kind!r}")
        if rep_layer not in names:
            raise ConfigError(f"representation layer {rep_layer!r} not in model")
        self.layers = layers
        self._by_name = {layer.name: layer for layer in layers}
        # parameter keys are fixed at construction, so name lists can be cached
        self._names: dict[tuple, list[str]] = {}
        self._counts: dict[tuple, int] = {}
        self._flops: dict[tuple, int] = {}
        self.input_shape = tuple(int(d) for d in input_shape)
        self.rep_layer = rep_layer
        self.version = 0

    # -- parameter access -------------------------------------------------
    def items(self) -> Iterator[tuple[str, Layer, str, np.ndarray]]:
        for layer in self.layers:
            for key, value in layer.params.items():
                yield f"{layer.name}.{key}", layer, key, value

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: value for name, _, _, value in self.items()}

    def roles(self) -> dict[str, Role]:
        return {name: layer.role(key) for name, layer, key, _ in self.items()}

    def names(self, roles=None, include_batchnorm: bool = True) -> list[str]:
        """Parameter names filtered by role and (optionally) excluding BN layers."""
        cache_key = (None if roles is None else frozenset(roles), include_batchnorm)
        cached = self._names.get(cache_key)
        if cached is not None:
            return list(cached)
        out = []
        for name, layer, key, _ in self.items():
            if roles is not None and layer.role(key) not in roles:
                continue
            if not include_batchnorm and layer.kind == "batchnorm":
                continue
            out.append(name)
        self._names[cache_key] = out
        return list(out)

    def trainable_names(self) -> list[str]:
        return self.names({Role.TRAINABLE})

    def trainable_layers(self) -> list[str]:
        """Layers owning at least one trainable parameter, in model order."""
        return [
            layer.name
            for layer in self.layers
            if any(layer.role(k) is Role.TRAINABLE for k in layer.params)
        ]

    def layer(self, name: str) -> Layer:
        return self._by_name[name]

    def get(self, name: str) -> np.ndarray:
        layer_name, key = name.rsplit(".", 1)
        return self.layer(layer_name).params[key]

    def set(self, name: str, value: np.ndarray) -> None:
        layer_name, key = name.rsplit(".", 1)
        layer = self.layer(layer_name)
        old = layer.params[key]
        value = np.asarray(value, dtype=old.dtype)
        if value.shape != old.shape:
            raise ConfigError(f"{name}: shape {value.shape} != {old.shape}")
        layer.params[key] = value.copy()
        self.version += 1

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, value in state.items():
            self.set(name, value)

    def param_count(self, roles=None, include_batchnorm: bool = True) -> int:
        key = (None if roles is None else frozenset(roles), include_batchnorm)
        if key not in self._counts:
            self._counts[key] = int(sum(self.get(n).size for n in self.names(roles, include_batchnorm)))
        return self._counts[key]

    def batchnorm_param_count(self) -> int:
        return int(
            sum(v.size for layer in self.layers if layer.kind == "batchnorm" for v in layer.params.values())
        )

    def schema(self) -> list[dict]:
        return [
            {
                "name": layer.name,
                "kind": layer.kind,
                "attrs": dict(layer.attrs),
                "params": {k: [list(v.shape), str(v.dtype)] for k, v in layer.params.items()},
            }
            for layer in self.layers
        ]

    def _layout(self) -> list[tuple]:
        return [(l.name, l.kind, l.attrs, [(k, v.shape, v.dtype) for k, v in l.params.items()])
                for l in self.layers]

    def same_schema(self, other: "ModelState") -> bool:
        return self.input_shape == other.input_shape and self._layout() == other._layout()

    def copy(self) -> "ModelState":
        clone = ModelState(
            # attrs hold scalars only
            [Layer(l.name, l.kind, {k: v.copy() for k, v in l.params.items()}, dict(l.attrs)) for l in self.layers],
            self.input_shape,
            self.rep_layer,
        )
        # same layout, so the shape-derived caches are shared
        clone._names, clone._counts, clone._flops = self._names, self._counts, self._flops
        return clone

    @property
    def num_classes(self) -> int:
        return int(_out_shape(self, (1,) + self.input_shape)[-1])

    @property
    def rep_dim(self) -> int:
        shape = (1,) + self.input_shape
        for layer in self.layers:
            shape = _layer_out_shape(layer, shape)
            if layer.name == self.rep_layer:
                return int(np.prod(shape[1:]))
        raise AssertionError("unreachable")


# -- construction -----------------------------------------------------------

def dense(name: str, fan_in: int, fan_out: int, rng: np.random.Generator, gain: float = 2.0) -> Layer:
    w = rng.normal(0.0, np.sqrt(gain / fan_in), size=(fan_out, fan_in))
    return Layer(name, "dense", {"weight": w, "bias": np.zeros(fan_out)})


def conv(name: str, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
         stride: int = 1, padding: int | None = None) -> Layer:
    if padding is None:
        padding = kernel // 2
    fan_in = c_in * kernel * kernel
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, kernel, kernel))
    return Layer(name, "conv", {"weight": w, "bias": np.zeros(c_out)},
                 {"stride": stride, "padding": padding})


def batchnorm(name: str, channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Layer:
    return Layer(
        name,
        "batchnorm",
        {
            "gamma": np.ones(channels),
            "beta": np.zeros(channels),
            "running_mean": np.zeros(channels),
            "running_var": np.ones(channels),
            "batches_tracked": np.zeros((), dtype=np.int64),
        },
        {"momentum": momentum, "eps": eps},
    )


def activation(name: str, fn: str = "relu") -> Layer:
    if fn not in _ACTIVATIONS:
        raise ConfigError(f"layer {name!r}: unknown activation {fn!r}")
    return Layer(name, "activation", attrs={"fn": fn})


def toy_mlp(input_shape, num_classes: int, rng: np.random.Generator,
            hidden: tuple[int, int] = (32, 32)) -> ModelState:
    """Two dense+BN blocks and a dense head; representation is the second block's output."""
    input_shape = tuple(input_shape)
    fan_in = int(np.prod(input_shape))
    h1, h2 = hidden
    layers = [
        Layer("flatten", "flatten"),
        dense("fc1", fan_in, h1, rng),
        batchnorm("bn1", h1),
        activation("act1"),
        dense("fc2", h1, h2, rng),
        batchnorm("bn2", h2),
        activation("act2"),
        dense("head", h2, num_classes, rng, gain=1.0),
    ]
    return ModelState(layers, input_shape, rep_layer="act2")


def toy_cnn(input_shape, num_classes: int, rng: np.random.Generator,
            channels: tuple[int, int] = (8, 16)) -> ModelState:
    """Two conv+BN blocks, global average pool (representation), dense head."""
    c, _, _ = input_shape
    c1, c2 = channels
    layers = [
        conv("conv1", c, c1, 3, rng),
        batchnorm("bn1", c1),
        activation("act1"),
        conv("conv2", c1, c2, 3, rng, stride=2),
        batchnorm("bn2", c2),
        activation("act2"),
        Layer("pool", "pool"),
        dense("head", c2, num_classes, rng, gain=1.0),
    ]
    return ModelState(layers, tuple(input_shape), rep_layer="pool")


def build_model(arch: str, input_shape, num_classes: int, rng: np.random.Generator, **kw) -> ModelState:
    if arch == "mlp":
        return toy_mlp(input_shape, num_classes, rng, **kw)
    if arch == "cnn":
        return toy_cnn(input_shape, num_classes, rng, **kw)
    raise ConfigError(f"unknown model architecture {arch!r}")


# -- per-layer kernels ------------------------------------------------------

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


_ACTIVATIONS = {
    "relu": (lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(x.dtype)),
    "tanh": (np.tanh, lambda x, y: 1.0 - y * y),
    "silu": (lambda x: x * _sigmoid(x),
             lambda x, y: _sigmoid(x) * (1.0 + x * (1.0 - _sigmoid(x)))),
    "identity": (lambda x: x, lambda x, y: np.ones_like(x)),
}


def _bn_axes(x: np.ndarray) -> tuple[int, ...]:
    return (0,) if x.ndim == 2 else (0, 2, 3)


def _bn_shape(x: np.ndarray) -> tuple[int, ...]:
    return (1, -1) if x.ndim == 2 else (1, -1, 1, 1)


def _windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]  # (N, C, Ho, Wo, k, k)


def _layer_out_shape(layer: Layer, shape: tuple[int, ...]) -> tuple[int, ...]:
    kind = layer.kind
    if kind == "flatten":
        return (shape[0], int(np.prod(shape[1:])))
    if kind == "dense":
        out, fan_in = layer.params["weight"].shape
        if len(shape) != 2 or shape[1] != fan_in:
            raise ConfigError(f"layer {layer.name!r}: expects [batch, {fan_in}] input, got {list(shape)}")
        return (shape[0], out)
    if kind == "conv":
        c_out, c_in, k, _ = layer.params["weight"].shape
        if len(shape) != 4 or shape[1] != c_in:
            raise ConfigError(f"layer {layer.name!r}: expects [batch, {c_in}, H, W] input, got {list(shape)}")
        s, p = layer.attrs["stride"], layer.attrs["padding"]
        ho = (shape[2] + 2 * p - k) // s + 1
        wo = (shape[3] + 2 * p - k) // s + 1
        if ho < 1 or wo < 1:
            raise ConfigError(f"layer {layer.name!r}: input {list(shape)} too small for kernel {k}")
        return (shape[0], c_out, ho, wo)
    if kind == "batchnorm":
        c = layer.params["gamma"].shape[0]
        if len(shape) not in (2, 4) or shape[1] != c:
            raise ConfigError(f"layer {layer.name!r}: expects {c} channels, got {list(shape)}")
        return shape
    if kind == "pool":
        if len(shape) != 4:
            raise ConfigError(f"layer {layer.name!r}: global pool needs [batch, C, H, W], got {list(shape)}")
        return shape[:2]
    return shape


def _out_shape(model: ModelState, shape: tuple[int, ...]) -> tuple[int, ...]:
    for layer in model.layers:
        shape = _layer_out_shape(layer, shape)
    return shape


def _layer_forward(layer: Layer, x: np.ndarray, mode: str, update_stats: bool):
    kind, p = layer.kind, layer.params
    if kind == "flatten":
        return x.reshape(x.shape[0], -1), x.shape
    if kind == "dense":
        return x @ p["weight"].T + p["bias"], x
    if kind == "conv":
        w = p["weight"]
        k, s, pad = w.shape[2], layer.attrs["stride"], layer.attrs["padding"]
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        win = _windows(xp, k, s)
        out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, Cout)
        out = out.transpose(0, 3, 1, 2) + p["bias"].reshape(1, -1, 1, 1)
        return out, (x.shape, xp.shape, win)
    if kind == "batchnorm":
        shape = _bn_shape(x)
        eps = layer.attrs["eps"]
        if mode == "train":
            axes = _bn_axes(x)
            m = x.size // x.shape[1]
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            inv_std = 1.0 / np.sqrt(var + eps)
            xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
            if update_stats:
                mom = layer.attrs["momentum"]
                unbiased = var * m / (m - 1) if m > 1 else var
                p["running_mean"] = (1.0 - mom) * p["running_mean"] + mom * mean
                p["running_var"] = (1.0 - mom) * p["running_var"] + mom * unbiased
                p["batches_tracked"] = p["batches_tracked"] + 1
            cache = ("train", xhat, inv_std)
        else:
            inv_std = 1.0 / np.sqrt(p["running_var"] + eps)
            xhat = (x - p["running_mean"].reshape(shape)) * inv_std.reshape(shape)
            cache = ("eval", xhat, inv_std)
        return p["gamma"].reshape(shape) * xhat + p["beta"].reshape(shape), cache
    if kind == "activation":
        y = _ACTIVATIONS[layer.attrs["fn"]][0](x)
        return y, (x, y)
    if kind == "pool":
        return x.mean(axis=(2, 3)), x.shape
    raise AssertionError(kind)


def _layer_backward(layer: Layer, dout: np.ndarray, cache, need_dx: bool):
    kind, p = layer.kind, layer.params
    grads: dict[str, np.ndarray] = {}
    if kind == "flatten":
        return dout.reshape(cache), grads
    if kind == "dense":
        x = cache
        grads["weight"] = dout.T @ x
        grads["bias"] = dout.sum(axis=0)
        return (dout @ p["weight"] if need_dx else None), grads
    if kind == "conv":
        x_shape, xp_shape, win = cache
        w = p["weight"]
        k, s, pad = w.shape[2], layer.attrs["stride"], layer.attrs["padding"]
        grads["weight"] = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))
        grads["bias"] = dout.sum(axis=(0, 2, 3))
        if not need_dx:
            return None, grads
        ho, wo = dout.shape[2], dout.shape[3]
        dxp = np.zeros(xp_shape)
        for a in range(k):
            for b in range(k):
                dxp[:, :, a:a + s * (ho - 1) + 1:s, b:b + s * (wo - 1) + 1:s] += np.einsum(
                    "nohw,oc->nchw", dout, w[:, :, a, b]
                )
        dx = dxp[:, :, pad:pad + x_shape[2], pad:pad + x_shape[3]] if pad else dxp
        return dx, grads
    if kind == "batchnorm":
        mode, xhat, inv_std = cache
        shape = _bn_shape(dout)
        axes = _bn_axes(dout)
        grads["gamma"] = (dout * xhat).sum(axis=axes)
        grads["beta"] = dout.sum(axis=axes)
        if not need_dx:
            return None, grads
        dxhat = dout * p["gamma"].reshape(shape)
        if mode == "eval":
            return dxhat * inv_std.reshape(shape), grads
        m = dout.size // dout.shape[1]
        dx = (inv_std.reshape(shape) / m) * (
            m * dxhat
            - dxhat.sum(axis=axes).reshape(shape)
            - xhat * (dxhat * xhat).sum(axis=axes).reshape(shape)
        )
        return dx, grads
    if kind == "activation":
        x, y = cache
        return dout * _ACTIVATIONS[layer.attrs["fn"]][1](x, y), grads
    if kind == "pool":
        n, c, h, w = cache
        return np.broadcast_to(dout[:, :, None, None] / (h * w), cache).copy(), grads
    raise AssertionError(kind)


# -- model-level passes -----------------------------------------------------

@dataclass
class ForwardTrace:
    logits: np.ndarray
    representation: np.ndarray
    mode: str
    caches: list
    model_id: int
    version: int


def forward(model: ModelState, inputs: np.ndarray, mode: str = "train",
            update_stats: bool = True) -> ForwardTrace:
    """Run the model on ``inputs`` ([batch, *input_shape]).

    In train mode batch statistics normalise the BN layers and, unless
    ``update_stats`` is false, running statistics and counters are updated.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(inputs, dtype=np.float64)
    if x.shape[1:] != model.input_shape:
        raise ConfigError(
            f"layer {model.layers[0].name!r}: input shape {list(x.shape[1:])} "
            f"does not match model input {list(model.input_shape)}"
        )
    caches = []
    rep = None
    shape = x.shape
    for layer in model.layers:
        shape = _layer_out_shape(layer, shape)
        x, cache = _layer_forward(layer, x, mode, update_stats)
        caches.append(cache)
        if layer.name == model.rep_layer:
            rep = x.reshape(x.shape[0], -1)
    if mode == "train" and update_stats and any(l.kind == "batchnorm" for l in model.layers):
        model.version += 1
    return ForwardTrace(x, rep, mode, caches, id(model), model.version)


Gradients = dict


def backward(model: ModelState, trace: ForwardTrace, loss_grad: np.ndarray,
             rep_grad: np.ndarray | None = None, input_grad: bool = False):
    """Gradients of the loss w.r.t. every TRAINABLE parameter.

    ``loss_grad`` is dL/dlogits; ``rep_grad`` optionally adds dL/d(representation).
    With ``input_grad=True`` returns ``(grads, dL/dinputs)``.
    """
    if trace.model_id != id(model) or trace.version != model.version:
        raise InvalidTraceError("trace is stale: the model was modified after the forward pass")
    dout = np.asarray(loss_grad, dtype=np.float64)
    if dout.shape != trace.logits.shape:
        raise ConfigError(f"loss gradient shape {dout.shape} != logits shape {trace.logits.shape}")
    grads: dict[str, np.ndarray] = {}
    n_layers = len(model.layers)
    for i in range(n_layers - 1, -1, -1):
        layer = model.layers[i]
        if layer.name == model.rep_layer and rep_grad is not None:
            dout = dout + np.asarray(rep_grad, dtype=np.float64).reshape(dout.shape)
        need_dx = input_grad or i > 0
        dout, layer_grads = _layer_backward(layer, dout, trace.caches[i], need_dx)
        for key, g in layer_grads.items():
            grads[f"{layer.name}.{key}"] = g
    ordered = {name: grads[name] for name in model.trainable_names()}
    if input_grad:
        return ordered, dout
    return ordered


def predict(model: ModelState, inputs: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Eval-mode logits, computed in chunks."""
    x = np.asarray(inputs)
    if len(x) == 0:
        return np.zeros((0, model.num_classes))
    return np.concatenate(
        [forward(model, x[i:i + batch_size], "eval").logits for i in range(0, len(x), batch_size)]
    )


# -- FLOP model ---------------------------------------------------------------

def _layer_forward_flops(layer: Layer, in_shape: tuple[int, ...], out_shape: tuple[int, ...]) -> int:
    n_out = int(np.prod(out_shape))
    if layer.kind == "dense":
        fan_in = layer.params["weight"].shape[1]
        return 2 * n_out * fan_in + n_out
    if layer.kind == "conv":
        _, c_in, k, _ = layer.params["weight"].shape
        return 2 * n_out * c_in * k * k + n_out
    if layer.kind == "batchnorm":
        return 2 * n_out
    if layer.kind == "activation":
        return n_out
    if layer.kind == "pool":
        return int(np.prod(in_shape))
    return 0


def forward_flops(model: ModelState, batch_shape) -> int:
    """FLOPs of one forward pass; one multiply-accumulate counts as 2."""
    shape = tuple(int(d) for d in batch_shape)
    if len(shape) == len(model.input_shape):
        shape = (1,) + shape
    cached = model._flops.get(shape)
    if cached is not None:
        return cached
    key = shape
    total = 0
    for layer in model.layers:
        out = _layer_out_shape(layer, shape)
        total += _layer_forward_flops(layer, shape, out)
        shape = out
    model._flops[key] = total
    return total


def flops(model: ModelState, batch_shape) -> int:
    """FLOPs of one forward+backward pass (backward counted as twice the forward)."""
    return 3 * forward_flops(model, batch_shape)
