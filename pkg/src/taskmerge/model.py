"""Small fully connected classifier over a flat parameter vector.

Weights are stored ``(out, in)`` so a layer computes ``W @ x + b``.  The flat
layout follows ``shape_map`` order: for each layer its weight (row-major)
then its bias.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .errors import DomainError

ACTIVATIONS = ("relu", "tanh")


class LayerShape(NamedTuple):
    name: str
    kind: str  # "weight" | "bias"
    rows: int
    cols: int

    @property
    def size(self) -> int:
        return self.rows * self.cols


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int = 16
    hidden_dims: tuple[int, ...] = (32, 32)
    num_classes: int = 4
    activation: str = "relu"
    frozen_head: bool = False
    # (start, stop) window of head outputs exposed as logits; None = all.
    # A task-specific view shares the full parameter layout.
    output_window: tuple[int, int] | None = None

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.num_classes)
        if any(d < 1 for d in dims):
            raise DomainError(f"all layer sizes must be >= 1, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise DomainError(f"unknown activation {self.activation!r}")
        if self.output_window is not None:
            lo, hi = (int(v) for v in self.output_window)
            if not 0 <= lo < hi <= self.num_classes:
                raise DomainError(f"output window {self.output_window} outside 0..{self.num_classes}")
            object.__setattr__(self, "output_window", (lo, hi))

    def restricted(self, window: tuple[int, int] | None) -> ModelSpec:
        """Same network, logits limited to the head rows in ``window``."""
        return replace(self, output_window=window)

    @property
    def num_outputs(self) -> int:
        if self.output_window is None:
            return self.num_classes
        return self.output_window[1] - self.output_window[0]

    @property
    def layer_dims(self) -> list[tuple[str, int, int]]:
        """(name, fan_in, fan_out) per affine layer; the last one is ``head``."""
        dims = (self.input_dim, *self.hidden_dims, self.num_classes)
        names = [f"fc{i}" for i in range(len(self.hidden_dims))] + ["head"]
        return [(names[i], dims[i], dims[i + 1]) for i in range(len(names))]

    def shape_map(self) -> tuple[LayerShape, ...]:
        out = []
        for name, fan_in, fan_out in self.layer_dims:
            out.append(LayerShape(name, "weight", fan_out, fan_in))
            out.append(LayerShape(name, "bias", fan_out, 1))
        return tuple(out)

    @property
    def num_params(self) -> int:
        return sum(s.size for s in self.shape_map())

    def summary(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "num_classes": self.num_classes,
            "activation": self.activation,
            "frozen_head": self.frozen_head,
        }

    def _window(self) -> slice:
        w = self.output_window
        return slice(None) if w is None else slice(w[0], w[1])


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat parameter vector with the layer layout needed to unflatten it."""

    values: np.ndarray
    shape_map: tuple[LayerShape, ...] = field(default=())

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise DomainError(f"parameter values must be 1-D, got shape {v.shape}")
        smap = tuple(LayerShape(*s) for s in self.shape_map)
        if sum(s.size for s in smap) != v.size:
            raise DomainError(
                f"shape_map covers {sum(s.size for s in smap)} entries, vector has {v.size}"
            )
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "shape_map", smap)

    @classmethod
    def zeros(cls, spec_or_map) -> ParamVector:
        smap = spec_or_map.shape_map() if isinstance(spec_or_map, ModelSpec) else tuple(spec_or_map)
        return cls(np.zeros(sum(LayerShape(*s).size for s in smap)), smap)

    def __len__(self) -> int:
        return self.values.size

    def like(self, values) -> ParamVector:
        return ParamVector(values, self.shape_map)

    def check_compatible(self, other: ParamVector) -> None:
        if self.shape_map != other.shape_map:
            raise DomainError("parameter vectors have different shape maps")

    def __add__(self, other: ParamVector) -> ParamVector:
        self.check_compatible(other)
        return self.like(self.values + other.values)

    def __sub__(self, other: ParamVector) -> ParamVector:
        self.check_compatible(other)
        return self.like(self.values - other.values)

    def __mul__(self, c: float) -> ParamVector:
        return self.like(self.values * float(c))

    __rmul__ = __mul__

    def __neg__(self) -> ParamVector:
        return self.like(-self.values)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def slices(self) -> dict[tuple[str, str], slice]:
        out = {}
        offset = 0
        for s in self.shape_map:
            out[(s.name, s.kind)] = slice(offset, offset + s.size)
            offset += s.size
        return out

    def layers(self) -> dict[tuple[str, str], np.ndarray]:
        """Structured view ``{(name, kind): array}``; biases come back 1-D."""
        return unflatten(self)

    def layer_norms(self) -> dict[str, float]:
        return {f"{k[0]}.{k[1]}": float(np.linalg.norm(v)) for k, v in self.layers().items()}

    def allclose(self, other: ParamVector, atol: float = 0.0, rtol: float = 0.0) -> bool:
        return self.shape_map == other.shape_map and bool(
            np.allclose(self.values, other.values, atol=atol, rtol=rtol)
        )


def flatten(layers: dict[tuple[str, str], np.ndarray], shape_map) -> ParamVector:
    """Inverse of :func:`unflatten`."""
    smap = tuple(LayerShape(*s) for s in shape_map)
    chunks = []
    for s in smap:
        if (s.name, s.kind) not in layers:
            raise DomainError(f"missing layer {s.name}.{s.kind}")
        a = np.asarray(layers[(s.name, s.kind)], dtype=np.float64)
        if a.size != s.size:
            raise DomainError(f"layer {s.name}.{s.kind} has {a.size} entries, expected {s.size}")
        chunks.append(a.reshape(-1))
    if len(layers) != len(smap):
        raise DomainError("layer dict has entries not present in the shape map")
    return ParamVector(np.concatenate(chunks) if chunks else np.zeros(0), smap)


def unflatten(theta: ParamVector) -> dict[tuple[str, str], np.ndarray]:
    out = {}
    offset = 0
    for s in theta.shape_map:
        chunk = theta.values[offset : offset + s.size]
        out[(s.name, s.kind)] = chunk.reshape(s.rows) if s.kind == "bias" else chunk.reshape(s.rows, s.cols)
        offset += s.size
    return out


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ParamVector:
    """He-uniform weights, zero biases."""
    layers = {}
    for name, fan_in, fan_out in spec.layer_dims:
        bound = np.sqrt(6.0 / fan_in)
        layers[(name, "weight")] = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        layers[(name, "bias")] = np.zeros(fan_out)
    return flatten(layers, spec.shape_map())


def trainable_mask(spec: ModelSpec) -> np.ndarray:
    """Boolean mask over the flat layout; False on frozen coordinates."""
    mask = np.ones(spec.num_params, dtype=bool)
    if spec.frozen_head:
        offset = 0
        for s in spec.shape_map():
            if s.name == "head":
                mask[offset : offset + s.size] = False
            offset += s.size
    return mask


def _check(spec: ModelSpec, theta: ParamVector, x: np.ndarray) -> None:
    if theta.shape_map != spec.shape_map():
        raise DomainError("parameter layout does not match the model spec")
    if x.shape[-1] != spec.input_dim:
        raise DomainError(f"input has dimension {x.shape[-1]}, expected {spec.input_dim}")


def _act(spec: ModelSpec, a: np.ndarray) -> np.ndarray:
    return np.maximum(a, 0.0) if spec.activation == "relu" else np.tanh(a)


def _forward(spec: ModelSpec, layers, X: np.ndarray):
    """Return logits and the per-layer inputs/pre-activations for backprop."""
    inputs = []
    pre = []
    h = X
    names = [n for n, _, _ in spec.layer_dims]
    for i, name in enumerate(names):
        W = layers[(name, "weight")]
        b = layers[(name, "bias")]
        inputs.append(h)
        a = h @ W.T + b
        if i < len(names) - 1:
            pre.append(a)
            h = _act(spec, a)
        else:
            h = a
    return h, inputs, pre


def forward_logits(spec: ModelSpec, theta: ParamVector, x) -> np.ndarray:
    """Logits for one input (1-D) or a batch (2-D, one row per sample)."""
    x = np.asarray(x, dtype=np.float64)
    _check(spec, theta, x)
    single = x.ndim == 1
    X = x[None, :] if single else x
    logits, _, _ = _forward(spec, unflatten(theta), X)
    logits = logits[:, spec._window()]
    return logits[0] if single else logits


def backprop(spec: ModelSpec, theta: ParamVector, X: np.ndarray, dlogits_fn):
    """Generic reverse pass.

    ``dlogits_fn(logits) -> (loss, dL/dlogits)`` supplies the loss head; the
    return value is ``(loss, gradient ParamVector)``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    _check(spec, theta, X)
    if X.shape[0] == 0:
        raise DomainError("empty batch")
    layers = unflatten(theta)
    logits, inputs, pre = _forward(spec, layers, X)
    win = spec._window()
    loss, dwin = dlogits_fn(logits[:, win])
    delta = np.zeros_like(logits)
    delta[:, win] = dwin
    grads = {}
    names = [n for n, _, _ in spec.layer_dims]
    for i in range(len(names) - 1, -1, -1):
        name = names[i]
        grads[(name, "weight")] = delta.T @ inputs[i]
        grads[(name, "bias")] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ layers[(name, "weight")]
            a = pre[i - 1]
            if spec.activation == "relu":
                delta = delta * (a > 0)
            else:
                delta = delta * (1.0 - np.tanh(a) ** 2)
    if spec.frozen_head:
        grads[("head", "weight")] = np.zeros_like(grads[("head", "weight")])
        grads[("head", "bias")] = np.zeros_like(grads[("head", "bias")])
    return float(loss), flatten(grads, theta.shape_map)
