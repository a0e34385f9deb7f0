"""Layer specifications, parameter initialization, and the Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .tensor import (Tensor, ShapeError, add, conv2d, conv_transpose2d, matmul,
                     relu, reshape, sigmoid, tanh, transpose)

ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh, "none": None}


@dataclass(frozen=True)
class LayerSpec:
    """One layer of an encoder or decoder stack.

    kind is one of dense / conv2d / conv_transpose2d / activation. Dense
    layers use (in_size, out_size); convolutional kinds use channel counts
    plus (kernel, stride, padding); activation layers carry only a name.
    """
    kind: str
    in_size: int = 0
    out_size: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    activation: str = "none"

    def __post_init__(self):
        if self.kind not in ("dense", "conv2d", "conv_transpose2d", "activation"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "activation":
            if self.activation not in ACTIVATIONS or self.activation == "none":
                raise ValueError(f"unknown activation {self.activation!r}")
        else:
            if self.in_size <= 0 or self.out_size <= 0:
                raise ValueError(f"{self.kind}: extents must be positive")
        if self.kind in ("conv2d", "conv_transpose2d"):
            if self.kernel <= 0 or self.stride < 1 or self.padding < 0:
                raise ValueError(f"{self.kind}: bad (kernel, stride, padding)="
                                 f"({self.kernel}, {self.stride}, {self.padding})")


def dense(in_size: int, out_size: int) -> LayerSpec:
    return LayerSpec("dense", in_size=in_size, out_size=out_size)


def conv(in_ch: int, out_ch: int, kernel: int, stride: int = 1, padding: int = 0) -> LayerSpec:
    return LayerSpec("conv2d", in_size=in_ch, out_size=out_ch,
                     kernel=kernel, stride=stride, padding=padding)


def conv_t(in_ch: int, out_ch: int, kernel: int, stride: int = 1, padding: int = 0) -> LayerSpec:
    return LayerSpec("conv_transpose2d", in_size=in_ch, out_size=out_ch,
                     kernel=kernel, stride=stride, padding=padding)


def activation(name: str) -> LayerSpec:
    return LayerSpec("activation", activation=name)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


class ParamStore:
    """Ordered named parameter tensors plus per-parameter Adam state."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.state: dict[str, AdamState] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True)
        self.params[name] = t
        self.state[name] = AdamState(np.zeros_like(t.data), np.zeros_like(t.data))
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, t in self.params.items():
            out.add(name, t.data.copy())
            st = self.state[name]
            out.state[name] = AdamState(st.m.copy(), st.v.copy(), st.t)
        return out


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype)


def chain_shapes(specs: Sequence[LayerSpec], in_shape: tuple) -> list[tuple]:
    """Propagate a data shape (without batch axis) through a layer chain.

    A dense layer after a convolutional shape flattens implicitly; a
    convolutional layer after a flat shape reinterprets it as (C, 1, 1).
    Raises ShapeError naming the offending layer on any inconsistency.
    """
    shapes = [tuple(in_shape)]
    cur = tuple(in_shape)
    for i, spec in enumerate(specs):
        if spec.kind == "activation":
            shapes.append(cur)
            continue
        if spec.kind == "dense":
            flat = int(np.prod(cur))
            if flat != spec.in_size:
                raise ShapeError(f"layer {i} (dense): expects {spec.in_size} inputs, "
                                 f"chain provides shape {cur}")
            cur = (spec.out_size,)
        else:
            if len(cur) == 1:
                if cur[0] != spec.in_size:
                    raise ShapeError(f"layer {i} ({spec.kind}): cannot reshape {cur} "
                                     f"to {spec.in_size} channels")
                cur = (spec.in_size, 1, 1)
            if len(cur) != 3 or cur[0] != spec.in_size:
                raise ShapeError(f"layer {i} ({spec.kind}): expects {spec.in_size} "
                                 f"channels, chain provides shape {cur}")
            c, h, w = cur
            k, s, p = spec.kernel, spec.stride, spec.padding
            if spec.kind == "conv2d":
                oh = (h + 2 * p - k) // s + 1
                ow = (w + 2 * p - k) // s + 1
            else:
                oh = (h - 1) * s - 2 * p + k
                ow = (w - 1) * s - 2 * p + k
            if oh <= 0 or ow <= 0:
                raise ShapeError(f"layer {i} ({spec.kind}): non-positive output "
                                 f"extent from input {cur}")
            cur = (spec.out_size, oh, ow)
        shapes.append(cur)
    return shapes


def init_params(specs: Sequence[LayerSpec], seed: int, in_shape: tuple,
                prefix: str = "layer", store: Optional[ParamStore] = None,
                dtype=np.float32) -> ParamStore:
    """Glorot-uniform weights, zero biases, deterministic in the seed."""
    chain_shapes(specs, in_shape)
    rng = np.random.default_rng(seed)
    if store is None:
        store = ParamStore()
    for i, spec in enumerate(specs):
        name = f"{prefix}{i}"
        if spec.kind == "dense":
            w = _glorot(rng, (spec.out_size, spec.in_size),
                        spec.in_size, spec.out_size, dtype)
            store.add(f"{name}.weight", w)
            store.add(f"{name}.bias", np.zeros(spec.out_size, dtype=dtype))
        elif spec.kind == "conv2d":
            k = spec.kernel
            w = _glorot(rng, (spec.out_size, spec.in_size, k, k),
                        spec.in_size * k * k, spec.out_size * k * k, dtype)
            store.add(f"{name}.weight", w)
            store.add(f"{name}.bias", np.zeros(spec.out_size, dtype=dtype))
        elif spec.kind == "conv_transpose2d":
            k = spec.kernel
            w = _glorot(rng, (spec.in_size, spec.out_size, k, k),
                        spec.in_size * k * k, spec.out_size * k * k, dtype)
            store.add(f"{name}.weight", w)
            store.add(f"{name}.bias", np.zeros(spec.out_size, dtype=dtype))
    return store


def apply_layers(store: ParamStore, prefix: str, specs: Sequence[LayerSpec],
                 x: Tensor) -> Tensor:
    """Run a batch through a layer chain (implicit flatten / unflatten)."""
    for i, spec in enumerate(specs):
        name = f"{prefix}{i}"
        if spec.kind == "activation":
            x = ACTIVATIONS[spec.activation](x)
        elif spec.kind == "dense":
            if x.ndim > 2:
                x = reshape(x, (x.shape[0], -1))
            w, b = store[f"{name}.weight"], store[f"{name}.bias"]
            x = add(matmul(x, transpose(w)), b)
        else:
            if x.ndim == 2:
                x = reshape(x, (x.shape[0], x.shape[1], 1, 1))
            w, b = store[f"{name}.weight"], store[f"{name}.bias"]
            if spec.kind == "conv2d":
                x = conv2d(x, w, b, stride=spec.stride, padding=spec.padding)
            else:
                x = conv_transpose2d(x, w, b, stride=spec.stride, padding=spec.padding)
    return x


def adam_step(store: ParamStore, grads: dict[str, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParamStore:
    """Bias-corrected Adam update, applied in place; returns the store."""
    for name, p in store.params.items():
        if name not in grads:
            raise KeyError(f"adam_step: missing gradient for parameter {name!r}")
        g = np.asarray(grads[name], dtype=p.data.dtype)
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: gradient shape {g.shape} != parameter "
                             f"shape {p.data.shape} for {name!r}")
        st = store.state[name]
        st.t += 1
        st.m = beta1 * st.m + (1.0 - beta1) * g
        st.v = beta2 * st.v + (1.0 - beta2) * (g * g)
        m_hat = st.m / (1.0 - beta1 ** st.t)
        v_hat = st.v / (1.0 - beta2 ** st.t)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)
    return store


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    total = np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads
    scale = max_norm / total
    return {name: g * scale for name, g in grads.items()}
