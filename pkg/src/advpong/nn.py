"""Minimal dense/conv policy-network engine in numpy.

Forward pass, backprop to parameters, and backprop to the *input frame*
(the quantity gradient-sign attacks need).  Two heads share a torso: 6
action logits and a scalar value estimate.  Parameters live in a plain
ordered dict of float arrays; float32 is the storage dtype, loss-side
reductions accumulate in float64, and gradient checks run entirely in
float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

from .minipong import Frame

CE_FLOOR = 1e-12


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Architecture:
    """Network layout: input size plus a torso ending in a flat feature vector.

    Torso layer specs: ("conv", filters, kernel, stride), ("elu",),
    ("flatten",), ("dense", units).  Policy and value heads are implicit.
    """

    height: int
    width: int
    layers: tuple[tuple, ...]
    n_actions: int = 6

    @staticmethod
    def conv_default(height: int = 42, width: int = 42) -> "Architecture":
        return Architecture(
            height=height,
            width=width,
            layers=(
                ("conv", 8, 4, 2),
                ("elu",),
                ("conv", 8, 4, 2),
                ("elu",),
                ("flatten",),
                ("dense", 64),
                ("elu",),
            ),
        )

    @staticmethod
    def mlp(height: int, width: int, hidden: int = 64) -> "Architecture":
        return Architecture(
            height=height,
            width=width,
            layers=(("flatten",), ("dense", hidden), ("elu",)),
        )

    def to_json_dict(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "layers": [list(spec) for spec in self.layers],
            "n_actions": self.n_actions,
        }

    @staticmethod
    def from_json_dict(d: dict) -> "Architecture":
        return Architecture(
            height=int(d["height"]),
            width=int(d["width"]),
            layers=tuple(tuple(spec) for spec in d["layers"]),
            n_actions=int(d["n_actions"]),
        )


@dataclass
class PolicyOutput:
    logits: np.ndarray  # (6,) or (B, 6)
    value: np.ndarray   # scalar array or (B,)


# -- layer plans -------------------------------------------------------------


class _Conv:
    def __init__(self, name: str, in_shape: tuple, filters: int, kernel: int, stride: int):
        c, h, w = in_shape
        oh = (h - kernel) // stride + 1
        ow = (w - kernel) // stride + 1
        if oh <= 0 or ow <= 0:
            raise ShapeMismatch(f"conv {name}: kernel {kernel} too large for input {in_shape}")
        self.name = name
        self.in_shape = in_shape
        self.out_shape = (filters, oh, ow)
        self.k = kernel * kernel * c
        self.filters = filters
        # flat gather indices (patches, kernel-elements) into (C*H*W)
        rows = (np.arange(oh) * stride)[:, None] + np.arange(kernel)[None, :]  # (OH, k)
        cols = (np.arange(ow) * stride)[:, None] + np.arange(kernel)[None, :]  # (OW, k)
        chan = np.arange(c)
        idx = (
            chan[None, None, :, None, None] * (h * w)
            + rows[:, None, None, :, None] * w
            + cols[None, :, None, None, :]
        )  # (OH, OW, C, k, k)
        self.idx = idx.reshape(oh * ow, self.k)
        self.param_shapes = {f"{name}/w": (filters, c, kernel, kernel), f"{name}/b": (filters,)}

    def forward(self, x, params):
        b = x.shape[0]
        xflat = x.reshape(b, -1)
        cols = xflat[:, self.idx]                       # (B, P, K)
        wmat = params[f"{self.name}/w"].reshape(self.filters, self.k)
        y = cols @ wmat.T + params[f"{self.name}/b"]    # (B, P, F)
        f, oh, ow = self.out_shape
        return y.transpose(0, 2, 1).reshape(b, f, oh, ow), cols

    def backward(self, dy, cache, params, grads):
        cols = cache
        b = dy.shape[0]
        f, oh, ow = self.out_shape
        dyf = dy.reshape(b, f, oh * ow).transpose(0, 2, 1)          # (B, P, F)
        wmat = params[f"{self.name}/w"].reshape(f, self.k)
        grads[f"{self.name}/w"] = np.tensordot(dyf, cols, axes=([0, 1], [0, 1])).reshape(
            params[f"{self.name}/w"].shape
        )
        grads[f"{self.name}/b"] = dyf.sum(axis=(0, 1))
        dcols = dyf @ wmat                                           # (B, P, K)
        dxflat = np.zeros((b, int(np.prod(self.in_shape))), dtype=dy.dtype)
        np.add.at(dxflat, (np.arange(b)[:, None, None], self.idx[None, :, :]), dcols)
        return dxflat.reshape(b, *self.in_shape)


class _Dense:
    def __init__(self, name: str, in_shape: tuple, units: int):
        if len(in_shape) != 1:
            raise ShapeMismatch(f"dense {name} needs flat input, got {in_shape}")
        self.name = name
        self.in_dim = in_shape[0]
        self.out_shape = (units,)
        self.param_shapes = {f"{name}/w": (self.in_dim, units), f"{name}/b": (units,)}

    def forward(self, x, params):
        return x @ params[f"{self.name}/w"] + params[f"{self.name}/b"], x

    def backward(self, dy, cache, params, grads):
        x = cache
        grads[f"{self.name}/w"] = x.T @ dy
        grads[f"{self.name}/b"] = dy.sum(axis=0)
        return dy @ params[f"{self.name}/w"].T


class _Elu:
    param_shapes: dict = {}

    def __init__(self, in_shape: tuple):
        self.out_shape = in_shape

    def forward(self, x, params):
        y = np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))
        return y, y

    def backward(self, dy, cache, params, grads):
        y = cache
        return dy * np.where(y > 0, 1.0, y + 1.0)


class _Flatten:
    param_shapes: dict = {}

    def __init__(self, in_shape: tuple):
        self.in_shape = in_shape
        self.out_shape = (int(np.prod(in_shape)),)

    def forward(self, x, params):
        return x.reshape(x.shape[0], -1), None

    def backward(self, dy, cache, params, grads):
        return dy.reshape(dy.shape[0], *self.in_shape)


@lru_cache(maxsize=32)
def _build_plan(arch: Architecture):
    layers = []
    shape = (1, arch.height, arch.width)
    counts = {"conv": 0, "dense": 0}
    for spec in arch.layers:
        kind = spec[0]
        if kind == "conv":
            layer = _Conv(f"conv{counts['conv']}", shape, *spec[1:])
            counts["conv"] += 1
        elif kind == "dense":
            layer = _Dense(f"dense{counts['dense']}", shape, spec[1])
            counts["dense"] += 1
        elif kind == "elu":
            layer = _Elu(shape)
        elif kind == "flatten":
            layer = _Flatten(shape)
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
        layers.append(layer)
        shape = layer.out_shape
    if len(shape) != 1:
        raise ShapeMismatch("torso must end in a flat feature vector (add ('flatten',))")
    feat = shape[0]
    heads = {
        "policy/w": (feat, arch.n_actions),
        "policy/b": (arch.n_actions,),
        "value/w": (feat, 1),
        "value/b": (1,),
    }
    return layers, feat, heads


def param_shapes(arch: Architecture) -> dict[str, tuple]:
    layers, _, heads = _build_plan(arch)
    shapes: dict[str, tuple] = {}
    for layer in layers:
        shapes.update(layer.param_shapes)
    shapes.update(heads)
    return shapes


def init_params(arch: Architecture, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    """He-scaled init for torso weights, small-scale heads, zero biases."""
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(arch).items():
        if name.endswith("/b"):
            arr = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:])) if name.startswith("conv") else shape[0]
            scale = 0.01 if name.startswith(("policy", "value")) else np.sqrt(2.0 / fan_in)
            arr = (rng.standard_normal(shape) * scale).astype(dtype)
        params[name] = arr
    return params


# -- forward / backward ------------------------------------------------------


def _as_batch(frames, arch: Architecture):
    """Accept Frame, (H,W), (B,H,W) or flat pixels; return ((B,1,H,W), squeeze)."""
    if isinstance(frames, Frame):
        frames = frames.image
    x = np.asarray(frames)
    hw = (arch.height, arch.width)
    if x.ndim == 1 and x.size == arch.height * arch.width:
        x = x.reshape(hw)
    if x.shape[-2:] != hw:
        raise ShapeMismatch(f"frame shape {x.shape} does not match input {hw}")
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    return x.reshape(x.shape[0], 1, *hw), squeeze


def _forward_cached(params, arch: Architecture, xb):
    layers, _, _ = _build_plan(arch)
    dtype = next(iter(params.values())).dtype
    h = xb.astype(dtype, copy=False)
    caches = []
    for layer in layers:
        h, cache = layer.forward(h, params)
        caches.append(cache)
    logits = h @ params["policy/w"] + params["policy/b"]
    value = (h @ params["value/w"] + params["value/b"])[:, 0]
    return logits, value, (caches, h)


def forward(params: dict, arch: Architecture, frames) -> PolicyOutput:
    """Policy logits and value estimate; accepts one frame or a batch."""
    xb, squeeze = _as_batch(frames, arch)
    logits, value, _ = _forward_cached(params, arch, xb)
    if not np.all(np.isfinite(logits)) or not np.all(np.isfinite(value)):
        raise FloatingPointError("non-finite network output")
    if squeeze:
        return PolicyOutput(logits=logits[0], value=value[0])
    return PolicyOutput(logits=logits, value=value)


def _backward(params, arch: Architecture, cache_bundle, dlogits, dvalue):
    layers, _, _ = _build_plan(arch)
    caches, feat = cache_bundle
    dtype = feat.dtype
    dlogits = np.asarray(dlogits, dtype=dtype)
    dvalue = np.asarray(dvalue, dtype=dtype)
    grads: dict[str, np.ndarray] = {}
    grads["policy/w"] = feat.T @ dlogits
    grads["policy/b"] = dlogits.sum(axis=0)
    grads["value/w"] = feat.T @ dvalue[:, None]
    grads["value/b"] = dvalue.sum(axis=0, keepdims=True)
    dh = dlogits @ params["policy/w"].T + dvalue[:, None] @ params["value/w"].T
    for layer, cache in zip(reversed(layers), reversed(caches)):
        dh = layer.backward(dh, cache, params, grads)
    return grads, dh[:, 0]  # (B, H, W)


def gradients(params: dict, arch: Architecture, frames, loss_spec) -> tuple[float, dict, np.ndarray]:
    """Backprop a head-level loss; returns (loss, param grads, input grad)."""
    xb, squeeze = _as_batch(frames, arch)
    logits, value, cache = _forward_cached(params, arch, xb)
    loss, dlogits, dvalue = loss_spec(logits, value)
    grads, dinput = _backward(params, arch, cache, dlogits, dvalue)
    if squeeze:
        dinput = dinput[0]
    return float(loss), grads, dinput


def param_gradients(params: dict, arch: Architecture, frames, loss_spec) -> tuple[float, dict]:
    loss, grads, _ = gradients(params, arch, frames, loss_spec)
    return loss, grads


def input_gradient(params: dict, arch: Architecture, frame, loss_spec) -> tuple[float, np.ndarray]:
    loss, _, dinput = gradients(params, arch, frame, loss_spec)
    if not np.all(np.isfinite(dinput)):
        raise FloatingPointError("non-finite input gradient")
    return loss, dinput


# -- losses ------------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    """Stable softmax over the last axis."""
    z = np.asarray(logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs: np.ndarray, target: int | np.ndarray) -> float:
    """-log p[target]; target is an index or a one-hot vector."""
    p = np.asarray(probs, dtype=np.float64)
    if np.ndim(target) == 0:
        pt = p[..., int(target)]
    else:
        pt = (p * np.asarray(target, dtype=np.float64)).sum(axis=-1)
    return float(np.sum(-np.log(np.maximum(pt, CE_FLOOR))))


def entropy(probs: np.ndarray) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    plogp = np.where(p > 0, p * np.log(np.maximum(p, CE_FLOOR)), 0.0)
    return -plogp.sum(axis=-1)


LossSpec = Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray, np.ndarray]]


def self_crossentropy_spec() -> LossSpec:
    """Cross-entropy between the policy distribution and its own argmax.

    The attack loss: increasing it moves probability mass away from the
    action the policy currently prefers.  The argmax target is a constant
    (no gradient flows through it).
    """

    def spec(logits, value):
        p = softmax(logits)
        targets = np.argmax(logits, axis=-1)
        onehot = np.eye(logits.shape[-1], dtype=np.float64)[targets]
        loss = cross_entropy(p, onehot)
        dlogits = p - onehot
        return loss, dlogits, np.zeros_like(value)

    return spec


def logit_pick_spec(k: int) -> LossSpec:
    """Loss = sum of logit k (linear probe, handy for analytic checks)."""

    def spec(logits, value):
        dlogits = np.zeros_like(logits)
        dlogits[..., k] = 1.0
        return float(np.sum(logits[..., k], dtype=np.float64)), dlogits, np.zeros_like(value)

    return spec


def value_sum_spec() -> LossSpec:
    def spec(logits, value):
        return float(np.sum(value, dtype=np.float64)), np.zeros_like(logits), np.ones_like(value)

    return spec


# -- optimizer ---------------------------------------------------------------


def rmsprop_init(params: dict) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in params.items()}


def rmsprop_step(
    params: dict,
    grads: dict,
    state: dict,
    lr: float = 1e-3,
    decay: float = 0.99,
    eps: float = 1e-8,
) -> tuple[dict, dict]:
    """One shared-statistics RMSProp update; returns new params and state."""
    new_params = {}
    new_state = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
        s = (state[name] * decay + (1.0 - decay) * np.square(g)).astype(p.dtype)
        new_state[name] = s
        new_params[name] = (p - lr * g / (np.sqrt(s) + eps)).astype(p.dtype)
    return new_params, new_state
