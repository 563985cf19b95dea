"""Dense layers, MLPs, Adam with cosine decay, and binary parameter snapshots."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Node, ShapeError

ACTIVATIONS = ("identity", "relu", "sigmoid")


@dataclass
class LinearLayer:
    weights: Node  # out x in
    bias: Node  # out
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def __call__(self, x: Node) -> Node:
        if x.value.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"linear: input shape {x.shape} does not match weights {self.weights.shape}")
        h = ad.add(ad.matmul(x, ad.transpose(self.weights)), self.bias)
        if self.activation == "relu":
            return ad.relu(h)
        if self.activation == "sigmoid":
            return ad.sigmoid(h)
        return h


@dataclass
class Mlp:
    layers: list[LinearLayer]

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"mlp: layer dims {a.weights.shape} -> {b.weights.shape} do not conform")

    def __call__(self, x: Node) -> Node:
        return forward_mlp(self, x)

    @property
    def sizes(self) -> list[int]:
        return [self.layers[0].in_dim] + [l.out_dim for l in self.layers]

    def parameters(self) -> list[Node]:
        out = []
        for layer in self.layers:
            out += [layer.weights, layer.bias]
        return out

    def named_parameters(self, prefix: str) -> list[tuple[str, Node]]:
        out = []
        for i, layer in enumerate(self.layers):
            out.append((f"{prefix}.{i}.weight", layer.weights))
            out.append((f"{prefix}.{i}.bias", layer.bias))
        return out


def init_params(sizes: list[int], seed: int, hidden: str = "relu",
                output: str = "identity") -> Mlp:
    """Glorot-uniform weights, zero biases; deterministic in ``seed``."""
    if len(sizes) < 2:
        raise ValueError(f"layer-size list needs at least two entries, got {sizes}")
    if any(int(s) <= 0 for s in sizes):
        raise ValueError(f"layer sizes must be positive, got {sizes}")
    rng = np.random.default_rng(seed)
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
        a = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-a, a, size=(fan_out, fan_in))
        act = output if i == len(sizes) - 2 else hidden
        layers.append(LinearLayer(Node(w, requires_grad=True), Node(np.zeros(fan_out), requires_grad=True), act))
    return Mlp(layers)


def forward_mlp(net: Mlp, x: Node) -> Node:
    h = ad.as_node(x)
    for layer in net.layers:
        h = layer(h)
    return h


# -------------------------------------------------------------------- Adam

def cosine_lr(step: int, total_steps: int, max_lr: float) -> float:
    return 0.5 * max_lr * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class AdamState:
    max_lr: float
    total_steps: int
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.max_lr <= 0 or self.total_steps <= 0:
            raise ValueError("max_lr and total_steps must be positive")

    @property
    def lr(self) -> float:
        return cosine_lr(self.step_count, self.total_steps, self.max_lr)


def adam_step(params: list[Node], grads: list[np.ndarray | None], state: AdamState) -> None:
    """One bias-corrected Adam update in place.

    A ``None`` gradient means the parameter took no part in the loss: it and
    its moments are left untouched.
    """
    if len(params) != len(grads):
        raise ShapeError(f"adam: {len(params)} params but {len(grads)} grads")
    if state.step_count >= state.total_steps:
        raise RuntimeError(f"adam: schedule exhausted ({state.total_steps} steps)")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p.value) for p in params]
        state.second_moment = [np.zeros_like(p.value) for p in params]
    lr = state.lr
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape or state.first_moment[i].shape != p.shape:
            raise ShapeError(f"adam: gradient shape {g.shape} does not match parameter {p.shape}")
        m = state.first_moment[i]
        v = state.second_moment[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.value = p.value - lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    state.step_count += 1


# ------------------------------------------------------ binary snapshots

MAGIC = b"DDAM"
VERSION = 1


def save_tensors(path, tensors: list[tuple[str, np.ndarray]]) -> None:
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", VERSION)
    for name, arr in tensors:
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes(order="C")
    Path(path).write_bytes(bytes(buf))


def load_tensors(path) -> list[tuple[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a parameter snapshot (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported snapshot version {version}")
    pos = 8
    out = []
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(dims)
            pos += 8 * count
            out.append((name, arr.astype(np.float64)))
    except (struct.error, ValueError) as exc:
        raise ValueError(f"{path}: truncated or corrupt snapshot") from exc
    return out
