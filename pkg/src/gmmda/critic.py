"""Discrepancy measures between source and target prediction distributions."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from . import autodiff as ad
from .autodiff import Node
from .deepem import GmmParamsNode, VAR_EPS
from .gmm_em import SIGMA_FLOOR
from .nn import Mlp, init_params

CRITICS = ("w2", "kl", "w1", "kmeans", "discriminator", "none")
PROB_CLAMP = 1e-7
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class DegenerateClusterError(ValueError):
    pass


@dataclass(frozen=True)
class CriticWeights:
    alpha1: float = 0.5
    alpha2: float = 0.5

    def __post_init__(self):
        if self.alpha1 < 0 or self.alpha2 < 0 or self.alpha1 + self.alpha2 <= 0:
            raise ValueError(f"critic weights must be nonnegative with positive sum, got "
                             f"({self.alpha1}, {self.alpha2})")

    def __iter__(self):
        return iter((self.alpha1, self.alpha2))


# ------------------------------------------------------- closed forms (floats)

def w2_squared(g1: tuple[float, float], g2: tuple[float, float]) -> float:
    (m1, s1), (m2, s2) = g1, g2
    return (m1 - m2) ** 2 + (s1 - s2) ** 2


def w2(g1, g2) -> float:
    return math.sqrt(w2_squared(g1, g2))


def kl_gaussian(g1: tuple[float, float], g2: tuple[float, float]) -> float:
    """KL(N(m1, s1^2) || N(m2, s2^2))."""
    (m1, s1), (m2, s2) = g1, g2
    return math.log(s2 / s1) + (s1 * s1 + (m1 - m2) ** 2) / (2.0 * s2 * s2) - 0.5


def _w1_value_and_grads(a: float, b: float) -> tuple[float, float, float]:
    """E|a + bZ| for standard normal Z, with its partials in a and b."""
    if b == 0.0:
        return abs(a), float(np.sign(a)), 0.0
    # Z is symmetric, so only |b| matters for the value
    r = a / abs(b)
    phi = math.exp(-0.5 * r * r) / math.sqrt(2.0 * math.pi)
    da = 1.0 - 2.0 * float(ndtr(-r))
    value = abs(b) * _SQRT_2_OVER_PI * math.exp(-0.5 * r * r) + a * da
    db = 2.0 * math.copysign(1.0, b) * phi
    return value, da, db


def w1_gaussian(g1: tuple[float, float], g2: tuple[float, float]) -> float:
    """1-Wasserstein distance between univariate Gaussians (comonotone coupling)."""
    (m1, s1), (m2, s2) = g1, g2
    return _w1_value_and_grads(m1 - m2, s1 - s2)[0]


# ------------------------------------------------------------- graph forms

def _pair(params: GmmParamsNode, k: int) -> tuple[Node, Node]:
    return ad.getitem(params.mu, k), ad.getitem(params.sigma, k)


def _w2_node(ms: Node, ss: Node, mt: Node, st: Node) -> Node:
    return ad.add(ad.square(ad.sub(ms, mt)), ad.square(ad.sub(ss, st)))


def _kl_node(ms: Node, ss: Node, mt: Node, st: Node) -> Node:
    num = ad.add(ad.square(ss), ad.square(ad.sub(ms, mt)))
    return ad.add(ad.sub(ad.log(ad.div(st, ss)), 0.5),
                  ad.div(num, ad.scalar_mul(ad.square(st), 2.0)))


def _w1_node(ms: Node, ss: Node, mt: Node, st: Node) -> Node:
    a = ad.sub(ms, mt)
    b = ad.sub(ss, st)
    value, da, db = _w1_value_and_grads(float(a.value), float(b.value))
    return ad._make(np.asarray(value), (a, lambda g: g * da), (b, lambda g: g * db))


_KERNELS = {"w2": _w2_node, "kl": _kl_node, "w1": _w1_node}


def _weighted(src: GmmParamsNode, tgt: GmmParamsNode, w: CriticWeights, kernel) -> Node:
    total = None
    for k, alpha in enumerate(w):
        if alpha == 0:
            continue
        ms, ss = _pair(src, k)
        mt, st = _pair(tgt, k)
        term = ad.scalar_mul(kernel(ms, ss, mt, st), alpha)
        total = term if total is None else ad.add(total, term)
    return total


def adversarial_loss(src: GmmParamsNode, tgt: GmmParamsNode,
                     w: CriticWeights = CriticWeights(), kind: str = "w2") -> Node:
    """Weighted sum over paired components of a Gaussian discrepancy (squared W2 by default).

    Mixture weights do not enter.  Components are paired by position, which
    is ascending mean on both sides.
    """
    try:
        kernel = _KERNELS[kind]
    except KeyError:
        raise ValueError(f"unknown Gaussian critic {kind!r}") from None
    return _weighted(src, tgt, w, kernel)


# ------------------------------------------------------------------ k-means

def lloyd_1d(xs: np.ndarray, max_iters: int = 50) -> np.ndarray:
    """Hard 2-means labels (0 = low cluster), initialised at min and max."""
    xs = np.asarray(xs, dtype=float).reshape(-1)
    c = np.array([xs.min(), xs.max()])
    labels = np.zeros(xs.size, dtype=int)
    for _ in range(max_iters):
        labels = (np.abs(xs - c[1]) < np.abs(xs - c[0])).astype(int)
        new = np.array([xs[labels == k].mean() if np.any(labels == k) else c[k] for k in (0, 1)])
        if np.array_equal(new, c):
            break
        c = new
    return labels


def kmeans_params(z: Node, sigma_floor: float = SIGMA_FLOOR) -> GmmParamsNode:
    """Per-cluster mean/stddev as graph ops over frozen hard assignments."""
    z = ad.as_node(z)
    z = ad.reshape(z, (z.size, 1))
    if np.unique(z.value).size < 2:
        raise DegenerateClusterError("k-means critic needs at least two distinct values")
    labels = lloyd_1d(z.value)
    mask = np.stack([labels == 0, labels == 1], axis=1).astype(float)
    counts = mask.sum(axis=0)
    if np.any(counts == 0):
        raise DegenerateClusterError("k-means produced an empty cluster")
    m = Node(mask)
    inv = Node(1.0 / counts)
    mu = ad.mul(ad.sum(ad.mul(m, z), axis=0), inv)
    var = ad.mul(ad.sum(ad.mul(m, ad.square(ad.sub(z, mu))), axis=0), inv)
    sigma = ad.maximum(ad.sqrt(ad.add(var, VAR_EPS)), sigma_floor)
    pi = Node(counts / counts.sum())
    order = (0, 1) if mu.value[0] <= mu.value[1] else (1, 0)
    if order != (0, 1):
        idx = np.array(order)
        mu, sigma, pi = ad.getitem(mu, idx), ad.getitem(sigma, idx), ad.getitem(pi, idx)
    return GmmParamsNode(pi, mu, sigma, order)


def kmeans_critic(z_src: Node, z_tgt: Node, w: CriticWeights = CriticWeights(),
                  sigma_floor: float = SIGMA_FLOOR) -> Node:
    return _weighted(kmeans_params(z_src, sigma_floor), kmeans_params(z_tgt, sigma_floor), w, _w2_node)


# ------------------------------------------------------------ discriminator

@dataclass
class Discriminator:
    net: Mlp

    @classmethod
    def create(cls, in_dim: int, seed: int, hidden: int = 16) -> "Discriminator":
        return cls(init_params([in_dim, hidden, 1], seed, hidden="relu", output="identity"))

    def __call__(self, f: Node) -> Node:
        return ad.sigmoid(self.net(f))

    def parameters(self) -> list[Node]:
        return self.net.parameters()


def discriminator_loss(d: Discriminator, f_src: Node, f_tgt: Node) -> Node:
    """mean(-log d(src)) + mean(-log(1 - d(tgt))), probabilities clamped away from 0 and 1."""
    p_s = ad.clip(d(f_src), PROB_CLAMP, 1.0 - PROB_CLAMP)
    p_t = ad.clip(d(f_tgt), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return ad.neg(ad.add(ad.mean(ad.log(p_s)), ad.mean(ad.log(ad.sub(1.0, p_t)))))
