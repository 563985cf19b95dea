"""Single-pass differentiable GMM estimation.

An E-block network maps each prediction scalar to soft responsibilities and a
closed-form M-block turns those into mixture parameters, all as graph ops.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .gmm_em import SIGMA_FLOOR, DegenerateComponentError, Gmm2, default_init, e_step, responsibilities
from .nn import AdamState, Mlp, adam_step, init_params

EBLOCK_SIZES = [1, 16, 16, 2]
VAR_EPS = 1e-8
MIN_COLUMN_MASS = 1e-8


@dataclass
class EBlock:
    net: Mlp

    @classmethod
    def create(cls, seed: int, sizes: list[int] | None = None) -> "EBlock":
        sizes = sizes or EBLOCK_SIZES
        if sizes[0] != 1 or sizes[-1] != 2:
            raise ValueError(f"E-block must map 1 -> 2, got sizes {sizes}")
        return cls(init_params(sizes, seed, hidden="relu", output="identity"))

    def parameters(self) -> list[Node]:
        return self.net.parameters()


@dataclass
class GmmParamsNode:
    """Mixture parameters as (2,)-shaped graph nodes, ordered by ascending mean.

    ``order`` maps sorted position to the E-block column it came from.
    """
    pi: Node
    mu: Node
    sigma: Node
    order: tuple[int, int] = (0, 1)

    def to_gmm(self) -> Gmm2:
        return Gmm2.from_arrays(self.pi.value, self.mu.value, self.sigma.value)

    def as_dict(self) -> dict:
        return {"pi": self.pi.value.tolist(), "mu": self.mu.value.tolist(),
                "sigma": self.sigma.value.tolist()}


def _flat_column(z: Node) -> Node:
    return ad.reshape(z, (z.size, 1))


def e_block_forward(eb: EBlock, z: Node) -> Node:
    """(B*C) x 2 responsibility matrix, one shared MLP applied to every entry of ``z``."""
    logits = eb.net(_flat_column(ad.as_node(z)))
    return ad.softmax_rows(logits)


def m_block(z: Node, gamma: Node, sigma_floor: float = SIGMA_FLOOR,
            var_eps: float = VAR_EPS) -> GmmParamsNode:
    z = _flat_column(ad.as_node(z))
    gamma = ad.as_node(gamma)
    n = z.shape[0]
    if gamma.shape != (n, 2):
        raise ad.ShapeError(f"m_block: gamma shape {gamma.shape} does not match {n} samples")
    nk = ad.sum(gamma, axis=0)
    if np.any(nk.value <= MIN_COLUMN_MASS):
        raise DegenerateComponentError(
            f"m_block: component {int(np.argmin(nk.value))} has near-zero responsibility mass")
    pi = ad.scalar_mul(nk, 1.0 / n)
    mu = ad.div(ad.sum(ad.mul(gamma, z), axis=0), nk)
    centred = ad.sub(z, mu)  # n x 2
    var = ad.div(ad.sum(ad.mul(gamma, ad.square(centred)), axis=0), nk)
    if var_eps > 0:
        sigma = ad.sqrt(ad.add(var, var_eps))
    else:
        # exact-moment mode for oracle comparisons; sqrt(0) handled by the floor
        sigma = ad.sqrt(ad.maximum(var, 1e-300))
    sigma = ad.maximum(sigma, sigma_floor)
    order = (0, 1) if mu.value[0] <= mu.value[1] else (1, 0)
    if order != (0, 1):
        idx = np.array(order)
        pi, mu, sigma = ad.getitem(pi, idx), ad.getitem(mu, idx), ad.getitem(sigma, idx)
    return GmmParamsNode(pi, mu, sigma, order)


def deepem_estimate(eb: EBlock, z: Node, sigma_floor: float = SIGMA_FLOOR) -> GmmParamsNode:
    z = ad.as_node(z)
    return m_block(z, e_block_forward(eb, z), sigma_floor)


def _cross_entropy(gamma: Node, target: np.ndarray) -> Node:
    log_gamma = ad.log(ad.clip(gamma, 1e-300, None))
    return ad.scalar_mul(ad.sum(ad.mul(Node(target), log_gamma)), -1.0 / target.shape[0])


def consistency_loss(eb: EBlock, z, sigma_floor: float = SIGMA_FLOOR,
                     params: GmmParamsNode | None = None) -> Node:
    """Cross-entropy of the E-block against exact posteriors under its own M-block fit.

    ``z`` is detached: this term trains only the E-block.  The target is a
    constant computed from ``params`` (or a fresh estimate), in E-block column order.
    """
    zc = Node(ad.as_node(z).value)
    gamma = e_block_forward(eb, zc)
    if params is None:
        params = m_block(zc, gamma, sigma_floor)
    inv = np.argsort(params.order)
    target = responsibilities(zc.value, params.pi.value[inv], params.mu.value[inv],
                              params.sigma.value[inv])
    return _cross_entropy(gamma, target)


def pretrain_eblock(eb: EBlock, z, steps: int = 1000, lr: float = 1e-2, warm_steps: int = 100,
                    sigma_floor: float = SIGMA_FLOOR) -> list[float]:
    """Consistency-train an E-block on a fixed sample; returns the loss curve.

    The first ``warm_steps`` fit posteriors under the quantile initialisation
    (column 0 = low component) so self-consistency starts from a separated
    mixture rather than a near-symmetric one.
    """
    zc = Node(np.asarray(ad.as_node(z).value, dtype=float).reshape(-1, 1))
    params = eb.parameters()
    state = AdamState(max_lr=lr, total_steps=steps + warm_steps)
    warm_target = e_step(default_init(zc.value, sigma_floor), zc.value) if warm_steps else None
    curve = []
    for i in range(steps + warm_steps):
        ad.zero_grad(params)
        if i < warm_steps:
            loss = _cross_entropy(e_block_forward(eb, zc), warm_target)
        else:
            loss = consistency_loss(eb, zc, sigma_floor)
            curve.append(float(loss.value))
        ad.backward(loss)
        adam_step(params, [p.grad for p in params], state)
    return curve
