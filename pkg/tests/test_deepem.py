import math

import numpy as np
import pytest

from gmmda import autodiff as ad
from gmmda.autodiff import Node, finite_difference_check
from gmmda.critic import CriticWeights, adversarial_loss
from gmmda.deepem import (EBlock, _cross_entropy, consistency_loss, deepem_estimate, e_block_forward, m_block,
                          pretrain_eblock)
from gmmda.gmm_em import (DegenerateComponentError, default_init, e_step, fit_em, m_step,
                          responsibilities)
from gmmda.trainer import synthetic_predictions


def zero_final(eb):
    eb.net.layers[-1].weights.value = np.zeros_like(eb.net.layers[-1].weights.value)
    return eb


def bimodal(seed, n=400):
    rng = np.random.default_rng(seed)
    return synthetic_predictions(rng, n // 8, 8).reshape(-1)


def test_uniform_eblock_rows():
    eb = zero_final(EBlock.create(0))
    g = e_block_forward(eb, Node(np.linspace(0, 1, 7)))
    assert g.shape == (7, 2)
    assert np.array_equal(g.value, np.full((7, 2), 0.5))


def test_pointwise_sharing():
    g = e_block_forward(EBlock.create(1), Node(np.full((3, 4), 0.3))).value
    assert np.all(g == g[0])


def test_eblock_shape_validation():
    with pytest.raises(ValueError):
        EBlock.create(0, [2, 16, 2])


def test_m_block_hard_assignment():
    p = m_block(Node([0.0, 0.0, 1.0, 1.0]), Node(np.array([[1, 0], [1, 0], [0, 1], [0, 1]], float)),
                var_eps=0)
    assert np.array_equal(p.pi.value, [.5, .5]) and np.array_equal(p.mu.value, [0, 1])


def test_m_block_reorders_by_mean():
    p = m_block(Node([0.0, 0.0, 1.0, 1.0]), Node(np.array([[0, 1], [0, 1], [1, 0], [1, 0]], float)))
    assert np.array_equal(p.mu.value, [0, 1]) and p.order == (1, 0)


def test_m_block_degenerate():
    with pytest.raises(DegenerateComponentError):
        m_block(Node([0.1, 0.2]), Node(np.array([[1.0, 0.0], [1.0, 0.0]])))


def test_m_block_matches_m_step():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(2, 60))
        z = rng.random(n)
        gamma = rng.dirichlet([1.0, 1.0], size=n)
        ours = m_block(Node(z), Node(gamma), var_eps=0).to_gmm()
        ref = m_step(z, gamma)
        for a, b in ((ours.pi, ref.pi), (ours.mu, ref.mu), (ours.sigma, ref.sigma)):
            assert np.abs(a - b).max() <= 1e-10


def test_uniform_estimate_collapses_means():
    z = np.random.default_rng(2).random((6, 3))
    p = deepem_estimate(zero_final(EBlock.create(0)), Node(z))
    assert np.allclose(p.mu.value, z.mean(), atol=1e-12)


def test_constant_z():
    p = deepem_estimate(EBlock.create(0), Node(np.full(10, 0.3)))
    assert np.allclose(p.mu.value, 0.3)
    assert np.allclose(p.sigma.value, math.sqrt(1e-8))  # variance guard dominates the 1e-4 floor


def test_constant_z_exact_mode_hits_floor():
    p = m_block(Node(np.full(10, 0.3)), Node(np.full((10, 2), 0.5)), 1e-4, var_eps=0)
    assert np.array_equal(p.sigma.value, [1e-4, 1e-4])


@pytest.fixture(scope="module")
def trained():
    z = bimodal(7, 512)
    eb = EBlock.create(3)
    curve = pretrain_eblock(eb, z, steps=600)
    return eb, z, curve


def test_trained_low_values_go_low(trained):
    eb, z, _ = trained
    p = deepem_estimate(eb, Node(z))
    low_col = p.order[0]
    g = e_block_forward(eb, Node(z[z < 0.1])).value
    assert np.all(g[:, low_col] > 0.9)
    oracle = e_step(fit_em(z)[0], z[z < 0.1])
    assert np.all(oracle[:, 0] > 0.9)


def test_trained_matches_em(trained):
    eb, z, _ = trained
    ours = deepem_estimate(eb, Node(z)).to_gmm()
    ref, _ = fit_em(z, default_init(z))
    assert np.abs(ours.mu - ref.mu).max() <= 0.05


def test_consistency_curve_trends_down():
    z = bimodal(11)
    eb = EBlock.create(5)
    curve = pretrain_eblock(eb, z, steps=200, warm_steps=0)
    best = np.minimum.accumulate(curve)
    assert np.all(np.diff(best) <= 0)
    assert np.mean(curve[-20:]) < np.mean(curve[:20])


def test_consistency_uniform_vs_hard_target():
    eb = zero_final(EBlock.create(0))
    z = np.array([0.0, 0.0, 1.0, 1.0])
    gamma = Node(np.array([[1, 0], [1, 0], [0, 1], [0, 1]], float))
    params = m_block(Node(z), gamma)  # hard posteriors after separation
    loss = consistency_loss(eb, z, params=params)
    assert loss.value == pytest.approx(math.log(2), abs=1e-12)


def test_consistency_minimum_is_entropy():
    z = bimodal(1, 64)
    eb = EBlock.create(0)
    params = deepem_estimate(eb, Node(z))
    gamma = e_block_forward(eb, Node(z)).value
    # with params from this E-block, the target equals exact posteriors; the loss at
    # target == output would be the entropy, which lower-bounds the cross-entropy
    loss = consistency_loss(eb, z, params=params).value
    inv = np.argsort(params.order)
    post = responsibilities(z, params.pi.value[inv], params.mu.value[inv], params.sigma.value[inv])
    entropy = -np.mean(np.sum(post * np.log(np.clip(post, 1e-300, None)), axis=1))
    assert loss >= entropy - 1e-12
    assert _cross_entropy(Node(post), post).value == pytest.approx(entropy, abs=1e-12)
    assert not np.allclose(gamma, post)


def _critic_of_z(eb, zt, w):
    def f(zs):
        return adversarial_loss(deepem_estimate(eb, zs), deepem_estimate(eb, Node(zt)), w)
    return f


def test_critic_gradient_wrt_z():
    rng = np.random.default_rng(8)
    eb = EBlock.create(4)
    zs = synthetic_predictions(rng, 6, 4)
    zt = synthetic_predictions(rng, 6, 4)
    rep = finite_difference_check(_critic_of_z(eb, zt, CriticWeights(.3, .7)), zs, tol=1e-4)
    assert rep.passed, rep.max_rel_error


def _swap(eb, old, new):
    for layer in eb.net.layers:
        if layer.weights is old:
            layer.weights = new
        if layer.bias is old:
            layer.bias = new


def test_critic_gradient_wrt_eblock_params():
    rng = np.random.default_rng(9)
    eb = EBlock.create(6)
    zs, zt = synthetic_predictions(rng, 6, 4), synthetic_predictions(rng, 6, 4)
    for param in eb.parameters():
        def f(leaf, param=param):
            _swap(eb, param, leaf)
            try:
                return adversarial_loss(deepem_estimate(eb, Node(zs)), deepem_estimate(eb, Node(zt)))
            finally:
                _swap(eb, leaf, param)
        rep = finite_difference_check(f, param.value.copy(), tol=1e-4)
        assert rep.passed, rep.max_rel_error
