import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metakernel.cost_model import (CostBudget, LayerCostSpec, conv_macs, expected_flops,
                                   expected_flops_from_probs, flops_loss, flops_of_arch, linear_macs)
from metakernel.sampler import sample_gumbel, softmax_probs
from metakernel.tensor import Tape, Tensor, backward, scale

from oracles import enumerate_expected_cost, macs_loop

AREAS = (0, 9, 25, 49)


def test_flops_of_arch_examples():
    spec = LayerCostSpec((8, 8), 4, AREAS)
    assert flops_of_arch([[1, 1, 1, 1]], [spec]) == macs_loop((8, 8), [9] * 4) == 2304
    assert flops_of_arch([[0, 0, 0, 0]], [spec], fixed_cost=17) == 17
    assert flops_of_arch([[1, 1, 2, 2]], [spec]) == macs_loop((8, 8), [9, 9, 25, 25]) == 4352


def test_flops_of_arch_errors():
    spec = LayerCostSpec((8, 8), 2, AREAS)
    with pytest.raises(ValueError):
        flops_of_arch([[0, 4]], [spec])
    with pytest.raises(ValueError):
        flops_of_arch([[0, -1]], [spec])
    with pytest.raises(ValueError):
        flops_of_arch([[0, 1, 1]], [spec])
    with pytest.raises(ValueError):
        flops_of_arch([], [spec])


def test_mac_helpers():
    assert conv_macs(4, 4, 3, 8, 3, 3) == 4 * 4 * 8 * 3 * 9
    assert conv_macs(4, 4, 8, 8, 3, 3, groups=8) == 4 * 4 * 8 * 9
    assert linear_macs(16, 10) == 160


def test_expected_flops_examples():
    spec = LayerCostSpec((8, 8), 1, (0, 9, 25))
    e = expected_flops_from_probs([np.array([[0.5, 0.25, 0.25]])], [spec]).item()
    assert e == pytest.approx(enumerate_expected_cost((8, 8), [0.5, 0.25, 0.25], [0, 9, 25]), abs=1e-12)
    assert e == pytest.approx(544.0, abs=1e-12)
    spec = LayerCostSpec((8, 8), 1, (9, 25, 49))
    e = expected_flops_from_probs([np.full((1, 3), 1 / 3)], [spec]).item()
    assert e == pytest.approx(64 * 83 / 3, rel=1e-14)


def test_expected_flops_one_hot_matches_concrete():
    specs = [LayerCostSpec((8, 8), 3, AREAS), LayerCostSpec((4, 4), 2, AREAS)]
    arch = [[0, 3, 2], [1, 1]]
    probs = [np.eye(4)[a] for a in arch]
    assert expected_flops_from_probs(probs, specs, 100.0).item() == flops_of_arch(arch, specs, 100.0)


def test_shared_alpha_row_counts_every_filter():
    spec = LayerCostSpec((4, 4), 5, AREAS)
    row = np.array([[0.1, 0.2, 0.3, 0.4]])
    full = np.repeat(row, 5, axis=0)
    assert expected_flops_from_probs([row], [spec]).item() == pytest.approx(
        expected_flops_from_probs([full], [spec]).item(), rel=1e-14)


def test_budget_validation():
    assert CostBudget(100.0).band == pytest.approx((90.0, 110.0))
    for kw in ({"target": 0.0}, {"target": 1.0, "eta": 1.0}, {"target": 1.0, "eta": -0.1},
               {"target": 1.0, "lambda_cost": -1.0}):
        with pytest.raises(ValueError):
            CostBudget(**kw)


def _loss_and_grad(e, budget):
    x = Tensor(np.array(float(e)), requires_grad=True)
    with Tape() as tape:
        loss = flops_loss(x, budget)
    return loss.item(), float(backward(loss, tape)[x])


def test_flops_loss_branches():
    b = CostBudget(100.0, 0.1)
    for e in (90.0, 100.0, 110.0, 95.5):
        assert _loss_and_grad(e, b) == (0.0, 0.0)
    val, grad = _loss_and_grad(85.0, b)
    assert val == pytest.approx(-4.4427, abs=5e-5)
    assert abs(val - (-math.log(85.0))) <= 1e-12 and abs(grad - (-1 / 85.0)) <= 1e-12
    val, grad = _loss_and_grad(120.0, b)
    assert val == pytest.approx(4.7875, abs=5e-5)
    assert abs(val - math.log(120.0)) <= 1e-12 and abs(grad - 1 / 120.0) <= 1e-12


def test_flops_loss_rejects_nonpositive_below_band():
    with pytest.raises(ValueError):
        flops_loss(0.0, CostBudget(100.0))


def test_gradient_above_band_favours_small_kernels():
    spec = LayerCostSpec((8, 8), 2, AREAS)
    alpha = Tensor(np.zeros((2, 4)), requires_grad=True)
    budget = CostBudget(100.0)
    with Tape() as tape:
        loss = scale(flops_loss(expected_flops([alpha], [spec]), budget), budget.lambda_cost)
    g = backward(loss, tape)[alpha]
    # gradient descent raises the logit of the smallest area and lowers the largest
    assert np.all(g[:, 0] < 0) and np.all(g[:, 3] > 0)
    moved = Tensor(alpha.data - 0.5 * g)
    after = flops_loss(expected_flops([moved], [spec]), budget).item()
    assert after < loss.item() / budget.lambda_cost


def _mc_check(alphas, specs, fixed, rng, n=10_000):
    exp = expected_flops(alphas, specs, fixed).item()
    total = 0.0
    for a, spec in zip(alphas, specs):
        logp = np.log(softmax_probs(a).data)
        g = sample_gumbel((n,) + a.shape, rng)
        idx = np.argmax(logp + g, axis=-1)
        total += float(np.asarray(spec.areas, dtype=np.float64)[idx].sum()) * spec.positions
    mc = fixed + total / n
    return abs(mc - exp) / exp


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_expected_matches_monte_carlo(seed):
    rng = np.random.default_rng(seed)
    specs = [LayerCostSpec((6, 6), 3, AREAS), LayerCostSpec((3, 3), 4, AREAS)]
    alphas = [rng.normal(0, 1.5, (3, 4)), rng.normal(0, 1.5, (4, 4))]
    assert _mc_check(alphas, specs, 50.0, rng) < 0.01


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_expected_flops_bounds(channels, hw, seed):
    rng = np.random.default_rng(seed)
    spec = LayerCostSpec((hw, hw), channels, AREAS)
    p = rng.dirichlet(np.ones(4), size=channels)
    e = expected_flops_from_probs([p], [spec]).item()
    assert 0 <= e <= hw * hw * channels * 49 + 1e-9
    loop = sum(enumerate_expected_cost((hw, hw), row, AREAS) for row in p)
    assert e == pytest.approx(loop, rel=1e-12, abs=1e-12)
