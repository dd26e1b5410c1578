"""
FLOPs accounting and the budget-band cost loss.

FLOPs are counted as multiply-accumulate operations throughout.  A searched
depthwise layer costs H' * W' * area per filter for the chosen candidate
(zero for None); everything else in the network is a fixed constant.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor, add, as_tensor, log, matmul, scale, tsum


@dataclass
class CostBudget:
    target: float
    eta: float = 0.1
    lambda_cost: float = 2.0

    def __post_init__(self):
        if not self.target > 0:
            raise ValueError("budget target must be positive")
        if not 0 <= self.eta < 1:
            raise ValueError("eta must lie in [0, 1)")
        if self.lambda_cost < 0:
            raise ValueError("lambda_cost must be non-negative")

    @property
    def band(self):
        return self.target * (1 - self.eta), self.target * (1 + self.eta)


@dataclass(frozen=True)
class LayerCostSpec:
    out_hw: tuple
    channels: int
    areas: tuple
    stride: int = 1

    @property
    def positions(self):
        return self.out_hw[0] * self.out_hw[1]


def conv_macs(out_h, out_w, c_in, c_out, kh, kw, groups=1):
    return out_h * out_w * c_out * (c_in // groups) * kh * kw


def linear_macs(n_in, n_out):
    return n_in * n_out


def flops_of_arch(arch: Sequence, specs: Sequence[LayerCostSpec], fixed_cost: float = 0.0) -> float:
    """Cost of a concrete per-filter choice of candidate indices."""
    if len(arch) != len(specs):
        raise ValueError(f"{len(arch)} layers of choices for {len(specs)} specs")
    total = float(fixed_cost)
    for choices, spec in zip(arch, specs):
        choices = np.asarray(choices)
        if choices.shape != (spec.channels,):
            raise ValueError(f"expected {spec.channels} choices, got {choices.shape}")
        if choices.min() < 0 or choices.max() >= len(spec.areas):
            raise ValueError("candidate index out of range")
        areas = np.asarray(spec.areas, dtype=np.float64)
        for idx in choices:
            total += spec.positions * areas[idx]
    return total


def expected_flops_from_probs(probs: Sequence, specs: Sequence[LayerCostSpec],
                              fixed_cost: float = 0.0) -> Tensor:
    """Expected cost given per-layer candidate probabilities (F, M) or shared (1, M)."""
    total = None
    for p, spec in zip(probs, specs):
        p = as_tensor(p)
        areas = np.asarray(spec.areas, dtype=np.float64).reshape(-1, 1)
        per_filter = matmul(p, areas)
        weight = spec.positions * (spec.channels if p.shape[0] == 1 else 1)
        term = scale(tsum(per_filter), weight)
        total = term if total is None else add(total, term)
    if total is None:
        return as_tensor(float(fixed_cost))
    return add(total, float(fixed_cost))


def expected_flops(alphas: Sequence, specs: Sequence[LayerCostSpec], fixed_cost: float = 0.0) -> Tensor:
    from .sampler import softmax_probs
    return expected_flops_from_probs([softmax_probs(a) for a in alphas], specs, fixed_cost)


def flops_loss(expected, budget: CostBudget) -> Tensor:
    """-log E below the band, +log E above it, exactly zero inside."""
    expected = as_tensor(expected)
    value = expected.item()
    lo, hi = budget.band
    if value < lo:
        if value <= 0:
            raise ValueError("expected FLOPs must be positive below the budget band")
        return scale(log(expected), -1.0)
    if value > hi:
        return log(expected)
    return scale(expected, 0.0)
