"""
Invariant suite behind the ``selfcheck`` command.

Each check is small enough to finish in seconds and returns a ``Check``
carrying the measured quantity next to its threshold.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from ._accel import HAS_NUMBA
from .cost_model import CostBudget, LayerCostSpec, expected_flops, flops_loss, flops_of_arch
from .meta_kernel import CandidateSet, effective_kernel, roi_indicators, summed_mask
from .sampler import gumbel_probs, sample_gumbel, softmax_probs
from .supernet import NetConfig, SuperNet, _forward, loss_terms, verify_equivalence
from .tensor import Tape, Tensor, backward, depthwise_conv2d, finite_diff_check


@dataclass
class Check:
    name: str
    ok: bool
    value: float
    threshold: float
    detail: str = ""

    def line(self):
        return f"{'PASS' if self.ok else 'FAIL'} {self.name}: {self.value:.3g} (limit {self.threshold:g}) {self.detail}".rstrip()


def random_candidates(rng):
    pool = [(1, 1), (1, 3), (3, 1), (3, 3), (3, 5), (5, 3), (5, 5), (7, 7), (1, 5), (5, 1)]
    n = int(rng.integers(1, 5))
    picks = rng.choice(len(pool), size=n, replace=False)
    return CandidateSet(tuple(pool[i] for i in sorted(picks)), include_none=bool(rng.integers(0, 2)))


def additivity_case(rng):
    """Relative gap between one convolution with the summed kernel and the
    probability-weighted sum of per-candidate convolutions."""
    cands = random_candidates(rng)
    mh, mw = cands.meta_shape
    c = int(rng.integers(1, 4))
    size = int(rng.integers(max(mh, mw), 11))
    stride = int(rng.integers(1, 3))
    x = rng.normal(size=(int(rng.integers(1, 3)), c, size, size))
    meta = rng.normal(size=(c, 1, mh, mw))
    probs = rng.dirichlet(np.ones(cands.size))
    pad = ((mh - 1) // 2, (mw - 1) // 2)
    ind = roi_indicators(cands)
    single = depthwise_conv2d(x, effective_kernel(meta, summed_mask(probs[None], ind)), stride, pad).data
    multi = np.zeros_like(single)
    for i in range(cands.size):
        multi += probs[i] * depthwise_conv2d(x, meta * ind[i], stride, pad).data
    return float(np.max(np.abs(single - multi)) / max(np.max(np.abs(multi)), 1e-300))


def check_additivity(n=20, seed=0):
    rng = np.random.default_rng(seed)
    worst = max(additivity_case(rng) for _ in range(n))
    return Check("additivity", worst < 1e-12, worst, 1e-12, f"over {n} cases")


def small_net(rng, image_size=8):
    cfg = NetConfig(image_size=image_size, num_classes=3, stem_channels=3, widths=(4, 6),
                    out_channels=(3, 4), strides=(1, 2))
    net = SuperNet(cfg, seed=int(rng.integers(1 << 30)))
    for layer in net.layers:
        layer.alpha.data = rng.normal(0, 1.0, layer.alpha.shape)
    # zero betas put whole pixels exactly on a relu kink, where central
    # differences see half a slope; generic values avoid that
    for name, t in net.named_tensors():
        if name.endswith("_beta") or name == "head_b":
            t.data = rng.normal(0, 0.1, t.shape)
        elif name.endswith("_gamma"):
            t.data = 1.0 + rng.normal(0, 0.1, t.shape)
    return net


def check_equivalence(n=5, seed=0):
    rng = np.random.default_rng(seed)
    worst, counts_ok = 0.0, True
    for _ in range(n):
        net = small_net(rng)
        x = rng.normal(size=(2, 1, 8, 8))
        res = verify_equivalence(net, x)
        worst = max(worst, res.deviation)
        n_paths = sum(1 for s in net.candidates.shapes)
        counts_ok &= res.single_path_convs == [1] * len(net.layers)
        counts_ok &= res.multi_path_convs == [n_paths] * len(net.layers)
    return Check("equivalence", worst < 1e-10 and counts_ok, worst, 1e-10,
                 "conv counts ok" if counts_ok else "conv counts WRONG")


def supernet_loss_fn(net, x, y, budget, step=3):
    specs = net.cost_specs()

    def f(_):
        logits, probs = _forward(net, x, step, "soft")
        return loss_terms(logits, y, [softmax_probs(a) for a in net.alphas()], specs, budget,
                          net.fixed_cost).total
    return f


def check_gradients(seed=0, eps=1e-4, max_coords=12):
    rng = np.random.default_rng(seed)
    net = small_net(rng, image_size=6)
    net.total_steps = 10
    x = rng.normal(size=(2, 1, 6, 6))
    y = np.array([0, 2])
    budget = CostBudget(net.fixed_cost * 0.5)   # keeps the +log branch active
    params = net.weights() + net.alphas()
    err = finite_diff_check(supernet_loss_fn(net, x, y, budget), params, eps=eps, max_coords=max_coords)
    return Check("gradients", err < 1e-4, err, 1e-4, f"w and alpha, eps={eps:g}")


def check_flops_loss():
    budget = CostBudget(100.0, 0.1)
    worst = 0.0
    for e, want in ((85.0, -np.log(85.0)), (120.0, np.log(120.0))):
        worst = max(worst, abs(flops_loss(e, budget).item() - want))
    zero_ok = True
    for e in (90.0, 100.0, 110.0):
        t = Tensor(np.array(e), requires_grad=True)
        with Tape() as tape:
            out = flops_loss(t, budget)
        g = backward(out, tape, wrt=[t])[t]
        zero_ok &= out.item() == 0.0 and float(g) == 0.0
    return Check("flops_loss", worst < 1e-12 and zero_ok, worst, 1e-12,
                 "dead band exact" if zero_ok else "dead band NOT zero")


def check_gumbel(n=100_000, seed=0):
    pi = np.array([0.1, 0.2, 0.3, 0.4])
    g = sample_gumbel((n, 4), np.random.default_rng(seed))
    freq = np.bincount(np.argmax(np.log(pi) + g, axis=1), minlength=4) / n
    gap = float(np.max(np.abs(freq - pi)))
    p = gumbel_probs(np.log(pi), 1e-3, g[0]).data
    onehot_ok = p.max() > 1 - 1e-6
    return Check("gumbel", gap < 0.01 and onehot_ok, gap, 0.01,
                 "tau->0 one-hot" if onehot_ok else "tau->0 NOT one-hot")


def check_expected_flops(n=10_000, seed=0):
    rng = np.random.default_rng(seed)
    areas = (0.0, 9.0, 25.0, 49.0)
    specs = [LayerCostSpec((8, 8), 4, areas), LayerCostSpec((4, 4), 6, areas)]
    alphas = [rng.normal(0, 1, (s.channels, 4)) for s in specs]
    exact = expected_flops(alphas, specs, 100.0).item()
    probs = [softmax_probs(a).data for a in alphas]
    total = 0.0
    for _ in range(n):
        arch = [np.array([rng.choice(4, p=row) for row in p]) for p in probs]
        total += flops_of_arch(arch, specs, 100.0)
    rel = abs(total / n - exact) / exact
    return Check("expected_flops", rel < 0.01, rel, 0.01, f"{n} samples")


def check_backends(seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 9, 9))
    k = rng.normal(size=(3, 1, 5, 5))
    gy = rng.normal(size=(2, 3, 5, 5))
    prev = kernels.get_backend()
    outs = {}
    try:
        for name in ("numba", "numpy"):
            if name == "numba" and not HAS_NUMBA:
                continue
            kernels.set_backend(name)
            outs[name] = (kernels.depthwise_forward(x, k, 2, 2, 2),) + kernels.depthwise_backward(gy, x, k, 2, 2, 2)
    finally:
        kernels.set_backend(prev)
    if len(outs) < 2:
        return Check("backends", True, 0.0, 1e-12, "numba unavailable, skipped")
    gap = max(float(np.max(np.abs(a - b))) for a, b in zip(outs["numba"], outs["numpy"]))
    return Check("backends", gap < 1e-12, gap, 1e-12, "numba vs numpy")


CHECKS = (check_additivity, check_equivalence, check_gradients, check_flops_loss, check_gumbel,
          check_expected_flops, check_backends)


def run_all():
    return [fn() for fn in CHECKS]
