"""
Searchable network built from meta-kernel depthwise-separable blocks.

Each block: 1x1 expansion -> affine -> relu -> depthwise conv with a meta
kernel -> relu -> 1x1 projection -> affine.  During search every filter owns
a logit vector over {None, candidates...}; the per-step candidate weights are
folded into one effective kernel so the depthwise layer runs exactly one
convolution.  ``forward_multipath_reference`` keeps the N-convolution
weighted-feature formulation around as an oracle.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .cost_model import (CostBudget, LayerCostSpec, conv_macs, expected_flops_from_probs,
                         flops_loss, flops_of_arch, linear_macs)
from .kernels import output_size
from .meta_kernel import CandidateSet, MetaKernel, effective_kernel, roi_indicators, summed_mask
from .sampler import GumbelConfig, noise_stream, relaxed_probs, softmax_probs, temperature_at
from .tensor import (ShapeError, Tape, Tensor, add, backward, channel_affine, conv2d, cross_entropy,
                     depthwise_conv2d, global_avg_pool, linear, mul, relu, reshape, scale)


@dataclass
class NetConfig:
    in_channels: int = 1
    image_size: int = 24
    num_classes: int = 4
    stem_channels: int = 8
    widths: tuple = (8, 16, 16, 32)
    out_channels: tuple = (4, 8, 8, 16)
    strides: tuple = (1, 2, 1, 2)
    kernel_sizes: tuple = (3, 5, 7)
    include_none: bool = True
    share_alpha: bool = False
    alpha_init_std: float = 1e-3

    def __post_init__(self):
        if not len(self.widths) == len(self.out_channels) == len(self.strides):
            raise ValueError("widths, out_channels and strides must have equal length")

    @property
    def candidates(self):
        return CandidateSet(tuple(self.kernel_sizes), self.include_none)


class SearchableLayer:
    def __init__(self, index, c_in, width, c_out, stride, in_hw, candidates: CandidateSet,
                 rng: np.random.Generator, share_alpha=False, alpha_init_std=1e-3):
        self.index = index
        self.stride = stride
        self.candidates = candidates
        self.in_hw = in_hw
        mh, mw = candidates.meta_shape
        self.padding = ((mh - 1) // 2, (mw - 1) // 2)
        self.out_hw = (output_size(in_hw[0], mh, stride, self.padding[0]),
                       output_size(in_hw[1], mw, stride, self.padding[1]))
        self.c_in, self.width, self.c_out = c_in, width, c_out

        self.expand = Tensor(rng.normal(0, np.sqrt(2.0 / c_in), (width, c_in, 1, 1)), True, "expand")
        self.expand_gamma = Tensor(np.ones(width), True, "expand_gamma")
        self.expand_beta = Tensor(np.zeros(width), True, "expand_beta")
        self.meta = MetaKernel.init(width, candidates, rng)
        rows = 1 if share_alpha else width
        self.alpha = Tensor(rng.normal(0, alpha_init_std, (rows, candidates.size)), True, "alpha")
        self.project = Tensor(rng.normal(0, np.sqrt(1.0 / width), (c_out, width, 1, 1)), True, "project")
        self.project_gamma = Tensor(np.ones(c_out), True, "project_gamma")
        self.project_beta = Tensor(np.zeros(c_out), True, "project_beta")
        self.indicators = roi_indicators(candidates)

    def weights(self):
        return [self.expand, self.expand_gamma, self.expand_beta, self.meta.weights,
                self.project, self.project_gamma, self.project_beta]

    def named_tensors(self):
        p = f"layers.{self.index}."
        return [(p + "expand", self.expand), (p + "expand_gamma", self.expand_gamma),
                (p + "expand_beta", self.expand_beta), (p + "meta", self.meta.weights),
                (p + "alpha", self.alpha), (p + "project", self.project),
                (p + "project_gamma", self.project_gamma), (p + "project_beta", self.project_beta)]

    def cost_spec(self):
        return LayerCostSpec(self.out_hw, self.width, tuple(self.candidates.areas), self.stride)

    def fixed_cost(self):
        h, w = self.in_hw
        oh, ow = self.out_hw
        return conv_macs(h, w, self.c_in, self.width, 1, 1) + conv_macs(oh, ow, self.width, self.c_out, 1, 1)


@dataclass
class PathCounter:
    """Depthwise convolutions and intermediate features per searchable layer."""
    convs: list = field(default_factory=list)
    features: list = field(default_factory=list)

    def reset(self, n_layers):
        self.convs = [0] * n_layers
        self.features = [0] * n_layers


class SuperNet:
    def __init__(self, cfg: NetConfig = None, seed: int = 0, gumbel: GumbelConfig = None):
        self.cfg = cfg = cfg or NetConfig()
        self.seed = seed
        self.gumbel = gumbel or GumbelConfig(seed=seed)
        self.total_steps = 0
        self.fixed_choices: Optional[list] = None
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x1417]))
        cands = cfg.candidates
        c = cfg.stem_channels
        self.stem = Tensor(rng.normal(0, np.sqrt(2.0 / (9 * cfg.in_channels)), (c, cfg.in_channels, 3, 3)),
                           True, "stem")
        self.stem_gamma = Tensor(np.ones(c), True, "stem_gamma")
        self.stem_beta = Tensor(np.zeros(c), True, "stem_beta")
        hw = (cfg.image_size, cfg.image_size)
        self.layers = []
        for i, (width, c_out, stride) in enumerate(zip(cfg.widths, cfg.out_channels, cfg.strides)):
            layer = SearchableLayer(i, c, width, c_out, stride, hw, cands, rng,
                                    cfg.share_alpha, cfg.alpha_init_std)
            self.layers.append(layer)
            c, hw = c_out, layer.out_hw
        self.head_w = Tensor(rng.normal(0, np.sqrt(1.0 / c), (cfg.num_classes, c)), True, "head_w")
        self.head_b = Tensor(np.zeros(cfg.num_classes), True, "head_b")

    @property
    def candidates(self):
        return self.cfg.candidates

    def weights(self):
        out = [self.stem, self.stem_gamma, self.stem_beta]
        for layer in self.layers:
            out += layer.weights()
        return out + [self.head_w, self.head_b]

    def alphas(self):
        return [layer.alpha for layer in self.layers]

    def named_tensors(self):
        out = [("stem", self.stem), ("stem_gamma", self.stem_gamma), ("stem_beta", self.stem_beta)]
        for layer in self.layers:
            out += layer.named_tensors()
        return out + [("head_w", self.head_w), ("head_b", self.head_b)]

    def state_dict(self):
        return {name: t.data.copy() for name, t in self.named_tensors()}

    def load_state_dict(self, state):
        for name, t in self.named_tensors():
            if name not in state:
                raise KeyError(f"missing tensor {name!r} in state")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ShapeError(f"{name}: stored shape {arr.shape} != {t.shape}")
            t.data = arr.copy()

    def cost_specs(self):
        return [layer.cost_spec() for layer in self.layers]

    @property
    def fixed_cost(self):
        cfg = self.cfg
        s = cfg.image_size
        total = conv_macs(s, s, cfg.in_channels, cfg.stem_channels, 3, 3)
        total += sum(layer.fixed_cost() for layer in self.layers)
        total += linear_macs(self.head_w.shape[1], cfg.num_classes)
        return float(total)

    def max_cost(self):
        areas = self.candidates.areas.max()
        return self.fixed_cost + sum(s.positions * s.channels * areas for s in self.cost_specs())

    def fix_architecture(self, arch):
        """Freeze per-filter choices (DerivedArch or list of index arrays)."""
        choices = arch.choices if isinstance(arch, DerivedArch) else arch
        if len(choices) != len(self.layers):
            raise ValueError("architecture depth does not match the network")
        fixed = []
        for layer, ch in zip(self.layers, choices):
            ch = np.asarray(ch, dtype=np.int64)
            if ch.shape != (layer.width,) or ch.min() < 0 or ch.max() >= self.candidates.size:
                raise ValueError(f"invalid choices for layer {layer.index}")
            fixed.append(ch)
        self.fixed_choices = fixed

    def trainable(self):
        """Weights that the optimizer updates (alphas are separate)."""
        return self.weights()


def _layer_probs(net: SuperNet, layer: SearchableLayer, step: int, mode: str) -> Tensor:
    if mode == "fixed":
        if net.fixed_choices is None:
            raise ValueError("network has no fixed architecture")
        ch = net.fixed_choices[layer.index]
        onehot = np.zeros((ch.shape[0], net.candidates.size))
        onehot[np.arange(ch.shape[0]), ch] = 1.0
        return Tensor._wrap(onehot)
    tau = temperature_at(step, net.total_steps, net.gumbel)
    noise = None
    if mode != "plain_softmax":
        noise = noise_stream(net.gumbel.seed, layer.index, step, layer.alpha.shape)
    return relaxed_probs(layer.alpha, tau, noise, mode)


def _block(layer: SearchableLayer, h: Tensor, probs: Tensor, aggregate: str,
           counter: Optional[PathCounter], trace: Optional[list]) -> Tensor:
    h = relu(channel_affine(conv2d(h, layer.expand), layer.expand_gamma, layer.expand_beta))
    if aggregate == "kernel":
        k_eff = effective_kernel(layer.meta, summed_mask(probs, layer.indicators))
        dw = depthwise_conv2d(h, k_eff, layer.stride, layer.padding)
        if counter is not None:
            counter.convs[layer.index] += 1
            counter.features[layer.index] += 1
    elif aggregate == "feature":
        dw = None
        rows = probs.shape[0]
        for i in range(layer.candidates.size):
            if not layer.indicators[i].any():
                continue  # None contributes a zero feature
            k_i = mul(layer.meta.weights, layer.indicators[i].reshape(1, 1, *layer.indicators[i].shape))
            feat = depthwise_conv2d(h, k_i, layer.stride, layer.padding)
            if counter is not None:
                counter.convs[layer.index] += 1
                counter.features[layer.index] += 1
            p_i = reshape(probs @ _unit(layer.candidates.size, i), (1, rows, 1, 1))
            term = mul(feat, p_i)
            dw = term if dw is None else add(dw, term)
        if dw is None:
            oh, ow = layer.out_hw
            dw = Tensor._wrap(np.zeros((h.shape[0], layer.width, oh, ow)))
    else:
        raise ValueError(f"unknown aggregation {aggregate!r}")
    if trace is not None:
        trace.append(dw)
    h = relu(dw)
    return channel_affine(conv2d(h, layer.project), layer.project_gamma, layer.project_beta)


def _unit(n, i):
    v = np.zeros((n, 1))
    v[i, 0] = 1.0
    return v


def _check_batch(net, x):
    cfg = net.cfg
    if x.ndim != 4 or x.shape[1] != cfg.in_channels or x.shape[2:] != (cfg.image_size, cfg.image_size):
        raise ShapeError(f"batch shape {x.shape} does not match "
                         f"(B, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size})")


def _forward(net: SuperNet, batch, step=0, mode=None, aggregate="kernel",
             counter: Optional[PathCounter] = None, trace: Optional[list] = None):
    x = batch if isinstance(batch, Tensor) else Tensor._wrap(np.asarray(batch, dtype=np.float64))
    _check_batch(net, x)
    if mode is None:
        mode = "fixed" if net.fixed_choices is not None else net.gumbel.mode
    if counter is not None:
        counter.reset(len(net.layers))
    h = relu(channel_affine(conv2d(x, net.stem, 1, "same"), net.stem_gamma, net.stem_beta))
    probs = []
    for layer in net.layers:
        p = _layer_probs(net, layer, step, mode)
        probs.append(p)
        h = _block(layer, h, p, aggregate, counter, trace)
    logits = linear(global_avg_pool(h), net.head_w, net.head_b)
    return logits, probs


def _standardize(pre: Tensor, gamma: Tensor, beta: Tensor, eps=1e-8):
    mean = pre.data.mean(axis=(0, 2, 3))
    std = pre.data.std(axis=(0, 2, 3))
    live = std > eps
    gamma.data = np.where(live, 1.0 / np.where(live, std, 1.0), 1.0)
    beta.data = np.where(live, -mean * gamma.data, 0.0)


def calibrate_affine(net: SuperNet, batch, mode=None):
    """Data-dependent init: set every affine so its output is zero-mean,
    unit-variance per channel on ``batch``.  Runs once before training; no
    statistics are kept, so later forward passes stay purely affine."""
    x = Tensor._wrap(np.asarray(batch, dtype=np.float64))
    _check_batch(net, x)
    if mode is None:
        mode = "fixed" if net.fixed_choices is not None else "plain_softmax"
    pre = conv2d(x, net.stem, 1, "same")
    _standardize(pre, net.stem_gamma, net.stem_beta)
    h = relu(channel_affine(pre, net.stem_gamma, net.stem_beta))
    for layer in net.layers:
        pre = conv2d(h, layer.expand)
        _standardize(pre, layer.expand_gamma, layer.expand_beta)
        h = relu(channel_affine(pre, layer.expand_gamma, layer.expand_beta))
        probs = _layer_probs(net, layer, 0, mode)
        k_eff = effective_kernel(layer.meta, summed_mask(probs, layer.indicators))
        h = relu(depthwise_conv2d(h, k_eff, layer.stride, layer.padding))
        pre = conv2d(h, layer.project)
        _standardize(pre, layer.project_gamma, layer.project_beta)
        h = channel_affine(pre, layer.project_gamma, layer.project_beta)


def forward_search(net: SuperNet, batch, step: int = 0, mode: str = None,
                   counter: PathCounter = None, trace: list = None) -> Tensor:
    """Kernel-aggregated forward pass: one depthwise convolution per layer."""
    return _forward(net, batch, step, mode, "kernel", counter, trace)[0]


def forward_multipath_reference(net: SuperNet, batch, step: int = 0, mode: str = "plain_softmax",
                                counter: PathCounter = None, trace: list = None) -> Tensor:
    """Weighted sum of per-candidate features (N convolutions per layer)."""
    return _forward(net, batch, step, mode, "feature", counter, trace)[0]


# ---------------------------------------------------------------------------
# objective

@dataclass
class LossTerms:
    total: Tensor
    ce: Tensor
    flops: Tensor
    expected: Tensor

    def values(self):
        return {"total": self.total.item(), "ce": self.ce.item(),
                "flops_loss": self.flops.item(), "expected_flops": self.expected.item()}


def loss_terms(logits, labels, probs: Sequence, specs, budget: CostBudget, fixed_cost=0.0) -> LossTerms:
    ce = cross_entropy(logits, labels)
    expected = expected_flops_from_probs(probs, specs, fixed_cost)
    fl = flops_loss(expected, budget)
    total = add(ce, scale(fl, budget.lambda_cost))
    return LossTerms(total, ce, fl, expected)


def total_loss(logits, labels, alphas: Sequence, specs, budget: CostBudget, fixed_cost=0.0) -> Tensor:
    """Cross-entropy plus lambda_cost times the budget-band FLOPs loss."""
    return loss_terms(logits, labels, [softmax_probs(a) for a in alphas], specs, budget, fixed_cost).total


# ---------------------------------------------------------------------------
# optimisation

class SGD:
    """Momentum SGD; ``clip_norm`` rescales the joint gradient to at most that norm."""

    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0, clip_norm=None):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        factor = 1.0
        if self.clip_norm:
            norm = np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in self.params if p.grad is not None))
            if norm > self.clip_norm:
                factor = self.clip_norm / norm
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad if factor == 1.0 else p.grad * factor
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= lr * v

    def state(self):
        return [v.copy() for v in self.velocity]

    def load_state(self, velocity):
        self.velocity = [np.array(v, dtype=np.float64) for v in velocity]


class Adam:
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad * p.grad
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self):
        return {"t": self.t, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}

    def load_state(self, state):
        self.t = int(state["t"])
        self.m = [np.array(a, dtype=np.float64) for a in state["m"]]
        self.v = [np.array(a, dtype=np.float64) for a in state["v"]]


def cosine_lr(base, step, total_steps):
    if total_steps <= 0:
        return base
    return 0.5 * base * (1.0 + np.cos(np.pi * min(step, total_steps) / total_steps))


@dataclass
class StepResult:
    total: float
    ce: float
    flops_loss: float
    expected_flops: float
    tau: float
    lr: float


def search_step(net: SuperNet, batch, labels, opt_w: SGD, opt_a, step: int,
                budget: CostBudget, update_alpha=True, cost_from_gumbel=False,
                lr_schedule="cosine") -> StepResult:
    """One iteration: kernel-aggregated forward, backward, update w then alpha."""
    fixed = net.fixed_choices is not None
    with Tape() as tape:
        logits, probs = _forward(net, batch, step)
        if fixed:
            ce = cross_entropy(logits, labels)
            terms = LossTerms(ce, ce, Tensor._wrap(np.zeros(())), Tensor._wrap(np.zeros(())))
        else:
            cost_probs = probs if cost_from_gumbel else [softmax_probs(a) for a in net.alphas()]
            terms = loss_terms(logits, labels, cost_probs, net.cost_specs(), budget, net.fixed_cost)
    vals = terms.values()
    if not np.isfinite(vals["total"]):
        raise FloatingPointError(f"non-finite loss at step {step}: {vals}")
    params = list(opt_w.params) + (list(opt_a.params) if opt_a is not None else [])
    opt_w.zero_grad()
    if opt_a is not None:
        opt_a.zero_grad()
    backward(terms.total, tape, wrt=params)
    lr = cosine_lr(opt_w.lr, step, net.total_steps) if lr_schedule == "cosine" else opt_w.lr
    opt_w.step(lr)
    if opt_a is not None and update_alpha and not fixed:
        opt_a.step()
    tau = 0.0 if fixed else temperature_at(step, net.total_steps, net.gumbel)
    return StepResult(vals["total"], vals["ce"], vals["flops_loss"], vals["expected_flops"], tau, lr)


# ---------------------------------------------------------------------------
# derivation

@dataclass(eq=False)
class DerivedArch:
    candidates: CandidateSet
    choices: tuple
    flops: float
    alphas: tuple = ()

    def __eq__(self, other):
        if not isinstance(other, DerivedArch):
            return NotImplemented
        return (self.candidates == other.candidates and self.choices == other.choices
                and self.flops == other.flops and len(self.alphas) == len(other.alphas)
                and all(np.array_equal(a, b) for a, b in zip(self.alphas, other.alphas)))

    def sizes(self):
        """Per-layer lists of size codes (0 for None)."""
        return [[self.candidates.size_code(i) for i in layer] for layer in self.choices]

    def mean_area(self, include_none=False):
        areas = self.candidates.areas
        vals = [areas[i] for layer in self.choices for i in layer
                if include_none or self.candidates.shape_at(i) is not None]
        return float(np.mean(vals)) if vals else 0.0


def argmax_smallest(logits, areas):
    """Per-row argmax; exact ties go to the smaller-area candidate."""
    logits = np.asarray(logits, dtype=np.float64)
    out = np.empty(logits.shape[0], dtype=np.int64)
    order = np.argsort(areas, kind="stable")
    for r, row in enumerate(logits):
        best = row.max()
        out[r] = next(int(i) for i in order if row[i] == best)
    return out


def derive_architecture(net: SuperNet) -> DerivedArch:
    areas = net.candidates.areas
    choices = []
    for layer in net.layers:
        idx = argmax_smallest(layer.alpha.data, areas)
        if idx.shape[0] == 1 and layer.width > 1:
            idx = np.repeat(idx, layer.width)
        choices.append(tuple(int(i) for i in idx))
    flops = flops_of_arch(choices, net.cost_specs(), net.fixed_cost)
    return DerivedArch(net.candidates, tuple(choices), flops,
                       tuple(layer.alpha.data.copy() for layer in net.layers))


def single_kernel_arch(net: SuperNet, index: int, target_flops: float = None) -> DerivedArch:
    """Every filter uses candidate ``index``; with a target, filters are pruned
    uniformly (same kept fraction per layer, evenly spaced) to fit it."""
    specs = net.cost_specs()
    area = net.candidates.areas[index]
    full = sum(s.positions * s.channels * area for s in specs)
    keep = 1.0
    if target_flops is not None and full > 0:
        keep = min(1.0, max(0.0, (target_flops - net.fixed_cost) / full))
    none_idx = 0 if net.candidates.include_none else None
    if keep < 1.0 and none_idx is None:
        raise ValueError("pruning to a target needs the None candidate")
    choices = []
    for s in specs:
        n_keep = max(1, int(round(keep * s.channels)))
        kept = set(np.linspace(0, s.channels - 1, n_keep).round().astype(int).tolist())
        choices.append(tuple(index if f in kept else none_idx for f in range(s.channels)))
    flops = flops_of_arch(choices, specs, net.fixed_cost)
    return DerivedArch(net.candidates, tuple(choices), flops)


# ---------------------------------------------------------------------------

@dataclass
class EquivalenceResult:
    deviation: float
    single_path_convs: list
    multi_path_convs: list
    single_path_features: list
    multi_path_features: list
    tolerance: float

    @property
    def ok(self):
        return self.deviation < self.tolerance


def verify_equivalence(net: SuperNet, batch, tolerance: float = 1e-10, step: int = 0,
                       mode: str = "plain_softmax") -> EquivalenceResult:
    """Compare kernel aggregation against the weighted-feature reference.

    Both paths see the same probabilities (same mode, same step, so the same
    noise draw).  Deviation is max |single - multi| / (1 + |multi|).
    """
    c1, c2 = PathCounter(), PathCounter()
    single = forward_search(net, batch, step, mode, counter=c1).data
    multi = forward_multipath_reference(net, batch, step, mode, counter=c2).data
    dev = float(np.max(np.abs(single - multi) / (1.0 + np.abs(multi))))
    return EquivalenceResult(dev, c1.convs, c2.convs, c1.features, c2.features, tolerance)
