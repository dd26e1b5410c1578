"""
Search, retrain and evaluation loops plus their on-disk artifacts.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .config import RunConfig
from .cost_model import CostBudget
from .data import Dataset, SyntheticTaskConfig, generate_dataset, load_idx
from .sampler import GumbelConfig, softmax_probs
from .supernet import (SGD, Adam, DerivedArch, NetConfig, SuperNet, calibrate_affine, derive_architecture,
                       forward_search, search_step)
from .tensor import cross_entropy

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class RunLog:
    """Append-only list of JSON records, optionally mirrored to a JSONL file."""

    def __init__(self, path=None):
        self.records = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def append(self, record: dict):
        self.records.append(record)
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record) + "\n")

    def steps(self):
        return [r for r in self.records if r["kind"] == "step"]

    @staticmethod
    def read(path):
        return [json.loads(line) for line in Path(path).read_text().splitlines() if line]


def load_data(cfg: RunConfig) -> Dataset:
    d = cfg.data
    if d.source == "idx":
        train = load_idx(d.train_images, d.train_labels, d.num_classes)
        test = load_idx(d.test_images, d.test_labels, d.num_classes)
        return Dataset(train, test, d.num_classes)
    return generate_dataset(synthetic_config(cfg))


def synthetic_config(cfg: RunConfig) -> SyntheticTaskConfig:
    d = cfg.data
    return SyntheticTaskConfig(image_size=d.image_size, num_classes=d.num_classes,
                               scale_mode=d.scale_mode, n_train=d.n_train, n_test=d.n_test,
                               noise=d.noise, motifs=d.motifs,
                               clutter=d.clutter, radius=d.radius or None, seed=d.seed)


def build_net(cfg: RunConfig, data: Dataset, seed: int = None) -> SuperNet:
    s = cfg.space
    x = data.train.x
    net_cfg = NetConfig(in_channels=x.shape[1], image_size=x.shape[2], num_classes=data.num_classes,
                        stem_channels=s.stem_channels, widths=tuple(s.widths),
                        out_channels=tuple(s.out_channels), strides=tuple(s.strides),
                        kernel_sizes=tuple(s.kernel_sizes), include_none=s.include_none,
                        share_alpha=s.share_alpha, alpha_init_std=s.alpha_init_std)
    seed = cfg.train.seed if seed is None else seed
    g = cfg.gumbel
    gumbel = GumbelConfig(g.tau_start, g.tau_end, g.schedule, seed, g.mode)
    return SuperNet(net_cfg, seed, gumbel)


def make_budget(cfg: RunConfig, net: SuperNet) -> CostBudget:
    b = cfg.budget
    target = b.target if b.target > 0 else b.target_fraction * net.max_cost()
    return CostBudget(target, b.eta, b.lambda_cost)


def batch_order(n, seed, epoch):
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xBA7C, int(epoch)]))
    return rng.permutation(n)


def calibration_batch(data: Dataset, seed, size=256):
    idx = batch_order(len(data.train), seed, 0xCA11)[:size]
    return data.train.x[np.sort(idx)]


def steps_per_epoch(n, batch_size):
    return -(-n // batch_size)


def layer_histograms(net: SuperNet):
    """Per-layer argmax counts and mean probabilities over the candidates."""
    hist, mean = [], []
    m = net.candidates.size
    for layer in net.layers:
        p = softmax_probs(layer.alpha).data
        counts = np.bincount(np.argmax(p, axis=1), minlength=m)
        if p.shape[0] == 1:
            counts = counts * layer.width
        hist.append(counts.tolist())
        mean.append(p.mean(axis=0).tolist())
    return hist, mean


def make_alpha_optimizer(cfg: RunConfig, net: SuperNet):
    o = cfg.optim
    if o.alpha_optimizer == "adam":
        return Adam(net.alphas(), o.lr_alpha)
    return SGD(net.alphas(), o.lr_alpha, o.momentum)


@dataclass
class SearchResult:
    net: SuperNet
    arch: DerivedArch
    budget: CostBudget
    log: RunLog
    steps: int


def search(cfg: RunConfig, data: Dataset, run_log: RunLog = None,
           progress: Optional[Callable] = None) -> SearchResult:
    """Joint w / alpha optimisation on the training split, then argmax derivation."""
    run_log = run_log if run_log is not None else RunLog()
    net = build_net(cfg, data)
    budget = make_budget(cfg, net)
    o, t = cfg.optim, cfg.train
    n = len(data.train)
    per_epoch = steps_per_epoch(n, t.batch_size)
    net.total_steps = per_epoch * t.epochs
    calibrate_affine(net, calibration_batch(data, t.seed))
    opt_w = SGD(net.trainable(), o.lr_w, o.momentum, o.weight_decay, o.grad_clip or None)
    opt_a = make_alpha_optimizer(cfg, net)
    run_log.append({"kind": "start", "target": budget.target, "max_cost": net.max_cost(),
                    "fixed_cost": net.fixed_cost, "total_steps": net.total_steps})
    step = 0
    for epoch in range(t.epochs):
        order = batch_order(n, t.seed, epoch)
        for b in range(per_epoch):
            idx = order[b * t.batch_size:(b + 1) * t.batch_size]
            res = search_step(net, data.train.x[idx], data.train.y[idx], opt_w, opt_a, step, budget,
                              update_alpha=epoch >= o.alpha_warmup_epochs,
                              cost_from_gumbel=cfg.budget.cost_from_gumbel, lr_schedule=o.lr_schedule)
            run_log.append({"kind": "step", "step": step, "epoch": epoch, "ce": res.ce,
                            "flops_loss": res.flops_loss, "total": res.total,
                            "expected_flops": res.expected_flops, "tau": res.tau, "lr": res.lr})
            step += 1
        hist, mean = layer_histograms(net)
        run_log.append({"kind": "epoch", "epoch": epoch, "argmax_counts": hist, "mean_probs": mean})
        if progress:
            progress(epoch, res)
    arch = derive_architecture(net)
    run_log.append({"kind": "derived", "flops": arch.flops, "sizes": arch.sizes()})
    return SearchResult(net, arch, budget, run_log, step)


def evaluate(net: SuperNet, split, batch_size: int = 250):
    """Accuracy and mean cross-entropy; uses the fixed architecture if set."""
    correct, loss = 0, 0.0
    n = len(split)
    for start in range(0, n, batch_size):
        x, y = split.x[start:start + batch_size], split.y[start:start + batch_size]
        mode = None if net.fixed_choices is not None else "plain_softmax"
        logits = forward_search(net, x, 0, mode)
        correct += int((np.argmax(logits.data, axis=1) == y).sum())
        loss += cross_entropy(logits, y).item() * len(y)
    return correct / n, loss / n


@dataclass
class TrainResult:
    net: SuperNet
    accuracy: float
    test_loss: float
    losses: list = field(default_factory=list)


def train_arch(cfg: RunConfig, data: Dataset, arch, seed: int = None, epochs: int = None,
               run_log: RunLog = None) -> TrainResult:
    """Train a fixed architecture from scratch and report test accuracy."""
    run_log = run_log if run_log is not None else RunLog()
    net = build_net(cfg, data, seed)
    net.fix_architecture(arch)
    o, t = cfg.optim, cfg.train
    epochs = t.retrain_epochs if epochs is None else epochs
    n = len(data.train)
    per_epoch = steps_per_epoch(n, t.batch_size)
    net.total_steps = per_epoch * epochs
    calibrate_affine(net, calibration_batch(data, net.seed))
    opt_w = SGD(net.trainable(), o.lr_w, o.momentum, o.weight_decay, o.grad_clip or None)
    budget = CostBudget(1.0)
    seed = net.seed
    losses = []
    step = 0
    for epoch in range(epochs):
        order = batch_order(n, seed, epoch)
        for b in range(per_epoch):
            idx = order[b * t.batch_size:(b + 1) * t.batch_size]
            res = search_step(net, data.train.x[idx], data.train.y[idx], opt_w, None, step, budget,
                              lr_schedule=o.lr_schedule)
            losses.append(res.ce)
            run_log.append({"kind": "step", "step": step, "epoch": epoch, "ce": res.ce, "lr": res.lr})
            step += 1
    acc, test_loss = evaluate(net, data.test)
    run_log.append({"kind": "eval", "accuracy": acc, "loss": test_loss})
    return TrainResult(net, acc, test_loss, losses)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, net: SuperNet, step: int, cfg: RunConfig = None, extra: dict = None):
    arrays = {f"t/{k}": v for k, v in net.state_dict().items()}
    meta = {"format_version": CHECKPOINT_VERSION, "step": int(step), "seed": net.seed,
            "total_steps": net.total_steps,
            "net": {k: list(v) if isinstance(v, tuple) else v for k, v in net.cfg.__dict__.items()},
            "config": cfg.to_dict() if cfg else None,
            "fixed_choices": [c.tolist() for c in net.fixed_choices] if net.fixed_choices else None}
    meta.update(extra or {})
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        np.savez(fh, **arrays)


class CheckpointError(ValueError):
    pass


def load_checkpoint(path):
    """Returns (net, step, meta)."""
    with np.load(path) as npz:
        if "meta" not in npz.files:
            raise CheckpointError(f"{path}: not a checkpoint (no metadata)")
        meta = json.loads(npz["meta"].tobytes().decode())
        state = {k[2:]: npz[k] for k in npz.files if k.startswith("t/")}
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
    net_cfg = NetConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta["net"].items()})
    gumbel = None
    if meta.get("config"):
        g = meta["config"]["gumbel"]
        gumbel = GumbelConfig(g["tau_start"], g["tau_end"], g["schedule"], meta["seed"], g["mode"])
    net = SuperNet(net_cfg, meta["seed"], gumbel)
    net.load_state_dict(state)
    net.total_steps = meta["total_steps"]
    if meta.get("fixed_choices"):
        net.fix_architecture(meta["fixed_choices"])
    return net, meta["step"], meta
