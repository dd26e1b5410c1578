"""
Categorical relaxation over kernel candidates.

Architecture logits live in the last axis (index 0 is None when the candidate
set includes it).  ``softmax_probs`` is the plain distribution;
``gumbel_probs`` perturbs log-probabilities with Gumbel(0, 1) noise and a
temperature.  Noise comes from a counter-style stream keyed on
(seed, layer, step) so evaluation order never changes the draw.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor, log_softmax, scale, softmax, add, straight_through

SCHEDULES = ("linear", "exponential")
MODES = ("soft", "hard_straight_through", "plain_softmax")


@dataclass
class GumbelConfig:
    tau_start: float = 5.0
    tau_end: float = 0.5
    schedule: str = "linear"
    seed: int = 0
    mode: str = "soft"

    def __post_init__(self):
        if not self.tau_start >= self.tau_end > 0:
            raise ValueError("need tau_start >= tau_end > 0")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


def softmax_probs(alpha) -> Tensor:
    return softmax(as_tensor(alpha), axis=-1)


def sample_gumbel(shape, rng: np.random.Generator) -> np.ndarray:
    u = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=shape)
    return -np.log(-np.log(u))


def noise_stream(seed, layer, step, shape) -> np.ndarray:
    """Gumbel noise for one layer at one step; row f belongs to filter f."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x6D6B, int(layer), int(step)]))
    return sample_gumbel(shape, rng)


def gumbel_probs(alpha, tau: float, noise) -> Tensor:
    """softmax((log pi + g) / tau) with log pi taken from the logits directly."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    logp = log_softmax(as_tensor(alpha), axis=-1)
    return softmax(scale(add(logp, np.asarray(noise, dtype=np.float64)), 1.0 / tau), axis=-1)


def temperature_at(step: int, total_steps: int, cfg: GumbelConfig) -> float:
    if total_steps <= 0:
        return cfg.tau_start
    frac = min(max(step / total_steps, 0.0), 1.0)
    if cfg.schedule == "linear":
        return cfg.tau_start + (cfg.tau_end - cfg.tau_start) * frac
    return cfg.tau_start * (cfg.tau_end / cfg.tau_start) ** frac


def _onehot_argmax(scores):
    idx = np.argmax(scores, axis=-1)
    onehot = np.zeros_like(scores)
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    return onehot, idx


def hard_sample(alpha, tau: float, seed=None, noise=None):
    """One-hot at argmax(log pi + g); returns (one_hot, index).

    Pass ``noise`` to reuse a specific draw, otherwise it is taken from a
    generator seeded with ``seed``.
    """
    a = np.asarray(alpha.data if isinstance(alpha, Tensor) else alpha, dtype=np.float64)
    if noise is None:
        noise = sample_gumbel(a.shape, np.random.default_rng(seed))
    z = a - a.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    onehot, idx = _onehot_argmax((logp + noise) / tau)
    return onehot, idx


def relaxed_probs(alpha, tau: float, noise, mode: str) -> Tensor:
    """Per-step candidate weights for the given sampling mode."""
    if mode == "plain_softmax":
        return softmax_probs(alpha)
    soft = gumbel_probs(alpha, tau, noise)
    if mode == "soft":
        return soft
    if mode == "hard_straight_through":
        onehot, _ = _onehot_argmax(soft.data)
        return straight_through(soft, onehot)
    raise ValueError(f"unknown sampling mode {mode!r}")
