"""Differentiable kernel-size search with meta kernels, on a small numpy autodiff core."""

from .cost_model import CostBudget, LayerCostSpec, expected_flops, flops_loss, flops_of_arch
from .data import IdxFormatError, SyntheticTaskConfig, generate_dataset, load_idx
from .kernels import get_backend, set_backend
from .meta_kernel import (CandidateSet, MetaKernel, ProbMask, build_masks, build_meta_shape,
                          effective_kernel, roi_of)
from .sampler import GumbelConfig, gumbel_probs, hard_sample, softmax_probs, temperature_at
from .supernet import (DerivedArch, NetConfig, SuperNet, derive_architecture, forward_multipath_reference,
                       forward_search, search_step, total_loss, verify_equivalence)
from .tensor import (ShapeError, Tape, Tensor, backward, conv2d, cross_entropy, depthwise_conv2d,
                     finite_diff_check)

__version__ = "0.1.0"
