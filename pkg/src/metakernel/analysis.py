"""
Kernel-size distribution tables and architecture import/export.

CSV columns are fixed: ``layer, size_0, <one size_k per candidate>``;
``size_0`` counts None filters and is present even when the search space
has no None choice.
"""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from .meta_kernel import CandidateSet
from .supernet import DerivedArch

ARCH_FORMAT_VERSION = 1


def distribution_columns(cands: CandidateSet):
    codes = [0] + [cands.size_code(i) for i in range(cands.offset, cands.size)]
    return codes, ["layer"] + [f"size_{c}" for c in codes]


def kernel_distribution(arch: DerivedArch):
    """Rows of ``[layer, count_size_0, count_size_3, ...]``."""
    codes, _ = distribution_columns(arch.candidates)
    rows = []
    for li, layer in enumerate(arch.choices):
        counts = dict.fromkeys(codes, 0)
        for idx in layer:
            counts[arch.candidates.size_code(idx)] += 1
        rows.append([li] + [counts[c] for c in codes])
    return rows


def distribution_csv(arch: DerivedArch) -> str:
    _, header = distribution_columns(arch.candidates)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(kernel_distribution(arch))
    return buf.getvalue()


def write_distribution(path, arch: DerivedArch):
    Path(path).write_text(distribution_csv(arch))


def read_distribution(path):
    """Returns (header, rows) with integer cells."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[int(v) for v in row] for row in reader if row]
    return header, rows


def arch_to_dict(arch: DerivedArch) -> dict:
    c = arch.candidates
    return {
        "format_version": ARCH_FORMAT_VERSION,
        "candidates": {"shapes": [list(s) for s in c.shapes], "include_none": c.include_none},
        "layers": arch.sizes(),
        "flops": arch.flops,
        "alpha": [np.asarray(a).tolist() for a in arch.alphas],
    }


def arch_from_dict(d: dict) -> DerivedArch:
    if d.get("format_version") != ARCH_FORMAT_VERSION:
        raise ValueError(f"unsupported architecture format {d.get('format_version')!r}")
    cands = CandidateSet(tuple(tuple(s) for s in d["candidates"]["shapes"]),
                         bool(d["candidates"]["include_none"]))
    choices = tuple(tuple(cands.index_of_code(code) for code in layer) for layer in d["layers"])
    alphas = tuple(np.array(a, dtype=np.float64) for a in d.get("alpha", []))
    return DerivedArch(cands, choices, float(d["flops"]), alphas)


def write_arch(path, arch: DerivedArch):
    Path(path).write_text(json.dumps(arch_to_dict(arch), indent=1))


def read_arch(path) -> DerivedArch:
    return arch_from_dict(json.loads(Path(path).read_text()))
