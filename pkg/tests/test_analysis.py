import numpy as np
from hypothesis import given, settings, strategies as st

from metakernel.analysis import (arch_from_dict, arch_to_dict, distribution_csv, kernel_distribution,
                                 read_arch, read_distribution, write_arch, write_distribution)
from metakernel.meta_kernel import CandidateSet
from metakernel.supernet import DerivedArch

CANDS = CandidateSet.square((3, 5, 7))


def make(choices, alphas=()):
    return DerivedArch(CANDS, tuple(tuple(c) for c in choices), 123.0, tuple(alphas))


def test_all_3x3_single_column():
    rows = kernel_distribution(make([[1] * 4, [1] * 6]))
    assert rows == [[0, 0, 4, 0, 0], [1, 0, 6, 0, 0]]


def test_hand_tally():
    arch = make([[0, 1, 1, 3], [2, 2, 3, 0, 0, 0]])
    # layer 0: None x1, 3x3 x2, 7x7 x1; layer 1: None x3, 5x5 x2, 7x7 x1
    assert kernel_distribution(arch) == [[0, 1, 2, 0, 1], [1, 3, 0, 2, 1]]


def test_csv_header_and_round_trip(tmp_path):
    arch = make([[0, 1, 2, 3], [3, 3]])
    assert distribution_csv(arch).splitlines()[0] == "layer,size_0,size_3,size_5,size_7"
    write_distribution(tmp_path / "d.csv", arch)
    header, rows = read_distribution(tmp_path / "d.csv")
    assert header == ["layer", "size_0", "size_3", "size_5", "size_7"]
    assert rows == kernel_distribution(arch)


def test_csv_without_none_keeps_size_0():
    cands = CandidateSet.square((3, 5), include_none=False)
    arch = DerivedArch(cands, ((0, 1),), 1.0)
    assert distribution_csv(arch).splitlines() == ["layer,size_0,size_3,size_5", "0,0,1,1"]


def test_json_layout():
    arch = make([[0, 1], [3, 2]], [np.zeros((2, 4)), np.ones((2, 4))])
    d = arch_to_dict(arch)
    assert d["layers"] == [[0, 3], [7, 5]] and d["flops"] == 123.0
    assert d["alpha"][1] == [[1.0] * 4] * 2


layer = st.lists(st.integers(0, 3), min_size=1, max_size=8)


@settings(max_examples=40, deadline=None)
@given(st.lists(layer, min_size=1, max_size=4), st.integers(0, 2**31 - 1))
def test_round_trips(tmp_path_factory, choices, seed):
    rng = np.random.default_rng(seed)
    arch = DerivedArch(CANDS, tuple(tuple(c) for c in choices), float(rng.integers(1, 10**6)),
                       tuple(rng.normal(size=(len(c), 4)) for c in choices))
    assert arch_from_dict(arch_to_dict(arch)) == arch
    d = tmp_path_factory.mktemp("a")
    write_arch(d / "a.json", arch)
    assert read_arch(d / "a.json") == arch
    rows = kernel_distribution(arch)
    assert [sum(r[1:]) for r in rows] == [len(c) for c in choices]
    write_distribution(d / "d.csv", arch)
    assert read_distribution(d / "d.csv")[1] == rows
