import numpy as np
import pytest

from metakernel.config import config_from_dict
from metakernel.runner import (CheckpointError, RunLog, batch_order, build_net, load_checkpoint,
                               load_data, save_checkpoint, search, train_arch)
from metakernel.supernet import derive_architecture, forward_search

TINY = {
    "data": {"image_size": 12, "n_train": 48, "n_test": 16, "radius": 2, "motifs": 2},
    "space": {"stem_channels": 3, "widths": [4, 4], "out_channels": [3, 4], "strides": [1, 2]},
    "train": {"epochs": 2, "retrain_epochs": 1, "batch_size": 16},
}


@pytest.fixture(scope="module")
def tiny():
    cfg = config_from_dict(TINY)
    return cfg, load_data(cfg)


@pytest.fixture(scope="module")
def searched(tiny, tmp_path_factory):
    cfg, data = tiny
    path = tmp_path_factory.mktemp("run") / "log.jsonl"
    return search(cfg, data, RunLog(path)), path


def test_log_completeness(tiny, searched):
    cfg, _ = tiny
    res, path = searched
    steps = res.log.steps()
    assert len(steps) == res.steps == 2 * 3
    assert [r["step"] for r in steps] == list(range(res.steps))
    lam = cfg.budget.lambda_cost
    for r in steps:
        assert abs(r["total"] - (r["ce"] + lam * r["flops_loss"])) <= 1e-12
    assert RunLog.read(path) == res.log.records
    kinds = [r["kind"] for r in res.log.records]
    assert kinds[0] == "start" and kinds[-1] == "derived" and kinds.count("epoch") == 2


def test_tau_follows_schedule(searched):
    taus = [r["tau"] for r in searched[0].log.steps()]
    assert taus[0] == 5.0 and all(a > b for a, b in zip(taus, taus[1:]))


def test_search_deterministic(tiny, searched):
    cfg, data = tiny
    again = search(cfg, data)
    assert again.log.records == searched[0].log.records
    assert again.arch == searched[0].arch


def test_batch_order_is_permutation():
    o = batch_order(50, 1, 3)
    assert sorted(o.tolist()) == list(range(50))
    assert np.array_equal(o, batch_order(50, 1, 3)) and not np.array_equal(o, batch_order(50, 1, 4))


def test_checkpoint_round_trip(tiny, searched, tmp_path):
    cfg, data = tiny
    res, _ = searched
    path = tmp_path / "c.npz"
    save_checkpoint(path, res.net, res.steps, cfg)
    net, step, meta = load_checkpoint(path)
    assert step == res.steps and meta["format_version"] == 1
    for (name, a), (_, b) in zip(res.net.named_tensors(), net.named_tensors()):
        assert np.array_equal(a.data, b.data), name
    assert derive_architecture(net) == res.arch
    x = data.test.x[:4]
    np.testing.assert_array_equal(forward_search(net, x, mode="plain_softmax").data,
                                  forward_search(res.net, x, mode="plain_softmax").data)


def test_checkpoint_errors(tmp_path):
    p = tmp_path / "x.npz"
    np.savez(p, a=np.zeros(2))
    with pytest.raises(CheckpointError, match="no metadata"):
        load_checkpoint(p)


def test_train_arch_runs(tiny, searched):
    cfg, data = tiny
    res = train_arch(cfg, data, searched[0].arch)
    assert len(res.losses) == 3 and 0.0 <= res.accuracy <= 1.0
    assert res.net.fixed_choices is not None


def test_build_net_uses_config(tiny):
    cfg, data = tiny
    net = build_net(cfg, data)
    assert [l.width for l in net.layers] == [4, 4] and net.cfg.image_size == 12
