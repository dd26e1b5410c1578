"""The large-structure task must reward large kernels: a fixed 7x7 network
beats the same network with 3x3 kernels by at least 3 accuracy points."""
from metakernel.config import config_from_dict
from metakernel.runner import build_net, load_data, train_arch
from metakernel.supernet import single_kernel_arch


def test_seven_beats_three_on_large_structure():
    cfg = config_from_dict({"data": {"n_train": 2000, "n_test": 1000}, "train": {"retrain_epochs": 6}})
    data = load_data(cfg)
    net = build_net(cfg, data)
    acc = {}
    for idx in (1, 3):
        acc[idx] = train_arch(cfg, data, single_kernel_arch(net, idx)).accuracy
    print(f"3x3 {acc[1]:.3f}  7x7 {acc[3]:.3f}")
    assert acc[3] - acc[1] >= 0.03
