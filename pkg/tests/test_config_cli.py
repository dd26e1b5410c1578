import json
import os
import subprocess
import sys

import pytest

from metakernel import cli
from metakernel.analysis import read_arch, read_distribution
from metakernel.config import OUTPUT_ENV, ConfigError, RunConfig, config_from_dict, load_config
from metakernel.cost_model import flops_of_arch
from metakernel.runner import load_checkpoint

TINY_SETS = ["data.image_size=12", "data.n_train=32", "data.n_test=16", "data.radius=2",
             "data.motifs=2", "space.stem_channels=3", "space.widths=[4,4]",
             "space.out_channels=[3,4]", "space.strides=[1,2]", "train.epochs=1",
             "train.retrain_epochs=1", "train.batch_size=16"]


def tiny_args():
    out = []
    for s in TINY_SETS:
        out += ["--set", s]
    return out


def test_defaults():
    cfg = RunConfig()
    assert cfg.budget.lambda_cost == 2.0 and cfg.budget.eta == 0.1
    assert cfg.space.kernel_sizes == (3, 5, 7) and cfg.train.batch_size == 64
    assert cfg.optim.reference_lr == 0.65 and cfg.optim.reference_weight_decay == 3e-5


def test_toml_round_trip(tmp_path):
    cfg = load_config(overrides={"train.seed": 5, "budget.eta": 0.2})
    path = tmp_path / "c.toml"
    path.write_text(cfg.to_toml())
    assert load_config(path).to_dict() == cfg.to_dict()


def test_config_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "nope.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[train\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(ConfigError):
        config_from_dict({"train": {"epochz": 1}})
    with pytest.raises(ConfigError):
        config_from_dict({"train": {"epochs": "many"}})


def test_env_overrides_output(monkeypatch):
    monkeypatch.setenv(OUTPUT_ENV, "/tmp/elsewhere")
    assert load_config().output_dir == "/tmp/elsewhere"


def test_print_config(capsys):
    assert cli.main(["--print-config", "--set", "train.seed=9"]) == 0
    text = capsys.readouterr().out
    assert "[budget]" in text and "seed = 9" in text


def test_missing_config_exits_2():
    assert cli.main(["search", "--config", "missing.file"]) == 2
    out = subprocess.run([sys.executable, "-m", "metakernel", "search", "--config", "missing.file"],
                         capture_output=True, text=True)
    assert out.returncode == 2 and "usage" in out.stderr


def test_usage_errors():
    assert cli.main(["frobnicate"]) == 2
    assert cli.main([]) == 2
    assert cli.main(["search", "--set", "novalue"]) == 2
    assert cli.main(["kernel-dist"]) == 2


def test_runtime_failure_exits_1(tmp_path):
    bad = tmp_path / "c.npz"
    bad.write_bytes(b"not a zip")
    assert cli.main(["eval", "--checkpoint", str(bad)]) != 0


@pytest.fixture(scope="module")
def search_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli")
    assert cli.main(["search", "--out", str(out)] + tiny_args()) == 0
    return out


def test_search_writes_artifacts(search_dir):
    for name in ("search_log.jsonl", "search.ckpt.npz", "arch.json", "kernel_dist.csv"):
        assert (search_dir / name).is_file()


def test_export_arch_flops_consistent(search_dir, tmp_path):
    out = tmp_path / "a.json"
    assert cli.main(["export-arch", "--checkpoint", str(search_dir / "search.ckpt.npz"),
                     "--out", str(out)]) == 0
    arch = read_arch(out)
    net, _, _ = load_checkpoint(search_dir / "search.ckpt.npz")
    assert arch.flops == flops_of_arch(arch.choices, net.cost_specs(), net.fixed_cost)
    assert arch == read_arch(search_dir / "arch.json")
    d = json.loads(out.read_text())
    assert set(d) >= {"layers", "flops", "alpha"}


def test_kernel_dist_csv(search_dir, tmp_path):
    out = tmp_path / "d.csv"
    assert cli.main(["kernel-dist", "--arch", str(search_dir / "arch.json"), "--out", str(out)]) == 0
    header, rows = read_distribution(out)
    assert header == ["layer", "size_0", "size_3", "size_5", "size_7"]
    assert [sum(r[1:]) for r in rows] == [4, 4]


def test_train_and_eval(search_dir, tmp_path, capsys):
    assert cli.main(["train", "--arch", str(search_dir / "arch.json"), "--out", str(tmp_path)]
                    + tiny_args()) == 0
    capsys.readouterr()
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "train.ckpt.npz")]) == 0
    res = json.loads(capsys.readouterr().out)
    assert 0.0 <= res["accuracy"] <= 1.0


def test_env_output_dir_used_by_cli(tmp_path):
    env = dict(os.environ, **{OUTPUT_ENV: str(tmp_path / "envout")})
    out = subprocess.run([sys.executable, "-m", "metakernel", "gen-data", "--format", "idx"] + tiny_args(),
                         env=env, capture_output=True, text=True)
    assert out.returncode == 0, out.stderr
    assert (tmp_path / "envout" / "train-images.idx").is_file()


def test_selfcheck_exits_0(capsys):
    assert cli.main(["selfcheck"]) == 0
    assert "all invariants pass" in capsys.readouterr().out
