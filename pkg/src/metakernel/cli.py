"""
Command line entry point: ``metakernel <command> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error (bad flags, missing
or invalid config).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis, runner, selfcheck
from .config import OUTPUT_ENV, ConfigError, RunConfig, load_config
from .data import IdxFormatError, generate_dataset, write_idx
from .supernet import derive_architecture

log = logging.getLogger("metakernel")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _overrides(pairs):
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = _parse_value(value.strip())
    return out


def _config(args) -> RunConfig:
    try:
        cfg = load_config(args.config, _overrides(args.set))
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    except ConfigError as exc:
        raise UsageError(f"invalid config: {exc}") from None
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
    return cfg


def _out_dir(args, cfg) -> Path:
    out = Path(args.out) if getattr(args, "out", None) else Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_search(args, cfg):
    out = _out_dir(args, cfg)
    data = runner.load_data(cfg)
    run_log = runner.RunLog(out / "search_log.jsonl")

    def progress(epoch, res):
        log.info("epoch %d  ce %.4f  E[C] %.0f  tau %.3f", epoch, res.ce, res.expected_flops, res.tau)

    res = runner.search(cfg, data, run_log, progress)
    runner.save_checkpoint(out / "search.ckpt.npz", res.net, res.steps, cfg)
    analysis.write_arch(out / "arch.json", res.arch)
    analysis.write_distribution(out / "kernel_dist.csv", res.arch)
    lo, hi = res.budget.band
    print(f"derived FLOPs {res.arch.flops:.0f}  target {res.budget.target:.0f}  band [{lo:.0f}, {hi:.0f}]")
    print(f"wrote {out / 'arch.json'}")
    return EXIT_OK


def _load_arch(path):
    try:
        return analysis.read_arch(path)
    except FileNotFoundError:
        raise UsageError(f"architecture file not found: {path}") from None


def cmd_train(args, cfg):
    out = _out_dir(args, cfg)
    arch = _load_arch(args.arch)
    data = runner.load_data(cfg)
    run_log = runner.RunLog(out / "train_log.jsonl")
    res = runner.train_arch(cfg, data, arch, epochs=args.epochs, run_log=run_log)
    runner.save_checkpoint(out / "train.ckpt.npz", res.net, len(res.losses), cfg,
                           {"accuracy": res.accuracy})
    print(f"test accuracy {res.accuracy:.4f}  test loss {res.test_loss:.4f}")
    return EXIT_OK


def _load_ckpt(path):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return runner.load_checkpoint(path)


def cmd_eval(args, cfg):
    net, step, meta = _load_ckpt(args.checkpoint)
    if args.config is None and not args.set and meta.get("config"):
        from .config import config_from_dict
        cfg = config_from_dict(meta["config"])
    if net.fixed_choices is None:
        net.fix_architecture(derive_architecture(net))
    data = runner.load_data(cfg)
    acc, loss = runner.evaluate(net, data.test)
    print(json.dumps({"accuracy": acc, "loss": loss, "step": step}))
    return EXIT_OK


def cmd_export_arch(args, cfg):
    net, _, _ = _load_ckpt(args.checkpoint)
    arch = derive_architecture(net)
    text = json.dumps(analysis.arch_to_dict(arch), indent=1)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return EXIT_OK


def cmd_kernel_dist(args, cfg):
    if bool(args.arch) == bool(args.checkpoint):
        raise UsageError("kernel-dist needs exactly one of --arch or --checkpoint")
    if args.arch:
        arch = _load_arch(args.arch)
    else:
        arch = derive_architecture(_load_ckpt(args.checkpoint)[0])
    text = analysis.distribution_csv(arch)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_selfcheck(args, cfg):
    checks = selfcheck.run_all()
    for c in checks:
        print(c.line())
    ok = all(c.ok for c in checks)
    print("all invariants pass" if ok else "SOME INVARIANTS FAILED")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_gen_data(args, cfg):
    out = _out_dir(args, cfg)
    ds = generate_dataset(runner.synthetic_config(cfg))
    if args.format == "npz":
        np.savez(out / "dataset.npz", train_x=ds.train.x, train_y=ds.train.y,
                 test_x=ds.test.x, test_y=ds.test.y)
        print(f"wrote {out / 'dataset.npz'}")
        return EXIT_OK
    for name, split in (("train", ds.train), ("test", ds.test)):
        pix = np.clip(np.rint(split.x[:, 0] * 255.0), 0, 255).astype(np.uint8)
        write_idx(out / f"{name}-images.idx", out / f"{name}-labels.idx", pix, split.y)
    print(f"wrote IDX files to {out}")
    return EXIT_OK


COMMANDS = {
    "search": cmd_search, "train": cmd_train, "eval": cmd_eval, "export-arch": cmd_export_arch,
    "kernel-dist": cmd_kernel_dist, "selfcheck": cmd_selfcheck, "gen-data": cmd_gen_data,
}


def _common(top):
    # sub-commands must not reset options already given before the command name
    kw = {} if top else {"default": argparse.SUPPRESS}
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration", **kw)
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry, e.g. --set train.epochs=5", **kw)
    common.add_argument("--print-config", action="store_true",
                        help="print the effective configuration as TOML and exit", **kw)
    common.add_argument("-v", "--verbose", action="store_true", **kw)
    return common


def build_parser():
    common = _common(False)
    p = argparse.ArgumentParser(prog="metakernel", parents=[_common(True)],
                                description="Meta-kernel architecture search at desk scale.",
                                epilog=f"The output directory can be overridden with ${OUTPUT_ENV}.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    s = sub.add_parser("search", parents=[common], help="search, then write checkpoint and architecture")
    s.add_argument("--out", help="output directory")
    s.add_argument("--seed", type=int)

    t = sub.add_parser("train", parents=[common], help="train a derived architecture from scratch")
    t.add_argument("--arch", required=True, help="architecture JSON")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")

    e = sub.add_parser("eval", parents=[common], help="test accuracy of a checkpoint")
    e.add_argument("--checkpoint", required=True)

    x = sub.add_parser("export-arch", parents=[common], help="derive the architecture JSON from a checkpoint")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--out", help="file to write (default: stdout)")

    k = sub.add_parser("kernel-dist", parents=[common], help="per-layer kernel-size counts as CSV")
    k.add_argument("--arch")
    k.add_argument("--checkpoint")
    k.add_argument("--out", help="file to write (default: stdout)")

    sub.add_parser("selfcheck", parents=[common], help="run the invariant suite")

    g = sub.add_parser("gen-data", parents=[common], help="write the synthetic dataset")
    g.add_argument("--format", choices=("npz", "idx"), default="npz")
    g.add_argument("--out")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = _config(args)
        if args.print_config:
            sys.stdout.write(cfg.to_toml())
            return EXIT_OK
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IdxFormatError, runner.CheckpointError, FloatingPointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
