"""Command-line entry point: ``skipfuse <command> [flags]``.

Exit status is 0 on success, 1 on a usage error and 2 on a runtime error
(including a failed gradient check).
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import os
import sys

import numpy as np

from . import perf
from .config import ModelConfig, load_config
from .fusion import FusionVariant
from .tensor import ConfigError

USAGE_ERROR = 1
RUNTIME_ERROR = 2
TEXT_LEN_NOTE = "stand-in text length; not stated for the timing figures"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _default_seed() -> int:
    raw = os.environ.get("SKIPFUSE_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"SKIPFUSE_SEED must be an integer, got {raw!r}") from None


def _strides(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad stride list {text!r}") from None


def _common(p, seed_default):
    p.add_argument("--config", default=None, help="config file (key = value per line); flags override it (default: none)")
    p.add_argument("--seed", type=int, default=seed_default,
                   help=f"random seed; falls back to $SKIPFUSE_SEED (default: {seed_default})")
    p.add_argument("--out", default="-", help="output path, '-' for stdout (default: -)")


def _dims(p, layers=6, d_model=768):
    p.add_argument("--d-model", type=int, default=None, help=f"model width (default: {d_model})")
    p.add_argument("--heads", type=int, default=None, help="attention heads (default: 12 for d=768)")
    p.add_argument("--m", type=int, default=256,
                   help="visual patch count EXCLUDING the CLS row; one CLS row is added (default: 256)")
    p.add_argument("--n", type=int, default=30,
                   help=f"text token count EXCLUDING the CLS row; {TEXT_LEN_NOTE} (default: 30)")
    p.add_argument("--layers", type=int, default=None,
                   help=f"asymmetric co-attention layer count L (default: {layers})")


def build_parser() -> argparse.ArgumentParser:
    seed = _default_seed()
    parser = _Parser(prog="skipfuse", description="Fusion-network efficiency lab")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    variants = [v.value for v in FusionVariant]

    p = sub.add_parser("bench", help="time forward passes of one fusion variant (CSV)")
    _common(p, seed)
    _dims(p)
    p.add_argument("--variant", choices=variants, default="skip", help="fusion topology (default: skip)")
    p.add_argument("--stride", type=int, default=None, help="stride S for the skip variant (default: 6)")
    p.add_argument("--samples", type=int, default=100, help="timed single-sample forwards (default: 100)")
    p.add_argument("--warmup", type=int, default=5, help="untimed warmup forwards (default: 5)")

    p = sub.add_parser("sweep-stride", help="time the skip variant at several strides (CSV)")
    _common(p, seed)
    _dims(p)
    p.add_argument("--strides", type=_strides, default=[1, 2, 3, 6], help="comma-separated strides (default: 1,2,3,6)")
    p.add_argument("--samples", type=int, default=100, help="timed forwards per stride (default: 100)")
    p.add_argument("--warmup", type=int, default=5, help="untimed warmup forwards (default: 5)")

    p = sub.add_parser("flops", help="analytical FLOPs of every variant (CSV)")
    _common(p, seed)
    _dims(p)
    p.add_argument("--stride", type=int, default=None, help="stride S for the skip variant (default: 6)")
    p.add_argument("--verify", action="store_true", help="also count multiplies in a real forward (default: off)")

    p = sub.add_parser("train-toy", help="joint pretraining on synthetic pairs (TSV log)")
    _common(p, seed)
    p.add_argument("--steps", type=int, default=200, help="optimizer steps (default: 200)")
    p.add_argument("--pairs", type=int, default=64, help="synthetic image-text pairs (default: 64)")
    p.add_argument("--batch-size", type=int, default=8, help="pairs per step (default: 8)")
    p.add_argument("--variant", choices=variants, default="skip", help="fusion topology (default: skip)")
    p.add_argument("--optimizer", choices=["sgd", "adam"], default="sgd", help="optimizer (default: sgd)")
    p.add_argument("--lr", type=float, default=None, help="learning rate (default: 1e-2 sgd, 1e-3 adam)")
    p.add_argument("--checkpoint", default=None, help="write final weights here (default: none)")

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer type")
    _common(p, seed)
    p.add_argument("--tolerance", type=float, default=1e-4, help="pass threshold (default: 0.0001)")

    p = sub.add_parser("memory", help="static and activation memory under ZeRO partitioning (CSV)")
    _common(p, seed)
    _dims(p)
    p.add_argument("--params", type=int, default=None, help="parameter count (default: counted from the fusion network)")
    p.add_argument("--gpus", type=int, default=16, help="data-parallel workers (default: 16)")
    p.add_argument("--profile", choices=sorted(perf.PROFILES), default="adam-fp32",
                   help="precision/optimizer profile (default: adam-fp32)")
    p.add_argument("--variant", choices=variants, default="skip", help="fusion topology for activations (default: skip)")
    p.add_argument("--stride", type=int, default=None, help="stride S for the skip variant (default: 6)")
    p.add_argument("--checkpoint-every", type=int, default=1,
                   help="keep one layer input per this many layers (default: 1)")
    return parser


def _config(args, toy: bool) -> ModelConfig:
    cfg = ModelConfig() if toy else perf.fusion_config(768, 6, 6)
    if args.config:
        cfg = load_config(args.config, cfg)
    changes = {"seed": args.seed}
    for flag, field in (("d_model", "d_model"), ("heads", "n_heads"),
                        ("layers", "n_fusion_asym_layers"), ("stride", "stride")):
        value = getattr(args, flag, None)
        if value is not None:
            changes[field] = value
    if "d_model" in changes and "n_heads" not in changes:
        d = changes["d_model"]
        changes["n_heads"] = max(h for h in (12, 8, 4, 2, 1) if d % h == 0)
    return dataclasses.replace(cfg, **changes)


@contextlib.contextmanager
def _output(path):
    if path in (None, "-"):
        yield sys.stdout
    else:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            yield fh


def _cmd_bench(args, out):
    cfg = _config(args, toy=False)
    rec = perf.benchmark_forward(args.variant, cfg, args.m + 1, args.n + 1, args.samples, args.warmup)
    perf.write_csv([rec], out)


def _cmd_sweep(args, out):
    cfg = _config(args, toy=False)
    records = perf.stride_sweep(cfg, args.strides, args.m + 1, args.n + 1, args.samples, args.warmup)
    perf.write_csv(records, out)
    lo, hi = min(records, key=lambda r: r.stride), max(records, key=lambda r: r.stride)
    if lo.stride != hi.stride:
        print(f"flops S={lo.stride}/S={hi.stride}: {lo.flops / hi.flops:.3f}; "
              f"wall S={lo.stride}/S={hi.stride}: {lo.wall_seconds / hi.wall_seconds:.3f}", file=sys.stderr)


def _cmd_flops(args, out):
    cfg = _config(args, toy=False)
    m_len, n_len = args.m + 1, args.n + 1
    writer = csv.writer(out, lineterminator="\n")
    header = ["variant", "d_model", "m_len", "n_len", "layers", "stride", "flops"]
    writer.writerow(header + (["counted_flops"] if args.verify else []))
    for variant in FusionVariant:
        stride = cfg.stride if variant is FusionVariant.SKIP_CONNECTED else 1
        row = [variant.value, cfg.d_model, m_len, n_len, cfg.n_fusion_asym_layers,
               stride if variant is FusionVariant.SKIP_CONNECTED else 0,
               perf.flop_count(variant, cfg.d_model, m_len, n_len, cfg.n_fusion_asym_layers,
                               stride, cfg.ffn_multiplier)]
        if args.verify:
            row.append(perf.measured_flops(variant, cfg.d_model, m_len, n_len,
                                           cfg.n_fusion_asym_layers, stride, cfg.ffn_multiplier))
        writer.writerow(row)


def _cmd_train(args, out):
    from .train import save_model, train

    cfg = _config(args, toy=True)
    model, _ = train(cfg, args.steps, n_pairs=args.pairs, batch_size=args.batch_size,
                     variant=args.variant, optimizer=args.optimizer, lr=args.lr, log=out)
    if args.checkpoint:
        save_model(model, args.checkpoint)


def _cmd_gradcheck(args, out):
    from .gradcheck_suite import run_suite

    worst = 0.0
    for name, err in run_suite(seeds=[args.seed]):
        out.write(f"{name}\t{err:.3e}\n")
        worst = max(worst, err)
    ok = worst < args.tolerance
    out.write(f"max_relative_error\t{worst:.3e}\t{'PASS' if ok else 'FAIL'}\n")
    return 0 if ok else RUNTIME_ERROR


def _cmd_memory(args, out):
    from .fusion import FusionNetwork

    cfg = _config(args, toy=False)
    stride = cfg.stride if args.variant == "skip" else 1
    params = args.params
    if params is None:
        net = FusionNetwork(args.variant, cfg.replace(stride=stride))
        params = sum(p.data.size for p in net.parameters())
    rows = perf.fusion_activation_rows(args.variant, args.m + 1, args.n + 1,
                                       cfg.n_fusion_asym_layers, stride)
    est = perf.zero_memory_estimate(params, args.gpus, args.profile, rows, cfg.d_model,
                                    checkpoint_every=args.checkpoint_every)
    writer = csv.writer(out, lineterminator="\n")
    record = dataclasses.asdict(est)
    writer.writerow(record.keys())
    writer.writerow(record.values())


COMMANDS = {
    "bench": _cmd_bench,
    "sweep-stride": _cmd_sweep,
    "flops": _cmd_flops,
    "train-toy": _cmd_train,
    "gradcheck": _cmd_gradcheck,
    "memory": _cmd_memory,
}


def run(argv=None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return USAGE_ERROR
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        with _output(args.out) as out:
            code = COMMANDS[args.command](args, out)
        return code or 0
    except (ConfigError, ValueError, OSError) as exc:
        print(f"skipfuse {args.command}: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
