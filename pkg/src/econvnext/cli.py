"""Command-line entry point: ``econvnext <subcommand> ...``.

Exit status is 0 iff every check the subcommand performs passes.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import dataclass
from typing import List, Optional

from . import etf
from .config import PRESET_NAMES, ArchConfig, narrow, preset
from .cost import calibrate, human, model_cost, worked_blocks
from .errors import EConvNeXtError

THREADS_ENV = "ECONVNEXT_THREADS"


@dataclass(frozen=True)
class CostTarget:
    flops: float
    params: float
    flops_tol: float
    params_tol: float
    calibrate: bool = False  # unpublished layout; print nearest configs on a miss


COST_TARGETS = {
    "convnext_tiny_ref": CostTarget(4.47e9, 28.6e6, 0.03, 0.05),
    "e_convnext_mini": CostTarget(0.93e9, 7.6e6, 0.10, 0.10, calibrate=True),
    "e_convnext_tiny": CostTarget(2.04e9, 13.2e6, 0.03, 0.05),
    "e_convnext_small": CostTarget(3.12e9, 19.4e6, 0.10, 0.10, calibrate=True),
}


def _verdict(ok: bool) -> str:
    return "PASS" if ok else "FAIL"


def _dev(value: float, target: float) -> float:
    return value / target - 1


def _load_config(args) -> ArchConfig:
    if getattr(args, "config", None):
        with open(args.config) as f:
            cfg = ArchConfig.from_json(f.read())
    else:
        cfg = preset(args.preset)
    if getattr(args, "input", None):
        cfg.input_size = (args.input, args.input)
    return cfg.validate()


def _dump(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2) + "\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_describe(args) -> int:
    from .builder import shape_trace

    cfg = _load_config(args)
    trace = shape_trace(cfg)
    if args.json:
        _dump({"config": cfg.to_dict(), "trace": [[n, list(s)] for n, s in trace]})
        return 0
    print(f"{cfg.name or 'custom'}: stem {cfg.stem.value}, block {cfg.block.kind.value}"
          f" + {cfg.block.attention.value}, input {cfg.input_size[0]}x{cfg.input_size[1]}")
    w = max(len(n) for n, _ in trace)
    for name, shape in trace:
        print(f"{name:<{w}}  {tuple(shape)}")
    return 0


def _cost_check(name: str, flops: int, params: int) -> Optional[bool]:
    t = COST_TARGETS.get(name)
    if t is None:
        return None
    return abs(_dev(flops, t.flops)) <= t.flops_tol and abs(_dev(params, t.params)) <= t.params_tol


def cmd_flops(args, params_only: bool = False) -> int:
    cfg = _load_config(args)
    report = model_cost(cfg, macs2=args.macs2)
    name = cfg.name if not args.config else ""
    at_224 = tuple(cfg.input_size) == (224, 224) and not args.macs2
    ok = _cost_check(name, report.total_flops, report.total_params) if at_224 else None
    if args.json:
        d = report.to_dict()
        if params_only:
            d = {k: d[k] for k in ("model", "non_paper_config", "total_params")}
        if ok is not None:
            d["target"] = {"flops": int(COST_TARGETS[name].flops), "params": int(COST_TARGETS[name].params), "pass": ok}
        _dump(d)
    else:
        if params_only:
            print(f"total params: {report.total_params:,} ({human(report.total_params)})")
        else:
            print(report.to_text(rows=args.rows))
        if ok is not None:
            t = COST_TARGETS[name]
            print(f"{_verdict(ok)} vs {human(t.flops)} FLOPs (±{t.flops_tol:.0%}) / "
                  f"{human(t.params)} params (±{t.params_tol:.0%})")
    return 0 if ok in (None, True) else 1


def cmd_params(args) -> int:
    return cmd_flops(args, params_only=True)


def _print_reports(reports) -> bool:
    ok = True
    for r in reports:
        print(r)
        ok &= r.passed
    return ok


def cmd_verify(args) -> int:
    from . import verify

    ok = True
    if args.suite in ("oracle", "all"):
        print("== oracle equivalences ==")
        ok &= _print_reports(verify.run_oracle_suite(seeds=args.seeds))
    if args.suite in ("grad", "all"):
        print("== gradient checks (float64) ==")
        ok &= _print_reports(verify.run_grad_suite())
    if args.suite in ("flops", "all"):
        print("== analytic vs instrumented MACs ==")
        ok &= _print_reports(verify.run_mac_suite())
    print(_verdict(ok))
    return 0 if ok else 1


def cmd_make_dataset(args) -> int:
    from .train import make_blobs, write_dataset

    X, y = make_blobs(args.n, args.classes, args.size, args.seed)
    path = write_dataset(args.out, X, y, args.classes)
    print(f"wrote {len(y)} samples to {path}")
    return 0


def cmd_train(args) -> int:
    from .builder import build
    from .train import TrainConfig, load_dataset, train, write_history

    data = load_dataset(args.data)
    cfg = _load_config(args)
    size = data.samples.shape[2:]
    if args.width:
        cfg = narrow(cfg, args.width, tuple(args.blocks), data.num_classes, size)
    else:
        cfg.num_classes, cfg.input_size = data.num_classes, tuple(size)
    graph = build(cfg.validate(), seed=args.seed)
    tc = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, base_lr=args.lr, seed=args.seed,
                     label_smoothing=args.label_smoothing, weight_decay=args.weight_decay,
                     val_fraction=args.val_fraction)
    history = train(graph, data, tc)
    print("epoch,lr,train_loss,train_acc,val_acc")
    for r in history:
        print(f"{r.epoch},{r.lr:.6g},{r.train_loss:.6f},{r.train_acc:.4f},{r.val_acc:.4f}")
    if args.history:
        write_history(args.history, history)
    if args.save:
        etf.save_state(args.save, graph.state_dict())
    return 0


def cmd_bench_norm(args) -> int:
    from .verify import bench_norm

    ln_s, bn_s = bench_norm(args.height, args.width, args.channels, args.batch, args.iters)
    if args.json:
        _dump({"dims": [args.batch, args.channels, args.height, args.width], "iters": args.iters,
               "ln_seconds": ln_s, "bn_seconds": bn_s, "bn_faster": bn_s < ln_s})
    else:
        print(f"input {args.batch}x{args.channels}x{args.height}x{args.width}, {args.iters} iters fwd+bwd")
        print(f"conv + LN: {ln_s * 1e3:9.1f} ms")
        print(f"conv + BN: {bn_s * 1e3:9.1f} ms")
        if bn_s >= ln_s:
            print("WARNING: BN was not faster than LN on this machine; timings depend on the BLAS build "
                  "and memory bandwidth")
    return 0


def _reproduce_sec311(as_json: bool) -> bool:
    ok = True
    out = []
    for wb in worked_blocks():
        passed = wb.check()
        ok &= passed
        out.append({"block": wb.name, "terms": [[e, v, p] for e, v, p in wb.terms], "computed": wb.total,
                    "printed": wb.printed_total, "exact": wb.exact_total, "pass": passed})
        if as_json:
            continue
        print(f"{wb.name}")
        for expr, val, printed in wb.terms:
            print(f"  {expr:<28} = {val:>13,}   text: {f'{printed / 1e6:g}M' if printed else '-'}")
        target = f"exactly {wb.exact_total:,}" if wb.exact_total else f"{wb.printed_total / 1e6:g}M ±2%"
        dev = _dev(wb.total, wb.exact_total or wb.printed_total)
        print(f"  total {wb.total:,} vs {target} ({dev:+.2%})  {_verdict(passed)}")
    if as_json:
        _dump({"blocks": out, "pass": ok})
    return ok


def _reproduce_table8(as_json: bool) -> bool:
    ok = True
    rows = []
    for name, t in COST_TARGETS.items():
        r = model_cost(preset(name))
        passed = bool(_cost_check(name, r.total_flops, r.total_params))
        row = {"preset": name, "flops": r.total_flops, "params": r.total_params, "target_flops": int(t.flops),
               "target_params": int(t.params), "pass": passed}
        if not passed and t.calibrate:
            row["calibration"] = [c.describe() for c in calibrate(t.flops, t.params)]
        else:
            ok &= passed
        rows.append(row)
    if as_json:
        _dump({"rows": rows, "pass": ok})
        return ok
    print(f"{'preset':<20} {'FLOPs':>8} {'target':>8} {'dev':>7}  {'params':>8} {'target':>8} {'dev':>7}")
    for row in rows:
        print(f"{row['preset']:<20} {human(row['flops']):>8} {human(row['target_flops']):>8} "
              f"{_dev(row['flops'], row['target_flops']):>+7.1%}  {human(row['params']):>8} "
              f"{human(row['target_params']):>8} {_dev(row['params'], row['target_params']):>+7.1%}  "
              f"{_verdict(row['pass'])}")
        for line in row.get("calibration", []):
            print(f"    nearest: {line}")
    return ok


def cmd_reproduce(args) -> int:
    ok = {"sec311": _reproduce_sec311, "table8": _reproduce_table8}[args.table](args.json)
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_model_args(p, with_input: bool = True):
    src = p.add_mutually_exclusive_group()
    src.add_argument("--preset", default="e_convnext_tiny", choices=PRESET_NAMES)
    src.add_argument("--config", help="architecture JSON file")
    if with_input:
        p.add_argument("--input", type=int, help="square input resolution (default: config's)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="econvnext", description="E-ConvNeXt construction kit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("describe", help="shape trace of a preset or config")
    _add_model_args(p)
    p.add_argument("--json", action="store_true", help="emit config and trace as JSON")
    p.set_defaults(func=cmd_describe)

    for name, func in (("flops", cmd_flops), ("params", cmd_params)):
        p = sub.add_parser(name, help=f"analytic {name} report")
        _add_model_args(p)
        p.add_argument("--json", action="store_true")
        p.add_argument("--macs2", action="store_true", help="count 2 ops per multiply-accumulate")
        p.add_argument("--rows", action="store_true", help="print per-layer rows")
        p.set_defaults(func=func)

    p = sub.add_parser("verify", help="gradient, oracle and MAC-count suites")
    p.add_argument("--suite", choices=("grad", "oracle", "flops", "all"), default="all")
    p.add_argument("--seeds", type=int, default=10)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("make-dataset", help="write the synthetic blob dataset")
    p.add_argument("out")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_dataset)

    p = sub.add_parser("train", help="train on an ETF dataset directory")
    _add_model_args(p, with_input=False)
    p.add_argument("--data", required=True, help="directory holding manifest.json")
    p.add_argument("--width", type=float, default=0.125, help="width multiplier; 0 keeps the config as is")
    p.add_argument("--blocks", type=int, nargs=4, default=[1, 1, 1, 1])
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-2, help="base lr per 128 samples")
    p.add_argument("--weight-decay", type=float, default=0.05)
    p.add_argument("--label-smoothing", type=float, default=0.1)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--history", help="write per-epoch CSV here")
    p.add_argument("--save", help="write final weights as ETF files into this directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench-norm", help="LN vs BN after a 2x2/s2 conv")
    p.add_argument("--height", type=int, default=56)
    p.add_argument("--width", type=int, default=56)
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_bench_norm)

    p = sub.add_parser("reproduce", help="worked block costs or preset cost table")
    p.add_argument("table", choices=("sec311", "table8"))
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_reproduce)
    return ap


def _thread_limit():
    n = os.environ.get(THREADS_ENV)
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except (EConvNeXtError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
