"""Command-line front end.

Exit codes: 0 success, 1 verification failure, 2 config error,
3 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

from .backbones import BackboneSpec, build
from .errors import ConfigError, NumericDivergenceError

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("sherl")

CSV_FIELDS = ("label", "kind", "aggregator", "insertion", "reduction", "n_seeds", "mean_acc", "min_acc",
              "max_acc", "std_acc", "n_params", "retained_bytes", "backbone_retained", "audit_passed")


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def _drop_list(text: str) -> frozenset[int]:
    try:
        return frozenset(int(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"--drop expects comma-separated layer indices, got {text!r}") from None


def cmd_run(args) -> int:
    from .config import load_experiment
    from .harness import run_experiment
    from .report import write_report

    exp = load_experiment(args.config)
    if args.seed is not None:
        exp = exp.with_seed(args.seed)
    result = run_experiment(exp)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = write_report(result.report, out / "report.json")
    final = result.report.final
    print(f"{exp.strategy.label}: test_acc={final['test_acc']:.4f} val_acc={final['val_acc']:.4f} -> {path}")
    return EXIT_OK


def write_ablation_csv(rows, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for row in rows:
            d = row.to_dict()
            writer.writerow({
                "label": row.label, "kind": d["strategy"]["kind"], "aggregator": d["strategy"]["aggregator"],
                "insertion": d["strategy"]["insertion"], "reduction": row.reduction,
                "n_seeds": len(row.seeds), "mean_acc": repr(row.mean), "min_acc": repr(d["min_acc"]),
                "max_acc": repr(d["max_acc"]), "std_acc": repr(row.std), "n_params": row.n_params,
                "retained_bytes": row.retained_bytes, "backbone_retained": row.backbone_retained,
                "audit_passed": str(row.audit_passed).lower(),
            })
    return path


def cmd_ablate(args) -> int:
    from .config import load_ablation
    from .harness import ablate
    from .plotting import accuracy_memory_plot

    cfg = load_ablation(args.config)
    seeds = tuple(range(1, args.seeds + 1)) if args.seeds is not None else cfg.seeds
    rows = ablate(cfg.grid, cfg.base, seeds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = write_ablation_csv(rows, out / "ablation.csv")
    svg_path = accuracy_memory_plot(rows, out / "ablation.svg")
    for row in rows:
        lo, hi = row.spread
        print(f"{row.label:28s} mean={row.mean:.4f} [{lo:.4f}, {hi:.4f}] params={row.n_params} "
              f"retained={row.retained_bytes}")
    print(f"wrote {csv_path} and {svg_path}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_suite

    inject = args.inject_fault or os.environ.get("SHERL_INJECT_FAULT", "") not in ("", "0")

    def show(res):
        print(f"[{'PASS' if res.passed else 'FAIL'}] {res.suite}: {res.name}: {res.detail}", flush=True)

    results = run_suite(args.suite, inject_fault=inject, report=show)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if failed:
        print(f"first failing check: {failed[0].suite}: {failed[0].name}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_backbone(args) -> int:
    from .harness import backbone_spec_dict
    from .weights import save_weights

    fields = {"family": args.family, "drop_mask": args.drop, "seed": args.seed}
    if args.layers is not None:
        if args.family == "cnn":
            base = (8, 16, 32, 64, 128, 256, 512)
            if not 2 <= args.layers <= len(base):
                raise ConfigError(f"cnn supports 2..{len(base)} stages", field="--layers")
            fields.update(stage_channels=base[:args.layers], n_layers=args.layers,
                          image_size=max(16, 2 ** (args.layers - 1)))
        else:
            fields["n_layers"] = args.layers
    spec = BackboneSpec(**fields)
    bb = build(spec)
    path = save_weights(args.out, bb.state(), backbone_spec_dict(spec))
    print(f"{spec.family} backbone, {bb.n_layers} layers, {len(bb.params)} tensors, "
          f"{bb.n_sources()} aggregation sources -> {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sherl", description="Memory-efficient side adaptation experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train one configuration and write a report")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=_u64)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="run a strategy grid over seeds; write CSV and SVG")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", type=int, help="number of seeds (1..k); default from the config")
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("verify", help="run self-verification suites")
    p.add_argument("--suite", choices=("gradcheck", "invariants", "memory", "all"), default="all")
    p.add_argument("--inject-fault", action="store_true",
                   help="unfreeze one backbone weight before auditing (the memory suite must fail)")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("backbone", help="build a deterministic frozen backbone and save its weights")
    p.add_argument("--family", choices=("transformer", "cnn", "encdec"), required=True)
    p.add_argument("--layers", type=int)
    p.add_argument("--drop", type=_drop_list, default=frozenset())
    p.add_argument("--seed", type=_u64, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_backbone)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors, which matches the config code
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "ablate" and args.seeds is not None and args.seeds < 1:
        print("error: --seeds must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericDivergenceError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
