"""Command-line experiment runner.

Subcommands::

    hetfed gen-data --out DIR [--seed S] [--n-train N] ...
    hetfed train    --out DIR [--sizes 500,1000] [--format f64,f32] [--repeats 20] [--epochs 500]
    hetfed fl-run   CONFIG.json --out DIR [--repeats 1]
    hetfed bench    --out DIR [--sizes ...] [--format ...] [--epochs 20]
    hetfed report   DIR [--out DIR]

Exit status: 0 on success, 1 on invalid input or configuration, 2 on I/O errors.
"""

from __future__ import annotations

import argparse
import re
import sys
from dataclasses import replace
from pathlib import Path


from . import checkpoint, report
from .fedsim import ConfigError, load_config, run_session
from .meter import Stopwatch, Summary, memory_footprint
from .mlp import SIGMOID_GAIN, default_layer_dims, evaluate, init_model, train_epoch, warm_up
from .numfmt import make_format
from .synthdata import DataSpec, generate, write_csv

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("sizes must be positive integers")
    return values


def _format_list(text: str):
    # commas inside parentheses belong to a descriptor, e.g. "f64,float(5,10)"
    parts = re.findall(r"[^,()]+(?:\([^)]*\))?", text)
    try:
        return [make_format(p.strip()) for p in parts if p.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9.]+", "_", name).strip("_")


def _data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n-val", type=int, default=1000)
    p.add_argument("--n-test", type=int, default=1000)
    p.add_argument("--features", type=int, default=5)
    p.add_argument("--mean0", type=float, default=-1.0)
    p.add_argument("--mean1", type=float, default=1.0)
    p.add_argument("--std", type=float, default=1.0)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="base seed (repeat i uses seed + i)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--repeats", type=int, default=None, help="number of repeats")
    common.add_argument("--format", type=_format_list, default=None, help="comma-separated format descriptors")

    parser = _Parser(prog="hetfed", description="Heterogeneous federated learning simulator")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="write train/val/test CSV dumps")
    p.add_argument("--n-train", type=int, default=1000)
    _data_flags(p)

    p = sub.add_parser("train", parents=[common], help="centralized training sweep")
    p.add_argument("--sizes", "--n-train", dest="sizes", type=_int_list, default=[1000])
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--hidden-layers", type=int, default=5)
    p.add_argument("--width", type=int, default=10)
    p.add_argument("--init-gain", type=float, default=SIGMOID_GAIN)
    p.add_argument("--save-model", action="store_true", help="write an HFL1 checkpoint per run")
    _data_flags(p)

    p = sub.add_parser("fl-run", parents=[common], help="run a federated session from a JSON config")
    p.add_argument("config", type=Path)

    p = sub.add_parser("bench", parents=[common], help="per-epoch timing benchmark")
    p.add_argument("--sizes", type=_int_list, default=[500, 1000, 1500, 2000])
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.5)

    p = sub.add_parser("report", parents=[common], help="summaries and figures from run CSVs")
    p.add_argument("input", type=Path)
    return parser


def _require_out(args) -> Path:
    if args.out is None:
        raise UsageError(f"{args.command}: the --out directory is required")
    args.out.mkdir(parents=True, exist_ok=True)
    return args.out


def _positive(name: str, value: int, allow_zero: bool = False) -> None:
    if value < 0 or (value == 0 and not allow_zero):
        raise UsageError(f"{name} must be {'>= 0' if allow_zero else '>= 1'}, got {value}")


def _data_spec(args, n_train: int, seed: int) -> DataSpec:
    return DataSpec(n_train, args.n_val, args.n_test, args.features, args.mean0, args.mean1, args.std, seed)


def cmd_gen_data(args) -> int:
    out = _require_out(args)
    fmt = (args.format or [make_format("f64")])[0]
    spec = _data_spec(args, args.n_train, args.seed or 0)
    for name, data in zip(("train", "val", "test"), generate(spec, fmt)):
        write_csv(data, out / f"{name}.csv")
    return EXIT_OK


def cmd_train(args) -> int:
    out = _require_out(args)
    formats = args.format or [make_format("f64")]
    repeats = 20 if args.repeats is None else args.repeats
    seed = args.seed or 0
    _positive("--repeats", repeats)
    _positive("--epochs", args.epochs, allow_zero=True)
    for n in args.sizes:
        _data_spec(args, n, seed)  # validate before any work
    dims = default_layer_dims(args.features, args.hidden_layers, args.width)
    summary = []
    for fmt in formats:
        warm_up(fmt)
        for n in args.sizes:
            config = f"epochs_{_safe(fmt.descriptor)}_n{n}"
            for rep in range(repeats):
                run_seed = seed + rep
                train, val, _ = generate(_data_spec(args, n, run_seed), fmt)
                model = init_model(dims, fmt, run_seed, args.init_gain)
                mem = memory_footprint(model, n)
                rows, times, best, best_epoch = [], [], 0.0, 0
                for epoch in range(1, args.epochs + 1):
                    with Stopwatch() as sw:
                        model, loss = train_epoch(model, train, args.lr)
                    acc = evaluate(model, val)
                    times.append(sw.ms)
                    if acc > best:
                        best, best_epoch = acc, epoch
                    rows.append(
                        dict(
                            round=rep, device_id=0, epoch=epoch, accuracy=acc, loss=loss,
                            t_local_ms=sw.ms, t_upload_ms=0.0, t_global_ms=0.0, t_download_ms=0.0,
                            t_total_ms=sw.ms, mem_bytes=mem.total_bytes, payload_up_bytes=0, payload_down_bytes=0,
                        )
                    )
                if args.epochs:
                    report.write_metrics(out / f"{config}_r{rep:02d}.csv", rows)
                if args.save_model:
                    checkpoint.save(out / f"{config}_r{rep:02d}.hfl", model)
                stats = Summary.of(times) if times else None
                summary.append(
                    [fmt.descriptor, n, rep, run_seed, best, best_epoch,
                     stats.mean if stats else "", stats.median if stats else "",
                     mem.weights_bytes, mem.biases_bytes, mem.gradients_bytes, mem.activations_bytes,
                     mem.deltas_bytes, mem.inputs_bytes, mem.labels_bytes, mem.total_bytes]
                )
    report.write_table(
        out / "train_summary.csv",
        ["format", "n_train", "repeat", "seed", "max_accuracy", "max_accuracy_epoch", "mean_epoch_ms",
         "median_epoch_ms", "weights_bytes", "biases_bytes", "gradients_bytes", "activations_bytes",
         "deltas_bytes", "inputs_bytes", "labels_bytes", "mem_bytes"],
        summary,
    )
    return EXIT_OK


def cmd_fl_run(args) -> int:
    out = _require_out(args)
    cfg = load_config(args.config)
    repeats = 1 if args.repeats is None else args.repeats
    _positive("--repeats", repeats)
    if args.format:
        cfg = replace(cfg, global_format=args.format[0])
    for rep in range(repeats):
        run_cfg = cfg
        if args.seed is not None or rep:
            base = cfg.data.seed if args.seed is None else args.seed
            run_cfg = replace(cfg, data=replace(cfg.data, seed=base + rep), seed=None if cfg.seed is None else cfg.seed + rep)
        result = run_session(run_cfg)
        rows, cov_rows = [], []
        for r in result:
            for d in r.devices:
                ms = d.times.as_ms()
                rows.append(
                    dict(round=r.round + 1, device_id=d.device_id, epoch=d.epochs, accuracy=r.accuracy, loss=d.loss,
                         mem_bytes=d.mem_bytes, payload_up_bytes=d.payload_up, payload_down_bytes=d.payload_down, **ms)
                )
            for layer, c in enumerate(r.coverage):
                cov_rows.append([r.round + 1, layer, int(c.min()), int(c.max()), float(c.mean()), int((c == 0).sum())])
        report.write_metrics(out / f"metrics_r{rep:02d}.csv", rows)
        report.write_table(
            out / f"coverage_{rep:02d}.csv",
            ["round", "layer", "min_coverage", "max_coverage", "mean_coverage", "uncovered"],
            cov_rows,
        )
        checkpoint.save(out / f"global_r{rep:02d}.hfl", result.model)
    return EXIT_OK


def cmd_bench(args) -> int:
    out = _require_out(args)
    formats = args.format or [make_format("f64"), make_format("f32")]
    repeats = 20 if args.repeats is None else args.repeats
    seed = args.seed or 0
    _positive("--repeats", repeats)
    _positive("--epochs", args.epochs)
    rows = []
    for fmt in formats:
        warm_up(fmt)
    for n in args.sizes:
        for rep in range(repeats):
            # formats interleaved per repeat so drift affects them alike
            for fmt in formats:
                train, _, _ = generate(DataSpec(n_train=n, n_val=1, n_test=1, seed=seed + rep), fmt)
                model = init_model(default_layer_dims(), fmt, seed + rep)
                times = []
                for _ in range(args.epochs):
                    with Stopwatch() as sw:
                        model, _ = train_epoch(model, train, args.lr)
                    times.append(sw.ms)
                s = Summary.of(times)
                rows.append([fmt.descriptor, n, rep, s.mean, s.median, memory_footprint(model, n).total_bytes])
    report.write_table(out / "bench.csv", ["format", "n_train", "repeat", "mean_epoch_ms", "median_epoch_ms", "mem_bytes"], rows)
    return EXIT_OK


def cmd_report(args) -> int:
    if not args.input.is_dir():
        raise FileNotFoundError(f"no such directory: {args.input}")
    out = args.out or args.input
    out.mkdir(parents=True, exist_ok=True)
    summaries = report.summarize_dir(args.input)
    report.write_table(out / "summary.csv", report.summary_header(), report.summary_rows(summaries))
    for path in report.render_figures(args.input, summaries):
        if out != args.input:
            path.replace(out / path.name)
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "fl-run": cmd_fl_run,
    "bench": cmd_bench,
    "report": cmd_report,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
