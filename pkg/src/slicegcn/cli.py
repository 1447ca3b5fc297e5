"""Command-line surface: training runs, benchmark sweeps, dataset validation.

Exit codes: 0 ok, 1 usage/config error, 2 data error, 3 numeric failure.
Set SLICEGCN_LOG=debug|info|warning to control verbosity.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from . import engine
from .engine import TrainConfig
from .graph import DatasetError, load_dataset, synth_graph
from .nn import NumericError

log = logging.getLogger("slicegcn")

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

# Run-spec / flag defaults. lr, dropout, and slice scale follow the usual
# full-batch GCN settings; the rest are desk-scale defaults.
DEFAULTS = {
    "dataset": None,
    "variant": "slice",
    "p": 1,
    "epochs": 200,
    "hidden": 64,
    "layers": 2,
    "lr": 1e-3,
    "dropout": 0.5,
    "slice_scale": 1.0,
    "seed": 0,
    "precision": "f32",
    "layer_form": "eq6",
    "threads": None,
    "out": "metrics.json",
    "no_timing": False,
    "synth_nodes": 400,
    "synth_classes": 3,
    "synth_feat": 16,
    "synth_pin": 0.1,
    "synth_pout": 0.01,
    "synth_signal": 1.0,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass(frozen=True)
class MetricsArtifact:
    """Run summary plus per-epoch records; JSON round-trips exactly."""

    schema_version: int
    config: dict
    summary: dict
    epochs: list

    def to_json(self) -> str:
        doc = {
            "schema_version": self.schema_version,
            "config": self.config,
            "summary": self.summary,
            "epochs": self.epochs,
        }
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsArtifact":
        doc = json.loads(text)
        return cls(
            schema_version=doc["schema_version"],
            config=doc["config"],
            summary=doc["summary"],
            epochs=doc["epochs"],
        )


def build_artifact(config_echo: dict, summary, reports, include_timing: bool) -> MetricsArtifact:
    """Assemble the artifact; timing fields are nulled when excluded so the
    document is byte-for-byte reproducible at a fixed seed."""
    summary_doc = {
        "best_epoch": summary.best_epoch,
        "best_val": summary.best_val,
        "test_at_best_val": summary.test_at_best_val,
        "param_count": summary.param_count,
        "epochs": summary.epochs,
        "throughput_eps": summary.throughput_eps if include_timing else None,
    }
    epoch_docs = [
        {
            "epoch": r.epoch,
            "lr": r.lr,
            "loss": r.loss,
            "train_metric": r.train_metric,
            "val_metric": r.val_metric,
            "test_metric": r.test_metric,
            "wall_ms": r.wall_ms if include_timing else None,
        }
        for r in reports
    ]
    return MetricsArtifact(
        schema_version=SCHEMA_VERSION, config=config_echo, summary=summary_doc, epochs=epoch_docs
    )


def epochs_csv(reports) -> str:
    """Per-epoch curve data: epoch, lr, loss, val_metric."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "lr", "loss", "val_metric"])
    for r in reports:
        writer.writerow([r.epoch, repr(r.lr), repr(r.loss), repr(r.val_metric)])
    return buf.getvalue()


def _add_run_flags(p: argparse.ArgumentParser):
    # Defaults stay None here so run-spec values and built-in defaults can be
    # layered underneath explicit flags.
    p.add_argument("--dataset", help="dataset directory, or 'synth'")
    p.add_argument("--variant", choices=engine.VARIANTS)
    p.add_argument("-p", type=int, dest="p", help="number of simulated devices")
    p.add_argument("--epochs", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--dropout", type=float)
    p.add_argument("--slice-scale", type=float, dest="slice_scale")
    p.add_argument("--seed", type=int)
    p.add_argument("--precision", choices=("f32", "f64"))
    p.add_argument("--layer-form", choices=("eq1", "eq6"), dest="layer_form")
    p.add_argument("--threads", type=int, help="worker thread count (default: p; 1 = sequential)")
    p.add_argument("--synth-nodes", type=int, dest="synth_nodes")
    p.add_argument("--synth-classes", type=int, dest="synth_classes")
    p.add_argument("--synth-feat", type=int, dest="synth_feat")
    p.add_argument("--synth-pin", type=float, dest="synth_pin")
    p.add_argument("--synth-pout", type=float, dest="synth_pout")
    p.add_argument("--synth-signal", type=float, dest="synth_signal")


def make_parser() -> _Parser:
    parser = _Parser(prog="slicegcn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one training configuration", parents=[])
    _add_run_flags(t)
    t.add_argument("--spec", help="run-spec JSON file; explicit flags override it")
    t.add_argument("--out", help="metrics JSON path (CSV written alongside)")
    t.add_argument(
        "--no-timing",
        action="store_true",
        default=None,
        dest="no_timing",
        help="null out wall-time fields for byte-reproducible artifacts",
    )

    b = sub.add_parser("bench", help="benchmark a list of (variant, p) cells")
    _add_run_flags(b)
    b.add_argument(
        "--cells",
        required=True,
        help="comma-separated variant[:p] cells, e.g. 'baseline,slice:2,slice:3'",
    )
    b.add_argument("--out", help="optional JSON path for the comparison table")

    v = sub.add_parser("validate-dataset", help="load a dataset directory and print statistics")
    v.add_argument("path")
    return parser


def _load_spec(path: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as e:
        raise UsageError(f"cannot read run spec: {e}") from e
    except json.JSONDecodeError as e:
        raise UsageError(f"run spec is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise UsageError("run spec must be a JSON object")
    unknown = set(doc) - set(DEFAULTS)
    if unknown:
        raise UsageError(f"unknown run-spec keys: {', '.join(sorted(unknown))}")
    return doc


def _merge_settings(args: argparse.Namespace, spec: dict) -> dict:
    merged = dict(DEFAULTS)
    merged.update(spec)
    for key in DEFAULTS:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            merged[key] = flag_value
    return merged


def _resolve_graph(settings: dict):
    dataset = settings["dataset"]
    if dataset is None:
        raise UsageError("--dataset is required (a directory path, or 'synth')")
    if dataset == "synth":
        return synth_graph(
            n=settings["synth_nodes"],
            classes=settings["synth_classes"],
            d_feat=settings["synth_feat"],
            p_in=settings["synth_pin"],
            p_out=settings["synth_pout"],
            signal=settings["synth_signal"],
            seed=settings["seed"],
        )
    return load_dataset(dataset)


def _make_config(settings: dict) -> TrainConfig:
    return TrainConfig(
        variant=settings["variant"],
        p=settings["p"],
        epochs=settings["epochs"],
        hidden=settings["hidden"],
        layers=settings["layers"],
        lr=settings["lr"],
        dropout=settings["dropout"],
        slice_scale=settings["slice_scale"],
        seed=settings["seed"],
        precision=settings["precision"],
        layer_form=settings["layer_form"],
        threads=settings["threads"],
    )


def _config_echo(settings: dict) -> dict:
    # threads and out are execution details, not model configuration; results
    # do not depend on them, and excluding them keeps artifacts byte-identical
    # across threaded and sequential executions of the same run.
    skip = {"no_timing", "threads", "out"}
    echo = {k: settings[k] for k in DEFAULTS if not k.startswith("synth_") and k not in skip}
    if settings["dataset"] == "synth":
        echo["synth"] = {
            k.removeprefix("synth_"): settings[k] for k in DEFAULTS if k.startswith("synth_")
        }
    return echo


def cmd_train(args: argparse.Namespace) -> int:
    spec = _load_spec(args.spec) if getattr(args, "spec", None) else {}
    settings = _merge_settings(args, spec)
    graph = _resolve_graph(settings)
    config = _make_config(settings)
    log.info(
        "training %s p=%d on %d nodes / %d features",
        config.variant,
        config.p,
        graph.num_nodes,
        graph.num_features,
    )
    summary, reports = engine.train(graph, config)
    include_timing = not settings["no_timing"]
    artifact = build_artifact(_config_echo(settings), summary, reports, include_timing)

    out_path = Path(settings["out"])
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(artifact.to_json())
    csv_path = out_path.with_suffix(".csv")
    csv_path.write_text(epochs_csv(reports))

    print(
        f"best_val={summary.best_val:.4f} test_at_best_val={summary.test_at_best_val:.4f} "
        f"params={summary.param_count}"
        + (f" throughput={summary.throughput_eps:.2f} eps" if include_timing and summary.throughput_eps else "")
    )
    print(f"wrote {out_path} and {csv_path}")
    return EXIT_OK


def _parse_cells(text: str) -> list:
    cells = []
    for raw in text.split(","):
        raw = raw.strip()
        if not raw:
            continue
        if ":" in raw:
            variant, _, p_str = raw.partition(":")
            try:
                p = int(p_str)
            except ValueError as e:
                raise UsageError(f"bad cell {raw!r}: device count must be an integer") from e
        else:
            variant, p = raw, 1
        if variant not in engine.VARIANTS:
            raise UsageError(f"bad cell {raw!r}: unknown variant {variant!r}")
        cells.append((variant, p))
    if not cells:
        raise UsageError("--cells must name at least one variant[:p] cell")
    return cells


def bench_table(rows: list) -> str:
    """Comparison table: one line per cell plus throughput ratios against
    the first cell."""
    base = rows[0]["throughput_eps"]
    header = f"{'cell':<16} {'metric':>8} {'epochs/s':>10} {'ratio':>7} {'params':>10}"
    lines = [header, "-" * len(header)]
    for r in rows:
        ratio = r["throughput_eps"] / base if base else float("nan")
        lines.append(
            f"{r['cell']:<16} {r['metric']:>8.4f} {r['throughput_eps']:>10.3f} "
            f"{ratio:>7.2f} {r['params']:>10}"
        )
    return "\n".join(lines)


def cmd_bench(args: argparse.Namespace) -> int:
    cells = _parse_cells(args.cells)
    settings = _merge_settings(args, {})
    graph = _resolve_graph(settings)
    rows = []
    for variant, p in cells:
        cell_settings = dict(settings, variant=variant, p=p)
        config = _make_config(cell_settings)
        log.info("bench cell %s p=%d", variant, p)
        summary, _ = engine.train(graph, config)
        rows.append(
            {
                "cell": f"{variant} p={p}",
                "metric": summary.test_at_best_val,
                "throughput_eps": summary.throughput_eps or 0.0,
                "params": summary.param_count,
            }
        )
    table = bench_table(rows)
    print(table)
    if getattr(args, "out", None):
        Path(args.out).write_text(json.dumps({"cells": rows}, indent=2) + "\n")
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_validate_dataset(path: str) -> int:
    graph = load_dataset(path)
    undirected_edges = graph.adj.num_edges // 2
    print(f"nodes:    {graph.num_nodes}")
    print(f"edges:    {undirected_edges}")
    print(f"features: {graph.num_features}")
    print(f"classes:  {graph.num_classes}")
    counts = [int((graph.split == t).sum()) for t in (0, 1, 2)]
    print(f"split:    train={counts[0]} val={counts[1]} test={counts[2]}")
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("SLICEGCN_LOG", "WARNING").upper())
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            return cmd_train(args)
        if args.command == "bench":
            return cmd_bench(args)
        if args.command == "validate-dataset":
            return cmd_validate_dataset(args.path)
        raise UsageError(f"unknown command {args.command!r}")
    except (UsageError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except DatasetError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
