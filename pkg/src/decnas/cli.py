"""Command-line entry points: search, report, cost, proxy-sample."""

from __future__ import annotations

import argparse
import json
import shlex
import sys
from pathlib import Path

import numpy as np

from . import cost_model, orchestrator, proxy_sampler
from .search_space import genome_from_dict


def _parse_image_size(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(
            f"expected HxW, got {text!r}") from exc


def _parse_channels(text: str) -> tuple[int, int, int]:
    parts = [int(p) for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three channel widths a,b,c")
    return tuple(parts)  # type: ignore[return-value]


def _cmd_search(args) -> int:
    data = {}
    if args.config:
        data = json.loads(Path(args.config).read_text())
    if args.out:
        data["out_dir"] = args.out
    if args.stage:
        data["stage_plan"] = args.stage
    if args.evaluator:
        data["evaluator"] = args.evaluator
    if args.workers:
        data["worker_command"] = shlex.split(args.workers)
    if args.num_workers is not None:
        data["num_workers"] = args.num_workers
    if args.seed is not None:
        data["seed"] = args.seed
    if args.fpn_samples is not None:
        data["fpn_samples"] = args.fpn_samples
        data.setdefault("fpn_top_k",
                        min(args.fpn_samples, 20))
    if args.head_samples is not None:
        data["head_samples"] = args.head_samples
        data.setdefault("head_top_k",
                        min(args.head_samples, 10))
    try:
        cfg = orchestrator.SearchConfig.from_dict(data)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        history = orchestrator.run_progressive_search(cfg, resume=args.resume)
    except orchestrator.SearchAborted as exc:
        where = f" (state persisted in {exc.out_dir})" if exc.out_dir else ""
        print(f"error: {exc}{where}", file=sys.stderr)
        return 1
    for stage in ("fpn", "head"):
        best = history.best(stage)
        if best is not None:
            print(f"[{stage}] best reward {best.reward:.6f} "
                  f"hash {best.hash[:12]} over "
                  f"{len(history.for_stage(stage))} samples")
    if history.rejected.get("head"):
        print(f"rejected head samples (j < i): {history.rejected['head']}")
    return 0


def _cmd_report(args) -> int:
    history = orchestrator.SearchHistory.load(args.history)
    downstream = None
    if args.correlation:
        downstream = json.loads(Path(args.correlation).read_text())
    out = args.out or str(Path(args.history).parent)
    report = orchestrator.write_reports(
        history, out, trend_window=args.window,
        downstream=downstream, gnuplot=args.gnuplot)
    print(json.dumps(report, indent=2))
    return 0


def _cmd_cost(args) -> int:
    text = (sys.stdin.read() if args.genome == "-"
            else Path(args.genome).read_text())
    genome = genome_from_dict(json.loads(text))
    graph = cost_model.build_graph(
        genome, backbone_channels=args.backbone_channels,
        fpn_width=args.fpn_width, head_width=args.head_width,
        image=args.image_size, num_classes=args.classes)
    report = cost_model.count(graph)
    if args.json:
        print(json.dumps(report.to_dict(), indent=2))
    else:
        print(report.format_table())
    return 0


def _cmd_proxy_sample(args) -> int:
    stats = proxy_sampler.load_category_stats(args.stats)
    plan = proxy_sampler.build_segments(
        stats, proxy_sampler.Indicator(args.indicator),
        n_segments=args.segments, per_segment=args.per_segment)
    rng = np.random.default_rng(args.seed)
    selection = proxy_sampler.sample_categories(stats, plan, rng)
    print(proxy_sampler.format_summary(selection))
    if args.json:
        Path(args.json).write_text(json.dumps(
            proxy_sampler.selection_to_dicts(selection), indent=2) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="decnas",
        description="Search engine for detection-decoder architectures")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="run the progressive search loop")
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--out", help="output / checkpoint directory")
    p.add_argument("--stage", choices=["progressive", "fpn", "head"])
    p.add_argument("--evaluator", choices=["surrogate", "external"])
    p.add_argument("--workers", help="worker command line (external evaluator)")
    p.add_argument("--num-workers", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--fpn-samples", type=int)
    p.add_argument("--head-samples", type=int)
    p.add_argument("--resume", action="store_true",
                   help="continue from the out directory's checkpoint")
    p.set_defaults(func=_cmd_search)

    p = sub.add_parser("report", help="summaries from a history file")
    p.add_argument("--history", required=True)
    p.add_argument("--out", help="report directory (default: next to history)")
    p.add_argument("--sharing-trend", action="store_true",
                   help="kept for symmetry; the trend is always included")
    p.add_argument("--window", type=int, default=50)
    p.add_argument("--correlation",
                   help="JSON file mapping genome hash to a downstream metric")
    p.add_argument("--gnuplot", action="store_true",
                   help="also write gnuplot-ready .dat files")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("cost", help="FLOPs / parameter report for a genome")
    p.add_argument("--genome", required=True, help="genome JSON file or -")
    p.add_argument("--fpn-width", type=int, default=256)
    p.add_argument("--head-width", type=int, default=256)
    p.add_argument("--image-size", type=_parse_image_size, default=(1088, 800),
                   metavar="HxW")
    p.add_argument("--backbone-channels", type=_parse_channels,
                   default=(512, 1024, 2048), metavar="A,B,C")
    p.add_argument("--classes", type=int, default=80)
    p.add_argument("--json", action="store_true", help="emit JSON instead of a table")
    p.set_defaults(func=_cmd_cost)

    p = sub.add_parser("proxy-sample",
                       help="stratified proxy-dataset category selection")
    p.add_argument("--stats", required=True, help="CSV or JSONL category stats")
    p.add_argument("--indicator", default="ratio",
                   choices=[i.value for i in proxy_sampler.Indicator])
    p.add_argument("--segments", type=int, default=5)
    p.add_argument("--per-segment", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", help="also write the selection to this JSON file")
    p.set_defaults(func=_cmd_proxy_sample)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
