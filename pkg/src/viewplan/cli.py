"""Command-line entry point: ``viewplan run|plot|ingest``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import List, Optional

from .errors import ConfigInvalid, IoFailure
from .experiment import (emit_trace_plots, ingest_external_cloud, load_config, preset_path,
                         run_experiment, RunReport)
from .io import write_splats
from .splats import InitConfig, init_from_cloud

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="viewplan", description="Camera view selection benchmark")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment config")
    src = run.add_mutually_exclusive_group(required=True)
    src.add_argument("config", nargs="?", help="path to a YAML experiment config")
    src.add_argument("--preset", help="name of a bundled config (benchmark, smoke)")
    run.add_argument("--out", help="output directory (overrides output_dir)")

    plot = sub.add_parser("plot", help="write per-metric trace CSVs from a report")
    plot.add_argument("report")
    plot.add_argument("outdir")

    ing = sub.add_parser("ingest", help="load an external ASCII PLY point cloud")
    ing.add_argument("ply")
    ing.add_argument("--splats", help="write Gaussians initialised from the cloud to this PLY")
    return p


def _summary_table(report: RunReport) -> str:
    lines = [f"{'scene':12s} {'method':17s} {'r_q':>10s} {'psnr':>7s} {'ssim':>6s} {'it95':>5s}"]
    for scene, body in report.scenes.items():
        for m, row in body["summary"].items():
            def fmt(v, spec):
                return format(v, spec) if v is not None else "-"
            lines.append(f"{scene:12s} {m:17s} {fmt(row['final_r_q'], '10.4g')} {fmt(row['psnr'], '7.2f')} "
                         f"{fmt(row['ssim'], '6.3f')} {fmt(row['iterations_to_95'], '5.1f')}")
    return "\n".join(lines)


def _run(args) -> int:
    path = preset_path(args.preset) if args.preset else args.config
    cfg = load_config(path)
    report = run_experiment(cfg, args.out)
    print(_summary_table(report))
    print(f"wall time {report.wall_time['total']:.1f} s")
    return EXIT_OK


def _plot(args) -> int:
    for path in emit_trace_plots(RunReport.load(args.report), args.outdir):
        print(path)
    return EXIT_OK


def _ingest(args) -> int:
    pc = ingest_external_cloud(args.ply)
    info = {"points": len(pc)}
    if len(pc):
        lo, hi = pc.bounds()
        info["bbox_min"] = lo.tolist()
        info["bbox_max"] = hi.tolist()
    if args.splats:
        write_splats(args.splats, init_from_cloud(pc, InitConfig()))
        info["splats"] = args.splats
    print(json.dumps(info))
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"run": _run, "plot": _plot, "ingest": _ingest}[args.command]
    try:
        return handler(args)
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IoFailure as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
