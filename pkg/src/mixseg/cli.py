"""Command-line entry point: one subcommand per pipeline stage.

Exit codes: 0 success, 1 validation or usage error, 2 runtime or training error.
Diagnostics go to stderr, a single-line JSON summary to stdout.
"""
from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from collections import defaultdict
from pathlib import Path

from .core import ValidationError
from .evaluation import (EvaluationReport, compare_reference, emit_plots, load_reference_tables,
                         radiologist_reference)
from . import pipeline as pl

log = logging.getLogger("mixseg")

COMMANDS = ("synth-data", "train-classifier", "gen-cams", "calibrate-thresholds", "train-irnet",
            "gen-pseudolabels", "train-seg", "distill", "evaluate", "compare", "plot")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="mixseg", description="Mixed-supervision segmentation pipeline")
    sub = ap.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}", parser_class=_Parser)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="run config file (sectioned key = value)")
        p.add_argument("--force", action="store_true", help="rerun even if the ledger says the stage is current")
        p.add_argument("--out", help="output path override")
        return p

    add("synth-data", "generate the synthetic dataset")
    add("train-classifier", "train the image-level classifier")
    add("gen-cams", "Grad-CAM heatmaps for every non-test image")
    add("calibrate-thresholds", "per-class CAM thresholds on the expert pool")
    add("train-irnet", "train the displacement/boundary network")
    p = add("gen-pseudolabels", "write the pseudo-label store")
    p.add_argument("--method", choices=("cam-threshold", "irnet"))
    p = add("train-seg", "train segmentation models (several --p or --trials > 1 runs a sweep)")
    p.add_argument("--p", type=float, action="append", help="expert sampling probability; repeatable")
    p.add_argument("--trials", type=int, default=None)
    add("distill", "distill a student from the p=1 teacher")
    p = add("evaluate", "score a checkpoint on the test split")
    p.add_argument("--p", type=float, default=None)
    p.add_argument("--trial", type=int, default=0)
    p.add_argument("--checkpoint")
    p.add_argument("--oracle", action="store_true", help="evaluate the ground-truth lookup stub")
    p.add_argument("--student", action="store_true", help="evaluate the distilled student")
    p = add("compare", "compare a report with a shipped reference row")
    p.add_argument("--report", help="evaluation report (default: the shipped --row itself)")
    p.add_argument("--table", default="summary")
    p.add_argument("--row", default="mixed-supervision")
    p.add_argument("--baseline-row", default="weakly-supervised")
    p.add_argument("--target-row", default="fully-supervised")
    p = add("plot", "static figure plus sidecar data")
    p.add_argument("--style", choices=("p-sweep", "init", "radiologist"), default="p-sweep")
    p.add_argument("--reference", action="store_true", help="plot shipped reference rows instead of run reports")
    return ap


def _emit(summary: dict):
    print(json.dumps(summary, sort_keys=True, default=str))


_REPORT_RE = re.compile(r"seg_p(?P<p>[0-9.e-]+)_t(?P<t>\d+)\.json$")


def _sweep_series(ws: pl.Workspace) -> list[dict]:
    by_p = defaultdict(list)
    for f in sorted((ws.root / "reports").glob("seg_p*_t*.json")):
        m = _REPORT_RE.search(f.name)
        if m:
            by_p[float(m["p"])].append(EvaluationReport.load(f).miou)
    if not by_p:
        raise ValidationError("no segmentation reports found; run evaluate first")
    ps = sorted(by_p)
    return [{"name": "mIoU", "x": ps, "y": [sum(by_p[p]) / len(by_p[p]) for p in ps]}]


def _reference_series(style: str) -> list[dict]:
    tables = load_reference_tables()
    if style == "p-sweep":
        t1 = tables["table1"]
        out = []
        for method in ("CAM", "IRNet"):
            rows = [r for r in t1.rows.values() if r.get("method") == method]
            out.append({"name": method, "x": [r["p"] for r in rows], "y": [r["miou"] for r in rows]})
        return out
    if style == "init":
        by_enc = defaultdict(lambda: ([], []))
        for key, r in tables["table2"].rows.items():
            xs, ys = by_enc[f"{r['method']} {r['encoder']}"]
            xs.append(f"n={r['train_size']}")
            ys.append(r["miou"])
        return [{"name": k, "x": v[0], "y": v[1]} for k, v in by_enc.items()]
    rel = radiologist_reference()["mixed_relative_to_radiologist"]
    return [{"name": "relative difference", "x": list(rel), "y": list(rel.values())}]


def run(args) -> dict:
    cfg = pl.validate_config(args.config)
    if args.command == "compare":
        return _compare(args)
    if args.command == "synth-data" and args.out:
        cfg.paths.data_root = args.out
    ws = pl.Workspace(cfg)
    cmd = args.command
    if cmd == "synth-data":
        return pl.stage_synth_data(ws, args.force)
    if cmd == "train-classifier":
        return pl.stage_train_classifier(ws, args.force)
    if cmd == "gen-cams":
        return pl.stage_gen_cams(ws, args.force)
    if cmd == "calibrate-thresholds":
        return pl.stage_calibrate(ws, args.force)
    if cmd == "train-irnet":
        return pl.stage_train_irnet(ws, args.force)
    if cmd == "gen-pseudolabels":
        return pl.stage_gen_pseudolabels(ws, args.method, args.force)
    if cmd == "train-seg":
        ps = args.p if args.p else [cfg.segmentation.p_expert]
        trials = args.trials if args.trials is not None else 1
        if trials < 1:
            raise ValidationError("--trials must be >= 1")
        if len(ps) > 1 or trials > 1:
            rep = pl.run_p_sweep(ws, ps, trials, args.force)
            return {"stage": "train-seg", "sweep": rep["report_path"], "rows": rep["rows"]}
        return pl.stage_train_seg(ws, ps[0], 0, args.force)
    if cmd == "distill":
        return pl.stage_distill(ws, args.force)
    if cmd == "evaluate":
        return _evaluate(ws, args)
    if cmd == "plot":
        series = _reference_series(args.style) if args.reference or args.style != "p-sweep" else _sweep_series(ws)
        out = Path(args.out) if args.out else ws.root / "plots"
        return {"stage": "plot", **emit_plots(series, out, args.style)}
    raise ValidationError(f"unknown command {cmd!r}")


def _evaluate(ws: pl.Workspace, args) -> dict:
    chosen = sum(x for x in (args.p is not None, args.checkpoint is not None, args.oracle, args.student))
    if chosen != 1:
        raise ValidationError("evaluate needs exactly one of --p, --checkpoint, --oracle, --student")
    if args.oracle:
        from .segmentation import make_oracle_checkpoint

        ck = make_oracle_checkpoint(ws.split("test"), ws.taxonomy).save(ws.root / "oracle.ckpt")
        name = "oracle"
    elif args.student:
        ck, name = ws.student_ckpt, "student"
    elif args.checkpoint:
        ck, name = Path(args.checkpoint), Path(args.checkpoint).stem
    else:
        ck, name = ws.seg_ckpt(args.p, args.trial), f"seg_p{args.p:g}_t{args.trial}"
    if not Path(ck).exists():
        raise ValidationError(f"checkpoint {ck} does not exist")
    summary = pl.stage_evaluate(ws, ck, name, args.force)
    if args.out:
        Path(args.out).write_text(Path(summary["report"]).read_text())
        summary["report"] = args.out
    return summary


def _compare(args) -> dict:
    tables = load_reference_tables()
    if args.table not in tables:
        raise ValidationError(f"unknown table {args.table!r}; known: {sorted(tables)}")
    table = tables[args.table]
    if args.report:
        report = EvaluationReport.load(args.report)
    else:
        from .evaluation import report_from_row

        report = report_from_row(table, args.row)
    summary = tables["summary"]
    base = summary.row(args.baseline_row)["miou"] if args.baseline_row else None
    target = summary.row(args.target_row)["miou"] if args.target_row else None
    doc = compare_reference(report, table, args.row, base, target)
    if base is not None:
        doc["relative_to_baseline"] = (report.miou - base) / base
    if target is not None:
        doc["relative_to_target"] = (report.miou - target) / target
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return {"stage": "compare", **doc}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    try:
        _emit(run(args))
    except ValidationError as e:
        print(f"validation error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # training/runtime failures
        log.exception("stage %s failed", args.command)
        print(f"runtime error: {e}", file=sys.stderr)
        return 2
    return 0


cli_dispatch = main


if __name__ == "__main__":
    sys.exit(main())
