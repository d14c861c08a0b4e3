"""Command-line front end.

One subcommand per stage for staged operation, `run` for the whole chain,
`synth` to build a labeled phantom corpus, `report` to re-render the
exclusion tally, and `review` to resolve scans parked for a human look.
Exit codes: 0 success (including a QC halt, which is a pause rather than a
failure), 1 config or manifest problems, 2 when any per-scan errors were
recorded (the report is still written).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import phantom, pipeline
from .config import PipelineConfig, config_text, load_config
from .errors import ConfigError, CtPrepError
from .manifest import Manifest
from .pipeline import RunPaths, RunResult


def _print_result(result: RunResult) -> None:
    if result.halted_at_qc:
        print(f"HALTED: {result.halt_message}")
    print(pipeline.render_report_text(result.report), end="")


def _cmd_synth(args) -> int:
    overrides = {}
    if args.supersample is not None:
        overrides["supersample"] = args.supersample
    info = phantom.generate_corpus(
        args.out_dir,
        per_category=args.per_category,
        seed=args.seed,
        base_overrides=overrides or None,
    )
    cfg = PipelineConfig(
        input_dir=info["dicom_dir"],
        output_dir=str(Path(args.out_dir) / "run"),
        template_dir=info["template_dir"],
    )
    cfg_path = Path(args.out_dir) / "run.cfg"
    cfg_path.write_text(config_text(cfg))
    print(f"{info['n_series']} series under {info['dicom_dir']}")
    print(f"config written to {cfg_path}")
    return 0


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    result = pipeline.run(cfg, stop_after=args.stop_after)
    _print_result(result)
    return result.exit_code


def _make_stage_cmd(stage: str):
    def handler(args) -> int:
        cfg = load_config(args.config)
        result = pipeline.run_single_stage(cfg, stage)
        _print_result(result)
        return result.exit_code
    return handler


def _cmd_report(args) -> int:
    cfg = load_config(args.config)
    paths = RunPaths(cfg.output_dir)
    if not paths.manifest.is_file():
        raise ConfigError(f"no manifest at {paths.manifest}; run ingest first")
    manifest = Manifest(paths.manifest)
    report = pipeline.build_report(manifest)
    pipeline.write_report_files(report, paths)
    print(pipeline.render_report_text(report), end="")
    return 0


def _cmd_review(args) -> int:
    cfg = load_config(args.config)
    paths = RunPaths(cfg.output_dir)
    if not paths.manifest.is_file():
        raise ConfigError(f"no manifest at {paths.manifest}; run triage first")
    manifest = Manifest(paths.manifest)
    if args.accept or args.exclude:
        scan_id = args.accept or args.exclude
        pipeline.resolve_review(manifest, scan_id, accept=bool(args.accept))
        verb = "accepted" if args.accept else "excluded"
        print(f"{scan_id} {verb}")
        return 0
    pending = pipeline.pending_reviews(manifest)
    if not pending:
        print("no scans awaiting review")
        return 0
    for record in pending:
        preview = paths.review / f"{pipeline._safe_name(record.scan_id)}.png"
        note = str(preview) if preview.is_file() else "no preview"
        print(f"{record.scan_id}  slices={record.n_slices}  {note}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctprep",
        description="Head-CT batch preparation: triage, convert, register, "
                    "QC-cluster, and standardize DICOM series.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a labeled phantom corpus")
    p.add_argument("out_dir")
    p.add_argument("--per-category", type=int, default=6)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--supersample", type=int, default=None,
                   help="rasterization oversampling (1 is fast, 3 is smooth)")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("run", help="run every stage in order")
    p.add_argument("--config", required=True)
    p.add_argument("--stop-after", choices=pipeline.RUN_STAGES, default=None)
    p.set_defaults(func=_cmd_run)

    stage_help = {
        "ingest": "discover DICOM series and open manifest records",
        "triage": "apply the exclusion rules to ingested series",
        "convert": "assemble accepted series into NIfTI volumes",
        "register": "affine-register converted volumes to the template",
        "qc-fit": "fit the PCA+GMM cluster model and write review sheets",
        "qc-apply": "apply cluster decisions to registered scans",
        "standardize": "crop, resize, and window QC-accepted volumes",
    }
    for name, stage in (("ingest", "ingest"), ("triage", "triage"),
                        ("convert", "convert"), ("register", "register"),
                        ("qc-fit", "qc-fit"), ("qc-apply", "qc"),
                        ("standardize", "standardize")):
        p = sub.add_parser(name, help=stage_help[name])
        p.add_argument("--config", required=True)
        p.set_defaults(func=_make_stage_cmd(stage))

    p = sub.add_parser("report", help="rebuild and print the exclusion report")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("review", help="list or resolve scans awaiting review")
    p.add_argument("--config", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--accept", metavar="SCAN_ID")
    g.add_argument("--exclude", metavar="SCAN_ID")
    p.set_defaults(func=_cmd_review)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except CtPrepError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
