"""Batch orchestration: every stage, gated and resumable via the manifest.

Stage order is ingest, triage, convert, register, qc, standardize. A scan
advances one stage at a time, and the manifest records each completion, so
rerunning skips anything already done and an interrupted batch resumes at
the exact boundary it stopped. Per-scan failures become error events and
never abort the batch; QC waits for a human, halting the run until the
decisions file labels every cluster.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional

from . import figures, qc, standardize, triage
from .config import PipelineConfig
from .dicom_io import group_series, load_age_sidecar, parse_file, scan_directory
from .errors import ConfigError, CtPrepError, TooFewSamples, UndecidedCluster
from .manifest import EVENT_ERROR, EVENT_REVIEW, Manifest, ScanRecord
from .registration import (RegistrationConfig, TemplateBank, load_transform,
                           register, save_transform, select_template)
from .volume import assemble, read_nifti, write_nifti

RUN_STAGES = ("ingest", "triage", "convert", "register", "qc", "standardize")

REASON_SPLIT_RESOLVED = "SeparatedSkullBaseVault"
REASON_POOR_POSITIONING = "PoorPositioning"
REPORT_REASONS = (
    "NonAxial",
    "Localiser",
    "BoneReformat",
    REASON_SPLIT_RESOLVED,
    REASON_POOR_POSITIONING,
)

# Exclusion tallies at the scale a multi-centre trial produces. This is a
# rendering fixture for documentation and tests of the report formatter,
# never a target for pipeline output.
REFERENCE_EXCLUSION_COUNTS = {
    "NonAxial": 1920,
    "Localiser": 493,
    "BoneReformat": 687,
    REASON_SPLIT_RESOLVED: 1226,
    REASON_POOR_POSITIONING: 465,
}


@dataclass
class ExclusionReport:
    counts: Dict[str, int]
    total_excluded: int
    total_accepted: int
    pending: int
    total: int
    errors: int

    def to_dict(self) -> dict:
        return {
            "counts": dict(self.counts),
            "total_excluded": self.total_excluded,
            "total_accepted": self.total_accepted,
            "pending": self.pending,
            "total": self.total,
            "errors": self.errors,
        }


def render_exclusion_table(counts: Dict[str, int]) -> str:
    """Five-reason text table with a total row."""
    width = max(len(r) for r in REPORT_REASONS) + 2
    lines = [f"{'reason':<{width}}series", "-" * (width + 6)]
    for reason in REPORT_REASONS:
        lines.append(f"{reason:<{width}}{counts.get(reason, 0):>6}")
    total = sum(counts.get(r, 0) for r in REPORT_REASONS)
    lines.append("-" * (width + 6))
    lines.append(f"{'total excluded':<{width}}{total:>6}")
    return "\n".join(lines)


def render_report_text(report: ExclusionReport) -> str:
    lines = [render_exclusion_table(report.counts), ""]
    lines.append(f"accepted: {report.total_accepted}")
    lines.append(f"pending:  {report.pending}")
    lines.append(f"errors:   {report.errors}")
    lines.append(f"total:    {report.total}")
    return "\n".join(lines) + "\n"


def render_report_csv(report: ExclusionReport) -> str:
    lines = ["reason,count"]
    for reason in REPORT_REASONS:
        lines.append(f"{reason},{report.counts.get(reason, 0)}")
    lines.append(f"total_excluded,{report.total_excluded}")
    lines.append(f"accepted,{report.total_accepted}")
    lines.append(f"pending,{report.pending}")
    lines.append(f"errors,{report.errors}")
    return "\n".join(lines) + "\n"


class RunPaths:
    """Fixed layout under the output directory."""

    def __init__(self, root):
        self.root = Path(root)
        self.manifest = self.root / "manifest.jsonl"
        self.converted = self.root / "converted"
        self.registered = self.root / "registered"
        self.qc_dir = self.root / "qc"
        self.review = self.root / "review"
        self.standardized = self.root / "standardized"
        self.report_json = self.root / "report.json"
        self.report_txt = self.root / "report.txt"
        self.report_csv = self.root / "report.csv"
        self.chart = self.root / "exclusions.png"
        self.decisions = self.qc_dir / "decisions.txt"
        self.qc_model = self.qc_dir / "model.txt"

    def ensure(self) -> None:
        for d in (self.root, self.converted, self.registered, self.qc_dir,
                  self.review, self.standardized):
            d.mkdir(parents=True, exist_ok=True)


def _safe_name(scan_id: str) -> str:
    return "".join(c if (c.isalnum() or c in "._-") else "_" for c in scan_id)


def _guarded(manifest: Manifest, record: ScanRecord, work: Callable[[], None]) -> None:
    """Run one scan's stage work; any failure becomes an error event."""
    try:
        work()
    except Exception as exc:  # noqa: BLE001 - per-scan fault isolation
        manifest.append(
            record.scan_id, EVENT_ERROR,
            {"error": f"{type(exc).__name__}: {exc}"},
        )


def _for_each(records: List[ScanRecord], fn: Callable[[ScanRecord], None],
              parallelism: int) -> None:
    if parallelism <= 1 or len(records) <= 1:
        for record in records:
            fn(record)
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            list(pool.map(fn, records))


# --- stages -----------------------------------------------------------------

def ingest_stage(cfg: PipelineConfig, manifest: Manifest) -> None:
    """Discover series, split mixed orientations, create one record each.

    The axial partition of a mixed series keeps the series UID as its scan
    id; stray partitions get an orientation suffix. Files that look like
    DICOM but fail to parse become error records so the report can count
    them.
    """
    entries, failures = scan_directory(cfg.input_dir)
    ages = load_age_sidecar(cfg.sidecar_path)

    # Group one UID at a time so a series with broken geometry becomes an
    # error record instead of sinking the whole batch.
    by_uid: Dict[str, list] = {}
    for path, sl in entries:
        by_uid.setdefault(sl.series_uid, []).append((path, sl))

    for uid in sorted(by_uid):
        if uid in manifest.records:
            continue
        try:
            series = group_series(by_uid[uid])[0]
            parts = triage.split_mixed_series(series)
        except CtPrepError as exc:
            manifest.append(uid, EVENT_ERROR, {
                "source_paths": sorted(p for p, _ in by_uid[uid]),
                "error": f"{type(exc).__name__}: {exc}",
            })
            continue
        age = series.patient_age_years
        if age is None:
            age = ages.get(uid)
        primary = next(
            (i for i, (label, _) in enumerate(parts) if label == triage.AXIAL), 0
        )
        for i, (label, part) in enumerate(parts):
            scan_id = (series.series_uid if i == primary
                       else f"{series.series_uid}#{label.lower()}")
            if scan_id in manifest.records:
                continue
            image_type = sorted({t for sl in part.slices for t in sl.image_type})
            kernel = next(
                (sl.convolution_kernel for sl in part.slices
                 if sl.convolution_kernel), None,
            )
            manifest.append(scan_id, "ingest", {
                "patient_id": part.patient_id,
                "source_paths": list(part.source_paths),
                "orientation": label,
                "n_slices": len(part.slices),
                "age": age,
                "image_type": image_type,
                "convolution_kernel": kernel,
            })

    for path, exc in failures:
        scan_id = f"unreadable:{Path(path).name}"
        if scan_id in manifest.records:
            continue
        manifest.append(scan_id, EVENT_ERROR, {
            "source_paths": [str(path)],
            "error": f"{type(exc).__name__}: {exc}",
        })


def triage_stage(cfg: PipelineConfig, manifest: Manifest, paths: RunPaths) -> None:
    for record in manifest.in_order():
        if record.error or manifest.completed(record, "triage"):
            continue

        def work(record=record):
            verdict = triage.triage_attributes(
                record.scan_id,
                record.image_type,
                [record.convolution_kernel] if record.convolution_kernel else [],
                record.orientation,
                record.n_slices or 0,
                bone_tokens=cfg.bone_tokens,
                localiser_slice_threshold=cfg.localiser_slice_threshold,
                split_review_threshold=cfg.split_review_threshold,
            )
            if verdict.decision == triage.NEEDS_REVIEW:
                _write_review_preview(record, paths, cfg)
            manifest.append(record.scan_id, "triage", {
                "decision": verdict.decision,
                "reason": verdict.reason,
            })

        _guarded(manifest, record, work)


def _write_review_preview(record: ScanRecord, paths: RunPaths,
                          cfg: PipelineConfig) -> None:
    middle = record.source_paths[len(record.source_paths) // 2]
    sl = parse_file(middle)
    figures.save_preview_png(
        sl.hounsfield(),
        paths.review / f"{_safe_name(record.scan_id)}.png",
        hu_max=cfg.hu_window_max,
    )


def _load_series(record: ScanRecord):
    entries = [(p, parse_file(p)) for p in record.source_paths]
    series = group_series(entries)
    if len(series) != 1:
        raise CtPrepError(
            f"{record.scan_id}: sources span {len(series)} series UIDs"
        )
    return series[0]


def convert_stage(cfg: PipelineConfig, manifest: Manifest, paths: RunPaths) -> None:
    todo = [
        r for r in manifest.in_order()
        if not r.error and r.stage == "triage" and r.decision == triage.ACCEPTED
    ]

    def work(record: ScanRecord):
        def job():
            volume = assemble(_load_series(record))
            out = paths.converted / f"{_safe_name(record.scan_id)}.nii"
            write_nifti(volume, out)
            manifest.append(record.scan_id, "convert", {
                "volume_path": str(out),
                "n_slices": volume.n_slices,
            })
        _guarded(manifest, record, job)

    _for_each(todo, work, cfg.parallelism)


def _load_bank(cfg: PipelineConfig) -> TemplateBank:
    if not cfg.template_dir:
        raise ConfigError("template_dir is not set but scans need registration")
    root = Path(cfg.template_dir)
    for name in ("younger.nii", "older.nii"):
        if not (root / name).is_file():
            raise ConfigError(f"template_dir lacks {name}")
    return TemplateBank(
        younger=read_nifti(root / "younger.nii"),
        older=read_nifti(root / "older.nii"),
        age_cutoff=cfg.age_cutoff,
        default_when_age_missing=cfg.default_when_age_missing,
    )


def register_stage(cfg: PipelineConfig, manifest: Manifest, paths: RunPaths) -> None:
    todo = [
        r for r in manifest.in_order()
        if not r.error and r.stage == "convert"
    ]
    if not todo:
        return
    bank = _load_bank(cfg)
    reg_cfg = RegistrationConfig()

    def work(record: ScanRecord):
        def job():
            target = read_nifti(record.volume_path)
            template = select_template(record.age, bank)
            result = register(template, target, reg_cfg)
            base = _safe_name(record.scan_id)
            transform_path = paths.registered / f"{base}_transform.txt"
            resampled_path = paths.registered / f"{base}_reg.nii"
            save_transform(result.transform, transform_path)
            write_nifti(result.resampled, resampled_path)
            manifest.append(record.scan_id, "register", {
                "transform_path": str(transform_path),
                "resampled_path": str(resampled_path),
                "registration_score": result.score,
            })
        _guarded(manifest, record, job)

    _for_each(todo, work, cfg.parallelism)


def qc_fit(cfg: PipelineConfig, manifest: Manifest,
           paths: RunPaths) -> Optional[qc.ClusterModel]:
    """Fit PCA+GMM over every registered transform and write the artifacts.

    Always fits from the full set of transforms, so model, scatter, montage
    sheets, and the decisions template stay consistent as scans accumulate.
    Returns None when there is nothing registered yet. TooFewSamples
    propagates; the caller decides whether that halts or defers.
    """
    registered = [
        r for r in manifest.in_order()
        if not r.error and r.transform_path
    ]
    if not registered:
        return None
    features = [
        qc.feature_from_transform(r.scan_id, load_transform(r.transform_path))
        for r in sorted(registered, key=lambda r: r.scan_id)
    ]
    model = qc.fit_cluster_model(
        features, (cfg.gmm_k_min, cfg.gmm_k_max), seed=cfg.gmm_seed
    )
    qc.save_model(model, paths.qc_model)
    figures.save_qc_scatter(
        model.pca.projections,
        [model.assignments[s] for s in model.pca.scan_ids],
        paths.qc_dir / "scatter.png",
    )
    _write_montages(model, manifest, paths, cfg)
    if not paths.decisions.exists():
        qc.write_decisions_template(model, paths.decisions)
    return model


def qc_stage(cfg: PipelineConfig, manifest: Manifest,
             paths: RunPaths) -> tuple[bool, str]:
    """Fit, then apply the human cluster decisions to newly registered scans.

    Returns (complete, message). complete=False means the run must halt:
    either a cluster still lacks a decision or there are too few transforms
    to cluster at all.
    """
    todo = [
        r for r in manifest.in_order()
        if not r.error and r.transform_path and r.stage == "register"
    ]
    if not todo:
        return True, ""

    try:
        model = qc_fit(cfg, manifest, paths)
    except TooFewSamples as exc:
        return False, f"QC deferred: {exc}"
    assert model is not None  # todo nonempty implies registered nonempty

    try:
        decisions = qc.parse_decisions(paths.decisions)
        verdicts = qc.apply_decisions(model, decisions)
    except UndecidedCluster:
        return False, (
            f"QC needs cluster decisions: edit {paths.decisions} "
            f"(montages in {paths.qc_dir}) and rerun"
        )
    except ValueError as exc:
        raise ConfigError(f"bad decisions file: {exc}")

    for record in todo:
        manifest.append(record.scan_id, "qc", {
            "qc_cluster": model.assignments[record.scan_id],
            "qc_verdict": verdicts[record.scan_id],
        })
    return True, ""


def _write_montages(model: qc.ClusterModel, manifest: Manifest,
                    paths: RunPaths, cfg: PipelineConfig) -> None:
    for cluster in model.clusters:
        panels = []
        for scan_id in model.members(cluster)[:9]:
            record = manifest.records[scan_id]
            if not (record.volume_path and record.resampled_path):
                continue
            ct = read_nifti(record.volume_path)
            tpl = read_nifti(record.resampled_path)
            mid = ct.n_slices // 2
            panels.append((scan_id[-24:], ct.data[mid], tpl.data[mid]))
        if panels:
            figures.save_cluster_montage(
                panels, paths.qc_dir / f"cluster_{cluster}.png",
                title=f"cluster {cluster}", hu_max=cfg.hu_window_max,
            )


def standardize_stage(cfg: PipelineConfig, manifest: Manifest,
                      paths: RunPaths) -> None:
    todo = [
        r for r in manifest.in_order()
        if not r.error and r.stage == "qc" and r.qc_verdict == qc.SCAN_ACCEPTED
    ]

    def work(record: ScanRecord):
        def job():
            volume = read_nifti(record.volume_path)
            out_vol, box = standardize.standardize_volume(
                volume,
                bone_threshold=cfg.bone_threshold_hu,
                margin=cfg.crop_margin,
                target_height=cfg.target_height,
                target_width=cfg.target_width,
                hu_max=cfg.hu_window_max,
            )
            out = paths.standardized / f"{_safe_name(record.scan_id)}_std.nii"
            write_nifti(out_vol, out)
            manifest.append(record.scan_id, "standardize",
                            {"final_output_path": str(out)})
            manifest.append(record.scan_id, "done", {})
        _guarded(manifest, record, job)

    _for_each(todo, work, cfg.parallelism)


# --- review resolution ------------------------------------------------------

def resolve_review(manifest: Manifest, scan_id: str, accept: bool) -> None:
    """Record the human call on a NeedsReview scan.

    Accepting sends it on through conversion; excluding books it under the
    split skull base/vault reason.
    """
    record = manifest.records.get(scan_id)
    if record is None:
        raise CtPrepError(f"unknown scan {scan_id!r}")
    if record.decision != triage.NEEDS_REVIEW:
        raise CtPrepError(
            f"{scan_id} is not awaiting review (decision={record.decision!r})"
        )
    if accept:
        payload = {"decision": triage.ACCEPTED, "reason": triage.REASON_NONE}
    else:
        payload = {"decision": triage.EXCLUDED, "reason": REASON_SPLIT_RESOLVED}
    manifest.append(scan_id, EVENT_REVIEW, payload)


def pending_reviews(manifest: Manifest) -> List[ScanRecord]:
    return [r for r in manifest.in_order()
            if r.decision == triage.NEEDS_REVIEW and not r.error]


# --- report -----------------------------------------------------------------

def build_report(manifest: Manifest) -> ExclusionReport:
    counts = {r: 0 for r in REPORT_REASONS}
    accepted = pending = errors = 0
    for record in manifest.in_order():
        if record.error:
            errors += 1
        if record.decision == triage.EXCLUDED:
            if record.reason not in counts:
                raise CtPrepError(
                    f"{record.scan_id}: unknown exclusion reason "
                    f"{record.reason!r}"
                )
            counts[record.reason] += 1
        elif record.qc_verdict == qc.SCAN_REJECTED:
            counts[REASON_POOR_POSITIONING] += 1
        elif record.final_output_path and record.stage in ("standardize", "done"):
            accepted += 1
        else:
            pending += 1
    total_excluded = sum(counts.values())
    return ExclusionReport(
        counts=counts,
        total_excluded=total_excluded,
        total_accepted=accepted,
        pending=pending,
        total=len(manifest.records),
        errors=errors,
    )


def write_report_files(report: ExclusionReport, paths: RunPaths) -> None:
    paths.report_json.write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    )
    paths.report_txt.write_text(render_report_text(report))
    paths.report_csv.write_text(render_report_csv(report))
    figures.save_exclusion_chart(
        {r: report.counts.get(r, 0) for r in REPORT_REASONS}, paths.chart
    )


# --- driver -----------------------------------------------------------------

@dataclass
class RunResult:
    report: ExclusionReport
    halted_at_qc: bool
    halt_message: str
    exit_code: int


def _open_run(cfg: PipelineConfig) -> tuple[Manifest, RunPaths]:
    cfg.validate_for_run()
    paths = RunPaths(cfg.output_dir)
    paths.ensure()
    return Manifest(paths.manifest), paths


def _finish(manifest: Manifest, paths: RunPaths, halted: bool,
            message: str) -> RunResult:
    report = build_report(manifest)
    write_report_files(report, paths)
    return RunResult(
        report=report,
        halted_at_qc=halted,
        halt_message=message,
        exit_code=2 if report.errors else 0,
    )


def run(cfg: PipelineConfig, stop_after: Optional[str] = None) -> RunResult:
    """Execute the stages in order, skipping completed work.

    stop_after names the last stage to run (for staged operation and for
    exercising resume behavior). The report files are rewritten at the end
    of every invocation. Exit code 2 signals per-scan failures; a QC halt
    is not a failure.
    """
    if stop_after is not None and stop_after not in RUN_STAGES:
        raise ConfigError(f"unknown stage {stop_after!r}")
    manifest, paths = _open_run(cfg)

    halted = False
    message = ""
    for stage in RUN_STAGES:
        if stage == "qc":
            complete, message = qc_stage(cfg, manifest, paths)
            if not complete:
                halted = True
                break
        else:
            _STAGE_FUNCS[stage](cfg, manifest, paths)
        if stage == stop_after:
            break

    return _finish(manifest, paths, halted, message)


def run_single_stage(cfg: PipelineConfig, stage: str) -> RunResult:
    """Execute exactly one stage (the staged CLI subcommands).

    Each stage only touches scans sitting at its own boundary, so running a
    stage whose predecessors have not run is a no-op, not an error.
    """
    manifest, paths = _open_run(cfg)
    halted = False
    message = ""
    if stage == "qc":
        complete, message = qc_stage(cfg, manifest, paths)
        halted = not complete
    elif stage == "qc-fit":
        try:
            model = qc_fit(cfg, manifest, paths)
        except TooFewSamples as exc:
            halted, message = True, f"QC deferred: {exc}"
        else:
            if model is not None:
                message = f"model over {len(model.assignments)} scans; decisions at {paths.decisions}"
    elif stage in _STAGE_FUNCS:
        _STAGE_FUNCS[stage](cfg, manifest, paths)
    else:
        raise ConfigError(f"unknown stage {stage!r}")
    return _finish(manifest, paths, halted, message)


def _ingest_only(cfg, manifest, paths):
    ingest_stage(cfg, manifest)


_STAGE_FUNCS: Dict[str, Callable[[PipelineConfig, Manifest, RunPaths], None]] = {
    "ingest": _ingest_only,
    "triage": triage_stage,
    "convert": convert_stage,
    "register": register_stage,
    "standardize": standardize_stage,
}
