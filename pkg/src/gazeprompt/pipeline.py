"""Stage functions chaining ingest -> render -> classify -> evaluate.

Every stage reads and writes plain files under the run directory and returns
a :class:`StageResult` holding content checksums of its inputs and outputs.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Optional, Sequence

from . import __version__
from .backend import (
    Backend,
    HttpBackend,
    MockBackend,
    RecordingBackend,
    ReplayBackend,
    RequestFailure,
    ResponseCache,
    file_checksum,
    gaze_statistics,
    make_request,
    run_batch,
)
from .config import ExperimentConfig, StrategySpec
from .errors import ConfigError, GazePromptError
from .gaze import parse_gaze_csv
from .metrics import MethodRow, baseline_rows, confusion, metrics, report, write_report
from .overlay import (
    MANIFEST_NAME,
    ClipManifest,
    FramesDirSource,
    VideoFileSource,
    encode_clip,
    render_segment,
    safe_dirname,
)
from .prompts import (
    ABSTAINED,
    Exemplar,
    Prediction,
    StrategyKind,
    build_prompt,
    parse_response,
    select_exemplars,
)
from .segments import Segment, class_distribution, extract_segment, load_probes

log = logging.getLogger(__name__)

OK, PARTIAL, FAILED, SKIPPED = "ok", "partial", "failed", "skipped"
EXIT_CODES = {OK: 0, SKIPPED: 0, PARTIAL: 2, FAILED: 3}
STAGES = ("ingest", "render", "classify", "evaluate")


class StageError(GazePromptError):
    """A stage could not produce usable outputs."""


@dataclass
class StageResult:
    name: str
    status: str = OK
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    message: str = ""
    started: str = ""
    finished: str = ""
    details: dict = field(default_factory=dict)

    def checksum(self) -> str:
        blob = json.dumps([self.name, self.status, self.inputs, self.outputs], sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "status": self.status,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "message": self.message,
            "started": self.started,
            "finished": self.finished,
            "details": self.details,
            "checksum": self.checksum(),
        }


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _dump(path: Path, obj) -> str:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
    return file_checksum(path)


def _rel(path: Path, root: Path) -> str:
    try:
        return Path(path).resolve().relative_to(Path(root).resolve()).as_posix()
    except ValueError:
        return Path(path).as_posix()


@dataclass
class RunContext:
    config: ExperimentConfig
    force: bool = False
    dry_run: bool = False
    echo: Callable[[str], None] = print

    @property
    def out(self) -> Path:
        return self.config.out_dir


# --- shared loaders ----------------------------------------------------------------------


def load_segments(out: Path) -> list[Segment]:
    path = out / "segments.json"
    if not path.is_file():
        raise StageError(f"{path} missing; run the ingest stage first")
    data = json.loads(path.read_text(encoding="utf-8"))
    return [Segment.from_json(s) for s in data["segments"]]


def load_labels(out: Path) -> dict:
    path = out / "labels.json"
    if not path.is_file():
        raise StageError(f"{path} missing; run the ingest stage first")
    return json.loads(path.read_text(encoding="utf-8"))


def split_pool(segments: Sequence[Segment], cfg: ExperimentConfig) -> tuple[list[str], list[str]]:
    """Partition segment ids into (exemplar pool, evaluation set) by participant."""
    if not cfg.needs_pool:
        return [], [s.segment_id for s in segments]
    participants = sorted({s.participant_id for s in segments})
    if cfg.pool_participants:
        unknown = set(cfg.pool_participants) - set(participants)
        if unknown:
            raise ConfigError(f"exemplars.pool_participants not found in data: {sorted(unknown)}")
        pool_p = set(cfg.pool_participants)
    else:
        n = max(1, round(cfg.pool_fraction * len(participants)))
        if n >= len(participants):
            raise ConfigError("exemplar pool would leave no participants to evaluate")
        pool_p = set(random.Random(cfg.seed).sample(participants, n))
    pool = [s.segment_id for s in segments if s.participant_id in pool_p]
    evaluate = [s.segment_id for s in segments if s.participant_id not in pool_p]
    return pool, evaluate


# --- ingest --------------------------------------------------------------------------------


def cmd_ingest(ctx: RunContext) -> StageResult:
    cfg = ctx.config
    res = StageResult("ingest", started=_now())
    try:
        probes = load_probes(cfg.probes)
    except (ValueError, KeyError, TypeError, GazePromptError) as exc:
        raise StageError(f"{cfg.probes}: {type(exc).__name__}: {exc}") from exc
    res.inputs[_rel(cfg.probes, cfg.base_dir)] = file_checksum(cfg.probes)
    by_pid: dict[str, list] = {}
    for p in probes:
        by_pid.setdefault(p.participant_id, []).append(p)

    logs = {}
    for pid in by_pid:
        path = cfg.gaze_dir / f"{pid}.csv"
        if not path.is_file():
            raise StageError(f"{path}: no gaze log for participant {pid!r} named in {cfg.probes}")
        logs[pid] = path
        res.inputs[_rel(path, cfg.base_dir)] = file_checksum(path)

    if ctx.dry_run:
        ctx.echo(f"ingest: {len(probes)} probes from {len(by_pid)} participants -> {ctx.out}")
        res.status = SKIPPED
        res.finished = _now()
        return res

    def one(pid: str) -> list[Segment]:
        path = logs[pid]
        try:
            with open(path, "rb") as fh:
                trace = parse_gaze_csv(fh, cfg.gaze_schema, participant_id=pid)
            meta = cfg.video.with_start(cfg.participant_starts.get(pid, cfg.video.start_timestamp_us))
            return [extract_segment(trace, p, meta, cfg.window_us, cfg.resample) for p in by_pid[pid]]
        except GazePromptError as exc:
            raise StageError(f"{path}: {exc}") from exc

    pids = list(by_pid)
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            per = dict(zip(pids, pool.map(one, pids)))
    else:
        per = {pid: one(pid) for pid in pids}
    # probe-file order
    cursor = {pid: iter(segs) for pid, segs in per.items()}
    segments = [next(cursor[p.participant_id]) for p in probes]
    ids = [s.segment_id for s in segments]
    if len(set(ids)) != len(ids):
        raise StageError(f"{cfg.probes}: duplicate (participant_id, probe_id) pairs")

    pool_ids, eval_ids = split_pool(segments, cfg)
    dist = class_distribution([s.label for s in segments])
    h = cfg.config_hash
    out = ctx.out
    res.outputs["segments.json"] = _dump(
        out / "segments.json",
        {"config_hash": h, "video": cfg.video.to_mapping(), "segments": [s.to_json() for s in segments]},
    )
    res.outputs["labels.json"] = _dump(
        out / "labels.json",
        {
            "config_hash": h,
            "labels": {s.segment_id: s.label for s in segments},
            "participants": {s.segment_id: s.participant_id for s in segments},
            "pool": pool_ids,
            "eval": eval_ids,
        },
    )
    res.outputs["distribution.json"] = _dump(out / "distribution.json", {"config_hash": h, **dist.to_json()})
    res.details = {"segments": len(segments), "pool": len(pool_ids), "eval": len(eval_ids)}
    res.message = f"{len(segments)} segments, p0={dist.p0:.3f} p1={dist.p1:.3f}"
    res.finished = _now()
    return res


# --- render ----------------------------------------------------------------------------------


def _frame_source(cfg: ExperimentConfig):
    if cfg.frames_dir is not None:
        return FramesDirSource(cfg.frames_dir, cfg.frame_digits)
    return VideoFileSource(cfg.video_file)


def clip_dir(out: Path, segment_id: str) -> Path:
    return out / "clips" / safe_dirname(segment_id)


def media_ref(out: Path, segment_id: str) -> Path:
    """Encoded clip when present, else the frame-sequence manifest."""
    d = clip_dir(out, segment_id)
    video = d / "clip.mp4"
    return video if video.is_file() else d / MANIFEST_NAME


def _up_to_date(d: Path, key: str, need_video: bool) -> bool:
    try:
        m = ClipManifest.load(d)
    except (OSError, ValueError, KeyError):
        return False
    if m.input_key != key or not all((d / f).is_file() for f in m.frames):
        return False
    return not need_video or (d / "clip.mp4").is_file()


def cmd_render(ctx: RunContext, segment_filter: Optional[Sequence[str]] = None) -> StageResult:
    cfg = ctx.config
    res = StageResult("render", started=_now())
    segments = load_segments(ctx.out)
    res.inputs["segments.json"] = file_checksum(ctx.out / "segments.json")
    if segment_filter:
        wanted = set(segment_filter)
        unknown = wanted - {s.segment_id for s in segments}
        if unknown:
            raise ConfigError(f"unknown segment ids: {sorted(unknown)}")
        segments = [s for s in segments if s.segment_id in wanted]

    if ctx.dry_run:
        for s in segments:
            ctx.echo(f"render {s.segment_id}: frames {s.frame_range[0]}..{s.frame_range[1]} -> {clip_dir(ctx.out, s.segment_id)}")
        res.status = SKIPPED
        res.finished = _now()
        return res

    source = _frame_source(cfg)
    fps = f"{cfg.video.fps.numerator}/{cfg.video.fps.denominator}"
    style_json = json.dumps(cfg.style.to_json(), sort_keys=True)
    failures: dict[str, str] = {}
    rendered = skipped = 0
    for s in segments:
        d = clip_dir(ctx.out, s.segment_id)
        try:
            indices = list(range(s.frame_range[0], s.frame_range[1] + 1))
            key_src = json.dumps(s.to_json(), sort_keys=True) + style_json + fps + source.fingerprint(indices)
            key = hashlib.sha256(key_src.encode()).hexdigest()
            if not ctx.force and _up_to_date(d, key, bool(cfg.encoder_cmd)):
                skipped += 1
            else:
                manifest = render_segment(
                    s, source, cfg.style, d, fps=fps, workers=cfg.workers, input_key=key, config_hash=cfg.config_hash
                )
                if cfg.encoder_cmd:
                    encode_clip(manifest, cfg.encoder_cmd, d / "clip.mp4")
                rendered += 1
            res.outputs[_rel(d / MANIFEST_NAME, ctx.out)] = file_checksum(d / MANIFEST_NAME)
        except GazePromptError as exc:
            failures[s.segment_id] = f"{type(exc).__name__}: {exc}"
            log.warning("render %s failed: %s", s.segment_id, exc)

    if failures:
        res.status = FAILED if len(failures) == len(segments) else PARTIAL
    res.details = {"rendered": rendered, "skipped": skipped, "failures": failures}
    res.message = f"{rendered} rendered, {skipped} up to date, {len(failures)} failed"
    res.finished = _now()
    return res


# --- classify -------------------------------------------------------------------------------


def make_backend(cfg: ExperimentConfig, segments: Sequence[Segment]) -> Backend:
    if cfg.backend_kind == "replay":
        return ReplayBackend(ResponseCache(cfg.cache_path))
    if cfg.backend_kind == "mock":
        box = tuple(cfg.mock.get("content_box", (0.0, 0.0, 1.0, 1.0)))
        stats = {s.segment_id: gaze_statistics(s.frame_gaze, box) for s in segments}
        script = cfg.mock.get("script")
        if isinstance(script, str):
            path = Path(script) if Path(script).is_absolute() else cfg.base_dir / script
            script = json.loads(path.read_text(encoding="utf-8"))
        inner: Backend = MockBackend(
            stats, float(cfg.mock.get("threshold", 0.6)), script, fail=cfg.mock.get("fail", ())
        )
    else:
        inner = HttpBackend(cfg.backend)
    return RecordingBackend(inner, ResponseCache(cfg.cache_path)) if cfg.record else inner


def _exemplar_pool(segments: Sequence[Segment], pool_ids: Sequence[str], out: Path) -> list[Exemplar]:
    by_id = {s.segment_id: s for s in segments}
    return [
        Exemplar(sid, str(media_ref(out, sid)), by_id[sid].label, by_id[sid].participant_id) for sid in pool_ids
    ]


def predictions_path(out: Path, strategy_name: str) -> Path:
    return out / "predictions" / f"{strategy_name}.jsonl"


def classify_strategy(ctx: RunContext, spec: StrategySpec, backend: Backend, segments, labels_doc) -> StageResult:
    cfg = ctx.config
    name = spec.strategy.name
    res = StageResult(f"classify:{name}", started=_now())
    by_id = {s.segment_id: s for s in segments}
    eval_ids = [sid for sid in labels_doc["eval"] if (clip_dir(ctx.out, sid) / MANIFEST_NAME).is_file()]
    pool = _exemplar_pool(segments, labels_doc["pool"], ctx.out)

    requests = []
    for sid in eval_ids:
        seg = by_id[sid]
        exemplars = []
        if spec.strategy.needs_exemplars:
            excluded = seg.participant_id if cfg.exclude_same_participant else None
            exemplars = select_exemplars(pool, spec.strategy.k, spec.seed, excluded)
        bundle = build_prompt(
            spec.strategy,
            str(media_ref(ctx.out, sid)),
            exemplars,
            spec.blind_seed,
            segment_id=sid,
            target_participant=seg.participant_id,
            exclude_same_participant=cfg.exclude_same_participant,
        )
        requests.append(make_request(bundle, cfg.model_id, cfg.generation))
    for r in requests:
        for m, c in zip(r.bundle.media, r.media_checksums):
            res.inputs[_rel(Path(m), ctx.out)] = c

    if ctx.dry_run:
        ctx.echo(f"classify {name}: {len(requests)} requests to {backend.tag}")
        res.status = SKIPPED
        res.finished = _now()
        return res

    results = run_batch(requests, backend, cfg.backend)
    preds, failures = [], []
    for req, out in zip(requests, results):
        if isinstance(out, RequestFailure):
            failures.append({"segment_id": req.bundle.segment_id, **out.to_json()})
            continue
        p = parse_response(
            out.text,
            spec.strategy,
            req.bundle.blind_mapping,
            segment_id=req.bundle.segment_id,
            fallback_class=cfg.fallback_class,
        )
        preds.append(p)

    path = predictions_path(ctx.out, name)
    path.parent.mkdir(parents=True, exist_ok=True)
    h = cfg.config_hash
    with open(path, "w", encoding="utf-8") as fh:
        for p in preds:
            fh.write(json.dumps({**p.to_json(), "config_hash": h}, sort_keys=True, ensure_ascii=False) + "\n")
    res.outputs[_rel(path, ctx.out)] = file_checksum(path)
    fpath = path.with_suffix(".failures.json")
    res.outputs[_rel(fpath, ctx.out)] = _dump(fpath, {"config_hash": h, "failures": failures})

    if requests and len(failures) == len(requests):
        res.status = FAILED
    elif failures:
        # partial failures are reported, not fatal
        res.status = OK
    abstained = sum(1 for p in preds if p.outcome == ABSTAINED)
    res.details = {
        "requests": len(requests),
        "predictions": len(preds),
        "failures": len(failures),
        "abstained": abstained,
        "blind_mapping": requests[0].bundle.blind_mapping if requests and spec.strategy.is_blind else None,
    }
    res.message = f"{len(preds)} predictions, {len(failures)} failed, {abstained} abstained"
    for f in failures:
        ctx.echo(f"classify {name}: {f['segment_id']}: {f['error_type']}: {f['message']}")
    res.finished = _now()
    return res


def cmd_classify(ctx: RunContext, strategy: Optional[str] = None) -> StageResult:
    cfg = ctx.config
    specs = cfg.strategies
    if strategy:
        try:
            wanted = StrategyKind.parse(strategy).name
        except ValueError:
            wanted = strategy
        specs = [s for s in specs if s.strategy.name == wanted]
        if not specs:
            raise ConfigError(f"strategy {strategy!r} is not configured")
    if not specs:
        raise ConfigError("no strategies configured")
    segments = load_segments(ctx.out)
    labels_doc = load_labels(ctx.out)
    backend = make_backend(cfg, segments)
    res = StageResult("classify", started=_now())
    subs = [classify_strategy(ctx, spec, backend, segments, labels_doc) for spec in specs]
    for sub in subs:
        res.inputs.update(sub.inputs)
        res.outputs.update(sub.outputs)
    res.details = {sub.name: sub.details for sub in subs}
    statuses = {sub.status for sub in subs}
    if statuses == {SKIPPED}:
        res.status = SKIPPED
    elif FAILED in statuses:
        res.status = FAILED if statuses <= {FAILED} else PARTIAL
    res.message = "; ".join(f"{sub.name}: {sub.message}" for sub in subs)
    res.finished = _now()
    return res


# --- evaluate --------------------------------------------------------------------------------


def load_predictions(path: Path) -> list[Prediction]:
    return [Prediction.from_json(json.loads(line)) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def cmd_evaluate(ctx: RunContext) -> StageResult:
    cfg = ctx.config
    res = StageResult("evaluate", started=_now())
    labels_doc = load_labels(ctx.out)
    res.inputs["labels.json"] = file_checksum(ctx.out / "labels.json")
    eval_ids = labels_doc.get("eval") or list(labels_doc["labels"])
    labels = {sid: int(labels_doc["labels"][sid]) for sid in eval_ids}
    dist = class_distribution(list(labels.values()))
    label_list = [labels[sid] for sid in eval_ids]

    rows: list[MethodRow] = []
    if cfg.baselines:
        rows += baseline_rows(dist, label_list, cfg.trials, cfg.sim_seed, cfg.workers)
    for spec in cfg.strategies:
        path = predictions_path(ctx.out, spec.strategy.name)
        if not path.is_file():
            ctx.echo(f"evaluate: no predictions for {spec.strategy.name}, skipping")
            continue
        res.inputs[_rel(path, ctx.out)] = file_checksum(path)
        preds = [p for p in load_predictions(path) if p.segment_id in labels]
        have = {p.segment_id for p in preds}
        missing = [sid for sid in eval_ids if sid not in have]
        # unanswered segments are scored under the fallback class, like abstentions
        pairs = [(p.segment_id, p.label) for p in preds] + [(sid, cfg.fallback_class) for sid in missing]
        matrix = confusion(pairs, labels)
        abstained = sum(1 for p in preds if p.outcome == ABSTAINED)
        meta = {
            "strategy": spec.strategy.name,
            "standard_k": spec.strategy.is_standard_config,
            "exemplar_seed": spec.seed,
            "blind_seed": spec.blind_seed,
            "backend": cfg.backend_kind,
            "model_id": cfg.model_id,
            "missing": len(missing),
        }
        rows.append(
            MethodRow(spec.strategy.name, metrics(matrix), meta, matrix, abstention_rate=(abstained + len(missing)) / len(labels))
        )
    if not rows:
        raise StageError("nothing to evaluate: baselines disabled and no predictions found")
    rep = report(rows, dist, cfg.config_hash)
    if ctx.dry_run:
        ctx.echo(rep.table())
        res.status = SKIPPED
        res.finished = _now()
        return res
    paths = write_report(rep, ctx.out / "report", figure=cfg.figure)
    for p in paths.values():
        res.outputs[_rel(p, ctx.out)] = file_checksum(p)
    res.message = f"{len(rows)} rows over {dist.total} segments"
    res.finished = _now()
    return res


# --- run manifest -----------------------------------------------------------------------------


@dataclass
class RunManifest:
    config_hash: str
    toolkit_version: str
    seeds: dict
    stages: list[StageResult] = field(default_factory=list)
    segment_count: int = 0
    not_attempted: list[str] = field(default_factory=list)

    def stage_checksums(self) -> dict[str, str]:
        return {s.name: s.checksum() for s in self.stages}

    def checksum(self) -> str:
        blob = json.dumps([self.config_hash, self.stage_checksums()], sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()

    def to_json(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "toolkit_version": self.toolkit_version,
            "seeds": self.seeds,
            "segment_count": self.segment_count,
            "stages": [s.to_json() for s in self.stages],
            "not_attempted": self.not_attempted,
            "checksum": self.checksum(),
        }

    def write(self, out: Path) -> Path:
        path = out / "run_manifest.json"
        out.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return path


def update_manifest(ctx: RunContext, result: StageResult) -> RunManifest:
    """Merge one stage result into ``run_manifest.json`` (fresh if the config changed)."""
    cfg = ctx.config
    path = ctx.out / "run_manifest.json"
    manifest = RunManifest(cfg.config_hash, __version__, cfg.seeds())
    if path.is_file():
        old = json.loads(path.read_text(encoding="utf-8"))
        if old.get("config_hash") == cfg.config_hash:
            for s in old.get("stages", []):
                if s["name"] != result.name:
                    manifest.stages.append(
                        StageResult(s["name"], s["status"], s["inputs"], s["outputs"], s["message"], s["started"], s["finished"], s.get("details", {}))
                    )
            manifest.segment_count = old.get("segment_count", 0)
    manifest.stages.append(result)
    manifest.stages.sort(key=lambda s: STAGES.index(s.name) if s.name in STAGES else len(STAGES))
    if result.name == "ingest":
        manifest.segment_count = result.details.get("segments", 0)
    if not ctx.dry_run:
        manifest.write(ctx.out)
    return manifest


def cmd_run(ctx: RunContext) -> RunManifest:
    """Run all stages in order, stopping at the first one without usable output."""
    cfg = ctx.config
    manifest = RunManifest(cfg.config_hash, __version__, cfg.seeds())
    steps = [("ingest", cmd_ingest), ("render", cmd_render), ("classify", cmd_classify), ("evaluate", cmd_evaluate)]
    if ctx.dry_run:
        # later stages need the files earlier stages would have written
        manifest.stages.append(cmd_ingest(ctx))
        manifest.not_attempted = [n for n, _ in steps[1:]]
        ctx.echo(f"dry run: would continue with {', '.join(manifest.not_attempted)}")
        return manifest
    for i, (name, fn) in enumerate(steps):
        try:
            result = fn(ctx)
        except GazePromptError as exc:
            result = StageResult(name, FAILED, message=f"{type(exc).__name__}: {exc}", started=_now(), finished=_now())
        manifest.stages.append(result)
        if name == "ingest":
            manifest.segment_count = result.details.get("segments", 0)
        if result.status == FAILED:
            manifest.not_attempted = [n for n, _ in steps[i + 1 :]]
            break
    manifest.write(ctx.out)
    return manifest


def manifest_exit_code(manifest: RunManifest) -> int:
    statuses = {s.status for s in manifest.stages}
    if FAILED in statuses:
        return EXIT_CODES[FAILED]
    if PARTIAL in statuses:
        return EXIT_CODES[PARTIAL]
    return 0
