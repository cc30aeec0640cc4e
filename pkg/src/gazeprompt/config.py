"""Experiment configuration (a single YAML file)."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Optional

import yaml

from .backend import BackendConfig, GenerationParams
from .errors import ConfigError
from .gaze import ResamplePolicy, VideoMeta
from .overlay import DEFAULT_ENCODER_CMD, OverlayStyle
from .prompts import StrategyKind
from .segments import ATTENTIVE, DEFAULT_WINDOW_US


@dataclass(frozen=True)
class StrategySpec:
    strategy: StrategyKind
    seed: int
    blind_seed: int


@dataclass
class ExperimentConfig:
    raw: dict
    base_dir: Path
    seed: int
    gaze_dir: Path
    probes: Path
    frames_dir: Optional[Path]
    video_file: Optional[Path]
    out_dir: Path
    video: VideoMeta
    participant_starts: dict[str, int]
    gaze_schema: dict[str, str]
    resample: ResamplePolicy
    window_us: int
    style: OverlayStyle
    frame_digits: int
    encoder_cmd: Optional[str]
    strategies: list[StrategySpec]
    pool_participants: list[str]
    pool_fraction: float
    exclude_same_participant: bool
    backend_kind: str
    model_id: str
    backend: BackendConfig
    generation: GenerationParams
    mock: dict
    record: bool
    cache_path: Path
    baselines: bool
    trials: int
    sim_seed: int
    fallback_class: int
    figure: bool
    workers: int = 1

    @property
    def config_hash(self) -> str:
        return config_hash(self.raw)

    @property
    def needs_pool(self) -> bool:
        return bool(self.pool_participants) or any(s.strategy.needs_exemplars for s in self.strategies)

    def validate(self) -> None:
        """Check every referenced input exists; raises ConfigError naming the path."""
        checks = [("paths.gaze_dir", self.gaze_dir, "dir"), ("paths.probes", self.probes, "file")]
        if self.frames_dir is not None:
            checks.append(("paths.frames_dir", self.frames_dir, "dir"))
        if self.video_file is not None:
            checks.append(("paths.video_file", self.video_file, "file"))
        for key, path, kind in checks:
            ok = path.is_dir() if kind == "dir" else path.is_file()
            if not ok:
                raise ConfigError(f"{key}: {path} does not exist or is not a {'directory' if kind == 'dir' else 'file'}")
        if self.frames_dir is None and self.video_file is None:
            raise ConfigError("one of paths.frames_dir or paths.video_file is required")
        if self.backend_kind not in ("mock", "replay", "http"):
            raise ConfigError(f"backend.kind must be mock, replay or http (got {self.backend_kind!r})")
        if self.fallback_class not in (0, 1):
            raise ConfigError("evaluation.fallback_class must be 0 or 1")

    def seeds(self) -> dict:
        return {
            "master": self.seed,
            "simulation": self.sim_seed,
            "strategies": {s.strategy.name: {"exemplar_seed": s.seed, "blind_seed": s.blind_seed} for s in self.strategies},
        }


def config_hash(raw: Mapping) -> str:
    """Hash of everything that influences results; file locations are excluded
    (inputs are tracked by content checksum in the run manifest)."""
    d = copy.deepcopy(dict(raw))
    d.pop("paths", None)
    d.pop("workers", None)
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _path(base: Path, value: Optional[str]) -> Optional[Path]:
    if value is None:
        return None
    p = Path(value).expanduser()
    return p if p.is_absolute() else (base / p)


def _encoder_cmd(value) -> Optional[str]:
    # "default" (or true) selects the bundled ffmpeg template; absent means no encoding
    if value is True or value == "default":
        return DEFAULT_ENCODER_CMD
    return str(value) if value else None


def _strategies(items, master_seed: int) -> list[StrategySpec]:
    specs = []
    for i, item in enumerate(items or []):
        if isinstance(item, str):
            item = {"name": item}
        kind = StrategyKind.parse(str(item["name"]))
        seed = int(item.get("seed", master_seed + i))
        specs.append(StrategySpec(kind, seed, int(item.get("blind_seed", seed))))
    names = [s.strategy.name for s in specs]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate strategies in config: {names}")
    return specs


def from_mapping(
    raw: Mapping[str, Any],
    base_dir: Path,
    out: Optional[Path] = None,
    seed: Optional[int] = None,
    workers: Optional[int] = None,
) -> ExperimentConfig:
    raw = copy.deepcopy(dict(raw))
    if seed is not None:
        raw["seed"] = seed
    master = int(raw.get("seed", 0))
    paths = raw.get("paths") or {}
    if "gaze_dir" not in paths or "probes" not in paths:
        raise ConfigError("paths.gaze_dir and paths.probes are required")
    out_dir = out if out is not None else _path(base_dir, paths.get("out", "run"))
    video = raw.get("video") or {}
    try:
        meta = VideoMeta.from_mapping(video)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"video: invalid metadata ({exc})") from None
    starts = {
        str(pid): int(v["video_start_timestamp_us"])
        for pid, v in (raw.get("participants") or {}).items()
        if v and "video_start_timestamp_us" in v
    }
    gaze = raw.get("gaze") or {}
    overlay = raw.get("overlay") or {}
    render = raw.get("render") or {}
    ex = raw.get("exemplars") or {}
    be = raw.get("backend") or {}
    ev = raw.get("evaluation") or {}
    try:
        return ExperimentConfig(
            raw=raw,
            base_dir=base_dir,
            seed=master,
            gaze_dir=_path(base_dir, paths["gaze_dir"]),
            probes=_path(base_dir, paths["probes"]),
            frames_dir=_path(base_dir, paths.get("frames_dir")),
            video_file=_path(base_dir, paths.get("video_file")),
            out_dir=Path(out_dir),
            video=meta,
            participant_starts=starts,
            gaze_schema=dict(gaze.get("schema") or {}),
            resample=ResamplePolicy(**(gaze.get("resample") or {})),
            window_us=int((raw.get("segments") or {}).get("window_us", DEFAULT_WINDOW_US)),
            style=OverlayStyle.from_mapping(overlay),
            frame_digits=int(video.get("frame_digits", 6)),
            encoder_cmd=_encoder_cmd(render.get("encoder_cmd")),
            strategies=_strategies(raw.get("strategies"), master),
            pool_participants=[str(p) for p in ex.get("pool_participants", [])],
            pool_fraction=float(ex.get("pool_fraction", 0.2)),
            exclude_same_participant=bool(ex.get("exclude_same_participant", True)),
            backend_kind=str(be.get("kind", "mock")),
            model_id=str(be.get("model_id", "mock-vlm")),
            backend=BackendConfig.from_mapping({**(be.get("http") or {}), **(be.get("budget") or {})}),
            generation=GenerationParams(**(be.get("generation") or {})),
            mock=dict(be.get("mock") or {}),
            record=bool(be.get("record", be.get("kind") == "http")),
            cache_path=_path(base_dir, be["cache"]) if be.get("cache") else Path(out_dir) / "cache.jsonl",
            baselines=bool(ev.get("baselines", True)),
            trials=int(ev.get("trials", 0)),
            sim_seed=int(ev.get("seed", master)),
            fallback_class=int(ev.get("fallback_class", ATTENTIVE)),
            figure=bool(ev.get("figure", True)),
            workers=int(workers if workers is not None else raw.get("workers", 1)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from None


def load_config(
    path: Path, out: Optional[Path] = None, seed: Optional[int] = None, workers: Optional[int] = None
) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return from_mapping(raw, path.parent.resolve(), out, seed, workers)

