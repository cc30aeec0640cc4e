"""Small synthetic datasets for demos and end-to-end tests.

Frames show a dark slide with a light "content" panel; gaze either dwells on
the panel (high self-reported attention) or drifts along the margins (low).
"""

from __future__ import annotations

import json
import math
import random
from pathlib import Path
from typing import Sequence

import numpy as np

from .gaze import GazeSample, GazeTrace, serialize_gaze_csv
from .overlay import FrameBuffer, write_png

CONTENT_BOX = (0.25, 0.2, 0.75, 0.8)
UTC_BASE_US = 1_700_000_000_000_000


def make_frames(directory: Path, n_frames: int, width: int = 64, height: int = 36, digits: int = 6) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    x0, y0, x1, y1 = CONTENT_BOX
    for i in range(n_frames):
        px = np.zeros((height, width, 3), dtype=np.uint8)
        px[...] = (30, 30, 40)
        px[int(y0 * height) : int(y1 * height), int(x0 * width) : int(x1 * width)] = (235, 235, 225)
        # a moving bar so every frame differs
        col = (i * 3) % width
        px[:2, col] = (0, 160, 255)
        write_png(FrameBuffer(width, height, px), directory / f"{i:0{digits}d}.png")


def make_trace(
    participant_id: str,
    start_us: int,
    duration_us: int,
    attentive_windows: Sequence[tuple[int, int]],
    rate_hz: int = 60,
    seed: int = 0,
) -> GazeTrace:
    """Gaze on the content panel inside ``attentive_windows`` (video-relative µs), margins elsewhere."""
    rng = random.Random(seed)
    step = 1_000_000 // rate_hz
    x0, y0, x1, y1 = CONTENT_BOX
    samples = []
    for k, t in enumerate(range(0, duration_us, step)):
        on = any(a <= t < b for a, b in attentive_windows)
        if on:
            x = rng.uniform(x0 + 0.02, x1 - 0.02)
            y = rng.uniform(y0 + 0.02, y1 - 0.02)
        else:
            phase = 2 * math.pi * k / 240
            x = min(1.0, max(0.0, 0.5 + 0.48 * math.cos(phase)))
            y = min(1.0, max(0.0, 0.5 + 0.45 * math.sin(phase)))
            if x0 <= x <= x1 and y0 <= y <= y1:
                y = 0.05
        valid = rng.random() > 0.02
        samples.append(GazeSample(start_us + t, round(x, 6), round(y, 6), valid, round(rng.uniform(2.5, 4.5), 3)))
    return GazeTrace(participant_id, tuple(samples))


def make_dataset(
    root: Path,
    n_participants: int = 3,
    duration_s: int = 30,
    fps: int = 10,
    probe_times_s: Sequence[int] = (8, 15, 22, 30),
    seed: int = 0,
) -> Path:
    """Write gaze logs, probes, frames and a mock-backend config; returns the config path."""
    root = Path(root)
    rng = random.Random(seed)
    duration_us = duration_s * 1_000_000
    make_frames(root / "frames", duration_s * fps)
    (root / "gaze").mkdir(parents=True, exist_ok=True)
    probes = []
    starts = {}
    for p in range(n_participants):
        pid = f"p{p + 1:02d}"
        start = UTC_BASE_US + p * 3_600_000_000
        starts[pid] = start
        windows = []
        prev = 0
        for j, t in enumerate(probe_times_s):
            attentive = rng.random() < 0.6 if (p + j) % 3 else j % 2 == 0
            rating = rng.choice([3, 4, 5]) if attentive else rng.choice([0, 1, 2])
            if attentive:
                windows.append((prev, t * 1_000_000))
            probes.append({"participant_id": pid, "probe_id": f"q{j + 1}", "video_time_us": t * 1_000_000, "rating": rating})
            prev = t * 1_000_000
        trace = make_trace(pid, start, duration_us, windows, seed=seed * 100 + p)
        (root / "gaze" / f"{pid}.csv").write_bytes(serialize_gaze_csv(trace))
    (root / "probes.json").write_text(json.dumps(probes, indent=1), encoding="utf-8")

    config = {
        "seed": seed,
        "paths": {"gaze_dir": "gaze", "probes": "probes.json", "frames_dir": "frames", "out": "run"},
        "video": {
            "fps": f"{fps}/1",
            "width_px": 64,
            "height_px": 36,
            "start_timestamp_us": UTC_BASE_US,
            "duration_us": duration_us,
        },
        "participants": {pid: {"video_start_timestamp_us": s} for pid, s in starts.items()},
        "overlay": {"radius_px": 4, "alpha": 0.45},
        "strategies": [{"name": "heuristic_cot"}, {"name": "few_shot:1"}, {"name": "blind_similarity:1"}],
        "exemplars": {"pool_participants": ["p01"]},
        "backend": {
            "kind": "mock",
            "model_id": "mock-vlm",
            "mock": {"threshold": 0.6, "content_box": list(CONTENT_BOX)},
            "budget": {"max_in_flight": 4, "rate_limit_per_min": None},
        },
        "evaluation": {"baselines": True, "trials": 200, "fallback_class": 1},
    }
    import yaml

    path = root / "experiment.yaml"
    path.write_text(yaml.safe_dump(config, sort_keys=False), encoding="utf-8")
    return path
