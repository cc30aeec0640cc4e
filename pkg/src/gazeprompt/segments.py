"""Attention-probe labels and 20 s pre-probe segments."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

from .errors import EmptyLabelSet, ProbeBeyondVideo, RatingOutOfRange
from .gaze import (
    FrameGaze,
    GazeTrace,
    ResamplePolicy,
    VideoMeta,
    frame_gaze_from_json,
    frame_gaze_to_json,
    map_to_frame,
    resample_to_frames,
)

INATTENTIVE = 0
ATTENTIVE = 1
CLASS_NAMES = {INATTENTIVE: "Inattentive", ATTENTIVE: "Attentive"}

DEFAULT_WINDOW_US = 20_000_000
# highest self-report still counted as inattentive
INATTENTIVE_MAX_RATING = 2


@dataclass(frozen=True)
class ProbePoint:
    probe_id: str
    video_time_us: int
    rating: int
    participant_id: str = ""

    def __post_init__(self) -> None:
        if self.video_time_us < 0:
            raise ValueError("video_time_us must be non-negative")
        if not 0 <= self.rating <= 5:
            raise RatingOutOfRange(f"rating {self.rating} outside 0..5")


def threshold_rating(rating: int) -> int:
    """Map a 0-5 self-report to class 0 (Inattentive) or 1 (Attentive)."""
    if isinstance(rating, bool) or not isinstance(rating, int) or not 0 <= rating <= 5:
        raise RatingOutOfRange(f"rating {rating!r} outside 0..5")
    return INATTENTIVE if rating <= INATTENTIVE_MAX_RATING else ATTENTIVE


def make_segment_id(participant_id: str, probe_id: str) -> str:
    return f"{participant_id}:{probe_id}"


@dataclass(frozen=True)
class Segment:
    segment_id: str
    participant_id: str
    probe_id: str
    start_us: int
    end_us: int
    frame_range: tuple[int, int]
    frame_gaze: tuple[FrameGaze, ...]
    label: int
    effective_duration_us: int

    @property
    def frame_count(self) -> int:
        first, last = self.frame_range
        return max(0, last - first + 1)

    def to_json(self) -> dict:
        return {
            "segment_id": self.segment_id,
            "participant_id": self.participant_id,
            "probe_id": self.probe_id,
            "start_us": self.start_us,
            "end_us": self.end_us,
            "frame_range": list(self.frame_range),
            "label": self.label,
            "effective_duration_us": self.effective_duration_us,
            "frame_gaze": frame_gaze_to_json(self.frame_gaze),
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "Segment":
        return cls(
            segment_id=d["segment_id"],
            participant_id=d["participant_id"],
            probe_id=d["probe_id"],
            start_us=int(d["start_us"]),
            end_us=int(d["end_us"]),
            frame_range=(int(d["frame_range"][0]), int(d["frame_range"][1])),
            frame_gaze=tuple(frame_gaze_from_json(d.get("frame_gaze", []))),
            label=int(d["label"]),
            effective_duration_us=int(d["effective_duration_us"]),
        )


def segment_frame_range(start_us: int, end_us: int, meta: VideoMeta) -> tuple[int, int]:
    """Inclusive frame range covering video-relative ``[start_us, end_us)``.

    An empty window yields ``(first, first - 1)``.
    """
    base = meta.start_timestamp_us
    if end_us <= start_us:
        first = map_to_frame(base + start_us, meta) if start_us < meta.duration_us else meta.frame_count
        return first, first - 1
    first = map_to_frame(base + start_us, meta)
    last_ts = min(end_us - 1, meta.duration_us - 1)
    # the final partial frame, if any, is not addressable
    last = min((last_ts * meta.fps.numerator) // (1_000_000 * meta.fps.denominator), meta.frame_count - 1)
    return first, last


def extract_segment(
    trace: GazeTrace,
    probe: ProbePoint,
    meta: VideoMeta,
    window_us: int = DEFAULT_WINDOW_US,
    policy: ResamplePolicy = ResamplePolicy(),
) -> Segment:
    """Cut the window ending at ``probe`` and resample its gaze per frame.

    Windows reaching before the start of the video are truncated rather than
    rejected; ``effective_duration_us`` records the truncation.
    """
    if probe.video_time_us > meta.duration_us:
        raise ProbeBeyondVideo(
            f"probe {probe.probe_id!r} at {probe.video_time_us} us is past the video end ({meta.duration_us} us)"
        )
    end_us = probe.video_time_us
    start_us = max(0, end_us - window_us)
    first, last = segment_frame_range(start_us, end_us, meta)
    frame_gaze = resample_to_frames(trace, meta, policy, range(first, last + 1)) if last >= first else []
    pid = trace.participant_id or probe.participant_id
    return Segment(
        segment_id=make_segment_id(pid, probe.probe_id),
        participant_id=pid,
        probe_id=probe.probe_id,
        start_us=start_us,
        end_us=end_us,
        frame_range=(first, last),
        frame_gaze=tuple(frame_gaze),
        label=threshold_rating(probe.rating),
        effective_duration_us=end_us - start_us,
    )


@dataclass(frozen=True)
class ClassDistribution:
    n0: int
    n1: int

    @property
    def total(self) -> int:
        return self.n0 + self.n1

    @property
    def p0(self) -> float:
        return self.n0 / self.total

    @property
    def p1(self) -> float:
        return self.n1 / self.total

    @property
    def majority_class(self) -> int:
        return ATTENTIVE if self.n1 >= self.n0 else INATTENTIVE

    def to_json(self) -> dict:
        return {"n0": self.n0, "n1": self.n1, "p0": self.p0, "p1": self.p1}


def class_distribution(labels: Iterable[int]) -> ClassDistribution:
    labels = list(labels)
    if not labels:
        raise EmptyLabelSet("cannot compute a distribution over zero labels")
    n1 = sum(1 for c in labels if c == ATTENTIVE)
    n0 = sum(1 for c in labels if c == INATTENTIVE)
    if n0 + n1 != len(labels):
        raise ValueError("labels must be 0 or 1")
    return ClassDistribution(n0, n1)


def load_probes(path_or_text) -> list[ProbePoint]:
    """Read a probe file: JSON array of ``{participant_id, probe_id, video_time_us, rating}``."""
    if hasattr(path_or_text, "read_text"):
        data = json.loads(path_or_text.read_text(encoding="utf-8"))
    else:
        data = json.loads(path_or_text)
    probes = []
    for rec in data:
        rating = rec["rating"]
        if isinstance(rating, bool) or not isinstance(rating, int):
            raise RatingOutOfRange(f"rating {rating!r} is not an integer")
        probes.append(
            ProbePoint(
                probe_id=str(rec["probe_id"]),
                video_time_us=int(rec["video_time_us"]),
                rating=rating,
                participant_id=str(rec["participant_id"]),
            )
        )
    return probes


def segments_by_participant(segments: Sequence[Segment]) -> dict[str, list[Segment]]:
    out: dict[str, list[Segment]] = {}
    for s in segments:
        out.setdefault(s.participant_id, []).append(s)
    return out


def find_segment(segments: Sequence[Segment], segment_id: str) -> Optional[Segment]:
    return next((s for s in segments if s.segment_id == segment_id), None)
