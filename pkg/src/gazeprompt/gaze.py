"""Gaze log ingestion and synchronisation to video frames.

Timestamps are integer microseconds (UTC). Frame arithmetic is done with
exact rationals so that long recordings at high sampling rates never drift
by a frame.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from bisect import bisect_left, bisect_right
from dataclasses import dataclass
from fractions import Fraction
from typing import IO, Iterable, Mapping, Optional, Sequence, Union

from .errors import EmptyTrace, MalformedRow, NonMonotonicTimestamp, OutOfRange

US_PER_S = 1_000_000

DEFAULT_SCHEMA: dict[str, str] = {
    "timestamp_us": "timestamp_us",
    "x": "x",
    "y": "y",
    "valid": "validity",
    "pupil_mm": "pupil_mm",
}

_TRUE = {"1", "true", "t", "yes", "y", "valid"}
_FALSE = {"0", "false", "f", "no", "n", "invalid"}


@dataclass(frozen=True)
class GazeSample:
    timestamp_us: int
    x: Optional[float]
    y: Optional[float]
    valid: bool
    pupil_mm: Optional[float] = None

    def __post_init__(self) -> None:
        if self.timestamp_us < 0:
            raise ValueError("timestamp_us must be non-negative")
        if self.valid:
            if self.x is None or self.y is None:
                raise ValueError("valid sample needs coordinates")
            if not (0.0 <= self.x <= 1.0 and 0.0 <= self.y <= 1.0):
                raise ValueError("valid sample outside the unit square")
        if self.pupil_mm is not None and self.pupil_mm < 0:
            raise ValueError("pupil_mm must be non-negative")


@dataclass(frozen=True)
class GazeTrace:
    participant_id: str
    samples: tuple[GazeSample, ...]

    def __post_init__(self) -> None:
        if not self.samples:
            raise EmptyTrace(f"trace for {self.participant_id!r} has no samples")
        prev = -1
        for s in self.samples:
            if s.timestamp_us <= prev:
                raise ValueError("samples must be strictly increasing in time")
            prev = s.timestamp_us

    def valid_samples(self) -> list[GazeSample]:
        return [s for s in self.samples if s.valid]


def parse_fps(value: Union[str, int, float, Fraction]) -> Fraction:
    """Parse ``"30000/1001"``, ``"25"`` or a number into an exact positive rational."""
    if isinstance(value, Fraction):
        fps = value
    elif isinstance(value, int):
        fps = Fraction(value)
    elif isinstance(value, float):
        # decimal strings like 29.97 are meant literally, not as their binary expansion
        fps = Fraction(repr(value))
    else:
        text = str(value).strip()
        if "/" in text:
            num, den = text.split("/", 1)
            fps = Fraction(int(num), int(den))
        else:
            fps = Fraction(text)
    if fps <= 0:
        raise ValueError(f"fps must be positive, got {value!r}")
    return fps


@dataclass(frozen=True)
class VideoMeta:
    fps: Fraction
    width_px: int
    height_px: int
    start_timestamp_us: int
    duration_us: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "fps", parse_fps(self.fps))
        if self.width_px <= 0 or self.height_px <= 0:
            raise ValueError("frame dimensions must be positive")
        if self.duration_us <= 0:
            raise ValueError("duration_us must be positive")
        if self.frame_count < 1:
            raise ValueError("video shorter than one frame")

    @property
    def frame_count(self) -> int:
        return (self.duration_us * self.fps.numerator) // (US_PER_S * self.fps.denominator)

    def frame_start_us(self, frame_index: int) -> Fraction:
        """Absolute (UTC) start time of a frame as an exact rational."""
        return self.start_timestamp_us + Fraction(frame_index * US_PER_S) / self.fps

    def with_start(self, start_timestamp_us: int) -> "VideoMeta":
        return VideoMeta(self.fps, self.width_px, self.height_px, start_timestamp_us, self.duration_us)

    @classmethod
    def from_mapping(cls, cfg: Mapping) -> "VideoMeta":
        return cls(
            fps=parse_fps(cfg["fps"]),
            width_px=int(cfg["width_px"]),
            height_px=int(cfg["height_px"]),
            start_timestamp_us=int(cfg.get("start_timestamp_us", 0)),
            duration_us=int(cfg["duration_us"]),
        )

    def to_mapping(self) -> dict:
        return {
            "fps": f"{self.fps.numerator}/{self.fps.denominator}",
            "width_px": self.width_px,
            "height_px": self.height_px,
            "start_timestamp_us": self.start_timestamp_us,
            "duration_us": self.duration_us,
        }


class GazeSource(str, enum.Enum):
    EXACT = "exact"
    INTERPOLATED = "interpolated"
    HELD = "held"
    MISSING = "missing"


@dataclass(frozen=True)
class FrameGaze:
    frame_index: int
    point: Optional[tuple[float, float]]
    source: GazeSource

    def __post_init__(self) -> None:
        if (self.point is None) != (self.source is GazeSource.MISSING):
            raise ValueError("point must be absent exactly when source is missing")


@dataclass(frozen=True)
class ResamplePolicy:
    """How gaze samples become one point per frame.

    ``mode="interpolate"`` uses the nearest valid sample within half a frame
    period, else interpolates linearly across brackets no wider than
    ``gap_threshold_us``. ``mode="hold"`` replaces interpolation with the most
    recent valid sample no older than ``hold_horizon_us``.
    """

    mode: str = "interpolate"
    gap_threshold_us: int = 100_000
    hold_horizon_us: Optional[int] = None

    def __post_init__(self) -> None:
        if self.mode not in ("interpolate", "hold"):
            raise ValueError(f"unknown resample mode {self.mode!r}")
        if self.gap_threshold_us < 0:
            raise ValueError("gap_threshold_us must be non-negative")

    @property
    def horizon_us(self) -> int:
        return self.gap_threshold_us if self.hold_horizon_us is None else self.hold_horizon_us


# --- parsing -----------------------------------------------------------------


def _parse_bool(text: str, line_no: int) -> bool:
    t = text.strip().lower()
    if t in _TRUE:
        return True
    if t in _FALSE:
        return False
    raise MalformedRow(line_no, f"validity {text!r}")


def _parse_coord(text: str, line_no: int) -> Optional[float]:
    t = text.strip()
    if t == "" or t.lower() == "nan":
        return None
    try:
        v = float(t)
    except ValueError:
        raise MalformedRow(line_no, f"coordinate {text!r}") from None
    if not math.isfinite(v):
        raise MalformedRow(line_no, f"coordinate {text!r}")
    return v


def parse_gaze_csv(
    stream: Union[IO[bytes], bytes],
    schema: Optional[Mapping[str, str]] = None,
    participant_id: str = "",
) -> GazeTrace:
    """Parse a UTF-8 gaze log with a header row into a :class:`GazeTrace`.

    ``schema`` maps canonical field names (``timestamp_us``, ``x``, ``y``,
    ``valid``, ``pupil_mm``) to the column names used in the file. Rows
    reported invalid are kept. A sample flagged valid but lying outside the
    unit square (off-screen gaze) is kept with ``valid=False``.
    """
    cols = dict(DEFAULT_SCHEMA)
    if schema:
        cols.update(schema)
    raw = stream if isinstance(stream, bytes) else stream.read()
    try:
        text = raw.decode("utf-8-sig")
    except UnicodeDecodeError as exc:
        raise MalformedRow(1, f"not UTF-8: {exc}") from None

    reader = csv.reader(io.StringIO(text, newline=""))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise EmptyTrace("gaze log has no header row") from None
    index = {}
    for key in ("timestamp_us", "x", "y", "valid"):
        try:
            index[key] = header.index(cols[key])
        except ValueError:
            raise MalformedRow(1, f"missing column {cols[key]!r}") from None
    pupil_col = header.index(cols["pupil_mm"]) if cols.get("pupil_mm") in header else None

    samples: list[GazeSample] = []
    prev_ts = -1
    for line_no, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise MalformedRow(line_no, f"expected {len(header)} fields, got {len(row)}")
        try:
            ts = int(row[index["timestamp_us"]].strip())
        except ValueError:
            raise MalformedRow(line_no, "timestamp") from None
        if ts < 0:
            raise MalformedRow(line_no, "negative timestamp")
        if ts <= prev_ts:
            raise NonMonotonicTimestamp(line_no)
        prev_ts = ts
        valid = _parse_bool(row[index["valid"]], line_no)
        x = _parse_coord(row[index["x"]], line_no)
        y = _parse_coord(row[index["y"]], line_no)
        pupil = None
        if pupil_col is not None:
            pupil = _parse_coord(row[pupil_col], line_no)
            if pupil is not None and pupil < 0:
                raise MalformedRow(line_no, "negative pupil size")
        if valid and (x is None or y is None):
            raise MalformedRow(line_no, "valid sample without coordinates")
        if valid and not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
            valid = False
        samples.append(GazeSample(ts, x, y, valid, pupil))

    if not samples:
        raise EmptyTrace(f"gaze log for {participant_id!r} has no data rows")
    return GazeTrace(participant_id, tuple(samples))


def _fmt(v: Optional[float]) -> str:
    return "" if v is None else repr(v)


def serialize_gaze_csv(trace: GazeTrace, schema: Optional[Mapping[str, str]] = None) -> bytes:
    """Inverse of :func:`parse_gaze_csv` (floats are written with ``repr``)."""
    cols = dict(DEFAULT_SCHEMA)
    if schema:
        cols.update(schema)
    out = io.StringIO(newline="")
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow([cols["timestamp_us"], cols["x"], cols["y"], cols["valid"], cols["pupil_mm"]])
    for s in trace.samples:
        writer.writerow([s.timestamp_us, _fmt(s.x), _fmt(s.y), int(s.valid), _fmt(s.pupil_mm)])
    return out.getvalue().encode("utf-8")


# --- synchronisation -----------------------------------------------------------


def map_to_frame(timestamp_us: int, meta: VideoMeta) -> int:
    """Index of the frame displayed at ``timestamp_us`` (UTC microseconds)."""
    offset = timestamp_us - meta.start_timestamp_us
    if offset < 0 or offset >= meta.duration_us:
        raise OutOfRange(f"timestamp {timestamp_us} outside the video")
    frame = (offset * meta.fps.numerator) // (US_PER_S * meta.fps.denominator)
    if frame >= meta.frame_count:
        # trailing partial frame: the container holds no frame there
        raise OutOfRange(f"timestamp {timestamp_us} falls after the last whole frame")
    return frame


def resample_to_frames(
    trace: GazeTrace,
    meta: VideoMeta,
    policy: ResamplePolicy = ResamplePolicy(),
    frames: Optional[Iterable[int]] = None,
) -> list[FrameGaze]:
    """Produce exactly one :class:`FrameGaze` per requested frame.

    Frames default to the whole video. Each frame is evaluated at its temporal
    midpoint.
    """
    if frames is None:
        frames = range(meta.frame_count)
    num, den = meta.fps.numerator, meta.fps.denominator
    # every time is scaled by 2*num so frame midpoints are integers
    scale = 2 * num
    half_period = US_PER_S * den
    gap = policy.gap_threshold_us * scale
    horizon = policy.horizon_us * scale
    base = meta.start_timestamp_us * scale

    valid = trace.valid_samples()
    ts = [s.timestamp_us * scale for s in valid]
    n = len(ts)

    out: list[FrameGaze] = []
    for i in frames:
        mid = base + (2 * i + 1) * US_PER_S * den
        if n == 0:
            out.append(FrameGaze(i, None, GazeSource.MISSING))
            continue
        j = bisect_left(ts, mid)
        prev = j - 1 if j > 0 else None
        nxt = j if j < n else None

        best = None
        if prev is not None:
            best = (mid - ts[prev], prev)
        if nxt is not None and (best is None or ts[nxt] - mid < best[0]):
            best = (ts[nxt] - mid, nxt)
        if best[0] <= half_period:
            s = valid[best[1]]
            out.append(FrameGaze(i, (s.x, s.y), GazeSource.EXACT))
            continue

        if policy.mode == "interpolate":
            if prev is not None and nxt is not None and ts[nxt] - ts[prev] <= gap:
                a, b = valid[prev], valid[nxt]
                w = (mid - ts[prev]) / (ts[nxt] - ts[prev])
                point = (a.x + (b.x - a.x) * w, a.y + (b.y - a.y) * w)
                out.append(FrameGaze(i, point, GazeSource.INTERPOLATED))
                continue
        else:
            k = bisect_right(ts, mid) - 1
            if k >= 0 and mid - ts[k] <= horizon:
                s = valid[k]
                out.append(FrameGaze(i, (s.x, s.y), GazeSource.HELD))
                continue
        out.append(FrameGaze(i, None, GazeSource.MISSING))
    return out


def frame_gaze_to_json(fg: Sequence[FrameGaze]) -> list:
    """Compact ``[frame_index, x, y, source]`` rows for manifests."""
    rows = []
    for f in fg:
        x, y = f.point if f.point is not None else (None, None)
        rows.append([f.frame_index, x, y, f.source.value])
    return rows


def frame_gaze_from_json(rows: Iterable) -> list[FrameGaze]:
    out = []
    for idx, x, y, src in rows:
        point = None if x is None else (float(x), float(y))
        out.append(FrameGaze(int(idx), point, GazeSource(src)))
    return out
