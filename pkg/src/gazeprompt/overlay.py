"""Gaze circle compositing and segment clip assembly.

The default hard-edged disk is bit-exact: blending goes through per-channel
lookup tables computed with exact rational arithmetic, so output bytes do not
depend on platform, SIMD width or thread count.
"""

from __future__ import annotations

import hashlib
import json
import os
import shlex
import shutil
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from functools import lru_cache
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np
from PIL import Image

from .errors import EncoderFailed, EncoderMissing, FrameSourceGap, IoFailure
from .gaze import FrameGaze

MANIFEST_NAME = "clip_manifest.json"
FRAME_DIGITS = 6
DEFAULT_ENCODER_CMD = (
    "ffmpeg -y -loglevel error -framerate {fps} -i {frames_glob} -pix_fmt yuv420p -c:v libx264 {out}"
)


@dataclass(frozen=True)
class OverlayStyle:
    radius_px: int = 30
    color_rgb: tuple[int, int, int] = (255, 0, 0)
    alpha: float = 0.45
    edge: str = "hard"
    draw_missing: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "color_rgb", tuple(int(c) for c in self.color_rgb))
        if self.radius_px < 1:
            raise ValueError("radius_px must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if len(self.color_rgb) != 3 or any(not 0 <= c <= 255 for c in self.color_rgb):
            raise ValueError("color_rgb must be three 0-255 integers")
        if self.edge not in ("hard", "antialiased"):
            raise ValueError(f"unknown edge mode {self.edge!r}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["color_rgb"] = list(self.color_rgb)
        return d

    @classmethod
    def from_mapping(cls, cfg: Mapping) -> "OverlayStyle":
        return cls(**{k: v for k, v in cfg.items() if k in cls.__dataclass_fields__})


@dataclass
class FrameBuffer:
    """Row-major 8-bit RGB image held as a ``(height, width, 3)`` array."""

    width_px: int
    height_px: int
    pixels: np.ndarray

    def __post_init__(self) -> None:
        if self.width_px <= 0 or self.height_px <= 0:
            raise ValueError("frame dimensions must be positive")
        px = np.asarray(self.pixels, dtype=np.uint8)
        if px.size != self.width_px * self.height_px * 3:
            raise ValueError("pixel buffer does not match frame dimensions")
        self.pixels = px.reshape(self.height_px, self.width_px, 3)

    @classmethod
    def from_bytes(cls, width_px: int, height_px: int, data: bytes) -> "FrameBuffer":
        return cls(width_px, height_px, np.frombuffer(data, dtype=np.uint8).copy())

    @classmethod
    def solid(cls, width_px: int, height_px: int, rgb=(255, 255, 255)) -> "FrameBuffer":
        px = np.empty((height_px, width_px, 3), dtype=np.uint8)
        px[...] = rgb
        return cls(width_px, height_px, px)

    def to_bytes(self) -> bytes:
        return np.ascontiguousarray(self.pixels).tobytes()

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.width_px}x{self.height_px}:".encode())
        h.update(self.to_bytes())
        return h.hexdigest()

    def copy(self) -> "FrameBuffer":
        return FrameBuffer(self.width_px, self.height_px, self.pixels.copy())


def _round_half_up(v: Fraction) -> int:
    return (2 * v.numerator + v.denominator) // (2 * v.denominator)


@lru_cache(maxsize=64)
def blend_lut(alpha: float, color: int) -> np.ndarray:
    """``round_half_up(alpha*color + (1-alpha)*src)`` for every 8-bit ``src``."""
    a = Fraction(alpha)
    lut = np.array([_round_half_up(a * color + (1 - a) * src) for src in range(256)], dtype=np.uint8)
    lut.setflags(write=False)
    return lut


def gaze_center(point: tuple[float, float], width_px: int, height_px: int) -> tuple[int, int]:
    """Pixel centre (column, row) of a normalised gaze point, half-up rounded."""
    cx = _round_half_up(Fraction(point[0]) * (width_px - 1))
    cy = _round_half_up(Fraction(point[1]) * (height_px - 1))
    return cx, cy


def _disk_window(cx: int, cy: int, r: int, w: int, h: int):
    x0, x1 = max(0, cx - r), min(w - 1, cx + r)
    y0, y1 = max(0, cy - r), min(h - 1, cy + r)
    if x0 > x1 or y0 > y1:
        return None
    yy, xx = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
    d2 = (xx - cx) ** 2 + (yy - cy) ** 2
    return (y0, y1, x0, x1), d2


def _blend_hard(out: np.ndarray, mask: np.ndarray, window, style: OverlayStyle) -> None:
    y0, y1, x0, x1 = window
    region = out[y0 : y1 + 1, x0 : x1 + 1]
    for ch in range(3):
        lut = blend_lut(style.alpha, style.color_rgb[ch])
        plane = region[..., ch]
        plane[mask] = lut[plane[mask]]


def composite_gaze(
    frame: FrameBuffer, point: Optional[tuple[float, float]], style: OverlayStyle
) -> FrameBuffer:
    """Return a copy of ``frame`` with the gaze disk blended in.

    With ``point=None`` the frame comes back unchanged unless
    ``style.draw_missing`` is set, in which case a small square tinted in the
    style colour marks the top-left corner (no location is implied).
    """
    out = frame.copy()
    w, h = frame.width_px, frame.height_px
    if point is None:
        if style.draw_missing:
            side = max(1, style.radius_px // 2)
            mask = np.ones((min(side, h), min(side, w)), dtype=bool)
            _blend_hard(out.pixels, mask, (0, mask.shape[0] - 1, 0, mask.shape[1] - 1), style)
        return out

    cx, cy = gaze_center(point, w, h)
    r = style.radius_px
    win = _disk_window(cx, cy, r, w, h)
    if win is None:
        return out
    window, d2 = win
    if style.edge == "hard":
        _blend_hard(out.pixels, d2 <= r * r, window, style)
        return out

    # antialiased: alpha scaled by pixel coverage of a one-pixel-wide edge band
    y0, y1, x0, x1 = window
    dist = np.sqrt(d2.astype(np.float64))
    coverage = np.clip(r + 0.5 - dist, 0.0, 1.0)
    a = style.alpha * coverage
    region = out.pixels[y0 : y1 + 1, x0 : x1 + 1].astype(np.float64)
    color = np.asarray(style.color_rgb, dtype=np.float64)
    blended = a[..., None] * color + (1.0 - a[..., None]) * region
    out.pixels[y0 : y1 + 1, x0 : x1 + 1] = np.floor(blended + 0.5).astype(np.uint8)
    return out


# --- frame sources -------------------------------------------------------------


FrameSource = Union[Mapping[int, FrameBuffer], Callable[[int], FrameBuffer]]


def frame_name(position: int) -> str:
    return f"{position:0{FRAME_DIGITS}d}.png"


def read_png(path: Union[str, Path]) -> FrameBuffer:
    with Image.open(path) as im:
        rgb = im.convert("RGB")
        return FrameBuffer(rgb.width, rgb.height, np.asarray(rgb, dtype=np.uint8))


def write_png(frame: FrameBuffer, path: Union[str, Path]) -> None:
    try:
        Image.fromarray(frame.pixels, mode="RGB").save(path, format="PNG", compress_level=6)
    except OSError as exc:
        raise IoFailure(path, str(exc)) from exc


class FramesDirSource:
    """Video frames stored as zero-padded PNG files named by frame index."""

    def __init__(self, directory: Union[str, Path], digits: int = FRAME_DIGITS) -> None:
        self.directory = Path(directory)
        self.digits = digits

    def path(self, index: int) -> Path:
        return self.directory / f"{index:0{self.digits}d}.png"

    def __call__(self, index: int) -> FrameBuffer:
        p = self.path(index)
        if not p.is_file():
            raise FrameSourceGap(index)
        return read_png(p)

    def fingerprint(self, indices: Sequence[int]) -> str:
        h = hashlib.sha256()
        for i in indices:
            p = self.path(i)
            if not p.is_file():
                raise FrameSourceGap(i)
            h.update(p.read_bytes())
        return h.hexdigest()


class VideoFileSource:
    """Random access to frames of a video container through OpenCV."""

    def __init__(self, path: Union[str, Path]) -> None:
        import cv2  # optional dependency

        self._cv2 = cv2
        self.path = Path(path)
        self._cap = cv2.VideoCapture(str(self.path))
        if not self._cap.isOpened():
            raise IoFailure(self.path, "cannot open video")
        self._next = 0
        self._file_hash: Optional[str] = None

    def __call__(self, index: int) -> FrameBuffer:
        cv2 = self._cv2
        if index != self._next:
            self._cap.set(cv2.CAP_PROP_POS_FRAMES, index)
        ok, bgr = self._cap.read()
        if not ok:
            raise FrameSourceGap(index)
        self._next = index + 1
        rgb = cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)
        return FrameBuffer(rgb.shape[1], rgb.shape[0], rgb)

    def fingerprint(self, indices: Sequence[int]) -> str:
        if self._file_hash is None:
            h = hashlib.sha256()
            with open(self.path, "rb") as fh:
                for chunk in iter(lambda: fh.read(1 << 20), b""):
                    h.update(chunk)
            self._file_hash = h.hexdigest()
        return hashlib.sha256(f"{self._file_hash}:{list(indices)}".encode()).hexdigest()


def _fetch(frames: FrameSource, index: int) -> FrameBuffer:
    try:
        return frames(index) if callable(frames) else frames[index]
    except KeyError:
        raise FrameSourceGap(index) from None


# --- clips ---------------------------------------------------------------------


@dataclass
class ClipManifest:
    segment_id: str
    frames: list[str]
    fps: str
    style: dict
    checksums: list[str]
    frame_indices: list[int] = field(default_factory=list)
    input_key: str = ""
    config_hash: str = ""
    directory: Optional[Path] = field(default=None, compare=False)

    def to_json(self) -> dict:
        return {
            "segment_id": self.segment_id,
            "fps": self.fps,
            "style": self.style,
            "frames": self.frames,
            "frame_indices": self.frame_indices,
            "checksums": self.checksums,
            "input_key": self.input_key,
            "config_hash": self.config_hash,
        }

    def write(self, directory: Union[str, Path]) -> Path:
        path = Path(directory) / MANIFEST_NAME
        try:
            path.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
        except OSError as exc:
            raise IoFailure(path, str(exc)) from exc
        self.directory = Path(directory)
        return path

    @classmethod
    def load(cls, directory: Union[str, Path]) -> "ClipManifest":
        path = Path(directory) / MANIFEST_NAME
        d = json.loads(path.read_text(encoding="utf-8"))
        return cls(
            segment_id=d["segment_id"],
            frames=list(d["frames"]),
            fps=d["fps"],
            style=d["style"],
            checksums=list(d["checksums"]),
            frame_indices=list(d.get("frame_indices", [])),
            input_key=d.get("input_key", ""),
            config_hash=d.get("config_hash", ""),
            directory=Path(directory),
        )


def render_segment(
    segment,
    frames: FrameSource,
    style: OverlayStyle,
    out_dir: Union[str, Path],
    fps: str = "25/1",
    workers: int = 1,
    input_key: str = "",
    config_hash: str = "",
) -> ClipManifest:
    """Composite every frame of ``segment`` and write PNGs plus a manifest.

    Files are named by position within the clip (``000000.png`` ...), so the
    directory is directly usable as an encoder image sequence.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(out, str(exc)) from exc

    gaze: Sequence[FrameGaze] = segment.frame_gaze
    first, last = segment.frame_range
    indices = list(range(first, last + 1))
    if len(gaze) != len(indices):
        raise ValueError(f"segment {segment.segment_id!r}: frame_gaze does not cover frame_range")
    # fetch serially: sources such as video decoders are not thread-safe
    sources = [_fetch(frames, i) for i in indices]

    def work(pos: int) -> str:
        fg = gaze[pos]
        composited = composite_gaze(sources[pos], fg.point, style)
        write_png(composited, out / frame_name(pos))
        return composited.checksum()

    if workers > 1 and len(indices) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            checksums = list(pool.map(work, range(len(indices))))
    else:
        checksums = [work(p) for p in range(len(indices))]

    manifest = ClipManifest(
        segment_id=segment.segment_id,
        frames=[frame_name(p) for p in range(len(indices))],
        fps=fps,
        style=style.to_json(),
        checksums=checksums,
        frame_indices=indices,
        input_key=input_key,
        config_hash=config_hash,
    )
    manifest.write(out)
    return manifest


def encode_clip(
    manifest: ClipManifest,
    encoder_cmd_template: str = DEFAULT_ENCODER_CMD,
    out_path: Optional[Union[str, Path]] = None,
    timeout_s: Optional[float] = None,
) -> Path:
    """Encode the manifest's PNG sequence with an external encoder.

    The template is split shell-style and each token is formatted with
    ``{fps}``, ``{frames_glob}`` (printf-style sequence pattern) and ``{out}``.
    """
    if manifest.directory is None:
        raise ValueError("manifest has no directory; write or load it first")
    directory = Path(manifest.directory)
    out = Path(out_path) if out_path is not None else directory / "clip.mp4"
    values = {
        "fps": manifest.fps,
        "frames_glob": str(directory / f"%0{FRAME_DIGITS}d.png"),
        "out": str(out),
    }
    argv = [tok.format(**values) for tok in shlex.split(encoder_cmd_template)]
    if not argv or shutil.which(argv[0]) is None:
        raise EncoderMissing(f"encoder executable not found: {argv[0] if argv else '<empty>'}")
    try:
        proc = subprocess.run(argv, capture_output=True, timeout=timeout_s, check=False)
    except FileNotFoundError as exc:
        raise EncoderMissing(str(exc)) from exc
    except subprocess.TimeoutExpired as exc:
        raise EncoderFailed(-1, f"timed out after {timeout_s} s") from exc
    if proc.returncode != 0:
        excerpt = proc.stderr.decode("utf-8", "replace")[-500:]
        raise EncoderFailed(proc.returncode, excerpt)
    if not out.is_file():
        raise EncoderFailed(0, f"encoder reported success but {out} is missing")
    return out


def safe_dirname(segment_id: str) -> str:
    """File-system safe directory name for a segment id."""
    keep = "-_."
    name = "".join(c if c.isalnum() or c in keep else "_" for c in segment_id)
    digest = hashlib.sha1(segment_id.encode("utf-8")).hexdigest()[:8]
    return f"{name}-{digest}"


def clear_dir(path: Path) -> None:
    if path.exists():
        for p in path.iterdir():
            if p.is_file():
                os.remove(p)
