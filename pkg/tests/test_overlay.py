from __future__ import annotations

import json
import sys
import textwrap

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _overlay_ref import frame_hash, gradient, reference_composite
from gazeprompt.errors import EncoderFailed, EncoderMissing, FrameSourceGap
from gazeprompt.gaze import FrameGaze, GazeSource
from gazeprompt.overlay import (
    ClipManifest,
    FrameBuffer,
    FramesDirSource,
    OverlayStyle,
    composite_gaze,
    encode_clip,
    read_png,
    render_segment,
    write_png,
)
from gazeprompt.segments import Segment

W, H = 160, 90

# produced by the pure-Python reference in _overlay_ref.py
GOLDEN = [
    (((0.37, 0.61), 30, (255, 0, 0), 0.45), "706c577df63aee664be040129e0360dd75dad8fc8f8644b3f28aae4d865aed5f"),
    (((1.0, 1.0), 20, (255, 0, 0), 0.45), "8f4f83b440b342090137833e175a1ca98fe0fe3105848f403029e2c22d9185e6"),
    (((0.0, 0.5), 12, (10, 200, 90), 0.3), "77c77aa7d8a4e43e9951a5fbf77a2fcb8df6e190effcbbe2e541371a68e4146c"),
]


def gradient_frame(w=W, h=H) -> FrameBuffer:
    px = np.array([[gradient(c, r) for c in range(w)] for r in range(h)], dtype=np.uint8)
    return FrameBuffer(w, h, px)


def test_frame_buffer_length_invariant():
    with pytest.raises(ValueError):
        FrameBuffer.from_bytes(2, 2, b"\x00" * 11)


def test_style_invariants():
    with pytest.raises(ValueError):
        OverlayStyle(alpha=1.5)
    with pytest.raises(ValueError):
        OverlayStyle(radius_px=0)
    with pytest.raises(ValueError):
        OverlayStyle(edge="soft")


def test_half_blend_pixel():
    frame = FrameBuffer.solid(11, 11)
    out = composite_gaze(frame, (0.5, 0.5), OverlayStyle(radius_px=3, alpha=0.5))
    assert tuple(out.pixels[5, 5]) == (255, 128, 128)
    assert tuple(out.pixels[0, 0]) == (255, 255, 255)


def test_alpha_zero_is_identity():
    frame = gradient_frame()
    out = composite_gaze(frame, (0.4, 0.4), OverlayStyle(radius_px=25, alpha=0.0))
    assert out.to_bytes() == frame.to_bytes()


def test_alpha_one_saturates_disk():
    frame = gradient_frame()
    style = OverlayStyle(radius_px=9, color_rgb=(1, 2, 3), alpha=1.0)
    out = composite_gaze(frame, (0.5, 0.5), style)
    cx, cy = 80, 45  # 79.5 and 44.5, rounded half-up
    yy, xx = np.mgrid[0:H, 0:W]
    inside = (xx - cx) ** 2 + (yy - cy) ** 2 <= 81
    assert (out.pixels[inside] == (1, 2, 3)).all()
    assert (out.pixels[~inside] == frame.pixels[~inside]).all()


def test_corner_clips_to_quarter_disk():
    r = 20
    frame = FrameBuffer.solid(W, H)
    out = composite_gaze(frame, (1.0, 1.0), OverlayStyle(radius_px=r, alpha=0.5))
    changed = np.any(out.pixels != frame.pixels, axis=2)
    # lattice points (dx, dy) with dx, dy <= 0 and dx^2 + dy^2 <= r^2
    expected = sum(1 for dx in range(r + 1) for dy in range(r + 1) if dx * dx + dy * dy <= r * r)
    assert changed.sum() == expected
    assert changed[H - 1, W - 1] and not changed[: H - r - 1].any()


def test_missing_point_is_noop_by_default():
    frame = gradient_frame()
    assert composite_gaze(frame, None, OverlayStyle()).to_bytes() == frame.to_bytes()


def test_draw_missing_marks_corner_only():
    frame = FrameBuffer.solid(40, 40)
    out = composite_gaze(frame, None, OverlayStyle(radius_px=8, alpha=0.5, draw_missing=True))
    changed = np.any(out.pixels != frame.pixels, axis=2)
    assert changed[:4, :4].all() and changed.sum() == 16


@pytest.mark.parametrize("args,digest", GOLDEN)
def test_golden_images(args, digest):
    point, radius, color, alpha = args
    ref = reference_composite(W, H, gradient, point, radius, color, alpha)
    assert frame_hash(W, H, ref) == digest
    out = composite_gaze(gradient_frame(), point, OverlayStyle(radius_px=radius, color_rgb=color, alpha=alpha))
    assert out.checksum() == digest


@settings(max_examples=80, deadline=None)
@given(
    x=st.floats(0, 1),
    y=st.floats(0, 1),
    r=st.integers(1, 40),
    alpha=st.floats(0, 1),
    color=st.tuples(*[st.integers(0, 255)] * 3),
)
def test_blend_bounds_and_disk_support(x, y, r, alpha, color):
    frame = gradient_frame(48, 32)
    out = composite_gaze(frame, (x, y), OverlayStyle(radius_px=r, color_rgb=color, alpha=alpha))
    src = frame.pixels.astype(int)
    dst = out.pixels.astype(int)
    col = np.array(color)
    assert (dst >= np.minimum(src, col)).all() and (dst <= np.maximum(src, col)).all()
    cx = int(np.floor(x * 47 + 0.5))
    cy = int(np.floor(y * 31 + 0.5))
    yy, xx = np.mgrid[0:32, 0:48]
    outside = (xx - cx) ** 2 + (yy - cy) ** 2 > r * r
    assert (dst[outside] == src[outside]).all()


def test_antialiased_is_opt_in_and_bounded():
    frame = FrameBuffer.solid(50, 50)
    hard = composite_gaze(frame, (0.5, 0.5), OverlayStyle(radius_px=10))
    soft = composite_gaze(frame, (0.5, 0.5), OverlayStyle(radius_px=10, edge="antialiased"))
    assert hard.to_bytes() != soft.to_bytes()
    assert (soft.pixels[:, :, 0] == 255).all()


# --- rendering ---------------------------------------------------------------------------


def make_segment(n=12, first=3, missing=()):
    gaze = tuple(
        FrameGaze(first + i, None, GazeSource.MISSING)
        if i in missing
        else FrameGaze(first + i, (i / n, 1 - i / n), GazeSource.EXACT)
        for i in range(n)
    )
    return Segment("p9:probe", "p9", "probe", 0, 1, (first, first + n - 1), gaze, 1, 1)


def frame_source(n=40):
    return {i: FrameBuffer.solid(32, 24, (i * 5 % 256, 100, 200)) for i in range(n)}


def test_render_segment_manifest(tmp_path):
    seg = make_segment()
    man = render_segment(seg, frame_source(), OverlayStyle(radius_px=4), tmp_path / "clip", fps="25/1")
    assert len(man.frames) == len(man.checksums) == seg.frame_count == 12
    assert man.frame_indices == list(range(3, 15))
    loaded = ClipManifest.load(tmp_path / "clip")
    assert loaded == man
    png = read_png(tmp_path / "clip" / man.frames[5])
    assert png.checksum() == man.checksums[5]


def test_render_500_frames(tmp_path):
    seg = make_segment(n=500, first=0)
    frames = {i: FrameBuffer.solid(8, 8) for i in range(500)}
    man = render_segment(seg, frames, OverlayStyle(radius_px=2), tmp_path / "c", workers=4)
    assert len(man.frames) == 500


def test_all_missing_gaze_passes_frames_through(tmp_path):
    n = 6
    seg = make_segment(n=n, missing=set(range(n)))
    src = frame_source()
    man = render_segment(seg, src, OverlayStyle(), tmp_path / "c")
    assert man.checksums == [src[i].checksum() for i in range(3, 3 + n)]


def test_render_deterministic_across_thread_counts(tmp_path):
    seg = make_segment(n=30, missing={4, 5})
    a = render_segment(seg, frame_source(), OverlayStyle(radius_px=6), tmp_path / "a", workers=1)
    b = render_segment(seg, frame_source(), OverlayStyle(radius_px=6), tmp_path / "b", workers=4)
    assert a.checksums == b.checksums
    for name in a.frames:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_frame_source_gap(tmp_path):
    with pytest.raises(FrameSourceGap) as exc:
        render_segment(make_segment(), frame_source(8), OverlayStyle(), tmp_path / "c")
    assert exc.value.index == 8


def test_frames_dir_source(tmp_path):
    src = tmp_path / "frames"
    src.mkdir()
    for i in range(3):
        write_png(FrameBuffer.solid(4, 4, (i, i, i)), src / f"{i:06d}.png")
    frames = FramesDirSource(src)
    assert frames(2).pixels[0, 0, 0] == 2
    with pytest.raises(FrameSourceGap):
        frames(3)


FAKE_ENCODER = textwrap.dedent(
    """
    import glob, sys
    fps, pattern, out = sys.argv[1:4]
    files = sorted(glob.glob(pattern.replace("%06d", "[0-9]" * 6)))
    with open(out, "wb") as fh:
        fh.write(("fps=" + fps + " frames=" + str(len(files))).encode())
    """
)


@pytest.fixture
def rendered(tmp_path):
    return render_segment(make_segment(n=5), frame_source(), OverlayStyle(radius_px=3), tmp_path / "clip")


def test_encode_with_working_encoder(tmp_path, rendered):
    script = tmp_path / "enc.py"
    script.write_text(FAKE_ENCODER)
    out = encode_clip(rendered, f"{sys.executable} {script} {{fps}} {{frames_glob}} {{out}}")
    assert out.is_file() and out.stat().st_size > 0
    assert out.read_text() == "fps=25/1 frames=5"


def test_encode_missing_executable(rendered):
    with pytest.raises(EncoderMissing):
        encode_clip(rendered, "no-such-encoder-xyz -i {frames_glob} {out}")


def test_encode_failure_exit_code(tmp_path, rendered):
    script = tmp_path / "fail.py"
    script.write_text("import sys\nsys.stderr.write('bad input')\nsys.exit(1)\n")
    with pytest.raises(EncoderFailed) as exc:
        encode_clip(rendered, f"{sys.executable} {script} {{out}}")
    assert exc.value.exit_code == 1
    assert "bad input" in exc.value.stderr_excerpt


def test_manifest_json_is_plain(rendered):
    data = json.loads((rendered.directory / "clip_manifest.json").read_text())
    assert data["segment_id"] == "p9:probe" and data["style"]["radius_px"] == 3


def test_video_file_source(tmp_path):
    cv2 = pytest.importorskip("cv2")
    from gazeprompt.overlay import VideoFileSource

    path = tmp_path / "v.avi"
    writer = cv2.VideoWriter(str(path), cv2.VideoWriter_fourcc(*"MJPG"), 10, (32, 24))
    for i in range(5):
        writer.write(np.full((24, 32, 3), 40 * i, dtype=np.uint8))
    writer.release()
    src = VideoFileSource(path)
    frame = src(3)
    assert (frame.width_px, frame.height_px) == (32, 24)
    assert abs(int(frame.pixels.mean()) - 120) <= 4  # lossy codec
    assert abs(int(src(1).pixels.mean()) - 40) <= 4
    with pytest.raises(FrameSourceGap):
        src(9)
    assert src.fingerprint([1, 2]) == src.fingerprint([1, 2]) != src.fingerprint([1, 3])
