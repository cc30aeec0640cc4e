from __future__ import annotations

import json
from fractions import Fraction

import pytest

from gazeprompt.errors import EmptyLabelSet, ProbeBeyondVideo, RatingOutOfRange
from gazeprompt.gaze import GazeSample, GazeSource, GazeTrace, VideoMeta
from gazeprompt.segments import (
    ATTENTIVE,
    INATTENTIVE,
    ClassDistribution,
    ProbePoint,
    Segment,
    class_distribution,
    extract_segment,
    load_probes,
    segment_frame_range,
    threshold_rating,
)

START = 1_650_000_000_000_000


def meta(fps=25, duration_s=600):
    return VideoMeta(Fraction(fps), 1280, 720, START, duration_s * 1_000_000)


def steady_trace(duration_s=600, rate_hz=50):
    step = 1_000_000 // rate_hz
    samples = tuple(GazeSample(START + i * step, 0.5, 0.5, True) for i in range(duration_s * rate_hz))
    return GazeTrace("p1", samples)


@pytest.mark.parametrize("rating,label", [(0, 0), (1, 0), (2, 0), (3, 1), (4, 1), (5, 1)])
def test_threshold(rating, label):
    assert threshold_rating(rating) == label


@pytest.mark.parametrize("rating", [-1, 6, 2.5, True])
def test_threshold_rejects(rating):
    with pytest.raises(RatingOutOfRange):
        threshold_rating(rating)


def test_probe_rejects_bad_rating():
    with pytest.raises(RatingOutOfRange):
        ProbePoint("x", 0, 7)


def test_segment_at_300s_has_500_frames():
    m = meta()
    seg = extract_segment(steady_trace(), ProbePoint("300", 300_000_000, 4, "p1"), m)
    assert seg.frame_range == (7000, 7499)
    assert seg.frame_count == 500 == len(seg.frame_gaze)
    assert seg.label == ATTENTIVE
    assert seg.effective_duration_us == 20_000_000
    assert seg.segment_id == "p1:300"
    assert all(f.source is GazeSource.EXACT for f in seg.frame_gaze)


def test_early_probe_is_truncated():
    seg = extract_segment(steady_trace(), ProbePoint("5", 5_000_000, 1, "p1"), meta())
    assert seg.start_us == 0
    assert seg.effective_duration_us == 5_000_000
    assert seg.frame_range == (0, 124)
    assert seg.label == INATTENTIVE


def test_probe_at_zero_gives_empty_segment():
    seg = extract_segment(steady_trace(), ProbePoint("0", 0, 3, "p1"), meta())
    assert seg.frame_count == 0 and seg.frame_gaze == ()


def test_probe_at_video_end_is_clamped():
    m = meta(duration_s=30)
    seg = extract_segment(steady_trace(30), ProbePoint("end", 30_000_000, 3, "p1"), m)
    assert seg.frame_range == (250, 749)
    assert seg.frame_range[1] == m.frame_count - 1


def test_probe_beyond_video():
    with pytest.raises(ProbeBeyondVideo):
        extract_segment(steady_trace(30), ProbePoint("late", 30_000_001, 3, "p1"), meta(duration_s=30))


def test_frame_range_ntsc():
    m = VideoMeta(Fraction(30000, 1001), 10, 10, 0, 60_000_000)
    first, last = segment_frame_range(20_000_000, 40_000_000, m)
    # floor(20 * 29.97...) = 599 and the last frame starting before 40 s is 1198
    assert (first, last) == (599, 1198)


def test_segment_json_round_trip():
    seg = extract_segment(steady_trace(), ProbePoint("30", 30_000_000, 2, "p1"), meta())
    again = Segment.from_json(json.loads(json.dumps(seg.to_json())))
    assert again == seg


def test_distribution_counts():
    d = class_distribution([0] * 206 + [1] * 827)
    assert d == ClassDistribution(206, 827)
    assert d.total == 1033
    assert d.p0 == pytest.approx(0.199419, abs=1e-6)
    assert d.p1 == pytest.approx(0.800581, abs=1e-6)
    assert d.majority_class == ATTENTIVE


def test_distribution_empty_and_invalid():
    with pytest.raises(EmptyLabelSet):
        class_distribution([])
    with pytest.raises(ValueError):
        class_distribution([0, 2])


def test_load_probes_from_text():
    text = json.dumps([{"participant_id": "a", "probe_id": "p1", "video_time_us": 10, "rating": 3}])
    (probe,) = load_probes(text)
    assert probe == ProbePoint("p1", 10, 3, "a")


def test_load_probes_rejects_string_rating():
    text = json.dumps([{"participant_id": "a", "probe_id": "p1", "video_time_us": 10, "rating": "3"}])
    with pytest.raises(RatingOutOfRange):
        load_probes(text)
