"""Exception hierarchy shared by all pipeline stages."""

from __future__ import annotations


class GazePromptError(Exception):
    """Base class for every error raised by this package."""


# --- ingestion -------------------------------------------------------------


class MalformedRow(GazePromptError):
    def __init__(self, line_no: int, detail: str = "") -> None:
        super().__init__(f"line {line_no}: malformed row" + (f" ({detail})" if detail else ""))
        self.line_no = line_no


class NonMonotonicTimestamp(GazePromptError):
    def __init__(self, line_no: int) -> None:
        super().__init__(f"line {line_no}: timestamp not strictly increasing")
        self.line_no = line_no


class EmptyTrace(GazePromptError):
    pass


class OutOfRange(GazePromptError):
    pass


# --- labeling / segmentation -------------------------------------------------


class RatingOutOfRange(GazePromptError):
    pass


class ProbeBeyondVideo(GazePromptError):
    pass


class EmptyLabelSet(GazePromptError):
    pass


# --- rendering ---------------------------------------------------------------


class FrameSourceGap(GazePromptError):
    def __init__(self, index: int) -> None:
        super().__init__(f"frame source cannot supply frame {index}")
        self.index = index


class IoFailure(GazePromptError):
    def __init__(self, path, detail: str = "") -> None:
        super().__init__(f"I/O failure on {path}" + (f": {detail}" if detail else ""))
        self.path = path


class EncoderMissing(GazePromptError):
    pass


class EncoderFailed(GazePromptError):
    def __init__(self, exit_code: int, stderr_excerpt: str) -> None:
        super().__init__(f"encoder exited with {exit_code}: {stderr_excerpt}")
        self.exit_code = exit_code
        self.stderr_excerpt = stderr_excerpt


# --- prompting ---------------------------------------------------------------


class ExemplarCountMismatch(GazePromptError):
    pass


class ExemplarLeak(GazePromptError):
    pass


class InsufficientPool(GazePromptError):
    def __init__(self, class_id: int) -> None:
        super().__init__(f"not enough exemplar candidates for class {class_id}")
        self.class_id = class_id


# --- backend -----------------------------------------------------------------


class AuthMissing(GazePromptError):
    pass


class Transport(GazePromptError):
    def __init__(self, detail: str) -> None:
        super().__init__(detail)
        self.detail = detail


class RateLimitExceeded(GazePromptError):
    pass


class ReplayMiss(GazePromptError):
    def __init__(self, request_id: str) -> None:
        super().__init__(f"no cached response for request {request_id}")
        self.request_id = request_id


class CacheConflict(GazePromptError):
    def __init__(self, request_id: str) -> None:
        super().__init__(f"conflicting payload already cached for {request_id}")
        self.request_id = request_id


# --- evaluation --------------------------------------------------------------


class UnknownSegment(GazePromptError):
    def __init__(self, segment_id: str) -> None:
        super().__init__(f"prediction for unknown segment {segment_id!r}")
        self.segment_id = segment_id


class DuplicatePrediction(GazePromptError):
    def __init__(self, segment_id: str) -> None:
        super().__init__(f"duplicate prediction for segment {segment_id!r}")
        self.segment_id = segment_id


class EmptyMatrix(GazePromptError):
    pass


class DegenerateDistribution(GazePromptError):
    pass


# --- orchestration -----------------------------------------------------------


class ConfigError(GazePromptError):
    pass
