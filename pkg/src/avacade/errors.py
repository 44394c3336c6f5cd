"""Exception types shared across the pipeline."""


class AvacadeError(Exception):
    """Base class for all package errors."""


class InvalidInput(AvacadeError):
    """An argument violates a documented precondition or invariant."""


class NumericalError(AvacadeError):
    """A computation produced or received non-finite values."""


class ExpertError(AvacadeError):
    """A director expert failed or returned an unparseable reply."""

    def __init__(self, speaker: str, round_index: int, reason: str = ""):
        self.speaker = speaker
        self.round_index = round_index
        msg = f"expert {speaker!r} failed in round {round_index}"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)


class PipelineError(AvacadeError):
    """A pipeline job failed; downstream jobs were skipped."""

    def __init__(self, job_id: str, cause: BaseException | None = None,
                 failed: tuple[str, ...] = (), skipped: tuple[str, ...] = ()):
        self.job_id = job_id
        self.cause = cause
        self.failed = failed
        self.skipped = skipped
        detail = f"job {job_id!r} failed"
        if cause is not None:
            detail += f" ({type(cause).__name__}: {cause})"
        if skipped:
            detail += f"; skipped downstream: {', '.join(skipped)}"
        super().__init__(detail)


class AnnotationError(AvacadeError):
    """An annotation expert failed at a given pipeline stage."""

    def __init__(self, stage: str, reason: str = ""):
        self.stage = stage
        msg = f"annotation failed at stage {stage!r}"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)


class UndefinedRatio(AvacadeError):
    """A preference ratio with an empty denominator (B + S == 0)."""


class UndefinedScore(AvacadeError):
    """A correlation score over a zero-variance series."""
