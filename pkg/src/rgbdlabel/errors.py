"""Exception hierarchy shared by all pipeline stages.

Every error carries a short machine-parseable ``error_class`` (kebab-case)
that the CLI prints and the annotation service returns in JSON bodies.
"""

from __future__ import annotations


class PipelineError(Exception):
    """Base class for all pipeline failures.

    ``user_error`` distinguishes bad input (CLI exit code 2) from internal
    faults (exit code 1).
    """

    error_class = "pipeline-error"
    user_error = True

    def __init__(self, message: str, *, stage: str | None = None):
        super().__init__(message)
        self.stage = stage


class DegenerateInputError(PipelineError):
    """Point configuration does not constrain a rigid transform (collinear
    or coincident correspondences)."""

    error_class = "degenerate-clicks"


class CorrespondenceStarvationError(PipelineError):
    """ICP ran out of correspondences within the rejection gate."""

    error_class = "correspondence-starvation"

    def __init__(self, message: str, *, last_result=None, stage: str | None = None):
        super().__init__(message, stage=stage)
        self.last_result = last_result


class OdometryBreakError(PipelineError):
    """Frame-to-frame tracking failed; names the frame where it broke."""

    error_class = "odometry-break"

    def __init__(self, message: str, *, frame_index: int):
        super().__init__(message)
        self.frame_index = frame_index


class MissingInputError(PipelineError):
    """A required on-disk input is absent (trajectory, annotations, ...)."""

    error_class = "missing-input"

    def __init__(self, message: str, *, error_class: str | None = None):
        super().__init__(message)
        if error_class is not None:
            self.error_class = error_class


class MeshNotFoundError(PipelineError):
    """Unresolvable mesh-library key."""

    error_class = "mesh-not-found"


class SceneStateError(PipelineError):
    """Operation requested out of order for the scene's lifecycle."""

    error_class = "scene-state"


class NoPlanarNeighborhoodError(PipelineError):
    """Table-segmentation click did not land on a planar region."""

    error_class = "no-planar-neighborhood"
