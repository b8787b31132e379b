"""Shared exception types.

Exit-code mapping used by the CLI: usage errors -> 1, input format
errors -> 2, numerical aborts -> 3.
"""


class InputFormatError(ValueError):
    """A file or payload does not match its expected format."""


class BehindCameraError(ValueError):
    """Point projects to non-positive camera-space depth."""


class NoFloorError(ValueError):
    """No horizontal plane with enough inliers was found."""


class DivergenceError(FloatingPointError):
    """An optimization produced NaN and was aborted."""
