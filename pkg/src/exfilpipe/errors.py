"""Shared exception hierarchy.

Every error raised on purpose by this package derives from PipelineError so
the CLI can map operational failures to a single exit code while real bugs
(ValueError, KeyError, ...) keep crashing loudly.
"""


class PipelineError(Exception):
    """Base class for all operational errors raised by this package."""


class SinkFailure(PipelineError):
    """An output sink refused a write (permissions, full disk, closed pipe)."""
