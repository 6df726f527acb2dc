"""Exception hierarchy shared by every stage of the pipeline."""

from __future__ import annotations


class RefcheckError(Exception):
    """Base class for all errors raised by refcheck."""


class ConfigError(RefcheckError):
    """Invalid run configuration or request parameters."""


class BackendError(RefcheckError):
    """Failure talking to a completion backend.

    Carries the request digest so a caller can resume from where it stopped.
    """

    def __init__(self, message: str, request_digest: str | None = None):
        super().__init__(message)
        self.request_digest = request_digest


class TransientBackendError(BackendError):
    """A retryable transport-level failure (connection reset, 429, 5xx)."""


class BackendUnavailable(BackendError):
    """The backend kept failing after all retries were used."""


class BackendTimeout(BackendError):
    """The backend did not answer within the policy timeout."""


class MalformedResponse(BackendError):
    """The provider returned a payload that cannot be decoded."""


class ReplayMiss(BackendUnavailable):
    """The replay backend has no recording for a request digest."""


class NOutOfRange(RefcheckError):
    """Requested sample size is outside [1, len(population)]."""


class EmptyGeneration(RefcheckError):
    """A title-generation completion contained no parseable titles."""


class SearchBackendUnavailable(RefcheckError):
    """The search backend could not be reached after retries."""


class MissingContext(RefcheckError):
    """A DQ3 prompt was requested without comparison titles."""


class JudgeUnparseable(RefcheckError):
    """The overlap judge answered without a number in [0, 1]."""


class DegenerateLabels(RefcheckError):
    """Metric requires both G and H labels (or more of each) but did not get them."""


class LengthMismatch(RefcheckError):
    """Two label vectors that must align have different lengths."""


class ManifestCorrupt(RefcheckError):
    """A run directory manifest is missing or unreadable."""


class DigestMismatch(RefcheckError):
    """A completed stage's output no longer matches its recorded digest."""


class RunIncomplete(RefcheckError):
    """An export was requested before the metrics stage finished."""
