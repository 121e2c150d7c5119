"""Exceptions raised by mmpoint.

Every exception derives from `MMPointError`, so callers (and the CLI) can catch
the whole family in one place. Each carries the values needed to diagnose the
failure as read-only properties.
"""

import json
from typing import Any


class MMPointError(Exception):
    """Base class for all errors raised by mmpoint."""

    def __repr__(self) -> str:  # noqa: D105
        return f"{self.__class__.__name__}({self.__str__()})"


class CloudError(MMPointError):
    """Raised when a point cloud is malformed, non-finite or degenerate."""


class DatasetError(MMPointError):
    """Raised when a dataset directory or an external archive cannot be used."""


class EvaluationError(MMPointError):
    """Raised when an evaluation protocol cannot run on the given features."""


class ConfigError(MMPointError):
    """Raised when a configuration violates one or more constraints."""

    def __init__(self, violations: list[str]):
        """Construct an instance of the exception.

        Args:
            violations: Human readable description of each failing constraint.
        """
        super().__init__()
        self._violations = list(violations)

    @property
    def violations(self) -> list[str]:
        """Return the list of failing constraints."""
        return self._violations

    def __str__(self) -> str:  # noqa: D105
        return "; ".join(self._violations)


class CheckpointError(MMPointError):
    """Raised when a checkpoint file cannot be read back."""

    def __init__(self, path: Any, reason: str):
        """Construct an instance of the exception.

        Args:
            path:   The checkpoint file being read.
            reason: What was wrong with it.
        """
        super().__init__()
        self._path = str(path)
        self._reason = reason

    @property
    def path(self) -> str:
        """Return the path of the offending checkpoint."""
        return self._path

    @property
    def reason(self) -> str:
        """Return the reason the checkpoint was rejected."""
        return self._reason

    def __str__(self) -> str:  # noqa: D105
        return f"{self.path}: {self.reason}"


class NonFiniteLossError(MMPointError):
    """Raised when a training step produces a NaN or infinite loss."""

    def __init__(self, step: int, batch_digest: str, components: dict[str, float] | None = None):
        """Construct an instance of the exception.

        Args:
            step:         The optimizer step at which the loss diverged.
            batch_digest: Hash of the batch that produced the loss.
            components:   (Optional) The loss components that were computed.
        """
        super().__init__()
        self._step = step
        self._batch_digest = batch_digest
        self._components = components or {}

    @property
    def step(self) -> int:
        """Return the step at which training diverged."""
        return self._step

    @property
    def batch_digest(self) -> str:
        """Return the digest of the last batch."""
        return self._batch_digest

    @property
    def components(self) -> dict[str, float]:
        """Return the loss components at the time of failure."""
        return self._components

    def __str__(self) -> str:  # noqa: D105
        msg = f"non-finite loss at step {self.step} (batch {self.batch_digest[:16]})"
        if self.components:
            msg += " " + json.dumps(self.components)
        return msg


class ArchiveFetchError(MMPointError):
    """Raised when an unsuccessful request is made for a remote archive."""

    def __init__(self, status: int, url: str):
        """Construct an instance of the exception."""
        super().__init__()
        self._status = status
        self._url = url

    @property
    def status(self) -> int:
        """Return the HTTP status code of the failed request."""
        return self._status

    @property
    def url(self) -> str:
        """Return the URL that was requested."""
        return self._url

    def __str__(self) -> str:  # noqa: D105
        return f"{self.status} {self.url}"
