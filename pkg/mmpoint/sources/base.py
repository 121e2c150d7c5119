"""Provides an abstract archive source for anything that can hand over an HDF5 archive."""

from abc import ABC, abstractmethod
from pathlib import Path


class BaseSource(ABC):
    """Base implementation for archive sources."""

    @abstractmethod
    async def fetch(self, dest: Path) -> Path:
        """Make the archive available on local disk and return its path.

        Args:
            dest: A cache directory the source may write into.
        """
        pass

    @abstractmethod
    def describe(self) -> str:
        """Return a human readable description of where the archive comes from."""
        pass
