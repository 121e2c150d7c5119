"""Locations that external point-cloud archives can be fetched from."""

from .archive import HttpArchiveSource, LocalArchiveSource, resolve_source
from .base import BaseSource
