"""Archive sources on local disk and behind plain HTTP(S).

ModelNet-style HDF5 archives are usually distributed as a download. The HTTP
source streams one into a cache directory the first time it is needed and
reuses the cached copy afterwards.

Typical usage:

    import asyncio
    from pathlib import Path
    from mmpoint.sources import resolve_source

    source = resolve_source("https://example.org/modelnet40_ply_hdf5_2048.h5")
    path = asyncio.run(source.fetch(Path("~/.cache/mmpoint").expanduser()))
"""

import logging
from pathlib import Path
from urllib.parse import urlparse

import aiohttp

from mmpoint.errors import ArchiveFetchError, DatasetError

from .base import BaseSource

CHUNK_SIZE = 1 << 20

logger = logging.getLogger(__name__)


class LocalArchiveSource(BaseSource):
    """An archive (file or shard directory) that already lives on local disk."""

    def __init__(self, path: str | Path):
        """Construct an instance of the source.

        Args:
            path: The .h5 file or the directory of shards.
        """
        self._path = Path(path)

    async def fetch(self, dest: Path) -> Path:
        """Return the archive path, which must exist."""
        if not self._path.exists():
            raise DatasetError(f"{self._path} does not exist")
        return self._path

    def describe(self) -> str:
        """Return the archive path."""
        return str(self._path)


class HttpArchiveSource(BaseSource):
    """An archive downloaded over HTTP(S) into a cache directory."""

    def __init__(self, url: str):
        """Construct an instance of the source.

        Args:
            url: Where to download the archive from.
        """
        self._url = url

    @property
    def filename(self) -> str:
        """Return the file name the archive is cached under."""
        name = Path(urlparse(self._url).path).name
        return name or "archive.h5"

    async def fetch(self, dest: Path) -> Path:
        """Download the archive unless a cached copy already exists."""
        target = Path(dest) / self.filename
        if target.exists():
            logger.debug("using cached archive %s", target)
            return target

        target.parent.mkdir(parents=True, exist_ok=True)
        await self._get(target)
        return target

    def describe(self) -> str:
        """Return the archive URL."""
        return self._url

    async def _get(self, target: Path):
        """Stream the archive to `target`, via a temporary file."""
        logger.debug("GET %s", self._url)
        tmp = target.with_name(target.name + ".part")

        async with aiohttp.ClientSession() as session:
            async with session.get(self._url) as resp:
                if not resp.ok:
                    raise ArchiveFetchError(status=resp.status, url=self._url)
                with open(tmp, "wb") as f:
                    async for chunk in resp.content.iter_chunked(CHUNK_SIZE):
                        f.write(chunk)

        tmp.replace(target)
        logger.info("downloaded %s to %s", self._url, target)


def resolve_source(location: str) -> BaseSource:
    """Pick the source implementation for a path or URL."""
    if urlparse(location).scheme in ("http", "https"):
        return HttpArchiveSource(location)
    return LocalArchiveSource(location)
