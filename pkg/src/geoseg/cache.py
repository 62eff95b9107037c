"""Read-through disk cache for fetched artifacts.

Keys are caller-built sha256 hex digests; values are opaque byte blobs.
Writes go through a temp file and os.replace so a crashed process never
leaves a torn entry. The cache directory comes from the GEOSEG_CACHE_DIR
environment variable unless given explicitly; with neither, caching is
disabled (get always misses, put is a no-op).
"""

from __future__ import annotations

import hashlib
import os
import tempfile
from pathlib import Path

ENV_CACHE_DIR = "GEOSEG_CACHE_DIR"


def content_key(*parts: str) -> str:
    """Stable sha256 key from string parts (joined with newlines)."""
    digest = hashlib.sha256("\n".join(parts).encode("utf-8"))
    return digest.hexdigest()


class DiskCache:
    def __init__(self, directory: str | Path | None = None,
                 namespace: str = ""):
        if directory is None:
            directory = os.environ.get(ENV_CACHE_DIR)
        self.directory = Path(directory) if directory else None
        self.namespace = namespace
        self.hits = 0
        self.misses = 0

    @property
    def enabled(self) -> bool:
        return self.directory is not None

    def _path(self, key: str) -> Path:
        d = self.directory / self.namespace if self.namespace \
            else self.directory
        return d / f"{key}.bin"

    def get(self, key: str) -> bytes | None:
        if not self.enabled:
            self.misses += 1
            return None
        path = self._path(key)
        try:
            blob = path.read_bytes()
        except OSError:
            self.misses += 1
            return None
        self.hits += 1
        return blob

    def put(self, key: str, blob: bytes) -> None:
        if not self.enabled:
            return
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(blob)
            os.replace(tmp, path)
        except BaseException:
            try:
                os.unlink(tmp)
            except OSError:
                pass
            raise
