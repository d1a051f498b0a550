"""Content-addressed response cache shared by all backends."""

import logging
import os
import tempfile
import time
from abc import ABC, abstractmethod
from pathlib import Path

from pydantic import BaseModel, ConfigDict

from repaint.core import content_hash

# Configure logger
logger = logging.getLogger(__name__)


def cache_key(backend_id: str, request_bytes: bytes) -> str:
    """Key of a cached response: hash over the backend id and canonical request.

    The NUL separator keeps the mapping injective, since backend ids never contain it.
    """
    return content_hash(backend_id.encode("utf-8") + b"\0" + request_bytes)


class CacheEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    key: str
    response: bytes
    created_at: float


class CacheStrategy(ABC):
    """Abstract base class for response caches."""

    @abstractmethod
    def get(self, backend_id: str, key: str) -> CacheEntry | None:
        """Retrieve an entry, or None on a miss."""
        raise NotImplementedError("Subclasses must implement get method")

    @abstractmethod
    def set(self, backend_id: str, key: str, response: bytes) -> CacheEntry:
        """Store a response under the given key."""
        raise NotImplementedError("Subclasses must implement set method")

    @abstractmethod
    def stats(self) -> dict[str, dict[str, int]]:
        """Entry count and byte size per backend id."""
        raise NotImplementedError("Subclasses must implement stats method")

    @abstractmethod
    def gc(self, max_age_days: float) -> int:
        """Delete entries older than ``max_age_days``; return how many were removed."""
        raise NotImplementedError("Subclasses must implement gc method")


class MemoryCache(CacheStrategy):
    """Process-local cache, used when no cache directory is configured."""

    def __init__(self):
        self._entries: dict[tuple[str, str], CacheEntry] = {}

    def get(self, backend_id: str, key: str) -> CacheEntry | None:
        return self._entries.get((backend_id, key))

    def set(self, backend_id: str, key: str, response: bytes) -> CacheEntry:
        entry = CacheEntry(key=key, response=response, created_at=time.time())
        self._entries[(backend_id, key)] = entry
        return entry

    def stats(self) -> dict[str, dict[str, int]]:
        result: dict[str, dict[str, int]] = {}
        for (backend_id, _), entry in self._entries.items():
            bucket = result.setdefault(backend_id, {"entries": 0, "bytes": 0})
            bucket["entries"] += 1
            bucket["bytes"] += len(entry.response)
        return result

    def gc(self, max_age_days: float) -> int:
        cutoff = time.time() - max_age_days * 86400
        stale = [k for k, e in self._entries.items() if e.created_at < cutoff]
        for k in stale:
            del self._entries[k]
        return len(stale)


class FileCache(CacheStrategy):
    """On-disk cache laid out as ``<root>/<backend-id>/<key[:2]>/<key>.bin``.

    Writes go through a temporary file and ``os.replace`` so concurrent writers of
    the same key never expose a partial file; the last writer wins.
    """

    def __init__(self, root: str | Path):
        """Initialize the cache.

        Args:
            root: Cache directory, created on demand
        """
        self.root = Path(root)

    def path_for(self, backend_id: str, key: str) -> Path:
        return self.root / backend_id / key[:2] / f"{key}.bin"

    def get(self, backend_id: str, key: str) -> CacheEntry | None:
        path = self.path_for(backend_id, key)
        try:
            data = path.read_bytes()
            created_at = path.stat().st_mtime
        except FileNotFoundError:
            return None
        except OSError as e:
            logger.warning(f"Unreadable cache entry {path}: {e}")
            return None
        return CacheEntry(key=key, response=data, created_at=created_at)

    def set(self, backend_id: str, key: str, response: bytes) -> CacheEntry:
        path = self.path_for(backend_id, key)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(response)
            os.replace(tmp_name, path)
        except OSError:
            if os.path.exists(tmp_name):
                os.unlink(tmp_name)
            raise
        return CacheEntry(key=key, response=response, created_at=time.time())

    def _entries(self):
        if not self.root.exists():
            return
        for backend_dir in sorted(p for p in self.root.iterdir() if p.is_dir()):
            for path in sorted(backend_dir.glob("*/*.bin")):
                yield backend_dir.name, path

    def stats(self) -> dict[str, dict[str, int]]:
        result: dict[str, dict[str, int]] = {}
        for backend_id, path in self._entries():
            bucket = result.setdefault(backend_id, {"entries": 0, "bytes": 0})
            bucket["entries"] += 1
            bucket["bytes"] += path.stat().st_size
        return result

    def gc(self, max_age_days: float) -> int:
        cutoff = time.time() - max_age_days * 86400
        removed = 0
        for _, path in list(self._entries()):
            if path.stat().st_mtime < cutoff:
                path.unlink(missing_ok=True)
                removed += 1
        logger.info(f"Cache gc removed {removed} entries older than {max_age_days} days")
        return removed
