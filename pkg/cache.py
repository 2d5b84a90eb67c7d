"""
Caching layer for plink representations
Persistent on-disk vector cache with an in-memory LRU in front of it.

Disk layout (one directory per cache):
    manifest.json       {"format": 1, "encoder_fingerprint": ...,
                         "entries": {key: file}}
    vectors/<key>.bin   8-byte little-endian length header, then float32 LE values
"""

import hashlib
import json
import struct
import threading
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from config import get_settings
from logger import app_logger

settings = get_settings()

CACHE_FORMAT = 1
_HEADER = struct.Struct("<Q")

# ───────────────────────────── In-memory LRU cache ─────────────────────────────


class _MemoryCache:
    """Simple in-memory LRU cache of read-only vectors."""

    def __init__(self, max_size: int):
        self._store: OrderedDict[str, np.ndarray] = OrderedDict()
        self._max_size = max_size

    def get(self, key: str) -> Optional[np.ndarray]:
        value = self._store.get(key)
        if value is None:
            return None
        self._store.move_to_end(key)
        return value

    def set(self, key: str, value: np.ndarray) -> None:
        if key in self._store:
            self._store.move_to_end(key)
        self._store[key] = value
        while len(self._store) > self._max_size:
            self._store.popitem(last=False)

    def __len__(self) -> int:
        return len(self._store)


# ───────────────────────────── Cache keys ─────────────────────────────


def generate_cache_key(fingerprint: str, kind: str, object_id: str) -> str:
    """
    Generate a content-addressed key for one representation.
    Uses SHA256 so arbitrary ids map to safe file names.
    """
    material = f"{fingerprint}\x1f{kind}\x1f{object_id}"
    digest = hashlib.sha256(material.encode()).hexdigest()
    return f"{kind}-{digest[:32]}"


def write_vector(path: Path, vector: np.ndarray) -> None:
    """Write one vector as length header + float32 little-endian payload."""
    data = np.ascontiguousarray(vector, dtype="<f4")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(data.size))
        f.write(data.tobytes())


def read_vector(path: Path) -> np.ndarray:
    """Read a vector written by write_vector; raises ValueError on truncation."""
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"Truncated cache file: {path}")
    (count,) = _HEADER.unpack_from(raw)
    payload = raw[_HEADER.size :]
    if len(payload) != count * 4:
        raise ValueError(
            f"Cache file {path} holds {len(payload)} bytes, expected {count * 4}"
        )
    return np.frombuffer(payload, dtype="<f4").astype(np.float32)


# ───────────────────────────── Representation cache ─────────────────────────────


class RepresentationCache:
    """
    Read-or-compute cache for encoder outputs.

    Memory-only when directory is None. With a directory, every computed vector is
    written immediately and the manifest is rewritten on flush().
    """

    def __init__(
        self,
        fingerprint: str,
        directory: Optional[Path] = None,
        max_memory_entries: Optional[int] = None,
    ):
        self.fingerprint = fingerprint
        self.directory = Path(directory) if directory is not None else None
        self._memory = _MemoryCache(max_memory_entries or settings.memory_cache_entries)
        self._entries: dict[str, str] = {}
        self._lock = threading.Lock()
        self._key_locks: dict[str, threading.Lock] = {}
        self._dirty = False
        self.hits = 0
        self.misses = 0

        if self.directory is not None:
            (self.directory / "vectors").mkdir(parents=True, exist_ok=True)
            self._load_manifest()

    @classmethod
    def from_settings(cls, fingerprint: str) -> "RepresentationCache":
        """Cache rooted at PLINK_CACHE_DIR, one subdirectory per encoder fingerprint."""
        root = Path(settings.plink_cache_dir)
        return cls(fingerprint, root / fingerprint[:16])

    @property
    def manifest_path(self) -> Path:
        return self.directory / "manifest.json"

    def _load_manifest(self) -> None:
        if not self.manifest_path.exists():
            return
        try:
            manifest = json.loads(self.manifest_path.read_text())
        except json.JSONDecodeError as e:
            app_logger.warning(
                f"Ignoring unreadable cache manifest {self.manifest_path}: {e}"
            )
            return
        if manifest.get("encoder_fingerprint") != self.fingerprint:
            app_logger.warning(
                f"Cache at {self.directory} was built by encoder "
                f"{manifest.get('encoder_fingerprint')}, not {self.fingerprint}; "
                "starting empty"
            )
            return
        self._entries = dict(manifest.get("entries", {}))
        app_logger.debug(f"Loaded cache manifest with {len(self._entries)} entries")

    def flush(self) -> None:
        """Persist the manifest (no-op for memory-only caches)."""
        if self.directory is None or not self._dirty:
            return
        with self._lock:
            manifest = {
                "format": CACHE_FORMAT,
                "encoder_fingerprint": self.fingerprint,
                "entries": dict(sorted(self._entries.items())),
            }
            tmp = self.manifest_path.with_suffix(".tmp")
            tmp.write_text(json.dumps(manifest, indent=2))
            tmp.replace(self.manifest_path)
            self._dirty = False
        app_logger.debug(f"Flushed cache manifest ({len(self._entries)} entries)")

    def _lookup(self, key: str) -> Optional[np.ndarray]:
        vector = self._memory.get(key)
        if vector is not None:
            return vector
        if self.directory is None or key not in self._entries:
            return None
        try:
            vector = read_vector(self.directory / "vectors" / self._entries[key])
        except (OSError, ValueError) as e:
            app_logger.warning(f"Dropping unreadable cache entry {key}: {e}")
            return None
        vector.flags.writeable = False
        self._memory.set(key, vector)
        return vector

    def _store(self, key: str, vector: np.ndarray) -> np.ndarray:
        vector = np.array(vector, dtype=np.float32)
        vector.flags.writeable = False
        self._memory.set(key, vector)
        if self.directory is not None:
            filename = f"{key}.bin"
            write_vector(self.directory / "vectors" / filename, vector)
            self._entries[key] = filename
            self._dirty = True
        return vector

    def get_or_compute(
        self, kind: str, object_id: str, compute: Callable[[], np.ndarray]
    ) -> np.ndarray:
        """
        Return the cached vector for (fingerprint, kind, object_id), computing it once.
        Concurrent callers for the same key block until the first one has stored it.
        """
        key = generate_cache_key(self.fingerprint, kind, object_id)
        with self._lock:
            cached = self._lookup(key)
            if cached is not None:
                self.hits += 1
                return cached
            key_lock = self._key_locks.setdefault(key, threading.Lock())

        with key_lock:
            with self._lock:
                cached = self._lookup(key)
                if cached is not None:
                    self.hits += 1
                    return cached
            vector = compute()
            with self._lock:
                self.misses += 1
                stored = self._store(key, vector)
                self._key_locks.pop(key, None)
            return stored

    def stats(self) -> dict:
        """Get cache statistics"""
        return {
            "backend": "disk" if self.directory is not None else "memory",
            "fingerprint": self.fingerprint,
            "memory_entries": len(self._memory),
            "disk_entries": len(self._entries),
            "hits": self.hits,
            "misses": self.misses,
        }
