"""Content-addressed on-disk cache of numeric tables.

Entries are ``.npz`` files named by the SHA-256 of their defining parameters.
Each entry embeds a checksum of its arrays; a mismatch is treated as a miss.
Writes go to a temporary file that is atomically renamed into place.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

ENV_VAR = "MEMBRANE_CACHE_DIR"


def cache_key(**params) -> str:
    blob = json.dumps(params, sort_keys=True, separators=(",", ":"), default=_jsonable)
    return hashlib.sha256(blob.encode()).hexdigest()


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot hash {type(obj).__name__}")


def _checksum(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(a.dtype).encode())
        h.update(repr(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def resolve_cache_dir(cli_value: str | None = None, config_value: str | None = None) -> Path | None:
    """The environment variable wins over the command line, which wins over the config."""
    chosen = os.environ.get(ENV_VAR) or cli_value or config_value
    return Path(chosen) if chosen else None


def cache_store(directory: str | Path, key: str, arrays: dict[str, np.ndarray]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    target = directory / f"{key}.npz"
    payload = {k: np.asarray(v) for k, v in arrays.items()}
    payload["__checksum__"] = np.array(_checksum(payload))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **payload)
        os.replace(tmp, target)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return target


def cache_load(directory: str | Path, key: str) -> dict[str, np.ndarray] | None:
    path = Path(directory) / f"{key}.npz"
    if not path.exists():
        return None
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
        stored = str(arrays.pop("__checksum__"))
    except Exception as exc:  # unreadable archive
        log.warning("discarding unreadable cache entry %s: %s", path.name, exc)
        return None
    if stored != _checksum(arrays):
        log.warning("discarding corrupt cache entry %s", path.name)
        return None
    return arrays


def cached(directory: str | Path | None, params: dict, compute) -> dict[str, np.ndarray]:
    """Load the entry for ``params`` or compute, store and return it."""
    if directory is None:
        return compute()
    key = cache_key(**params)
    hit = cache_load(directory, key)
    if hit is not None:
        return hit
    arrays = compute()
    cache_store(directory, key, arrays)
    return arrays
