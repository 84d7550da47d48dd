"""Parameter checkpoints.

Layout: an uncompressed ``.npz`` archive.  Member ``__meta__`` is a UTF-8 JSON
document stored as a ``uint8`` array with keys ``format`` (``"dsdh-checkpoint"``),
``version`` (1), ``names`` (parameter names in registry order) and ``extra``
(caller metadata such as the head config).  Every other member is named
``p:<parameter name>`` and holds that parameter's array with its shape.
"""
from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np

from .errors import IntegrityError
from .npzio import write_npz

CHECKPOINT_FORMAT = "dsdh-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: dict[str, np.ndarray], extra: dict | None = None) -> Path:
    path = Path(path)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "names": list(params),
        "extra": extra or {},
    }
    arrays = {f"p:{k}": np.asarray(v) for k, v in params.items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    return write_npz(path, arrays)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(params, extra)``; raises :class:`IntegrityError` on a bad file."""
    try:
        with np.load(Path(path), allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
    except (zipfile.BadZipFile, ValueError, OSError, EOFError) as exc:
        raise IntegrityError(f"{path}: unreadable checkpoint ({exc})") from exc
    try:
        meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    except (KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: missing or corrupt metadata") from exc
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise IntegrityError(f"{path}: not a checkpoint")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise IntegrityError(f"{path}: checkpoint version {meta.get('version')} is not supported")
    params = {}
    for name in meta["names"]:
        key = f"p:{name}"
        if key not in arrays:
            raise IntegrityError(f"{path}: parameter {name!r} is missing")
        params[name] = arrays[key]
    return params, meta.get("extra", {})
