"""Self-describing parameter container.

A checkpoint is an ``.npz`` archive holding one array per parameter or buffer
plus a JSON header with the format version, floating-point precision, and an
optional model manifest (architecture hyperparameters).
"""
from __future__ import annotations

import json
import os
import tempfile
import zipfile
from pathlib import Path

import numpy as np

FORMAT = "fab-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(path, state: dict[str, np.ndarray], manifest: dict | None = None) -> Path:
    path = Path(path)
    dtypes = {str(np.asarray(v).dtype) for v in state.values()}
    header = {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "precision": sorted(dtypes)[0] if len(dtypes) == 1 else sorted(dtypes),
        "manifest": manifest or {},
        "names": list(state),
    }
    arrays = {f"p{i}": np.ascontiguousarray(v) for i, v in enumerate(state.values())}
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    try:
        with open(tmp, "wb") as fh:
            np.savez(fh, __header__=np.array(json.dumps(header, sort_keys=True)), **arrays)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(state, manifest)``; raises :class:`CheckpointError` on any malformed file."""
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as archive:
            header = json.loads(str(archive["__header__"]))
            if header.get("format") != FORMAT:
                raise CheckpointError(f"{path}: not a {FORMAT} file")
            if header.get("version") != FORMAT_VERSION:
                raise CheckpointError(f"{path}: unsupported format version {header.get('version')}")
            names = header["names"]
            state = {name: archive[f"p{i}"] for i, name in enumerate(names)}
    except CheckpointError:
        raise
    except (OSError, ValueError, KeyError, zipfile.BadZipFile, json.JSONDecodeError, EOFError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    return state, header.get("manifest", {})
