"""Seeding, hashing, and file plumbing shared by every stage.

All randomness in the package flows from one root seed through named
substreams: ``substream(root, "diffusion", "noise")`` always yields the same
`numpy.random.Generator`, so any stage can be re-run in isolation.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np

_STREAM_WORD_BYTES = 4


def _name_words(name: str) -> list[int]:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return [
        int.from_bytes(digest[i : i + _STREAM_WORD_BYTES], "little")
        for i in range(0, 16, _STREAM_WORD_BYTES)
    ]


def seed_sequence(root_seed: int, *names: str | int) -> np.random.SeedSequence:
    """Derive a named SeedSequence from the root seed.

    Names are hashed to fixed entropy words, so the derivation is stable
    across sessions and insensitive to the order in which other streams
    are created.
    """
    entropy: list[int] = [int(root_seed)]
    for name in names:
        if isinstance(name, str):
            entropy.extend(_name_words(name))
        else:
            entropy.append(int(name))
    return np.random.SeedSequence(entropy)


def substream(root_seed: int, *names: str | int) -> np.random.Generator:
    """Named random generator derived from the root seed."""
    return np.random.default_rng(seed_sequence(root_seed, *names))


def derive_int_seed(root_seed: int, *names: str | int) -> int:
    """32-bit integer seed for libraries that take plain ints (torch)."""
    return int(seed_sequence(root_seed, *names).generate_state(1, np.uint32)[0])


def hash_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def hash_arrays(named_arrays) -> str:
    """Content hash over (name, dtype, shape, bytes) of arrays, sorted by name."""
    h = hashlib.sha256()
    for name in sorted(named_arrays):
        arr = np.ascontiguousarray(named_arrays[name])
        h.update(name.encode("utf-8"))
        h.update(str(arr.dtype).encode("ascii"))
        h.update(str(arr.shape).encode("ascii"))
        h.update(arr.tobytes())
    return h.hexdigest()


def hash_state_dict(state_dict) -> str:
    """Content hash of a torch state dict (parameters + buffers)."""
    named = {k: v.detach().cpu().numpy() for k, v in state_dict.items()}
    return hash_arrays(named)


def hash_json(obj) -> str:
    return hash_bytes(canonical_json(obj).encode("utf-8"))


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_json(path: str | Path, obj, indent: int = 2) -> None:
    """Atomic JSON write (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(obj, sort_keys=True, indent=indent)
    atomic_write_bytes(path, text.encode("utf-8"))


def read_json(path: str | Path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def cache_dir() -> Path | None:
    """Optional on-disk cache for derived constants (black latent, neutral grids).

    Controlled by the RLADLAB_CACHE environment variable; None disables caching.
    """
    root = os.environ.get("RLADLAB_CACHE")
    if not root:
        return None
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path
