"""Checkpoint files: a text manifest plus a little-endian float32 blob.

Manifest lines are ``name<TAB>f32<TAB>shape<TAB>offset`` where ``shape`` is a
comma-separated extent list (empty for scalars) and ``offset`` is the byte
offset into the blob. Values are down-cast from float64 on save; loading and
re-saving is byte-exact.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

MANIFEST = "weights.manifest"
BLOB = "weights.bin"
_DTYPE = np.dtype("<f4")


def save_checkpoint(directory, state: dict[str, np.ndarray]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    offset = 0
    with open(directory / BLOB, "wb") as blob:
        for name, arr in state.items():
            if any(ch in name for ch in "\t\n"):
                raise ValueError(f"bad tensor name {name!r}")
            data = np.asarray(arr, dtype=np.float64).astype(_DTYPE, order="C")
            blob.write(data.tobytes())
            shape = ",".join(str(s) for s in data.shape)
            lines.append(f"{name}\tf32\t{shape}\t{offset}\n")
            offset += data.nbytes
    (directory / MANIFEST).write_text("".join(lines))


def load_checkpoint(directory) -> dict[str, np.ndarray]:
    """Read a checkpoint back as float64 arrays, in manifest order."""
    directory = Path(directory)
    raw = (directory / BLOB).read_bytes()
    state: dict[str, np.ndarray] = {}
    for lineno, line in enumerate((directory / MANIFEST).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            name, dtype, shape_s, offset_s = line.split("\t")
        except ValueError:
            raise ValueError(f"{directory / MANIFEST}:{lineno}: malformed line") from None
        if dtype != "f32":
            raise ValueError(f"{directory / MANIFEST}:{lineno}: unsupported dtype {dtype!r}")
        shape = tuple(int(s) for s in shape_s.split(",")) if shape_s else ()
        count = int(np.prod(shape)) if shape else 1
        offset = int(offset_s)
        if offset + count * _DTYPE.itemsize > len(raw):
            raise ValueError(f"{directory / MANIFEST}:{lineno}: {name} runs past the end of {BLOB}")
        arr = np.frombuffer(raw, dtype=_DTYPE, count=count, offset=offset)
        state[name] = arr.astype(np.float64).reshape(shape)
    return state
