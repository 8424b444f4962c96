"""Parameter checkpoints: a text manifest followed by a float32 payload.

Layout::

    HEADMODEL-CHECKPOINT 1
    <key>=<value>                  (network metadata, any number of lines)
    param <name> <layer kind> <d0,d1,...>
    ...
    END
    <little-endian float32 values of every param, manifest order, C order>
"""
from pathlib import Path

import numpy as np

MAGIC = "HEADMODEL-CHECKPOINT 1"


def save_checkpoint(path, entries, meta=None):
    """``entries`` is an ordered iterable of ``(name, layer_kind, array)``."""
    lines = [MAGIC]
    for key, value in (meta or {}).items():
        lines.append(f"{key}={value}")
    payload = []
    for name, kind, arr in entries:
        if " " in name or " " in kind:
            raise ValueError(f"whitespace in manifest entry {name!r}")
        shape = ",".join(str(n) for n in arr.shape)
        lines.append(f"param {name} {kind} {shape}")
        payload.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    lines.append("END")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for chunk in payload:
            fh.write(chunk)
    return Path(path)


def load_checkpoint(path):
    """Return ``(meta, manifest, arrays)``; ``manifest`` lists ``(name, kind, shape)``."""
    raw = Path(path).read_bytes()
    end = raw.find(b"\nEND\n")
    if not raw.startswith(MAGIC.encode()) or end < 0:
        raise ValueError(f"{path}: not a checkpoint file")
    meta, manifest = {}, []
    for line in raw[:end].decode("utf-8").splitlines()[1:]:
        if line.startswith("param "):
            _, name, kind, shape = line.split(" ")
            manifest.append((name, kind, tuple(int(n) for n in shape.split(",") if n)))
        else:
            key, _, value = line.partition("=")
            meta[key] = value
    offset = end + len(b"\nEND\n")
    arrays = {}
    for name, _, shape in manifest:
        count = int(np.prod(shape))
        nbytes = 4 * count
        if offset + nbytes > len(raw):
            raise ValueError(f"{path}: truncated payload at {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    return meta, manifest, arrays
