"""Single-file parameter checkpoints that round-trip bit-exactly.

File layout (all integers little-endian):

    bytes 0..7    magic b"DPCKPT01"
    bytes 8..15   uint64: byte length of the manifest JSON
    manifest      UTF-8 JSON: {"entries": [{"name": str, "shape": [int]}]}
    payloads      one per entry, in manifest order: row-major float64 LE,
                  exactly 8 * prod(shape) bytes each

Names are arbitrary strings (the models use dotted paths). Loading
returns an ordered name -> float64 ndarray mapping.
"""

import json
import struct

import numpy as np

MAGIC = b"DPCKPT01"


class CheckpointError(ValueError):
    """Checkpoint file is malformed or inconsistent."""


def save_checkpoint(path, named_arrays):
    """Write an ordered mapping of name -> ndarray to `path`."""
    entries = []
    payloads = []
    for name, arr in named_arrays.items():
        a = np.asarray(arr, dtype=np.float64)
        entries.append({"name": name, "shape": list(a.shape)})
        payloads.append(a.astype("<f8", copy=False).tobytes())  # C-order bytes
    manifest = json.dumps({"entries": entries}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(manifest)))
        f.write(manifest)
        for p in payloads:
            f.write(p)


def load_checkpoint(path):
    """Read a checkpoint back into an ordered name -> ndarray dict."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    (mlen,) = struct.unpack("<Q", blob[8:16])
    try:
        manifest = json.loads(blob[16 : 16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable manifest: {e}") from e
    out = {}
    offset = 16 + mlen
    for entry in manifest["entries"]:
        shape = tuple(entry["shape"])
        nbytes = 8 * int(np.prod(shape)) if shape else 8
        chunk = blob[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: truncated payload for {entry['name']}")
        out[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    return out
