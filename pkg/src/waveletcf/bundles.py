"""Deterministic on-disk container for arrays plus scalar metadata.

np.savez embeds zip timestamps, which breaks byte-identical reruns, so
caches and checkpoints use this container instead: a magic line, a JSON
metadata header (sorted keys), then raw .npy blocks in manifest order.
Writing the same payload twice produces identical bytes.
"""

import io
import json

import numpy as np

from .errors import DataError

MAGIC = b"waveletcf-bundle v1\n"


def save_bundle(path, meta: dict, arrays: dict) -> None:
    """Write scalar metadata and named float/int arrays to `path`."""
    names = sorted(arrays)
    header = json.dumps(
        {"meta": meta, "arrays": names}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(header).to_bytes(8, "big"))
        fh.write(header)
        for name in names:
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]))
            block = buf.getvalue()
            fh.write(len(block).to_bytes(8, "big"))
            fh.write(block)


def load_bundle(path):
    """Read a bundle back as (meta, arrays). Raises DataError on corruption."""
    try:
        with open(path, "rb") as fh:
            magic = fh.read(len(MAGIC))
            if magic != MAGIC:
                raise DataError(f"{path}: not a waveletcf bundle (bad or missing magic)")
            raw = fh.read(8)
            if len(raw) != 8:
                raise DataError(f"{path}: truncated header")
            header_len = int.from_bytes(raw, "big")
            header = fh.read(header_len)
            if len(header) != header_len:
                raise DataError(f"{path}: truncated header")
            spec = json.loads(header.decode("utf-8"))
            arrays = {}
            for name in spec["arrays"]:
                raw = fh.read(8)
                if len(raw) != 8:
                    raise DataError(f"{path}: truncated block for array '{name}'")
                block_len = int.from_bytes(raw, "big")
                block = fh.read(block_len)
                if len(block) != block_len:
                    raise DataError(f"{path}: truncated block for array '{name}'")
                arrays[name] = np.lib.format.read_array(io.BytesIO(block))
    except OSError as exc:
        raise DataError(f"cannot read bundle {path}: {exc}") from exc
    return spec["meta"], arrays
