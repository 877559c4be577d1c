"""Binary container shared by model checkpoints and prompt/map artifacts.

Layout (little-endian)::

    magic      4 bytes  (b"BBAL")
    version    u32
    hdr_len    u32
    header     hdr_len bytes of UTF-8 JSON; "blocks" lists [name, shape] pairs
    payload    f64 blocks, in header order
"""

import json
import struct

import numpy as np

from .errors import InvalidInputError

MAGIC = b"BBAL"
VERSION = 1


def write_container(path, header: dict, blocks: list[tuple[str, np.ndarray]], magic=MAGIC):
    header = dict(header)
    header["blocks"] = [[name, list(arr.shape)] for name, arr in blocks]
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", VERSION, len(text)))
        fh.write(text)
        for _, arr in blocks:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_container(path, magic=MAGIC) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != magic:
        raise InvalidInputError(f"{path}: bad magic {raw[:4]!r}")
    version, hdr_len = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise InvalidInputError(f"{path}: unsupported version {version}")
    header = json.loads(raw[12:12 + hdr_len].decode("utf-8"))
    offset = 12 + hdr_len
    blocks = {}
    for name, shape in header["blocks"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        blocks[name] = arr.astype(np.float64).reshape(shape)
        offset += 8 * count
    if offset != len(raw):
        raise InvalidInputError(f"{path}: trailing bytes after payload")
    return header, blocks
