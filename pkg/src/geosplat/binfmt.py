"""Binary container: a small JSON header followed by raw little-endian arrays.

Layout::

    8 bytes   magic  b"GEOSPLT1"
    4 bytes   header length N (uint32, little endian)
    N bytes   UTF-8 JSON header
    ...       array payloads, concatenated in header order, 8-byte aligned

The header always carries ``"arrays": [{"name", "dtype", "shape", "offset",
"nbytes"}, ...]`` with offsets relative to the start of the payload section.
Everything else in the header is caller metadata.
"""

import json
import struct

import numpy as np

MAGIC = b"GEOSPLT1"


def _le(dtype):
    dt = np.dtype(dtype)
    return dt.newbyteorder("<") if dt.byteorder not in ("|", "<") else dt


def dumps(meta, arrays):
    specs, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        arr = arr.astype(_le(arr.dtype), copy=False)
        raw = arr.tobytes()
        specs.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        pad = (-len(raw)) % 8
        chunks.append(raw + b"\0" * pad)
        offset += len(raw) + pad
    header = dict(meta)
    header["endianness"] = "little"
    header["arrays"] = specs
    hbytes = json.dumps(header, sort_keys=True).encode()
    return MAGIC + struct.pack("<I", len(hbytes)) + hbytes + b"".join(chunks)


def loads(data):
    if data[:8] != MAGIC:
        raise ValueError("not a geosplat binary file (bad magic)")
    (n,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + n].decode())
    base = 12 + n
    arrays = {}
    for spec in header["arrays"]:
        start = base + spec["offset"]
        buf = data[start:start + spec["nbytes"]]
        arrays[spec["name"]] = np.frombuffer(buf, dtype=np.dtype(spec["dtype"])).reshape(spec["shape"]).copy()
    return header, arrays


def write(path, meta, arrays):
    with open(path, "wb") as f:
        f.write(dumps(meta, arrays))


def read(path):
    with open(path, "rb") as f:
        return loads(f.read())
