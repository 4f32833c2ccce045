"""Binary checkpoint files.

Layout, little-endian throughout:

    magic   b"RTLB"
    version u32
    hlen    u32
    header  hlen bytes of UTF-8 JSON
    payload f32 parameter values in segment order, then any running-stat
            arrays in the order listed by the header's stats table
    crc     u32, CRC32 of everything above

The header records a digest of the model spec, the segment table
(name/shape/offset/tag), seed, step, and the stats table. Files are written
with f32 payloads while in-memory math stays f64; load(save(x)) therefore
reproduces values only to f32 quantization.
"""

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ParseError
from .params import ParamVector, build_layout

MAGIC = b"RTLB"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    params: ParamVector
    spec: dict
    spec_digest: str
    seed: int
    step: int
    running_stats: dict


def spec_digest(spec: dict) -> str:
    return hashlib.sha256(json.dumps(spec, sort_keys=True).encode()).hexdigest()


def save_checkpoint(path, params: ParamVector, spec: dict, seed: int, step: int,
                    running_stats: dict | None = None) -> None:
    running_stats = running_stats or {}
    stats_table = []
    stats_blobs = []
    offset = len(params)
    for name in sorted(running_stats):
        for field in ("mean", "var"):
            arr = np.asarray(running_stats[name][field], dtype=np.float64)
            stats_table.append({"name": f"{name}.{field}", "shape": list(arr.shape), "offset": offset})
            stats_blobs.append(arr.astype("<f4").tobytes())
            offset += arr.size
    header = {
        "spec": spec,
        "spec_digest": spec_digest(spec),
        "seed": int(seed),
        "step": int(step),
        "segments": [
            {"name": s.name, "shape": list(s.shape), "offset": s.offset, "tag": s.tag}
            for s in params.layout
        ],
        "stats": stats_table,
    }
    htext = json.dumps(header).encode()
    body = MAGIC + struct.pack("<II", FORMAT_VERSION, len(htext)) + htext
    body += params.values.astype("<f4").tobytes() + b"".join(stats_blobs)
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise ParseError(f"checkpoint too short: {len(raw)} bytes")
    if raw[:4] != MAGIC:
        raise ParseError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise ParseError(
            f"unsupported checkpoint format version {version}; this build reads version {FORMAT_VERSION}"
        )
    body, crc_bytes = raw[:-4], raw[-4:]
    if struct.unpack("<I", crc_bytes)[0] != (zlib.crc32(body) & 0xFFFFFFFF):
        raise ParseError("checkpoint CRC mismatch: file is corrupted")
    if len(body) < 12 + hlen:
        raise ParseError(f"truncated header: {12 + hlen - len(body)} bytes missing")
    header = json.loads(body[12 : 12 + hlen].decode())
    layout = build_layout([(s["name"], tuple(s["shape"]), s["tag"]) for s in header["segments"]])
    payload = np.frombuffer(body[12 + hlen :], dtype="<f4")
    n_params = layout[-1].offset + layout[-1].size if layout else 0
    n_stats = sum(int(np.prod(s["shape"])) for s in header["stats"])
    if payload.size != n_params + n_stats:
        raise ParseError(
            f"payload holds {payload.size} values, header promises {n_params + n_stats}"
        )
    params = ParamVector(payload[:n_params].astype(np.float64), layout)
    running_stats: dict = {}
    for entry in header["stats"]:
        site, field = entry["name"].rsplit(".", 1)
        arr = payload[entry["offset"] : entry["offset"] + int(np.prod(entry["shape"]))]
        running_stats.setdefault(site, {})[field] = arr.astype(np.float64).reshape(entry["shape"])
    return Checkpoint(params, header["spec"], header["spec_digest"], header["seed"],
                      header["step"], running_stats)
