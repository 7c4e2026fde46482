"""Binary checkpoint format.

Layout::

    b"MLCAM1"
    uint64 LE   header length N
    N bytes     UTF-8 JSON header: {"config", "seed", "params": [{name, shape, offset}], "extra"}
    payload     little-endian float64 arrays, concatenated at the recorded byte offsets
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from mlcam.autodiff import Tensor
from mlcam.errors import DataError
from mlcam.network import Network, NetworkConfig

MAGIC = b"MLCAM1"


def to_bytes(net: Network, extra: dict | None = None) -> bytes:
    manifest = []
    chunks = []
    offset = 0
    for name, p in net.params.items():
        raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(p.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "config": net.config.to_dict(),
        "seed": net.config.seed,
        "params": manifest,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(blob)) + blob + b"".join(chunks)


def from_bytes(buf: bytes) -> tuple[Network, dict]:
    if not buf.startswith(MAGIC):
        raise DataError("not an MLCAM1 checkpoint (bad magic)")
    start = len(MAGIC)
    try:
        (n,) = struct.unpack("<Q", buf[start : start + 8])
        header = json.loads(buf[start + 8 : start + 8 + n].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"corrupt checkpoint header: {exc}") from None
    payload = memoryview(buf)[start + 8 + n :]
    need = 8 * sum(int(np.prod(e["shape"], dtype=np.int64)) for e in header["params"])
    if len(payload) != need:
        raise DataError(f"checkpoint payload is {len(payload)} bytes, header describes {need}")
    config = NetworkConfig.from_dict(header["config"])
    params = {}
    for entry in header["params"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"])
        params[entry["name"]] = Tensor(arr.reshape(entry["shape"]).astype(np.float64), requires_grad=True)
    return Network(config, params), header.get("extra", {})


def save_checkpoint(net: Network, path: str | Path, extra: dict | None = None) -> None:
    Path(path).write_bytes(to_bytes(net, extra))


def load_checkpoint(path: str | Path) -> tuple[Network, dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    return from_bytes(path.read_bytes())
