"""Checkpoint file: plain-text header followed by one little-endian float blob."""
from __future__ import annotations

from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
MAGIC = "catrans-checkpoint"
END = "end_header"


class CheckpointError(ValueError):
    pass


def dumps(state: dict[str, np.ndarray], config_hash: str, dtype: str = "f32", kind: str = "catrans") -> bytes:
    np_dtype = {"f32": "<f4", "f64": "<f8"}[dtype]
    lines = [MAGIC, f"format_version={FORMAT_VERSION}", f"kind={kind}", f"dtype={dtype}",
             f"config_hash={config_hash}", f"n_params={len(state)}"]
    blobs = []
    offset = 0
    for name, arr in state.items():
        a = np.ascontiguousarray(arr, dtype=np_dtype)
        shape = ",".join(str(s) for s in a.shape)
        lines.append(f"param={name} shape={shape} offset={offset} nbytes={a.nbytes}")
        blobs.append(a.tobytes())
        offset += a.nbytes
    lines.append(f"blob_bytes={offset}")
    lines.append(END)
    return ("\n".join(lines) + "\n").encode("ascii") + b"".join(blobs)


def loads(raw: bytes, expected_hash: str | None = None, force: bool = False):
    """Parse a checkpoint; returns (header dict, state dict)."""
    marker = ("\n" + END + "\n").encode()
    cut = raw.find(marker)
    if not raw.startswith(MAGIC.encode()) or cut < 0:
        raise CheckpointError("not a checkpoint file")
    try:
        header, params = _parse_header(raw[:cut].decode("ascii").splitlines()[1:])
        np_dtype = {"f32": "<f4", "f64": "<f8"}[header["dtype"]]
        version = int(header["format_version"])
        blob_bytes = int(header["blob_bytes"])
        saved_hash = header["config_hash"]
    except (UnicodeDecodeError, ValueError, KeyError) as exc:
        raise CheckpointError(f"malformed checkpoint header: {exc}") from exc
    blob = raw[cut + len(marker):]
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    if blob_bytes != len(blob):
        raise CheckpointError(f"blob is {len(blob)} bytes, header says {blob_bytes}")
    if expected_hash is not None and saved_hash != expected_hash and not force:
        raise CheckpointError(
            f"config hash mismatch: checkpoint {saved_hash}, config {expected_hash} (use --force)"
        )
    state = {}
    covered = 0
    for p in params:
        off, nb = p["offset"], p["nbytes"]
        if off != covered:
            raise CheckpointError(f"parameter {p['param']} starts at {off}, expected {covered}")
        arr = np.frombuffer(blob[off:off + nb], dtype=np_dtype)
        if arr.size != int(np.prod(p["shape"], dtype=np.int64)):
            raise CheckpointError(f"parameter {p['param']}: {nb} bytes do not fit shape {p['shape']}")
        state[p["param"]] = arr.reshape(p["shape"]).copy()
        covered += nb
    if covered != len(blob):
        raise CheckpointError("parameter table does not cover the blob")
    return header, state


def _parse_header(lines):
    header: dict[str, str] = {}
    params = []
    for line in lines:
        if line.startswith("param="):
            f = dict(tok.split("=", 1) for tok in line.split(" "))
            params.append({"param": f["param"], "shape": tuple(int(s) for s in f["shape"].split(",") if s),
                           "offset": int(f["offset"]), "nbytes": int(f["nbytes"])})
        else:
            k, v = line.split("=", 1)
            header[k] = v
    return header, params


def save(path, state, config_hash: str, dtype: str = "f32", kind: str = "catrans") -> Path:
    path = Path(path)
    path.write_bytes(dumps(state, config_hash, dtype, kind))
    return path


def load(path, expected_hash: str | None = None, force: bool = False):
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from exc
    return loads(raw, expected_hash, force)
