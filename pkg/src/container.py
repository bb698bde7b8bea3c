"""Single-file tensor container used for extractor weights and checkpoints.

Layout (all integers little-endian):

    magic        4 bytes   b"FCNT"
    version      uint32    FORMAT_VERSION
    header_len   uint64
    header       JSON, UTF-8: {"metadata": {...}, "tensors": [entry, ...]}
    data         raw tensor bytes, concatenated in table order

Each tensor entry is ``{"name", "dtype", "shape", "offset", "nbytes"}`` with
``offset`` relative to the start of the data section. Floating tensors are
stored as little-endian IEEE values, so a write/read round trip is bitwise.
"""

import hashlib
import json
import os
import struct
from collections.abc import Iterable, Mapping
from pathlib import Path

import numpy as np
import torch

from .errors import CorruptWeights, VersionMismatch

MAGIC = b"FCNT"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<4sIQ")

# dtype name -> (numpy little-endian dtype, torch dtype)
_DTYPES: dict[str, tuple[str, torch.dtype]] = {
    "float32": ("<f4", torch.float32),
    "float64": ("<f8", torch.float64),
    "int64": ("<i8", torch.int64),
    "uint8": ("|u1", torch.uint8),
}
_TORCH_TO_NAME = {torch_dtype: name for name, (_, torch_dtype) in _DTYPES.items()}


def _tensor_bytes(tensor: torch.Tensor) -> tuple[str, bytes]:
    name = _TORCH_TO_NAME.get(tensor.dtype)
    if name is None:
        raise TypeError(f"unsupported tensor dtype for container: {tensor.dtype}")
    array = tensor.detach().cpu().contiguous().numpy()
    return name, array.astype(_DTYPES[name][0], copy=False).tobytes()


def write_container(
    path: str | Path,
    tensors: Mapping[str, torch.Tensor],
    metadata: dict,
    version: int = FORMAT_VERSION,
) -> Path:
    """Write ``tensors`` and JSON-serializable ``metadata`` to ``path``.

    The file is written to a sibling temp file and renamed into place, so a
    failed write never leaves a half-written checkpoint behind.
    """
    path = Path(path)
    entries = []
    chunks = []
    offset = 0
    for name, tensor in tensors.items():
        dtype_name, raw = _tensor_bytes(tensor)
        entries.append(
            {
                "name": name,
                "dtype": dtype_name,
                "shape": list(tensor.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)

    header = json.dumps(
        {"metadata": metadata, "tensors": entries}, sort_keys=True
    ).encode("utf-8")

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_name(path.name + ".tmp")
    with open(tmp_path, "wb") as f:
        f.write(_PREAMBLE.pack(MAGIC, version, len(header)))
        f.write(header)
        for chunk in chunks:
            f.write(chunk)
    os.replace(tmp_path, path)
    return path


def read_container(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    """Read a container file, returning ``(tensors, metadata)``.

    Raises:
        FileNotFoundError: If ``path`` does not exist.
        VersionMismatch: If the file's format version is not FORMAT_VERSION.
        CorruptWeights: On bad magic, truncation, or an inconsistent table.
    """
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _PREAMBLE.size:
        raise CorruptWeights(f"{path}: file too short for container preamble")

    magic, version, header_len = _PREAMBLE.unpack_from(blob)
    if magic != MAGIC:
        raise CorruptWeights(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatch(
            f"{path}: format_version {version} is not supported (expected {FORMAT_VERSION})"
        )

    header_end = _PREAMBLE.size + header_len
    if len(blob) < header_end:
        raise CorruptWeights(f"{path}: truncated header")
    try:
        header = json.loads(blob[_PREAMBLE.size : header_end].decode("utf-8"))
        entries = header["tensors"]
        metadata = header["metadata"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CorruptWeights(f"{path}: unreadable header ({exc})") from exc

    data = memoryview(blob)[header_end:]
    expected = sum(int(e.get("nbytes", 0)) for e in entries)
    if len(data) != expected:
        raise CorruptWeights(
            f"{path}: data section holds {len(data)} bytes, table declares {expected}"
        )

    tensors: dict[str, torch.Tensor] = {}
    for entry in entries:
        try:
            np_dtype, _ = _DTYPES[entry["dtype"]]
            shape = tuple(int(d) for d in entry["shape"])
            start, nbytes = int(entry["offset"]), int(entry["nbytes"])
            count = int(np.prod(shape, dtype=np.int64))
            if count * np.dtype(np_dtype).itemsize != nbytes:
                raise ValueError(f"shape {list(shape)} does not fit {nbytes} bytes")
            array = np.frombuffer(data[start : start + nbytes], dtype=np_dtype, count=count)
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptWeights(
                f"{path}: bad tensor entry {entry.get('name', '?')!r} ({exc})"
            ) from exc
        tensors[entry["name"]] = torch.from_numpy(
            array.astype(array.dtype.newbyteorder("="), copy=True).reshape(shape)
        )
    return tensors, metadata


def tensor_digest(named: Iterable[tuple[str, torch.Tensor]]) -> str:
    """SHA-256 over names and raw bytes of named tensors, in the given order."""
    h = hashlib.sha256()
    for name, tensor in named:
        dtype_name, raw = _tensor_bytes(tensor)
        h.update(name.encode("utf-8"))
        h.update(dtype_name.encode("ascii"))
        h.update(str(list(tensor.shape)).encode("ascii"))
        h.update(raw)
    return h.hexdigest()
