"""Named float32 arrays in one flat binary container.

Layout::

    PSNCKPT 1\\n
    <entry count>\\n
    <name>\\t<shape>\\t<offset>\\t<nbytes>\\n     one line per entry; shape as "4x4", "" for scalars
    \\n
    <payload>                                  little-endian float32, offsets relative to its start
"""
import logging
from pathlib import Path
from typing import Dict, List, Mapping, Tuple

import numpy as np

from psn.errors import ContractError
from psn.io import PathLike, atomic_write_bytes

logger = logging.getLogger(__name__)

MAGIC = "PSNCKPT 1"
_DTYPE = np.dtype("<f4")


def _format_shape(shape: Tuple[int, ...]) -> str:
    return "x".join(str(dim) for dim in shape)


def _parse_shape(text: str) -> Tuple[int, ...]:
    return tuple(int(dim) for dim in text.split("x")) if text else ()


def encode(arrays: Mapping[str, np.ndarray]) -> bytes:
    lines: List[str] = [MAGIC, str(len(arrays))]
    chunks: List[bytes] = []
    offset = 0
    for name, array in arrays.items():
        if not name or any(ch in name for ch in "\t\n"):
            raise ContractError(f"invalid checkpoint entry name {name!r}")
        blob = np.ascontiguousarray(array, dtype=_DTYPE).tobytes()
        lines.append(f"{name}\t{_format_shape(np.shape(array))}\t{offset}\t{len(blob)}")
        chunks.append(blob)
        offset += len(blob)
    header = "\n".join(lines) + "\n\n"
    return header.encode("utf-8") + b"".join(chunks)


def _parse_entry(line: str) -> Tuple[str, Tuple[int, ...], int, int]:
    try:
        name, shape_text, offset_text, nbytes_text = line.split("\t")
        shape = _parse_shape(shape_text)
        offset, nbytes = int(offset_text), int(nbytes_text)
    except ValueError:
        raise ContractError(f"malformed checkpoint entry line {line!r}") from None
    if any(dim < 0 for dim in shape):
        raise ContractError(f"checkpoint entry {name} has a negative dimension in {shape_text!r}")
    return name, shape, offset, nbytes


def decode(raw: bytes) -> Dict[str, np.ndarray]:
    split = raw.find(b"\n\n")
    if split < 0:
        raise ContractError("checkpoint header is not terminated by a blank line")
    try:
        lines = raw[:split].decode("utf-8").split("\n")
    except UnicodeDecodeError as exc:
        raise ContractError(f"checkpoint header is not UTF-8 at byte {exc.start}") from None
    if lines[0] != MAGIC:
        raise ContractError(f"not a checkpoint: header {lines[0]!r}, expected {MAGIC!r}")
    count_text = lines[1] if len(lines) > 1 else ""
    try:
        count = int(count_text)
    except ValueError:
        raise ContractError(f"malformed checkpoint entry count {count_text!r}") from None
    entries = lines[2:]
    if len(entries) != count:
        raise ContractError(f"checkpoint announces {count} entries but lists {len(entries)}")
    payload = raw[split + 2:]
    arrays: Dict[str, np.ndarray] = {}
    for entry in entries:
        name, shape, offset, nbytes = _parse_entry(entry)
        if offset < 0 or nbytes != int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize \
                or offset + nbytes > len(payload):
            raise ContractError(f"checkpoint entry {name} is truncated or inconsistent with its shape {shape}")
        arrays[name] = np.frombuffer(payload, dtype=_DTYPE, count=nbytes // _DTYPE.itemsize,
                                     offset=offset).reshape(shape).astype(np.float32)
    return arrays


def save_checkpoint(path: PathLike, arrays: Mapping[str, np.ndarray]) -> Path:
    target = atomic_write_bytes(path, encode(arrays))
    logger.info(f"Saved checkpoint with {len(arrays)} arrays to {target}")
    return target


def load_checkpoint(path: PathLike) -> Dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())
