import json
import struct
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict

from conf.config import dump_config, parse_pairs, validate_pairs
from errors import CheckpointFormatError, ConfigError, MissingFileError
from schemas import RunConfig

MAGIC = b"HEKP4NBR-CKPT-v1"
_JSON_KEYS = ("catalog", "names", "vocab", "templates")


class Checkpoint(BaseModel):
    """
    Everything inference needs: the run configuration, the catalog with surface names, the vocabulary,
    the prompt templates and named float32 tensors (model parameters and precomputed item tables).
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    config: RunConfig
    catalog: list[str]
    names: list[str]
    vocab: list[str]
    templates: dict[int, tuple[str, str, str]]
    tensors: dict[str, np.ndarray]

    def state(self, prefix: str) -> dict[str, np.ndarray]:
        """Tensors under a dotted prefix, with the prefix removed."""
        start = f"{prefix}."
        return {name[len(start):]: value for name, value in self.tensors.items() if name.startswith(start)}


def _header(ckpt: Checkpoint) -> bytes:
    lines = [dump_config(ckpt.config)]
    extra = {"catalog": ckpt.catalog, "names": ckpt.names, "vocab": ckpt.vocab,
             "templates": {str(key): list(value) for key, value in sorted(ckpt.templates.items())}}
    for key in _JSON_KEYS:
        lines.append(f"{key}={json.dumps(extra[key], ensure_ascii=False, sort_keys=True)}\n")
    return "".join(lines).encode("utf-8")


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:

    """
    The save_checkpoint function writes the binary checkpoint:
    magic, u64 header length, key=value UTF-8 header, u32 tensor count, then per tensor
    u32 name length, UTF-8 name, u32 rank, u64 dims and float32 values, all little-endian.
    Tensors are written in name order so identical checkpoints produce identical bytes.

    :param ckpt: Checkpoint: What to save
    :param path: str | Path: Destination file
    """
    header = _header(ckpt)
    chunks = [MAGIC, struct.pack("<Q", len(header)), header, struct.pack("<I", len(ckpt.tensors))]
    for name in sorted(ckpt.tensors):
        values = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)) + encoded)
        chunks.append(struct.pack("<I", values.ndim) + struct.pack(f"<{values.ndim}Q", *values.shape))
        chunks.append(values.tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:

    def __init__(self, data: bytes, path: str):
        self.data = data
        self.offset = 0
        self.path = path

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise CheckpointFormatError(f"{self.path}: truncated checkpoint")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str | Path) -> Checkpoint:

    """
    The load_checkpoint function reads a file written by save_checkpoint.

    :param path: str | Path: The checkpoint file
    :return: The Checkpoint
    """
    try:
        data = Path(path).read_bytes()
    except OSError:
        raise MissingFileError(str(path)) from None
    reader = _Reader(data, str(path))
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic)")
    (header_size,) = reader.unpack("<Q")
    try:
        header = reader.take(header_size).decode("utf-8")
        pairs = parse_pairs(header, str(path))
        extra = {key: json.loads(value) for key, value, _ in pairs if key in _JSON_KEYS}
        config = validate_pairs(RunConfig, [pair for pair in pairs if pair[0] not in _JSON_KEYS], str(path))
    except (UnicodeDecodeError, json.JSONDecodeError, ConfigError) as err:
        raise CheckpointFormatError(f"{path}: corrupt header: {err}") from None
    missing = [key for key in _JSON_KEYS if key not in extra]
    if missing:
        raise CheckpointFormatError(f"{path}: header lacks {', '.join(missing)}")

    tensors = {}
    (count,) = reader.unpack("<I")
    for _ in range(count):
        (name_size,) = reader.unpack("<I")
        raw_name = reader.take(name_size)
        try:
            name = raw_name.decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointFormatError(f"{path}: tensor name is not valid UTF-8") from None
        (rank,) = reader.unpack("<I")
        shape = reader.unpack(f"<{rank}Q")
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(reader.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    if reader.offset != len(data):
        raise CheckpointFormatError(f"{path}: trailing bytes after the last tensor")
    templates = {int(key): tuple(value) for key, value in extra["templates"].items()}
    return Checkpoint(config=config, catalog=extra["catalog"], names=extra["names"], vocab=extra["vocab"],
                      templates=templates, tensors=tensors)
