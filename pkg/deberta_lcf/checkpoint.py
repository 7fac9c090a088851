"""
Versioned binary checkpoints.

Layout, all integers little-endian:

    b"LCFD" | u32 version | u32 len + model config text | u32 tensor count
    per tensor: u32 len + name | u32 rank | u64 dims[rank] | f64 data (row-major)
    u32 len + vocabulary text
"""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from .config import ModelConfig
from .data import Vocab
from .exceptions import CheckpointError, ConfigError, DatasetFormatError
from .model import DebertaLcfModel, build
from .utils import format_key_value_text, parse_key_value_text

logger = logging.getLogger(__name__)

MAGIC = b"LCFD"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model: DebertaLcfModel
    vocab: Vocab


def _model_config_text(config: ModelConfig) -> str:
    values = {}
    for key, value in config.model_dump().items():
        if isinstance(value, bool):
            values[key] = "true" if value else "false"
        elif isinstance(value, float):
            values[key] = repr(value)
        else:
            values[key] = str(value)
    return format_key_value_text(values)


def _pack_text(text: str) -> bytes:
    encoded = text.encode("utf-8")
    return struct.pack("<I", len(encoded)) + encoded


def encode_checkpoint(model: DebertaLcfModel, vocab: Vocab) -> bytes:
    if len(vocab) != model.config.vocab_size:
        raise CheckpointError(f"vocabulary has {len(vocab)} entries but the model expects {model.config.vocab_size}")

    params = model.named_parameters()
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION), _pack_text(_model_config_text(model.config))]
    chunks.append(struct.pack("<I", len(params)))
    for name, param in params.items():
        chunks.append(_pack_text(name))
        chunks.append(struct.pack("<I", param.ndim))
        chunks.append(struct.pack(f"<{param.ndim}Q", *param.shape))
        chunks.append(np.ascontiguousarray(param.data, dtype="<f8").tobytes())
    chunks.append(_pack_text(vocab.to_text()))
    return b"".join(chunks)


def save_checkpoint(model: DebertaLcfModel, vocab: Vocab, path: Path) -> None:
    Path(path).write_bytes(encode_checkpoint(model, vocab))
    logger.info(f"wrote checkpoint with {model.parameter_count()} parameters to {path}")


class _Reader:
    def __init__(self, payload: bytes) -> None:
        self.payload = payload
        self.offset = 0

    def take(self, size: int, field: str) -> bytes:
        end = self.offset + size
        if end > len(self.payload):
            raise CheckpointError(f"truncated checkpoint while reading {field} at byte {self.offset}")
        chunk = self.payload[self.offset : end]
        self.offset = end
        return chunk

    def u32(self, field: str) -> int:
        return int(struct.unpack("<I", self.take(4, field))[0])

    def text(self, field: str) -> str:
        raw = self.take(self.u32(f"{field} length"), field)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"{field} is not valid UTF-8") from exc


def _read_config(text: str) -> ModelConfig:
    try:
        return ModelConfig(**parse_key_value_text(text))
    except (ConfigError, ValidationError) as exc:
        raise CheckpointError(f"invalid model config in checkpoint: {exc}") from exc


def decode_checkpoint(payload: bytes, config: ModelConfig | None = None) -> Checkpoint:
    """
    Rebuild the model stored in `payload`.

    With `config` given, the tensors are loaded into a model built from it instead of the
    stored configuration; any tensor whose shape disagrees is a `CheckpointError`.
    """
    reader = _Reader(payload)
    magic = reader.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version = reader.u32("version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported version {version}, expected {FORMAT_VERSION}")

    stored_config = _read_config(reader.text("config"))
    model = build(config if config is not None else stored_config)
    params = model.named_parameters()

    count = reader.u32("tensor count")
    if count != len(params):
        raise CheckpointError(f"tensor count {count} does not match the {len(params)} model parameters")

    for _ in range(count):
        name = reader.text("tensor name")
        if name not in params:
            raise CheckpointError(f"unknown tensor name {name!r}")
        rank = reader.u32(f"{name} rank")
        shape = struct.unpack(f"<{rank}Q", reader.take(8 * rank, f"{name} shape"))
        if tuple(shape) != params[name].shape:
            raise CheckpointError(f"shape of {name}: stored {tuple(shape)}, model expects {params[name].shape}")
        size = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(reader.take(8 * size, f"{name} data"), dtype="<f8")
        params[name].data[...] = data.reshape(shape)

    try:
        vocab = Vocab.from_text(reader.text("vocabulary"))
    except DatasetFormatError as exc:
        raise CheckpointError(f"bad vocabulary block: {exc}") from exc
    if len(vocab) != model.config.vocab_size:
        raise CheckpointError(f"vocabulary has {len(vocab)} entries, model expects {model.config.vocab_size}")
    if reader.offset != len(payload):
        raise CheckpointError(f"{len(payload) - reader.offset} trailing bytes after the vocabulary")

    return Checkpoint(model, vocab)


def load_checkpoint(path: Path, config: ModelConfig | None = None) -> Checkpoint:
    checkpoint = decode_checkpoint(Path(path).read_bytes(), config)
    logger.info(f"loaded checkpoint from {path}")
    return checkpoint
