"""Binary checkpoints: named float64 tensors plus a JSON config block.

Layout: magic, config JSON (length-prefixed) and its SHA-256, then a
tensor count followed by name/shape/float64 payload per tensor. The
hash is verified on load, so silent corruption of the config block is
impossible; truncation anywhere raises.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

CHECKPOINT_MAGIC = b"MDCK1"


def save_checkpoint(path, state: dict[str, np.ndarray], config: dict) -> None:
    config_bytes = json.dumps(config, sort_keys=True,
                              separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(config_bytes)))
        fh.write(config_bytes)
        fh.write(hashlib.sha256(config_bytes).digest())
        fh.write(struct.pack("<I", len(state)))
        for name, values in state.items():
            encoded = name.encode("utf-8")
            arr = np.asarray(values, dtype="<f8")  # tobytes() emits C order
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
        (config_len,) = struct.unpack("<I", _read(fh, 4, path))
        config_bytes = _read(fh, config_len, path)
        digest = _read(fh, 32, path)
        if hashlib.sha256(config_bytes).digest() != digest:
            raise CheckpointError(f"{path}: config block fails its hash")
        try:
            config = json.loads(config_bytes.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: config block unreadable: {exc}") from None
        (count,) = struct.unpack("<I", _read(fh, 4, path))
        state: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read(fh, 2, path))
            name = _read(fh, name_len, path).decode("utf-8")
            (ndim,) = struct.unpack("<B", _read(fh, 1, path))
            shape = struct.unpack(f"<{ndim}I", _read(fh, 4 * ndim, path))
            numel = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            payload = _read(fh, 8 * numel, path)
            state[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after last tensor")
    return state, config


def _read(fh, n: int, path) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"{path}: truncated checkpoint")
    return data


def save_model(path, model, caption_vocab, speech_vocab=None,
               extra: dict | None = None) -> None:
    """Persist a model plus everything needed to rebuild and decode it."""
    config = {
        "model": model.config.to_dict(),
        "caption_vocab": caption_vocab.to_list(),
        "speech_vocab": None if speech_vocab is None else speech_vocab.to_list(),
        "extra": extra or {},
    }
    save_checkpoint(path, model.state_dict(), config)


def load_model(path):
    """Rebuild a saved model; returns (model, caption_vocab, speech_vocab, extra)."""
    from .data import Vocabulary
    from .model import CaptioningModel, ModelConfig

    state, config = load_checkpoint(path)
    try:
        model_cfg = ModelConfig.from_dict(config["model"])
        caption_vocab = Vocabulary.from_list(config["caption_vocab"])
        speech_raw = config["speech_vocab"]
        extra = config.get("extra", {})
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: config block incomplete: {exc}") from None
    speech_vocab = None if speech_raw is None else Vocabulary.from_list(speech_raw)
    model = CaptioningModel(model_cfg, seed=0)
    model.load_state_dict(state)
    return model, caption_vocab, speech_vocab, extra
