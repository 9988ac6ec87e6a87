"""Flat binary checkpoints: a version header, a JSON config block, and named
float64 tensors.

Layout, all little-endian:

    magic     8 bytes   b"SQLSEQCK"
    version   u32
    config    u64 length + UTF-8 JSON (sorted keys, so bytes reproduce)
    n_tensors u32
    tensor    u16 name length + name, u8 ndim, u32 per dim, raw f64 data

Raw float64 bytes round-trip bit-exactly, and identical runs produce
identical files.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .models import ModelConfig, Seq2SeqModel
from .tensor import Adam, Tensor

MAGIC = b"SQLSEQCK"
VERSION = 1


class CheckpointError(RuntimeError):
    """Unreadable, truncated, or incompatible checkpoint file."""


def write_checkpoint(path, tensors: dict[str, np.ndarray], config: dict) -> None:
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            data = np.ascontiguousarray(arr, dtype="<f8")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", data.ndim))
            for dim in data.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(data.tobytes())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        raw = fh.read()

    def take(n, offset):
        if offset + n > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint")
        return raw[offset:offset + n], offset + n

    chunk, off = take(len(MAGIC), 0)
    if chunk != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    chunk, off = take(4, off)
    version = struct.unpack("<I", chunk)[0]
    if version != VERSION:
        raise CheckpointError(f"{path}: version {version}, expected {VERSION}")
    chunk, off = take(8, off)
    (blob_len,), = (struct.unpack("<Q", chunk),)
    chunk, off = take(blob_len, off)
    try:
        config = json.loads(chunk.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt config block: {exc}") from exc
    chunk, off = take(4, off)
    n_tensors = struct.unpack("<I", chunk)[0]
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        chunk, off = take(2, off)
        name_len = struct.unpack("<H", chunk)[0]
        chunk, off = take(name_len, off)
        name = chunk.decode("utf-8")
        chunk, off = take(1, off)
        ndim = struct.unpack("<B", chunk)[0]
        dims = []
        for _ in range(ndim):
            chunk, off = take(4, off)
            dims.append(struct.unpack("<I", chunk)[0])
        count = int(np.prod(dims)) if dims else 1
        chunk, off = take(8 * count, off)
        tensors[name] = np.frombuffer(chunk, dtype="<f8").reshape(dims).copy()
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return config, tensors


# ---------------------------------------------------------------------------
# Model-level wrappers
# ---------------------------------------------------------------------------


def save_model(model: Seq2SeqModel, path, meta: dict | None = None,
               optimizer: Adam | None = None) -> None:
    """Persist parameters (+ optimizer moments, so training can resume) and
    everything needed to rebuild the model."""
    config = {
        "kind": "seq2seq",
        "model": model.config.to_json(),
        "input_vocab_size": model.input_vocab_size,
        "target_vocab_size": model.target_vocab_size,
        "meta": meta or {},
    }
    tensors: dict[str, np.ndarray] = {name: p.values for name, p in model.params.items()}
    if optimizer is not None:
        any_state = next(iter(optimizer.states.values()), None)
        config["optimizer"] = {
            "t": any_state.t if any_state else 0,
            "lr": optimizer.lr,
            "beta1": any_state.beta1 if any_state else 0.9,
            "beta2": any_state.beta2 if any_state else 0.999,
            "eps": any_state.eps if any_state else 1e-8,
        }
        for name, state in optimizer.states.items():
            tensors[f"adam.m.{name}"] = state.m
            tensors[f"adam.v.{name}"] = state.v
    write_checkpoint(path, tensors, config)


def load_model(path) -> tuple[Seq2SeqModel, dict, Adam | None]:
    """Rebuild the model (and optimizer, if its state was saved) from disk."""
    config, tensors = read_checkpoint(path)
    if config.get("kind") != "seq2seq":
        raise CheckpointError(f"{path}: not a seq2seq checkpoint")
    model_cfg = ModelConfig.from_json(config["model"])
    model = Seq2SeqModel(model_cfg, config["input_vocab_size"],
                         config["target_vocab_size"])
    for name, p in model.params.items():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing parameter {name}")
        if tensors[name].shape != p.values.shape:
            raise CheckpointError(
                f"{path}: parameter {name} has shape {tensors[name].shape}, "
                f"expected {p.values.shape}")
        p.values[...] = tensors[name]
    optimizer = None
    if "optimizer" in config:
        opt_cfg = config["optimizer"]
        optimizer = Adam(model.params, lr=opt_cfg["lr"], beta1=opt_cfg["beta1"],
                         beta2=opt_cfg["beta2"], eps=opt_cfg["eps"])
        for name, state in optimizer.states.items():
            if f"adam.m.{name}" in tensors:
                state.m = tensors[f"adam.m.{name}"]
                state.v = tensors[f"adam.v.{name}"]
                state.t = int(opt_cfg["t"])
    return model, config.get("meta", {}), optimizer


# Spec-surface aliases.
save_checkpoint = save_model


def load_checkpoint(path) -> Seq2SeqModel:
    return load_model(path)[0]
