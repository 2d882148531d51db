"""
Binary checkpoint format.

    magic    8 bytes  b"DETNETV1"
    length   8 bytes  little-endian unsigned header length
    header   JSON     {"version", "config", "seed", "tensors": [{"name", "shape", "dtype", "offset"}]}
    payload  raw little-endian tensor data in header order
"""
import json
import logging
import os
import struct

import numpy as np

from src.model.config import ModelConfig
from src.model.network import build_model
from src.tensor.core import Tensor
from src.utils.config import from_dict, to_plain
from src.utils.errors import CheckpointError, ConfigError

logger = logging.getLogger(__name__)

MAGIC = b"DETNETV1"
VERSION = 1


def save_checkpoint(model, path):
    """Writes every tensor of the model (running statistics included) with its config."""
    entries, chunks, offset = [], [], 0
    for name, tensor in model.state().items():
        array = np.ascontiguousarray(tensor.data, dtype=tensor.dtype.newbyteorder("<"))
        entries.append({"name": name, "shape": list(array.shape), "dtype": array.dtype.str, "offset": offset})
        chunks.append(array.tobytes())
        offset += array.nbytes
    header = json.dumps({"version": VERSION, "config": to_plain(model.cfg), "seed": model.seed, "tensors": entries},
                        sort_keys=True).encode("utf-8")
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for chunk in chunks:
            f.write(chunk)
    logger.info("checkpoint written: %s (%d tensors, %d bytes)", path, len(entries), offset)
    return path


def read_header(path):
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}, not a detnet checkpoint")
        raw_length = f.read(8)
        if len(raw_length) != 8:
            raise CheckpointError(f"{path}: truncated header")
        (length,) = struct.unpack("<Q", raw_length)
        try:
            header = json.loads(f.read(length).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"{path}: unreadable header ({e})") from e
        payload = f.read()
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    return header, payload


def load_checkpoint(path, config=None):
    """
    Rebuilds a model from a checkpoint.

    Args:
        path (str): Checkpoint file.
        config (ModelConfig, optional): Expected configuration. Tensors whose shapes
            differ from the ones it implies raise CheckpointError naming the layer.

    Returns:
        DetNet
    """
    header, payload = read_header(path)
    if config is None:
        try:
            config = from_dict(ModelConfig, header["config"])
        except ConfigError as e:
            raise CheckpointError(f"{path}: stored model config is invalid ({e})") from e
    model = build_model(config)
    expected = model.state()
    stored = {entry["name"]: entry for entry in header["tensors"]}

    missing = sorted(set(expected) - set(stored))
    if missing:
        raise CheckpointError(f"{path}: checkpoint lacks tensors for {', '.join(missing)}")
    updates = {}
    for name, tensor in expected.items():
        entry = stored[name]
        if tuple(entry["shape"]) != tensor.shape:
            layer = name.rsplit(".", 1)[0]
            raise CheckpointError(
                f"{path}: shape mismatch in layer {layer}: {name} is {tuple(entry['shape'])} in the checkpoint, "
                f"model expects {tensor.shape}"
            )
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"]))
        end = entry["offset"] + count * dtype.itemsize
        if end > len(payload):
            raise CheckpointError(f"{path}: payload truncated at {name}")
        array = np.frombuffer(payload, dtype=dtype, count=count, offset=entry["offset"]).reshape(entry["shape"])
        updates[name] = Tensor.wrap(array.astype(dtype.newbyteorder("="), copy=True))
    unexpected = sorted(set(stored) - set(expected))
    if unexpected:
        raise CheckpointError(f"{path}: checkpoint has tensors the model does not: {', '.join(unexpected)}")
    model.update(updates)
    model.seed = header.get("seed")
    return model
