"""Checkpoint container: text header plus raw little-endian float32 payload.

Layout:
    stlink-ckpt/1\n
    <config as one JSON line>\n
    <parameter count>\n
    <name>\t<dtype>\t<shape csv>\t<byte offset>\t<trainable 0|1>\n  (per param)
    DATA\n
    <concatenated float32 payloads in header order>
"""

from __future__ import annotations

import dataclasses
import json

import numpy as np

VERSION = "stlink-ckpt/1"


def save_checkpoint(path, model) -> None:
    config = dataclasses.asdict(model.config)
    params = model.parameters()
    header_lines = [VERSION, json.dumps(config, sort_keys=True), str(len(params))]
    offset = 0
    payloads = []
    for name, t in params.items():
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        shape_csv = ",".join(str(n) for n in arr.shape)
        header_lines.append(
            f"{name}\t<f4\t{shape_csv}\t{offset}\t{1 if t.requires_grad else 0}")
        payloads.append(arr.tobytes())
        offset += len(payloads[-1])
    header_lines.append("DATA")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header_lines) + "\n").encode("utf-8"))
        for blob in payloads:
            fh.write(blob)


def load_checkpoint(path):
    """Returns (config dict, name -> float32 array, name -> trainable flag)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    marker = b"DATA\n"
    cut = raw.find(marker)
    if cut < 0:
        raise ValueError("corrupt checkpoint: no DATA marker")
    header = raw[:cut].decode("utf-8").splitlines()
    payload = raw[cut + len(marker):]
    if not header or header[0] != VERSION:
        raise ValueError(f"unsupported checkpoint version {header[0] if header else '<empty>'}")
    config = json.loads(header[1])
    count = int(header[2])
    entries = header[3:3 + count]
    if len(entries) != count:
        raise ValueError(f"corrupt checkpoint: {len(entries)} entries, header says {count}")
    arrays = {}
    trainable = {}
    for line in entries:
        name, dtype, shape_csv, offset, flag = line.split("\t")
        shape = tuple(int(n) for n in shape_csv.split(",")) if shape_csv else ()
        n_bytes = int(np.prod(shape, dtype=np.int64)) * 4
        start = int(offset)
        arr = np.frombuffer(payload[start:start + n_bytes], dtype=dtype).reshape(shape)
        arrays[name] = arr.copy()
        trainable[name] = flag == "1"
    return config, arrays, trainable


def restore_model(path):
    """Rebuild a Model from a checkpoint file."""
    from .model import Model, ModelConfig

    config, arrays, trainable = load_checkpoint(path)
    model = Model(ModelConfig(**config), np.random.default_rng(config["seed"]))
    params = model.parameters()
    if set(params) != set(arrays):
        missing = set(params) ^ set(arrays)
        raise ValueError(f"checkpoint parameter set mismatch: {sorted(missing)}")
    for name, t in params.items():
        stored = arrays[name].astype(t.data.dtype)
        if stored.shape != t.data.shape:
            raise ValueError(
                f"shape mismatch for {name}: checkpoint {stored.shape}, model {t.data.shape}")
        t.data[...] = stored
        t.requires_grad = trainable[name]
    return model
