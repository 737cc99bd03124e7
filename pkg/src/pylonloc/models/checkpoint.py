"""Binary checkpoint format.

Layout (little-endian)::

    b"PYLN" | u32 version | u32 len + UTF-8 JSON config |
    u32 n_records | n_records x (u32 name_len, name, u8 dtype_tag, u32 ndim, ndim x u32 shape, raw values)
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from ..errors import ConfigurationError, IngestionError
from .pylon import CAMNet, EncoderConfig, PylonConfig, build_variant

MAGIC = b"PYLN"
VERSION = 1
DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
TAG_OF = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


def write_checkpoint(path: Union[str, Path], config: dict, tensors: Dict[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if arr.dtype not in TAG_OF:
            raise ConfigurationError(f"unsupported dtype {arr.dtype} for {name}")
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<BI", TAG_OF[arr.dtype], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=DTYPE_TAGS[TAG_OF[arr.dtype]]).tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path: Union[str, Path]) -> Tuple[dict, Dict[str, np.ndarray]]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IngestionError(f"cannot read checkpoint {path}: {exc}") from exc
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise IngestionError(f"truncated checkpoint {path}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise IngestionError(f"{path} is not a PYLN checkpoint")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise IngestionError(f"unsupported checkpoint version {version}")
    (clen,) = struct.unpack("<I", take(4))
    config = json.loads(bytes(take(clen)).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode("utf-8")
        tag, ndim = struct.unpack("<BI", take(5))
        if tag not in DTYPE_TAGS:
            raise IngestionError(f"unknown dtype tag {tag} for {name}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dtype = DTYPE_TAGS[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        tensors[name] = np.frombuffer(bytes(take(nbytes)), dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    return config, tensors


def save_model(model: CAMNet, path: Union[str, Path], extra: dict = None) -> None:
    config = model.config_dict()
    if extra:
        config["extra"] = extra
    write_checkpoint(path, config, model.state_dict())


def model_from_config(config: dict) -> CAMNet:
    enc = config["encoder"]
    enc_cfg = EncoderConfig(in_channels=enc["in_channels"], stage_channels=tuple(enc["stage_channels"]),
                            input_size=enc["input_size"])
    pylon_cfg = PylonConfig(**config["pylon"])
    return build_variant(config["kind"], enc_cfg, pylon_cfg, seed=config["seed"],
                         pad_mode=config["pad_mode"], dtype=np.dtype(config["dtype"]))


def load_model(path: Union[str, Path]) -> CAMNet:
    config, tensors = read_checkpoint(path)
    model = model_from_config(config)
    model.load_state_dict(tensors)
    return model
