"""Binary containers.

Both formats share the framing::

    magic (4 bytes) | version u16 LE | header_len u32 LE | UTF-8 JSON header | payload

``SAMD`` holds a dataset as float32 (NaN = missing voxel); ``SAMM`` holds a
model checkpoint as named float64 arrays whose offsets and shapes are listed
in the header.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from shapeapp.core import Grid, HyperParams, ImageDataset, ModelState

DATASET_MAGIC = b"SAMD"
MODEL_MAGIC = b"SAMM"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")

MODEL_ARRAYS = ("mu", "W_a", "W_v", "A_hat", "sigma2")


class FormatError(ValueError):
    pass


def _dump_header(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _frame(magic: bytes, header: dict, payload: bytes) -> bytes:
    h = _dump_header(header)
    return _PREFIX.pack(magic, VERSION, len(h)) + h + payload


def _unframe(data: bytes, magic: bytes):
    if len(data) < _PREFIX.size:
        raise FormatError("file too short")
    got, version, hlen = _PREFIX.unpack_from(data)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    start = _PREFIX.size
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt header: {exc}") from None
    return header, data[start + hlen:]


def dataset_to_bytes(ds: ImageDataset) -> bytes:
    header = {
        "dims": list(ds.grid.dims),
        "n": ds.n_images,
        "channels": ds.n_channels,
        "kind": ds.kind,
    }
    return _frame(DATASET_MAGIC, header, ds.values.astype("<f4").tobytes(order="C"))


def dataset_from_bytes(data: bytes) -> ImageDataset:
    header, payload = _unframe(data, DATASET_MAGIC)
    try:
        dims = tuple(header["dims"])
        n, c, kind = int(header["n"]), int(header["channels"]), header["kind"]
    except KeyError as exc:
        raise FormatError(f"dataset header lacks {exc}") from None
    shape = (n, c) + dims
    expected = 4 * int(np.prod(shape))
    if len(payload) != expected:
        raise FormatError(f"payload has {len(payload)} bytes, expected {expected}")
    values = np.frombuffer(payload, dtype="<f4").reshape(shape)
    return ImageDataset(Grid(dims), values, kind)


def save_dataset(path, ds: ImageDataset) -> None:
    with open(path, "wb") as fh:
        fh.write(dataset_to_bytes(ds))


def load_dataset(path) -> ImageDataset:
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())


def _pack_arrays(arrays: dict):
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    return entries, b"".join(chunks)


def _unpack_arrays(entries, payload: bytes) -> dict:
    out = {}
    for e in entries:
        shape = tuple(e["shape"])
        count = int(np.prod(shape))
        start = int(e["offset"])
        if start + 8 * count > len(payload):
            raise FormatError(f"array {e['name']} runs past the payload")
        out[e["name"]] = np.frombuffer(payload, dtype="<f8", count=count, offset=start).reshape(shape).copy()
    return out


def model_to_bytes(model: ModelState) -> bytes:
    entries, payload = _pack_arrays({name: getattr(model, name) for name in MODEL_ARRAYS})
    header = {"arrays": entries, "dims": list(model.grid.dims), "hyper": model.hyper.to_json()}
    return _frame(MODEL_MAGIC, header, payload)


def model_from_bytes(data: bytes) -> ModelState:
    header, payload = _unframe(data, MODEL_MAGIC)
    try:
        arrays = _unpack_arrays(header["arrays"], payload)
        hyper = HyperParams.from_json(header["hyper"])
        return ModelState(hyper=hyper, **{name: arrays[name] for name in MODEL_ARRAYS})
    except KeyError as exc:
        raise FormatError(f"model file lacks {exc}") from None


def save_model(path, model: ModelState) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path) -> ModelState:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())


def features_to_bytes(Z: np.ndarray, hessian_diag: np.ndarray) -> bytes:
    """Latent features per image: channel 0 holds z, channel 1 the Hessian diagonal."""
    Z = np.asarray(Z, dtype=float)
    K, N = Z.shape
    values = np.stack([Z.T, np.asarray(hessian_diag, dtype=float).T], axis=1)
    header = {"dims": [K], "n": N, "channels": 2, "kind": "features"}
    return _frame(DATASET_MAGIC, header, values.astype("<f4").tobytes())


def features_from_bytes(data: bytes):
    header, payload = _unframe(data, DATASET_MAGIC)
    if header.get("kind") != "features":
        raise FormatError("not a feature container")
    K, N = header["dims"][0], header["n"]
    values = np.frombuffer(payload, dtype="<f4").reshape(N, 2, K)
    return values[:, 0].T.astype(float), values[:, 1].T.astype(float)
