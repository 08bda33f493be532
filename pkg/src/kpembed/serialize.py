"""Binary tensor records, dataset files, and checkpoints.

Tensor record layout (little-endian throughout):

    magic   4 bytes  b"KAET"
    version u32      currently 1
    dtype   u8       0=float64, 1=float32, 2=int64, 3=uint8
    rank    u8
    dims    rank x u64
    payload row-major little-endian array data
    crc     u32      CRC32 of every preceding byte of the record

A dataset is a directory holding ``manifest.json`` plus ``samples.bin``
with one image record per sample at the offset listed in the manifest. A
checkpoint is a single file: magic b"KAEC", u32 version, u64 JSON length,
a JSON header naming every array, then the arrays as tensor records in
header order. Loading validates names strictly in both directions.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .heatmaps import KeypointAnnotation
from .data import Dataset, Sample
from .model import KeypointEmbeddingNet, ModelConfig

__all__ = [
    "write_tensor_record",
    "read_tensor_record",
    "save_dataset",
    "load_dataset",
    "save_checkpoint",
    "load_checkpoint",
    "apply_checkpoint",
    "model_config_to_dict",
    "model_config_from_dict",
]

TENSOR_MAGIC = b"KAET"
TENSOR_VERSION = 1
CHECKPOINT_MAGIC = b"KAEC"
CHECKPOINT_VERSION = 1
MANIFEST_VERSION = 1

_DTYPE_CODES = {
    np.dtype("<f8"): 0,
    np.dtype("<f4"): 1,
    np.dtype("<i8"): 2,
    np.dtype("u1"): 3,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def write_tensor_record(fh, arr: np.ndarray) -> int:
    """Append one tensor record; returns the record's start offset."""
    arr = np.ascontiguousarray(arr)
    dtype = arr.dtype.newbyteorder("<")
    if dtype not in _DTYPE_CODES:
        raise ConfigError(f"unsupported tensor dtype {arr.dtype}")
    offset = fh.tell()
    header = TENSOR_MAGIC + struct.pack("<I", TENSOR_VERSION)
    header += struct.pack("<BB", _DTYPE_CODES[dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = arr.astype(dtype, copy=False).tobytes()
    crc = zlib.crc32(payload, zlib.crc32(header))
    fh.write(header)
    fh.write(payload)
    fh.write(struct.pack("<I", crc))
    return offset


def _read_exact(fh, n: int, what: str, offset: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated file: expected {n} bytes of {what} at offset {offset}")
    return data


def read_tensor_record(fh) -> np.ndarray:
    """Read one tensor record from the current position, verifying the CRC."""
    offset = fh.tell()
    magic = _read_exact(fh, 4, "magic", offset)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r} at offset {offset}")
    head = _read_exact(fh, 6, "header", offset)
    (version,) = struct.unpack("<I", head[:4])
    if version != TENSOR_VERSION:
        raise FormatError(f"unsupported tensor record version {version} at offset {offset}")
    code, rank = struct.unpack("<BB", head[4:6])
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code} at offset {offset}")
    dims_raw = _read_exact(fh, 8 * rank, "dims", offset)
    dims = struct.unpack(f"<{rank}Q", dims_raw)
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = _read_exact(fh, count * dtype.itemsize, "payload", offset)
    (crc_stored,) = struct.unpack("<I", _read_exact(fh, 4, "crc", offset))
    crc = zlib.crc32(payload, zlib.crc32(magic + head + dims_raw))
    if crc != crc_stored:
        raise FormatError(f"CRC mismatch in tensor record at offset {offset}")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


# -- datasets --------------------------------------------------------------


def save_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    records = []
    with open(path / "samples.bin", "wb") as fh:
        for s in ds.samples:
            offset = write_tensor_record(fh, s.image)
            records.append(
                {
                    "offset": offset,
                    "class": s.class_id,
                    "identity": s.identity_id,
                    "camera": s.camera_id,
                    "split": s.split,
                    "keypoints": [[kp.x, kp.y, bool(kp.visible)] for kp in s.keypoints],
                }
            )
    manifest = {
        "version": MANIFEST_VERSION,
        "mode": ds.mode,
        "keypoint_names": ds.keypoint_names,
        "image_size": list(ds.image_size),
        "cameras": ds.num_cameras,
        "samples": records,
    }
    with open(path / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)


def load_dataset(path) -> Dataset:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("version") != MANIFEST_VERSION:
        raise FormatError(
            f"unsupported manifest version {manifest.get('version')} in {manifest_path}"
        )
    ds = Dataset(
        keypoint_names=list(manifest["keypoint_names"]),
        image_size=tuple(manifest["image_size"]),
        num_cameras=int(manifest["cameras"]),
        mode=manifest["mode"],
        samples=[],
    )
    with open(path / "samples.bin", "rb") as fh:
        for rec in manifest["samples"]:
            fh.seek(rec["offset"])
            image = read_tensor_record(fh)
            ds.samples.append(
                Sample(
                    image=image,
                    class_id=int(rec["class"]),
                    identity_id=int(rec["identity"]),
                    camera_id=int(rec["camera"]),
                    keypoints=[
                        KeypointAnnotation(float(x), float(y), bool(v))
                        for x, y, v in rec["keypoints"]
                    ],
                    split=rec["split"],
                )
            )
    return ds


# -- model configs in JSON ---------------------------------------------------


def model_config_to_dict(cfg: ModelConfig) -> dict:
    return {
        "keypoint_names": list(cfg.keypoint_names),
        "num_classes": cfg.num_classes,
        "input_size": list(cfg.input_size),
        "backbone_channels": list(cfg.backbone_channels),
        "reduction": cfg.reduction,
        "heatmap_size": list(cfg.heatmap_size),
        "variant": cfg.variant,
        "bn_momentum": cfg.bn_momentum,
        "bn_epsilon": cfg.bn_epsilon,
        "dtype": cfg.dtype,
    }


def model_config_from_dict(d: dict) -> ModelConfig:
    return ModelConfig(
        keypoint_names=list(d["keypoint_names"]),
        num_classes=int(d["num_classes"]),
        input_size=tuple(d["input_size"]),
        backbone_channels=tuple(d["backbone_channels"]),
        reduction=int(d["reduction"]),
        heatmap_size=tuple(d["heatmap_size"]),
        variant=d.get("variant", "full"),
        bn_momentum=float(d.get("bn_momentum", 0.1)),
        bn_epsilon=float(d.get("bn_epsilon", 1e-5)),
        dtype=d.get("dtype", "float64"),
    )


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(
    path,
    model: KeypointEmbeddingNet,
    optimizer_state: dict | None = None,
    progress: dict | None = None,
    extras: dict[str, np.ndarray] | None = None,
) -> None:
    """Write parameters, batch-norm buffers, and optional optimizer moments.

    ``extras`` holds auxiliary arrays that are not model parameters (for
    example the temporary backbone head while stage 1 is in flight).
    """
    param_names = model.store.names()
    buffer_names = sorted(model.buffers)
    header = {
        "model_config": model_config_to_dict(model.cfg),
        "params": param_names,
        "buffers": buffer_names,
        "optimizer": None,
        "progress": progress,
        "extras": sorted(extras) if extras else [],
    }
    if optimizer_state is not None:
        header["optimizer"] = {
            "step": int(optimizer_state["step"]),
            "names": sorted(optimizer_state["m"]),
        }
    body = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(body)))
        fh.write(body)
        for name in param_names:
            write_tensor_record(fh, model.store[name].data)
        for name in buffer_names:
            write_tensor_record(fh, model.buffers[name].running_mean)
            write_tensor_record(fh, model.buffers[name].running_var)
        if optimizer_state is not None:
            for name in header["optimizer"]["names"]:
                write_tensor_record(fh, optimizer_state["m"][name])
                write_tensor_record(fh, optimizer_state["v"][name])
        for name in header["extras"]:
            write_tensor_record(fh, extras[name])


def load_checkpoint(path) -> dict:
    """Read a checkpoint into plain dicts (params, buffers, optimizer, meta)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic", 0)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r} at offset 0")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version", 4))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (json_len,) = struct.unpack("<Q", _read_exact(fh, 8, "header length", 8))
        header = json.loads(_read_exact(fh, json_len, "header", 16).decode())
        params = {name: read_tensor_record(fh) for name in header["params"]}
        buffers = {}
        for name in header["buffers"]:
            mean = read_tensor_record(fh)
            var = read_tensor_record(fh)
            buffers[name] = (mean, var)
        optimizer = None
        if header["optimizer"] is not None:
            m, v = {}, {}
            for name in header["optimizer"]["names"]:
                m[name] = read_tensor_record(fh)
                v[name] = read_tensor_record(fh)
            optimizer = {"step": header["optimizer"]["step"], "m": m, "v": v}
        extras = {name: read_tensor_record(fh) for name in header.get("extras", [])}
    return {
        "model_config": header["model_config"],
        "params": params,
        "buffers": buffers,
        "optimizer": optimizer,
        "progress": header["progress"],
        "extras": extras,
    }


def apply_checkpoint(model: KeypointEmbeddingNet, ckpt: dict) -> None:
    """Load checkpoint arrays into a model, validating names strictly."""
    expected = set(model.store.names())
    got = set(ckpt["params"])
    extra = sorted(got - expected)
    missing = sorted(expected - got)
    if extra or missing:
        raise ConfigError(
            f"checkpoint parameter names do not match the model: "
            f"extra {extra}, missing {missing}"
        )
    expected_buf = set(model.buffers)
    got_buf = set(ckpt["buffers"])
    if expected_buf != got_buf:
        raise ConfigError(
            f"checkpoint buffer names do not match the model: "
            f"extra {sorted(got_buf - expected_buf)}, missing {sorted(expected_buf - got_buf)}"
        )
    for name, arr in ckpt["params"].items():
        tensor = model.store[name]
        if tensor.data.shape != arr.shape:
            raise ConfigError(
                f"checkpoint parameter {name} has shape {arr.shape}, "
                f"model expects {tensor.data.shape}"
            )
        tensor.data = arr.astype(tensor.data.dtype, copy=True)
    for name, (mean, var) in ckpt["buffers"].items():
        state = model.buffers[name]
        state.running_mean = mean.astype(state.running_mean.dtype, copy=True)
        state.running_var = var.astype(state.running_var.dtype, copy=True)
