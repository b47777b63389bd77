"""Versioned binary checkpoint container.

A ``.ckpt`` file is a ZIP archive (stored, not compressed) holding a
``meta.json`` with format version, kind, config echo, free-form extra fields,
and an array directory; each array lives under ``arrays/<name>`` as raw
little-endian bytes. Writing is atomic (temp file + rename) and byte
deterministic: fixed member order, fixed timestamps, sorted JSON keys.
"""

from __future__ import annotations

import io
import json
import os
import zipfile
from pathlib import Path

import numpy as np

from .errors import DataError

FORMAT_VERSION = 1

_DTYPES = {
    "float32": np.dtype("<f4"),
    "float64": np.dtype("<f8"),
    "int64": np.dtype("<i8"),
    "uint8": np.dtype("|u1"),
}

# Fixed ZIP member timestamp so identical payloads give identical bytes.
_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_checkpoint(
    path: Path | str,
    kind: str,
    arrays: dict[str, np.ndarray],
    config: dict | None = None,
    extra: dict | None = None,
) -> None:
    """Write a checkpoint atomically; replaces any existing file at ``path``."""
    path = Path(path)
    meta_arrays = []
    blobs: list[tuple[str, bytes]] = []
    for name in sorted(arrays):
        arr = arrays[name]
        dtype_name = arr.dtype.name
        if dtype_name not in _DTYPES:
            raise DataError(f"array {name!r}: unsupported dtype {dtype_name}")
        out = np.ascontiguousarray(arr, dtype=_DTYPES[dtype_name])
        meta_arrays.append(
            {"name": name, "shape": list(arr.shape), "dtype": dtype_name}
        )
        blobs.append((f"arrays/{name}", out.tobytes()))
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config or {},
        "extra": extra or {},
        "arrays": meta_arrays,
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("meta.json", date_time=_EPOCH)
        zf.writestr(info, json.dumps(meta, indent=2, sort_keys=True))
        for member, data in blobs:
            info = zipfile.ZipInfo(member, date_time=_EPOCH)
            zf.writestr(info, data)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(
    path: Path | str, expect_kind: str | None = None
) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint; returns (meta, arrays by name)."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            if meta.get("format_version") != FORMAT_VERSION:
                raise DataError(
                    f"checkpoint {path}: unsupported format version "
                    f"{meta.get('format_version')!r}"
                )
            arrays: dict[str, np.ndarray] = {}
            for spec in meta.get("arrays", []):
                name = spec["name"]
                dtype = _DTYPES.get(spec["dtype"])
                if dtype is None:
                    raise DataError(
                        f"checkpoint {path}: array {name!r} has unsupported "
                        f"dtype {spec['dtype']!r}"
                    )
                shape = tuple(spec["shape"])
                data = zf.read(f"arrays/{name}")
                expected = int(np.prod(shape)) * dtype.itemsize
                if len(data) != expected:
                    raise DataError(
                        f"checkpoint {path}: array {name!r} has {len(data)} "
                        f"bytes, expected {expected}"
                    )
                arrays[name] = np.frombuffer(data, dtype=dtype).reshape(shape).copy()
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as e:
        raise DataError(f"checkpoint {path} is corrupt or not a checkpoint: {e}") from e
    if expect_kind is not None and meta.get("kind") != expect_kind:
        raise DataError(
            f"checkpoint {path} has kind {meta.get('kind')!r}, expected {expect_kind!r}"
        )
    return meta, arrays


def state_dict_to_arrays(state_dict: dict) -> dict[str, np.ndarray]:
    """Convert a torch state dict to float32 numpy arrays, checking finiteness."""
    arrays: dict[str, np.ndarray] = {}
    for name, tensor in state_dict.items():
        arr = tensor.detach().cpu().numpy().astype(np.float32)
        if not np.isfinite(arr).all():
            raise DataError(f"state dict entry {name!r} has non-finite values")
        arrays[name] = arr
    return arrays


def arrays_to_state_dict(arrays: dict[str, np.ndarray], reference: dict) -> dict:
    """Match saved arrays against a module's state dict, restoring shapes/dtypes."""
    import torch

    out = {}
    missing = [k for k in reference if k not in arrays]
    extra = [k for k in arrays if k not in reference]
    if missing or extra:
        raise DataError(
            f"checkpoint weights do not match model: missing {missing}, unexpected {extra}"
        )
    for name, ref in reference.items():
        arr = arrays[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise DataError(
                f"weight {name!r}: saved shape {tuple(arr.shape)} != model shape "
                f"{tuple(ref.shape)}"
            )
        out[name] = torch.from_numpy(arr).to(ref.dtype)
    return out
