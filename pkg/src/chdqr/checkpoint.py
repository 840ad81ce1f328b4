"""Model checkpoints, calibration artifacts and atomic file writes.

Checkpoint layout::

    b"CHDQRCK1"                      8 magic bytes
    <uint64 little-endian>           length H of the header in bytes
    <H bytes of UTF-8 JSON>          header, keys sorted
    <float64 little-endian payload>  tensors back to back, row-major

The header's ``fields`` list is the manifest: one ``{"name", "shape",
"offset"}`` entry per tensor, with ``offset`` counted in float64 elements
from the start of the payload.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .baselines import CQRCalibration, CQRModel
from .conformal import CalibrationResult, DensityRegressor
from .errors import DataError
from .geometry import BoundingBox
from .network import DensityNetwork
from .quantizer import PrototypeSet

MAGIC = b"CHDQRCK1"
FORMAT_VERSION = 1
_LE_F64 = np.dtype("<f8")


def atomic_write(path, data) -> Path:
    """Write ``data`` (str or bytes) to a temp file beside ``path``, then rename over it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _pack(header: dict, tensors: dict[str, np.ndarray]) -> bytes:
    fields, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype=_LE_F64)
        fields.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes(order="C"))
        offset += a.size
    header = dict(header, fields=fields, format=FORMAT_VERSION)
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(blob)) + blob + b"".join(chunks)


def _unpack(raw: bytes, source) -> tuple[dict, dict[str, np.ndarray]]:
    if raw[:8] != MAGIC:
        raise DataError(f"{source}: not a checkpoint (bad magic bytes)")
    if len(raw) < 16:
        raise DataError(f"{source}: truncated checkpoint header")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{source}: unreadable checkpoint header: {e}") from None
    if header.get("format") != FORMAT_VERSION:
        raise DataError(f"{source}: unsupported checkpoint format {header.get('format')!r}")
    payload = np.frombuffer(raw[16 + hlen:], dtype=_LE_F64)
    tensors = {}
    for f in header["fields"]:
        size = int(np.prod(f["shape"], dtype=np.int64))
        start = int(f["offset"])
        if start + size > payload.size:
            raise DataError(f"{source}: payload too short for field {f['name']!r}")
        tensors[f["name"]] = payload[start:start + size].reshape(f["shape"]).astype(float)
    return header, tensors


def _net_header(net: DensityNetwork) -> dict:
    return {"input_dim": net.input_dim, "hidden_sizes": list(net.hidden_sizes),
            "n_outputs": net.n_outputs}


def _net_from(header: dict, tensors: dict) -> DensityNetwork:
    net = object.__new__(DensityNetwork)
    net.input_dim = int(header["input_dim"])
    net.hidden_sizes = [int(h) for h in header["hidden_sizes"]]
    net.set_params(tensors)
    return net


def checkpoint_bytes(model, config: dict | None = None, config_hash: str = "") -> bytes:
    """Serialise a DensityRegressor or CQRModel."""
    if isinstance(model, DensityRegressor):
        header = {"kind": "density", "method": model.method, "K": model.K,
                  "dim": model.protos.dim, "box": model.box.to_dict(),
                  "learnable": bool(model.protos.learnable)}
        tensors = dict(model.net.params())
        tensors.update(prototypes=model.protos.coords, areas=model.areas,
                       feature_mean=model.feature_mean, feature_std=model.feature_std)
    elif isinstance(model, CQRModel):
        header = {"kind": "cqr", "method": "cqr", "dim": model.dim, "alpha": model.alpha}
        tensors = dict(model.net.params())
        tensors.update(feature_mean=model.feature_mean, feature_std=model.feature_std,
                       target_mean=model.target_mean, target_std=model.target_std)
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    header.update(_net_header(model.net), config=config or {}, config_hash=config_hash)
    return _pack(header, tensors)


def save_checkpoint(path, model, config: dict | None = None, config_hash: str = "") -> Path:
    return atomic_write(path, checkpoint_bytes(model, config, config_hash))


def load_checkpoint(path):
    """Return ``(model, header)``; ``model`` is a DensityRegressor or a CQRModel."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from None
    header, t = _unpack(raw, path)
    net = _net_from(header, t)
    if header["kind"] == "density":
        box = BoundingBox.from_dict(header["box"])
        protos = PrototypeSet(t["prototypes"], box, bool(header.get("learnable", True)))
        model = DensityRegressor(net, protos, t["areas"], t["feature_mean"], t["feature_std"],
                                 header["method"])
        if model.K != header["K"] or net.n_outputs != model.K:
            raise DataError(f"{path}: head size {net.n_outputs} does not match K={header['K']}")
    elif header["kind"] == "cqr":
        model = CQRModel(net, float(header["alpha"]), t["feature_mean"], t["feature_std"],
                         t["target_mean"], t["target_std"])
    else:
        raise DataError(f"{path}: unknown checkpoint kind {header['kind']!r}")
    return model, header


def save_calibration(path, calib) -> Path:
    return atomic_write(path, dumps_json(calib.to_dict()))


def load_calibration(path):
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read calibration {path}: {e}") from None
    kind = d.get("kind")
    if kind == "density":
        return CalibrationResult.from_dict(d)
    if kind == "cqr":
        return CQRCalibration.from_dict(d)
    raise DataError(f"{path}: unknown calibration kind {kind!r}")
