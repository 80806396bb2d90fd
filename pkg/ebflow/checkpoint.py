"""Binary checkpoint format.

Layout: the magic ``EBFLOW1``, a little-endian uint64 header length, a
JSON header (layer manifest plus tensor table), then every tensor as
contiguous little-endian float64. A sidecar ``<file>.manifest.txt``
records the MaP split, the prior and the seed.
"""

import hashlib
import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from ebflow.errors import CheckpointError
from ebflow.flow import FlowModel
from ebflow.layers import layer_from_config

logger = logging.getLogger(__name__)

MAGIC = b"EBFLOW1"
FORMAT_VERSION = 1


def manifest_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.txt")


def save_checkpoint(
    model: FlowModel,
    path: Union[str, Path],
    seed: Optional[int] = None,
    parameters: Optional[Dict[str, np.ndarray]] = None,
) -> Path:
    """Write ``model`` (or ``model`` at ``parameters``) to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    values = parameters if parameters is not None else model.parameter_arrays()

    layers = []
    for index, entry in enumerate(model.layer_manifest()):
        names = [f"layers.{index}.{name}" for name in model.layers[index].params]
        layers.append({**entry, "tensors": names})

    table = []
    blobs = []
    offset = 0
    for name in model.parameters():
        array = np.ascontiguousarray(values[name], dtype="<f8")
        table.append({"name": name, "shape": list(array.shape), "offset": offset})
        blobs.append(array.tobytes())
        offset += array.nbytes

    header = json.dumps(
        {"version": FORMAT_VERSION, "dim": model.dim, "map_k": model.map_k, "layers": layers, "tensors": table}
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)

    sidecar = manifest_path(path)
    sidecar.write_text(f"map_k={model.map_k}\nprior={model.prior}\nseed={'' if seed is None else seed}\n")
    logger.info(f"Saved checkpoint to {path}")
    return path


def read_manifest(path: Union[str, Path]) -> Dict[str, str]:
    sidecar = manifest_path(path)
    if not sidecar.exists():
        return {}
    entries = {}
    for line in sidecar.read_text().splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            entries[key.strip()] = value.strip()
    return entries


def load_checkpoint(path: Union[str, Path]) -> Tuple[FlowModel, Dict[str, Any]]:
    """Rebuild a model; returns it with the decoded header and sidecar entries."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path} is not an ebflow checkpoint (bad magic)")
    cursor = len(MAGIC)
    try:
        (header_len,) = struct.unpack_from("<Q", raw, cursor)
        cursor += 8
        header = json.loads(raw[cursor : cursor + header_len].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header ({e})") from e
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('version')}")
    data_start = cursor + header_len

    arrays = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = data_start + entry["offset"]
        if start + 8 * count > len(raw):
            raise CheckpointError(f"{path}: truncated tensor '{entry['name']}'")
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=start).reshape(entry["shape"])

    layers = []
    for index, entry in enumerate(header["layers"]):
        prefix = f"layers.{index}."
        params = {name[len(prefix) :]: arrays[name].copy() for name in entry["tensors"]}
        layers.append(layer_from_config(entry["kind"], entry["config"], params))

    sidecar = read_manifest(path)
    map_k = int(sidecar.get("map_k", header.get("map_k", 0)))
    model = FlowModel(layers, map_k=map_k)
    logger.info(f"Loaded checkpoint {path} ({len(layers)} layers, dim {model.dim})")
    return model, {"header": header, "manifest": sidecar}


def checkpoint_digest(path: Union[str, Path]) -> str:
    """sha256 of the checkpoint bytes."""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
