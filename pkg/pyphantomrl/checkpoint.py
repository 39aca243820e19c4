"""Versioned binary checkpoint container.

Layout::

    b"CXRL" | version u32 LE | header length u32 LE | JSON header | payload

The header lists every tensor (name, shape, offset, nbytes), the config
snapshot, free-form metadata and the sha256 of the payload. The payload is
raw little-endian float32.
"""

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

import numpy as np
import torch

from .config import Config
from .constants import CheckpointFormat
from .exceptions import (
    ArtifactIOError,
    BadMagicError,
    CheckpointError,
    HashMismatchError,
    ShapeMismatchError,
    TruncatedPayloadError,
    UnsupportedVersionError,
)
from .numcore import AdamOptimizer, ParamStore
from .utils import atomic_write

logger = logging.getLogger(__name__)


def _payload_hash(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


@dataclass
class Checkpoint:
    """Decoded checkpoint contents."""

    tensors: Dict[str, torch.Tensor]
    config: Config
    meta: Dict[str, Any] = field(default_factory=dict)
    params_hash: str = ""

    def group(self, prefix: str) -> Dict[str, torch.Tensor]:
        """Tensors stored under ``<prefix>/``, with the prefix stripped."""
        lead = f"{prefix}/"
        return {name[len(lead) :]: t for name, t in self.tensors.items() if name.startswith(lead)}

    def restore(self, prefix: str, store: ParamStore) -> None:
        """Copy the ``prefix`` group into the live entries of ``store``.

        Raises:
            CheckpointError: If an entry is missing
            ShapeMismatchError: If a stored shape differs
        """
        saved = self.group(prefix)
        for name, tensor in store.items():
            if name not in saved:
                raise CheckpointError(f"checkpoint has no tensor '{prefix}/{name}'")
            if tuple(saved[name].shape) != tuple(tensor.shape):
                raise ShapeMismatchError(f"{prefix}/{name}", tensor.shape, saved[name].shape)
            with torch.no_grad():
                tensor.copy_(saved[name].to(tensor.dtype))

    def restore_optimizer(self, prefix: str, optimizer: AdamOptimizer) -> None:
        """Reload Adam moments and the step counter saved under ``prefix``."""
        step = int(self.meta.get("optimizers", {}).get(prefix, 0))
        optimizer.load_state_tensors(self.group(prefix), step)


def _tensor_bytes(tensor: torch.Tensor) -> bytes:
    return tensor.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()


def save_checkpoint(
    path: Union[str, Path],
    stores: Mapping[str, ParamStore],
    config: Config,
    optimizers: Optional[Mapping[str, AdamOptimizer]] = None,
    meta: Optional[Mapping[str, Any]] = None,
) -> Path:
    """Write stores, optimizer moments and the config snapshot atomically.

    Args:
        path: Destination file
        stores: Prefix to ParamStore; each entry is saved as ``<prefix>/<name>``
        config: Configuration snapshot embedded in the header
        optimizers: Prefix to optimizer; moments are saved as ``<prefix>/<name>/exp_avg[_sq]``
        meta: Extra JSON-serialisable metadata

    Returns:
        The written path

    Raises:
        ArtifactIOError: If the file cannot be written
    """
    entries, chunks, offset = [], [], 0
    named: Dict[str, torch.Tensor] = {}
    for prefix, store in stores.items():
        for name, tensor in store.items():
            named[f"{prefix}/{name}"] = tensor
    steps: Dict[str, int] = {}
    for prefix, optimizer in (optimizers or {}).items():
        steps[prefix] = optimizer.step_count
        for name, tensor in optimizer.state_tensors().items():
            named[f"{prefix}/{name}"] = tensor

    for name, tensor in named.items():
        data = _tensor_bytes(tensor)
        entries.append({"name": name, "shape": list(tensor.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)

    params_digest = hashlib.sha256()
    for prefix in sorted(stores):
        params_digest.update(stores[prefix].state_hash().encode("ascii"))
    header = {
        "tensors": entries,
        "config": config.to_text(),
        "config_hash": config.config_hash(),
        "meta": {**dict(meta or {}), "optimizers": steps},
        "params_hash": params_digest.hexdigest()[:16],
        "payload_sha256": _payload_hash(payload),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    preamble = CheckpointFormat.MAGIC + struct.pack("<II", CheckpointFormat.VERSION, len(header_bytes))
    atomic_write(path, preamble + header_bytes + payload)
    logger.info(f"Checkpoint saved to {path} ({len(entries)} tensors, {len(payload)} bytes)")
    return Path(path)


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """Read and validate a checkpoint.

    Raises:
        ArtifactIOError: If the file cannot be read
        BadMagicError: If the magic bytes are wrong
        UnsupportedVersionError: If the format version is unknown
        TruncatedPayloadError: If the file is shorter than its header promises
        HashMismatchError: If the payload hash does not verify
        CheckpointError: If the header is malformed
    """
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise ArtifactIOError(str(path), e)

    magic = raw[:4]
    if magic != CheckpointFormat.MAGIC:
        raise BadMagicError(magic)
    if len(raw) < CheckpointFormat.PREAMBLE_BYTES:
        raise TruncatedPayloadError(CheckpointFormat.PREAMBLE_BYTES, len(raw))
    version, header_len = struct.unpack("<II", raw[4 : CheckpointFormat.PREAMBLE_BYTES])
    if version != CheckpointFormat.VERSION:
        raise UnsupportedVersionError(version, CheckpointFormat.VERSION)
    body = CheckpointFormat.PREAMBLE_BYTES + header_len
    if len(raw) < body:
        raise TruncatedPayloadError(body, len(raw))
    try:
        header = json.loads(raw[CheckpointFormat.PREAMBLE_BYTES : body].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"malformed checkpoint header: {e}")

    payload = raw[body:]
    entries = sorted(header["tensors"], key=lambda e: e["offset"])
    end = 0
    for entry in entries:
        if entry["offset"] < end:
            raise CheckpointError(f"overlapping tensor '{entry['name']}' in checkpoint header")
        if entry["nbytes"] != 4 * int(np.prod(entry["shape"], dtype=np.int64)):
            raise CheckpointError(f"byte length of '{entry['name']}' does not match its shape")
        end = entry["offset"] + entry["nbytes"]
    if len(payload) < end:
        raise TruncatedPayloadError(end, len(payload))
    actual = _payload_hash(payload)
    if actual != header["payload_sha256"]:
        raise HashMismatchError(header["payload_sha256"], actual)

    tensors = {}
    for entry in header["tensors"]:
        chunk = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        array = np.frombuffer(chunk, dtype="<f4").reshape(entry["shape"]).copy()
        tensors[entry["name"]] = torch.from_numpy(array).to(torch.get_default_dtype())

    return Checkpoint(
        tensors=tensors,
        config=Config.from_text(header["config"], source=f"{path}:header"),
        meta=header.get("meta", {}),
        params_hash=header.get("params_hash", ""),
    )
