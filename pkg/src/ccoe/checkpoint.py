"""Binary checkpoint format with integrity digest.

Layout: magic ``CCOE`` | u32 format version | u64 header length | header JSON
(UTF-8, canonical: sorted keys, no whitespace) | tensor records. Each record is
u32 name length, name bytes, u32 rank, u32 dims, u64 payload bytes, raw
little-endian float32 data; records are ordered by tensor name. The header
carries a SHA-256 over the full records section plus the count of raw data
bytes, so loads verify integrity before constructing anything and ledger code
can equate accounted bytes with serialized payload bytes exactly. Canonical
ordering makes save -> load -> save byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from typing import Any

import numpy as np

from .errors import CorruptionError, VersionError
from .model import BackboneModel, ExpertSubnetwork, ModelConfig

MAGIC = b"CCOE"
FORMAT_VERSION = 1


def _records_bytes(tensors: dict[str, np.ndarray]) -> tuple[bytes, int]:
    """Canonical records section and the count of raw data bytes within it."""
    chunks: list[bytes] = []
    data_bytes = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        nb = name.encode("utf-8")
        raw = arr.tobytes()
        data_bytes += len(raw)
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(struct.pack("<Q", len(raw)))
        chunks.append(raw)
    return b"".join(chunks), data_bytes


def digest(component) -> str:
    """SHA-256 over the component's canonical serialized tensor records."""
    records, _ = _records_bytes(component.named_parameters())
    return hashlib.sha256(records).hexdigest()


def digest_params(tensors: dict[str, np.ndarray]) -> str:
    records, _ = _records_bytes(tensors)
    return hashlib.sha256(records).hexdigest()


def _component_header(component) -> dict[str, Any]:
    if isinstance(component, BackboneModel):
        return {
            "kind": "backbone",
            "config": component.config.to_dict(),
            "frozen": component.frozen,
        }
    if isinstance(component, ExpertSubnetwork):
        return {
            "kind": "expert",
            "expert_id": component.expert_id,
            "domain": component.domain,
            "positions": list(component.positions),
            "inner_width": component.inner_width,
        }
    # planner: imported lazily to avoid a module cycle
    from .routing import PlannerExpert

    if isinstance(component, PlannerExpert):
        return {
            "kind": "planner",
            "expert_id": component.expert.expert_id,
            "domain": component.expert.domain,
            "positions": list(component.expert.positions),
            "inner_width": component.expert.inner_width,
            "indicator_ids": list(component.indicator_ids),
            "uncalibrated": sorted(component.uncalibrated),
        }
    raise TypeError(f"cannot checkpoint component of type {type(component)!r}")


def save_checkpoint(component, path: str | os.PathLike) -> str:
    """Write the component atomically; returns the payload digest."""
    tensors = component.named_parameters()
    records, data_bytes = _records_bytes(tensors)
    header = _component_header(component)
    header["format"] = FORMAT_VERSION
    header["digest"] = hashlib.sha256(records).hexdigest()
    header["data_bytes"] = data_bytes
    header["tensors"] = [
        {"name": n, "shape": list(tensors[n].shape)} for n in sorted(tensors)
    ]
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = MAGIC + struct.pack("<I", FORMAT_VERSION) + struct.pack("<Q", len(hjson)) + hjson + records
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)
    return header["digest"]


def _parse_records(records: bytes) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    off = 0
    total = len(records)
    try:
        while off < total:
            (nlen,) = struct.unpack_from("<I", records, off)
            off += 4
            name = records[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", records, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}I", records, off)
            off += 4 * rank
            (nbytes,) = struct.unpack_from("<Q", records, off)
            off += 8
            raw = records[off : off + nbytes]
            if len(raw) != nbytes:
                raise CorruptionError("truncated tensor record")
            off += nbytes
            arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
            tensors[name] = arr
    except struct.error as exc:
        raise CorruptionError(f"malformed tensor record: {exc}") from exc
    return tensors


def read_header(path: str | os.PathLike) -> dict[str, Any]:
    with open(path, "rb") as f:
        blob = f.read(16)
        if blob[:4] != MAGIC:
            raise CorruptionError(f"{path}: bad magic")
        (version,) = struct.unpack_from("<I", blob, 4)
        if version != FORMAT_VERSION:
            raise VersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
        (hlen,) = struct.unpack_from("<Q", blob, 8)
        hjson = f.read(hlen)
        if len(hjson) != hlen:
            raise CorruptionError(f"{path}: truncated header")
        try:
            return json.loads(hjson.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CorruptionError(f"{path}: unreadable header: {exc}") from exc


def load_checkpoint(path: str | os.PathLike):
    """Load and verify a checkpoint; returns the reconstructed component."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise CorruptionError(f"{path}: bad magic")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    (hlen,) = struct.unpack_from("<Q", blob, 8)
    header_raw = blob[16 : 16 + hlen]
    if len(header_raw) != hlen:
        raise CorruptionError(f"{path}: truncated header")
    try:
        header = json.loads(header_raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"{path}: unreadable header: {exc}") from exc
    records = blob[16 + hlen :]
    actual = hashlib.sha256(records).hexdigest()
    if actual != header.get("digest"):
        raise CorruptionError(f"{path}: payload digest mismatch")
    tensors = _parse_records(records)

    kind = header.get("kind")
    if kind == "backbone":
        model = BackboneModel(
            config=ModelConfig.from_dict(header["config"]),
            params=tensors,
            frozen=False,
        )
        if header.get("frozen"):
            model.freeze()
        return model
    if kind == "expert":
        return ExpertSubnetwork(
            expert_id=int(header["expert_id"]),
            domain=header["domain"],
            positions=tuple(header["positions"]),
            inner_width=int(header["inner_width"]),
            params=tensors,
        )
    if kind == "planner":
        from .routing import PlannerExpert

        expert_params = {
            k.removeprefix("expert."): v for k, v in tensors.items() if k.startswith("expert.")
        }
        scorer = {
            k.removeprefix("scorer."): v for k, v in tensors.items() if k.startswith("scorer.")
        }
        expert = ExpertSubnetwork(
            expert_id=int(header["expert_id"]),
            domain=header["domain"],
            positions=tuple(header["positions"]),
            inner_width=int(header["inner_width"]),
            params=expert_params,
        )
        return PlannerExpert(
            expert=expert,
            indicator_ids=list(header["indicator_ids"]),
            indicators=tensors["indicators"],
            scorer=scorer,
            uncalibrated=set(header.get("uncalibrated", [])),
        )
    raise CorruptionError(f"{path}: unknown component kind {kind!r}")
