"""Single-file checkpoint container.

Layout::

    b"SASVCKPT"                 8-byte magic
    header length               uint64, little-endian
    header                      UTF-8 JSON
    header digest               32 bytes, SHA-256 of the header bytes
    payload                     concatenated section blobs

Every parameter array is stored as little-endian float32 in C order. The
header lists, per section, its architecture tag and config, the tensor
names/shapes/offsets inside the section blob and the SHA-256 of the blob.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

MAGIC = b"SASVCKPT"
FORMAT_VERSION = 1
SECTION_NAMES = ("asv", "cm", "backend")


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class ArchitectureMismatchError(CheckpointError):
    pass


class MissingSectionError(CheckpointError):
    pass


@dataclass
class Section:
    arch: str
    config: dict
    arrays: dict  # name -> float32 ndarray

    def digest(self) -> str:
        return hashlib.sha256(self.blob()).hexdigest()

    def blob(self) -> bytes:
        return b"".join(_f32(a).tobytes() for a in self.arrays.values())


@dataclass
class ModelCheckpoint:
    sections: dict = field(default_factory=dict)  # name -> Section
    config_hash: str = ""
    seed: int = 0
    selected_epoch: int = -1
    meta: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


def _f32(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype="<f4")


def config_hash(config: Mapping) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()


def section_from_module(module: torch.nn.Module) -> Section:
    arrays = {k: v.detach().cpu().numpy().astype("<f4", copy=True) for k, v in module.state_dict().items()}
    return Section(module.arch, module.config.to_dict(), arrays)


def module_from_section(section: Section) -> torch.nn.Module:
    from .asv_encoder import AsvConfig, AsvEncoder
    from .backend import BackendConfig, SasvBackend
    from .cm_encoder import CmConfig, CmEncoder

    builders = {
        "asv": (AsvEncoder, AsvConfig),
        "cm": (CmEncoder, CmConfig),
        "backend": (SasvBackend, BackendConfig),
    }
    if section.arch not in builders:
        raise ArchitectureMismatchError(f"unknown architecture tag {section.arch!r}")
    cls, cfg_cls = builders[section.arch]
    module = cls(cfg_cls.from_dict(section.config))
    state = {k: torch.from_numpy(np.array(v, dtype=np.float32)) for k, v in section.arrays.items()}
    expected = set(module.state_dict())
    if set(state) != expected:
        raise ArchitectureMismatchError(
            f"{section.arch}: parameter names differ: missing {sorted(expected - set(state))}, "
            f"unexpected {sorted(set(state) - expected)}"
        )
    for k, v in module.state_dict().items():
        if tuple(v.shape) != tuple(state[k].shape):
            raise ArchitectureMismatchError(f"{section.arch}: {k} has shape {tuple(state[k].shape)}, "
                                            f"expected {tuple(v.shape)}")
    module.load_state_dict(state)
    module.eval()
    return module


def save(ckpt: ModelCheckpoint, path) -> None:
    sections_meta = []
    blobs = []
    offset = 0
    for name, sec in ckpt.sections.items():
        tensors = []
        inner = 0
        for tname, arr in sec.arrays.items():
            nbytes = _f32(arr).nbytes
            tensors.append({"name": tname, "shape": list(np.shape(arr)), "offset": inner, "nbytes": nbytes})
            inner += nbytes
        blob = sec.blob()
        sections_meta.append({
            "name": name,
            "arch": sec.arch,
            "config": sec.config,
            "offset": offset,
            "nbytes": len(blob),
            "sha256": hashlib.sha256(blob).hexdigest(),
            "tensors": tensors,
        })
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({
        "format_version": ckpt.format_version,
        "config_hash": ckpt.config_hash,
        "seed": ckpt.seed,
        "selected_epoch": ckpt.selected_epoch,
        "meta": ckpt.meta,
        "sections": sections_meta,
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(hashlib.sha256(header).digest())
        for blob in blobs:
            f.write(blob)


def _check_config(name: str, expected: Mapping, found: Mapping) -> None:
    for key in sorted(set(expected) | set(found)):
        if key not in found:
            raise ArchitectureMismatchError(f"section {name}: config key {key!r} missing from checkpoint")
        if key not in expected:
            raise ArchitectureMismatchError(f"section {name}: unexpected config key {key!r}")
        if expected[key] != found[key]:
            raise ArchitectureMismatchError(
                f"section {name}: config key {key!r} is {found[key]!r}, expected {expected[key]!r}"
            )


def load(path, expected_config: Mapping[str, Mapping | None] | None = None) -> ModelCheckpoint:
    """Read and verify a checkpoint.

    ``expected_config`` maps section names to the architecture config each
    must carry (``None`` accepts any); every named section must be present.
    Verification happens before any array is returned.
    """
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic")
    if len(data) < 16:
        raise CorruptCheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header_end = 16 + hlen
    if len(data) < header_end + 32:
        raise CorruptCheckpointError(f"{path}: truncated header")
    header_bytes = data[16:header_end]
    if hashlib.sha256(header_bytes).digest() != data[header_end:header_end + 32]:
        raise CorruptCheckpointError(f"{path}: header digest mismatch")
    header = json.loads(header_bytes)
    version = header.get("format_version")
    if not isinstance(version, int) or version > FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version!r} (this build reads <= {FORMAT_VERSION})")
    payload = data[header_end + 32:]
    total = sum(s["nbytes"] for s in header["sections"])
    if len(payload) != total:
        raise CorruptCheckpointError(f"{path}: payload is {len(payload)} bytes, expected {total}")

    found = {s["name"]: s for s in header["sections"]}
    for name, cfg in (expected_config or {}).items():
        if name not in found:
            raise MissingSectionError(f"{path}: missing section {name!r}")
        if cfg is not None:
            _check_config(name, dict(cfg), found[name]["config"])

    sections = {}
    for s in header["sections"]:
        blob = payload[s["offset"]:s["offset"] + s["nbytes"]]
        if hashlib.sha256(blob).hexdigest() != s["sha256"]:
            raise CorruptCheckpointError(f"{path}: digest mismatch in section {s['name']!r}")
        arrays = {}
        for t in s["tensors"]:
            raw = blob[t["offset"]:t["offset"] + t["nbytes"]]
            arrays[t["name"]] = np.frombuffer(raw, dtype="<f4").reshape(t["shape"]).copy()
        sections[s["name"]] = Section(s["arch"], s["config"], arrays)
    return ModelCheckpoint(
        sections=sections,
        config_hash=header["config_hash"],
        seed=header["seed"],
        selected_epoch=header["selected_epoch"],
        meta=header.get("meta", {}),
        format_version=version,
    )


def section_bytes(path, name: str) -> bytes:
    """Raw stored bytes of one section (for freeze checks)."""
    ckpt = load(path)
    if name not in ckpt.sections:
        raise MissingSectionError(f"{path}: missing section {name!r}")
    return ckpt.sections[name].blob()


def save_modules(path, modules: Mapping[str, torch.nn.Module], **fields) -> ModelCheckpoint:
    ckpt = ModelCheckpoint(sections={n: section_from_module(m) for n, m in modules.items()}, **fields)
    save(ckpt, path)
    return ckpt


def load_modules(path, expected: Mapping[str, Mapping | None] | None = None):
    ckpt = load(path, expected)
    return {n: module_from_section(s) for n, s in ckpt.sections.items()}, ckpt
