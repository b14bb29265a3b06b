"""Binary checkpoints.

Layout (all integers little-endian)::

    magic        8 bytes  b"DBNKCKPT"
    version      u32
    total_len    u64      length of the whole file
    header_len   u32
    header_crc   u32      CRC32 of the header bytes
    header       JSON (sorted keys): arch, blob table, domain views, optimizer hparams, meta
    payload      concatenated raw arrays, each with its own CRC32 in the blob table

Shared parameters are stored once; each domain view lists the shared blob
names it references next to its own, so file size grows affinely with the
number of domains.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .autodiff import Adam
from .errors import ArchitectureMismatch, ChecksumError, FormatError, VersionError
from .model import ArchConfig, DomainBankModel, param_domain

MAGIC = b"DBNKCKPT"
VERSION = 1
_PREAMBLE = struct.Struct("<8sIQII")


@dataclass
class Checkpoint:
    arch: ArchConfig
    n: int
    domain_names: list[str]
    params: dict[str, np.ndarray]
    optimizers: dict[str, dict] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    views: list[dict] = field(default_factory=list)

    def build_model(self) -> DomainBankModel:
        model = DomainBankModel(self.arch, self.n, int(self.meta.get("model_seed", 0)))
        restore_model(model, self)
        return model

    def restore_optimizers(self, optimizers: Mapping[str, Adam]) -> None:
        for key, opt in optimizers.items():
            state = self.optimizers.get(key)
            if state is None:
                raise FormatError(f"checkpoint has no state for optimizer {key!r}")
            opt.load_state(state["arrays"], state["hparams"])


def restore_model(model: DomainBankModel, ckpt: Checkpoint) -> None:
    """Copy parameters into ``model`` in place so aliasing between views is preserved."""
    named = dict(model.named_parameters())
    if set(named) != set(ckpt.params):
        raise ArchitectureMismatch("checkpoint parameter names do not match the model")
    for k, p in named.items():
        src = ckpt.params[k]
        if src.shape != p.data.shape:
            raise ArchitectureMismatch(f"{k}: checkpoint shape {src.shape} vs model {p.data.shape}")
        p.data = src.astype(src.dtype, copy=True)


def _blob_table(arrays: dict[str, np.ndarray]) -> tuple[list[dict], bytes]:
    table, chunks, offset = [], [], 0
    for name in arrays:
        arr = np.ascontiguousarray(arrays[name])
        dt = arr.dtype.newbyteorder("<")
        raw = arr.astype(dt, copy=False).tobytes()
        table.append({"name": name, "dtype": dt.str, "shape": list(arr.shape),
                      "offset": offset, "length": len(raw), "crc32": zlib.crc32(raw)})
        chunks.append(raw)
        offset += len(raw)
    return table, b"".join(chunks)


def encode_checkpoint(model: DomainBankModel, optimizers: Mapping[str, Adam] | None = None,
                      meta: dict | None = None,
                      domain_names: Sequence[str] | None = None) -> bytes:
    names = list(domain_names) if domain_names is not None else [
        f"domain{i}" for i in range(model.n)]
    if len(names) != model.n:
        raise FormatError(f"{len(names)} domain names for a {model.n}-domain model")
    arrays: dict[str, np.ndarray] = {}
    named = model.named_parameters()
    for k, p in named:
        arrays[f"param/{k}"] = p.data
    opt_header = {}
    for key, opt in (optimizers or {}).items():
        for name, arr in opt.state_arrays().items():
            arrays[f"opt/{key}/{name}"] = arr
        opt_header[key] = opt.hparams()
    shared = [k for k, _ in named if param_domain(k) is None]
    views = [{"index": i, "name": names[i],
              "own": [k for k, _ in named if param_domain(k) == i],
              "shared_refs": shared} for i in range(model.n)]
    table, payload = _blob_table(arrays)
    meta = dict(meta or {})
    meta.setdefault("model_seed", model.seed)
    header = {"arch": model.arch.to_dict(), "arch_digest": model.arch.digest(), "n": model.n,
              "domain_names": names, "blobs": table, "views": views,
              "optimizers": opt_header, "meta": meta}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    total = _PREAMBLE.size + len(hbytes) + len(payload)
    pre = _PREAMBLE.pack(MAGIC, VERSION, total, len(hbytes), zlib.crc32(hbytes))
    return pre + hbytes + payload


def save_checkpoint(path, model: DomainBankModel, optimizers: Mapping[str, Adam] | None = None,
                    meta: dict | None = None, domain_names: Sequence[str] | None = None) -> Path:
    """Write atomically: temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode_checkpoint(model, optimizers, meta, domain_names)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def decode_checkpoint(raw: bytes, expected_arch: ArchConfig | None = None) -> Checkpoint:
    if len(raw) < _PREAMBLE.size:
        raise FormatError(f"checkpoint is {len(raw)} bytes, shorter than its preamble")
    magic, version, total, hlen, hcrc = _PREAMBLE.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    if version != VERSION:
        raise VersionError(f"checkpoint format version {version}, this build reads {VERSION}")
    if total != len(raw):
        raise ChecksumError(f"length header says {total} bytes, file has {len(raw)}")
    start = _PREAMBLE.size
    hbytes = raw[start : start + hlen]
    if zlib.crc32(hbytes) != hcrc:
        raise ChecksumError("header checksum mismatch")
    header = json.loads(hbytes)
    arch = ArchConfig.from_dict(header["arch"])
    if arch.digest() != header["arch_digest"]:
        raise ArchitectureMismatch("architecture digest does not match the stored architecture")
    if expected_arch is not None and expected_arch.digest() != header["arch_digest"]:
        raise ArchitectureMismatch(
            f"checkpoint architecture {header['arch_digest'][:12]} differs from "
            f"expected {expected_arch.digest()[:12]}")
    payload = memoryview(raw)[start + hlen :]
    arrays = {}
    for entry in header["blobs"]:
        chunk = payload[entry["offset"] : entry["offset"] + entry["length"]]
        if len(chunk) != entry["length"] or zlib.crc32(chunk) != entry["crc32"]:
            raise ChecksumError(f"blob {entry['name']} failed its CRC32 check")
        arr = np.frombuffer(chunk, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    optimizers = {}
    for key, hp in header["optimizers"].items():
        prefix = f"opt/{key}/"
        optimizers[key] = {"hparams": hp, "arrays": {
            k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}}
    return Checkpoint(arch, header["n"], header["domain_names"], params, optimizers,
                      header["meta"], header["views"])


def load_checkpoint(path, expected_arch: ArchConfig | None = None) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"no checkpoint at {path}")
    return decode_checkpoint(path.read_bytes(), expected_arch)


def load_model(path) -> tuple[DomainBankModel, Checkpoint]:
    ckpt = load_checkpoint(path)
    return ckpt.build_model(), ckpt
