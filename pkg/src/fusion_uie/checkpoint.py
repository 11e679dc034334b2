"""Binary checkpoint format.

Layout (little-endian throughout)::

    b"FUSN"
    u32 version
    u32 ablation bitfield
    u16 preset-name length, preset-name bytes (utf-8)
    i64 seed, i64 step, i64 epoch, f64 best_score, i64 bad_epochs
    u32 record count
    records: u16 name length, name bytes, u8 rank, u32 extents[rank], f64 payload
    u32 CRC32 of every byte after the magic

Records hold the model parameters under their own names and the Adam
moments under ``adam.m.<name>`` / ``adam.v.<name>``.
"""

from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .model import AblationConfig, FusionModel
from .training import TrainState

MAGIC = b"FUSN"
VERSION = 1
_M, _V = "adam.m.", "adam.v."


class CheckpointError(ValueError):
    """The file is not a loadable checkpoint (corrupt, truncated, mismatched)."""


def _encode(model: FusionModel, state: TrainState) -> bytes:
    out = bytearray()
    out += struct.pack("<II", VERSION, model.ablation.to_bits())
    name = model.width.name.encode()
    out += struct.pack("<H", len(name)) + name
    best = state.best_score
    out += struct.pack("<qqqdq", state.seed, state.step, state.epoch, best, state.bad_epochs)
    records = [(n, p.data) for n, p in model.named_parameters()]
    records += [(_M + n, a) for n, a in state.m.items()]
    records += [(_V + n, a) for n, a in state.v.items()]
    out += struct.pack("<I", len(records))
    for n, arr in records:
        nb = n.encode()
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    return bytes(out)


def save_checkpoint(model: FusionModel, state: TrainState, path) -> None:
    """Write atomically (temp file + rename) so a crash never leaves half a file."""
    body = _encode(model, state)
    blob = MAGIC + body + struct.pack("<I", zlib.crc32(body))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint truncated")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse and verify a file; returns (header, records) without building a model."""
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 4 + 4:
        raise CheckpointError("checkpoint truncated")
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    body, (crc,) = blob[4:-4], struct.unpack("<I", blob[-4:])
    r = _Reader(body)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    if zlib.crc32(body) != crc:
        raise CheckpointError("CRC mismatch: checkpoint is corrupt or truncated")
    (bits,) = r.unpack("<I")
    (nlen,) = r.unpack("<H")
    preset = r.take(nlen).decode()
    seed, step, epoch, best, bad = r.unpack("<qqqdq")
    (count,) = r.unpack("<I")
    records: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I")
        n = int(np.prod(shape, dtype=np.int64))
        records[name] = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after the last record")
    header = dict(version=version, ablation_bits=bits, preset=preset,
                  seed=seed, step=step, epoch=epoch, best_score=best, bad_epochs=bad)
    return header, records


def load_into(model: FusionModel, path) -> TrainState:
    """Copy parameters into an existing model; shapes and names must match exactly.

    Nothing is modified unless the whole file checks out.
    """
    header, records = read_checkpoint(path)
    named = dict(model.named_parameters())
    params = {k: v for k, v in records.items() if not k.startswith(("adam.",))}
    if header["ablation_bits"] != model.ablation.to_bits():
        raise CheckpointError(
            f"ablation mismatch: file {AblationConfig.from_bits(header['ablation_bits'])} vs model {model.ablation}")
    missing = sorted(set(named) - set(params))
    extra = sorted(set(params) - set(named))
    if missing or extra:
        raise CheckpointError(f"parameter table mismatch; missing {missing[:5]}, unexpected {extra[:5]}")
    for k, arr in params.items():
        if arr.shape != named[k].shape:
            raise CheckpointError(
                f"shape mismatch for {k}: file {arr.shape} vs model {named[k].shape} "
                f"(file preset {header['preset']!r}, model preset {model.width.name!r})")
    for k, arr in params.items():
        named[k].data[...] = arr
    state = TrainState(seed=header["seed"], step=header["step"], epoch=header["epoch"],
                       best_score=header["best_score"], bad_epochs=header["bad_epochs"])
    for k, arr in records.items():
        if k.startswith(_M):
            state.m[k[len(_M):]] = arr.copy()
        elif k.startswith(_V):
            state.v[k[len(_V):]] = arr.copy()
    return state


def load_checkpoint(path) -> tuple[FusionModel, TrainState]:
    """Rebuild the model described by the file header and fill it."""
    header, _ = read_checkpoint(path)
    try:
        ablation = AblationConfig.from_bits(header["ablation_bits"])
        model = FusionModel(header["preset"], ablation, seed=header["seed"])
    except ValueError as exc:
        raise CheckpointError(f"checkpoint header describes an invalid model: {exc}") from exc
    return model, load_into(model, path)
