"""Binary training checkpoints.

Layout (little-endian)::

    "GPCK" | version u32 | config-json length u32 | config json (utf-8)
    data step u64 | skipped u64 | optimiser step u64 | seed u64
    voxel grid segment ("GPVX" header + features)
    array count u32, then per array:
        name length u16 | name | kind u8 (0 param, 1 first moment, 2 second moment)
        dtype u8 (0 f4, 1 f8) | ndim u8 | dims u32 x ndim | data
    crc32 u32 over everything before it

In free-grid mode the ``grid`` parameter lives only in the grid segment; in
lift-splat mode the segment holds the encoded grid for inspection.
"""
from __future__ import annotations

import struct
import zlib

import numpy as np

from .config import TrainConfig
from .errors import CheckpointVersionError, ConfigMismatchError, CorruptCheckpointError
from .optim import ParamStore
from .train import FrameContext, TrainState, encode
from .voxel import VoxelGrid, grid_from_bytes, grid_to_bytes

MAGIC = b"GPCK"
VERSION = 1
_KINDS = ("param", "m", "v")
_DTYPES = (np.dtype("<f4"), np.dtype("<f8"))


def checkpoint_bytes(state: TrainState, ctx: FrameContext) -> bytes:
    cfg_json = state.cfg.to_json().encode("utf-8")
    out = [MAGIC, struct.pack("<II", VERSION, len(cfg_json)), cfg_json]
    seed = state.cfg.seed & 0xFFFFFFFFFFFFFFFF
    out.append(struct.pack("<4Q", state.step, state.skipped, state.store.step, seed))
    params = state.store.params
    if "grid" in params:
        grid = VoxelGrid(params["grid"], ctx.geometry)
    else:
        grid, _ = encode(state.cfg, params, ctx)
        grid = VoxelGrid(grid.features.astype(params[next(iter(params))].dtype), ctx.geometry)
    out.append(grid_to_bytes(grid))

    entries = []
    for kind, table in zip(_KINDS, (state.store.params, state.store.m, state.store.v)):
        for name in sorted(table):
            if kind == "param" and name == "grid":
                continue
            entries.append((name, _KINDS.index(kind), table[name]))
    out.append(struct.pack("<I", len(entries)))
    for name, kind, arr in entries:
        code = 1 if arr.dtype == np.float64 else 0
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<BBB", kind, code, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(path, state: TrainState, ctx: FrameContext):
    data = checkpoint_bytes(state, ctx)
    with open(path, "wb") as fh:
        fh.write(data)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise CorruptCheckpointError("checkpoint is truncated")
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals

    def raw(self, n):
        if self.pos + n > len(self.buf):
            raise CorruptCheckpointError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out


def load_checkpoint(path, expected: TrainConfig | None = None) -> TrainState:
    """Restore a :class:`TrainState`.

    Raises CorruptCheckpointError on truncation or checksum failure,
    CheckpointVersionError on an unknown version and ConfigMismatchError when
    ``expected`` describes a different model.
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise CorruptCheckpointError("not a checkpoint (bad magic)")
    version = struct.unpack_from("<I", buf, 4)[0]
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {VERSION}")
    body, crc = buf[:-4], buf[-4:]
    if struct.unpack("<I", crc)[0] != zlib.crc32(body):
        raise CorruptCheckpointError("checksum mismatch (truncated or corrupted file)")

    rd = _Reader(body)
    rd.pos = 8
    (n_cfg,) = rd.take("<I")
    cfg = TrainConfig.from_json(rd.raw(n_cfg).decode("utf-8"))
    if expected is not None and expected.model_signature() != cfg.model_signature():
        raise ConfigMismatchError("checkpoint was written for a different model configuration")
    step, skipped, opt_step, _seed = rd.take("<4Q")
    grid, rd.pos = grid_from_bytes(body, rd.pos)

    tables = {"param": {}, "m": {}, "v": {}}
    (count,) = rd.take("<I")
    for _ in range(count):
        (n,) = rd.take("<H")
        name = rd.raw(n).decode("utf-8")
        kind, code, ndim = rd.take("<BBB")
        if kind > 2 or code > 1:
            raise CorruptCheckpointError(f"bad array record for {name!r}")
        shape = rd.take(f"<{ndim}I")
        dt = _DTYPES[code]
        data = rd.raw(int(np.prod(shape, dtype=np.int64)) * dt.itemsize)
        arr = np.frombuffer(data, dtype=dt).reshape(shape)
        tables[_KINDS[kind]][name] = arr.astype(dt.newbyteorder("="))
    if rd.pos != len(body):
        raise CorruptCheckpointError("trailing bytes after the array table")
    if cfg.encoder == "grid":
        tables["param"]["grid"] = grid.features.copy()
    store = ParamStore(tables["param"], tables["m"], tables["v"], opt_step)
    if set(store.m) != set(store.params) or set(store.v) != set(store.params):
        raise CorruptCheckpointError("moment buffers do not match parameters")
    return TrainState(cfg, store, step, skipped)
