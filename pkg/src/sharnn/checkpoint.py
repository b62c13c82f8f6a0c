"""Binary checkpoint format.

Layout, all integers little-endian::

    b"SHRN" | version u32 | meta_len u32 | meta (UTF-8 key=value lines)
    | records... | crc32 u32

Each record is ``name_len u16 | name | rank u8 | dims u32 * rank | float32 payload``.
The CRC covers every byte between the version field and the CRC itself.
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .config import ModelConfig, TrainingConfig, parse_config, render_config
from .errors import FormatError, IntegrityError, VersionError
from .model import SHARNN
from .optim import OptimizerState

MAGIC = b"SHRN"
VERSION = 1
MODEL_PREFIX = "model/"
M_PREFIX = "opt.m/"
V_PREFIX = "opt.v/"


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainingConfig
    tensors: dict
    # counters and opaque state, e.g. epoch, step, opt_t, rng
    state: dict = field(default_factory=dict)
    version: int = VERSION

    def model_arrays(self) -> dict:
        return {k[len(MODEL_PREFIX) :]: v for k, v in self.tensors.items() if k.startswith(MODEL_PREFIX)}

    @property
    def folded(self) -> bool:
        return any(k.endswith(".folded") for k in self.model_arrays())

    def build_model(self) -> SHARNN:
        model = SHARNN(self.model_config)
        model.load_state_dict(self.model_arrays())
        return model

    def optimizer_state(self) -> Optional[OptimizerState]:
        if "opt_t" not in self.state:
            return None
        m = {k[len(M_PREFIX) :]: v.copy() for k, v in self.tensors.items() if k.startswith(M_PREFIX)}
        v = {k[len(V_PREFIX) :]: a.copy() for k, a in self.tensors.items() if k.startswith(V_PREFIX)}
        return OptimizerState(m=m, v=v, t=int(self.state["opt_t"]))


def record_bytes(name: str, array: np.ndarray) -> bytes:
    raw_name = name.encode("utf-8")
    out = [struct.pack("<H", len(raw_name)), raw_name, struct.pack("<B", array.ndim)]
    out.append(struct.pack(f"<{array.ndim}I", *array.shape))
    out.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    return b"".join(out)


def encode(ckpt: Checkpoint) -> bytes:
    meta_lines = render_config(ckpt.model_config, ckpt.train_config).splitlines()
    meta_lines += [f"state.{k}={v}" for k, v in ckpt.state.items()]
    meta = ("\n".join(meta_lines) + "\n").encode("utf-8")
    body = [struct.pack("<I", len(meta)), meta]
    body += [record_bytes(name, np.asarray(a)) for name, a in ckpt.tensors.items()]
    body = b"".join(body)
    return MAGIC + struct.pack("<I", ckpt.version) + body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes) -> Checkpoint:
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    if len(blob) < 16:
        raise IntegrityError("checkpoint truncated")
    body, (crc,) = blob[8:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise IntegrityError("checkpoint checksum mismatch")
    try:
        (meta_len,) = struct.unpack_from("<I", body, 0)
        meta = body[4 : 4 + meta_len].decode("utf-8")
        pos = 4 + meta_len
        tensors = {}
        while pos < len(body):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", body, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 4 * count > len(body):
                raise IntegrityError(f"record {name!r} runs past end of file")
            tensors[name] = np.frombuffer(body, dtype="<f4", count=count, offset=pos).reshape(dims).copy()
            pos += 4 * count
    except (struct.error, UnicodeDecodeError) as e:
        raise IntegrityError(f"malformed checkpoint: {e}") from e

    config_lines, state = [], {}
    for line in meta.splitlines():
        if line.startswith("state."):
            k, _, v = line[len("state.") :].partition("=")
            state[k] = v
        else:
            config_lines.append(line)
    model_cfg, train_cfg = parse_config("\n".join(config_lines))
    return Checkpoint(model_cfg, train_cfg, tensors, state, version)


def make_checkpoint(
    model: SHARNN,
    train_config: TrainingConfig,
    opt_state: Optional[OptimizerState] = None,
    **state,
) -> Checkpoint:
    tensors = {MODEL_PREFIX + k: v for k, v in model.state_dict().items()}
    if opt_state is not None:
        for name in model.parameters():
            if name in opt_state.m:
                tensors[M_PREFIX + name] = opt_state.m[name]
                tensors[V_PREFIX + name] = opt_state.v[name]
        state = {"opt_t": opt_state.t, **state}
    return Checkpoint(model.config, train_config, tensors, state)


def write_atomic(path, blob: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def save_checkpoint(
    model: SHARNN,
    train_config: TrainingConfig,
    path,
    opt_state: Optional[OptimizerState] = None,
    **state,
) -> Checkpoint:
    ckpt = make_checkpoint(model, train_config, opt_state, **state)
    write_atomic(path, encode(ckpt))
    return ckpt


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())
