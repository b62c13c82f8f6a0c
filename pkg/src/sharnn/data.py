"""Byte corpora, contiguous batching and BPTT segment iteration."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence, Union

import numpy as np

from .errors import DataError

DEFAULT_FRACTIONS = (0.90, 0.05, 0.05)
SPLIT_NAMES = ("train", "valid", "test")


@dataclass
class Corpus:
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray

    def split(self, name: str) -> np.ndarray:
        if name not in SPLIT_NAMES:
            raise DataError(f"unknown split {name!r}")
        return getattr(self, name)


@dataclass
class BatchStream:
    # (steps, B); column b is the b-th contiguous chunk of the source
    data: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.data.shape[1]

    @property
    def steps(self) -> int:
        return self.data.shape[0]


def as_ids(raw: Union[bytes, bytearray, np.ndarray, Sequence[int]]) -> np.ndarray:
    """Identity vocabulary: byte value == id."""
    if isinstance(raw, (bytes, bytearray, memoryview)):
        return np.frombuffer(bytes(raw), dtype=np.uint8).astype(np.int64)
    return np.asarray(raw, dtype=np.int64)


def split_sizes(n: int, fractions: Sequence[float] = DEFAULT_FRACTIONS) -> tuple[int, int, int]:
    if len(fractions) != 3 or any(f < 0 for f in fractions) or sum(fractions) > 1 + 1e-9:
        raise DataError(f"fractions must be three non-negative values summing to at most 1, got {fractions}")
    # the epsilon absorbs float error such as 0.3 * 10 = 3.0000000000000004 or 0.29 * 100 = 28.999...
    a, b, c = (math.floor(f * n + 1e-9) for f in fractions)
    if abs(sum(fractions) - 1) < 1e-9:
        c = n - a - b
    return a, b, c


def split_bytes(raw, fractions: Sequence[float] = DEFAULT_FRACTIONS) -> Corpus:
    ids = as_ids(raw)
    a, b, c = split_sizes(len(ids), fractions)
    return Corpus(train=ids[:a], valid=ids[a : a + b], test=ids[a + b : a + b + c])


def load_and_split(path, fractions: Sequence[float] = DEFAULT_FRACTIONS, min_bytes: int = 100) -> Corpus:
    """Read a raw byte file and cut it into leading train/valid/test spans."""
    raw = Path(path).read_bytes()
    if len(raw) < min_bytes:
        raise DataError(f"{path}: {len(raw)} bytes, need at least {min_bytes}")
    return split_bytes(raw, fractions)


def load_prepared(directory) -> Corpus:
    """Read ``train.bin``, ``valid.bin`` and ``test.bin`` from a prepared directory."""
    d = Path(directory)
    return Corpus(*(as_ids((d / f"{name}.bin").read_bytes()) for name in SPLIT_NAMES))


def batchify(data, B: int) -> BatchStream:
    ids = as_ids(data)
    n = len(ids)
    if B < 1 or B > n:
        raise DataError(f"batch size {B} does not fit {n} bytes")
    steps = n // B
    return BatchStream(np.ascontiguousarray(ids[: steps * B].reshape(B, steps).T))


def bptt_segments(stream: BatchStream, bptt: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(input, target)`` windows of at most ``bptt`` rows; target is input shifted by one."""
    if bptt < 1:
        raise ValueError("bptt must be at least 1")
    data = stream.data
    last = stream.steps - 1
    for i in range(0, last, bptt):
        n = min(bptt, last - i)
        yield data[i : i + n], data[i + 1 : i + 1 + n]


def count_segments(stream: BatchStream, bptt: int) -> int:
    return max(0, math.ceil((stream.steps - 1) / bptt))
