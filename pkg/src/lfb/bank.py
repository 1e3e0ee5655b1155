"""Long-term feature bank: per-step feature matrices with windowed retrieval.

File layout (``.lfbk``, little-endian)::

    magic   4 bytes  b"LFBK"
    version u32      1
    d       u32
    T       u32
    rate    f32      steps per second
    T x { N_t u32, N_t*d f32 row-major }
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Sequence

import numpy as np

MAGIC = b"LFBK"
VERSION = 1
_HEADER = struct.Struct("<4sIIIf")
_COUNT = struct.Struct("<I")

BATCH = "batch"
CAUSAL = "causal"


class BankFormatError(ValueError):
    """Base class for malformed ``.lfbk`` streams."""


class BadMagicError(BankFormatError):
    pass


class VersionMismatchError(BankFormatError):
    pass


class TruncatedBankError(BankFormatError):
    pass


class InconsistentBankError(BankFormatError):
    pass


@dataclass(frozen=True)
class WindowSpec:
    w: int
    mode: str = BATCH

    def __post_init__(self):
        if self.w < 0:
            raise ValueError(f"half-window must be non-negative, got {self.w}")
        if self.mode not in (BATCH, CAUSAL):
            raise ValueError(f"window mode must be 'batch' or 'causal', got {self.mode!r}")

    @property
    def size(self) -> int:
        return 2 * self.w + 1


@dataclass
class WindowedFeatures:
    """Rows gathered from a clipped window, in step order.

    ``provenance[i] = (step, row)`` locates row ``i`` in the bank.
    """

    rows: np.ndarray
    provenance: np.ndarray
    first_step: int
    last_step: int

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def d(self) -> int:
        return self.rows.shape[1]


class FeatureBank:
    """Append-only list of ``N_t x d`` float32 matrices."""

    def __init__(self, d: int, steps_per_second: float = 1.0):
        if d < 1:
            raise ValueError(f"feature dimension must be positive, got {d}")
        self.d = int(d)
        self.steps_per_second = float(np.float32(steps_per_second))
        self._steps: list[np.ndarray] = []

    @property
    def T(self) -> int:
        return len(self._steps)

    def __len__(self) -> int:
        return len(self._steps)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureBank):
            return NotImplemented
        return (
            self.d == other.d
            and self.steps_per_second == other.steps_per_second
            and self.T == other.T
            and all(np.array_equal(a, b) for a, b in zip(self._steps, other._steps))
        )

    def counts(self) -> np.ndarray:
        return np.array([s.shape[0] for s in self._steps], dtype=np.int64)

    def step(self, t: int) -> np.ndarray:
        return self._steps[t]

    def append_step(self, features) -> None:
        arr = np.asarray(features, dtype=np.float32)
        if arr.ndim == 1 and arr.size == 0:
            arr = arr.reshape(0, self.d)
        if arr.ndim != 2 or arr.shape[1] != self.d:
            raise ValueError(f"step must be N x {self.d}, got shape {arr.shape}")
        arr = np.array(arr, copy=True)
        arr.setflags(write=False)
        self._steps.append(arr)

    def all_rows(self) -> np.ndarray:
        if not self._steps:
            return np.zeros((0, self.d), dtype=np.float32)
        return np.concatenate(self._steps, axis=0)

    def window_bounds(self, t: int, spec: WindowSpec) -> tuple[int, int]:
        """Inclusive step range of the clipped window at ``t``."""
        if not 0 <= t < self.T:
            raise IndexError(f"step {t} outside bank of {self.T} steps")
        if spec.mode == BATCH:
            return max(0, t - spec.w), min(self.T - 1, t + spec.w)
        return max(0, t - 2 * spec.w), t

    def window(self, t: int, spec: WindowSpec) -> WindowedFeatures:
        lo, hi = self.window_bounds(t, spec)
        return self.gather(lo, hi)

    def gather(self, lo: int, hi: int) -> WindowedFeatures:
        """Stack steps ``lo..hi`` (inclusive) into one matrix."""
        steps = self._steps[lo:hi + 1]
        prov = [
            np.stack([np.full(s.shape[0], lo + i), np.arange(s.shape[0])], axis=1)
            for i, s in enumerate(steps)
        ]
        if steps:
            rows = np.concatenate(steps, axis=0)
            provenance = np.concatenate(prov, axis=0).astype(np.int64)
        else:
            rows = np.zeros((0, self.d), dtype=np.float32)
            provenance = np.zeros((0, 2), dtype=np.int64)
        return WindowedFeatures(rows, provenance.reshape(-1, 2), lo, hi)

    def serialize(self, sink: BinaryIO) -> None:
        sink.write(_HEADER.pack(MAGIC, VERSION, self.d, self.T, self.steps_per_second))
        for s in self._steps:
            sink.write(_COUNT.pack(s.shape[0]))
            sink.write(s.astype("<f4", copy=False).tobytes())

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        self.serialize(buf)
        return buf.getvalue()

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "wb") as fh:
            self.serialize(fh)

    @classmethod
    def deserialize(cls, source: BinaryIO) -> "FeatureBank":
        return cls.from_bytes(source.read())

    @classmethod
    def from_bytes(cls, data: bytes) -> "FeatureBank":
        if len(data) < 4:
            raise TruncatedBankError("stream shorter than the magic number")
        if data[:4] != MAGIC:
            raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
        if len(data) < _HEADER.size:
            raise TruncatedBankError("stream ends inside the header")
        _, version, d, T, rate = _HEADER.unpack_from(data, 0)
        if version != VERSION:
            raise VersionMismatchError(f"unsupported bank version {version}, expected {VERSION}")
        if d == 0:
            raise InconsistentBankError("header declares d = 0")
        offset = _HEADER.size
        steps = []
        for t in range(T):
            if offset + _COUNT.size > len(data):
                raise TruncatedBankError(f"stream ends before step {t} of {T}")
            (n,) = _COUNT.unpack_from(data, offset)
            offset += _COUNT.size
            nbytes = n * d * 4
            if offset + nbytes > len(data):
                raise TruncatedBankError(f"step {t} declares {n} rows but the stream ends early")
            steps.append(np.frombuffer(data, dtype="<f4", count=n * d, offset=offset).reshape(n, d))
            offset += nbytes
        if offset != len(data):
            raise InconsistentBankError(
                f"{len(data) - offset} trailing bytes after the declared {T} steps"
            )
        bank = cls(d, rate)
        for s in steps:
            bank.append_step(s)
        return bank

    @classmethod
    def load(cls, path: str | os.PathLike) -> "FeatureBank":
        with open(path, "rb") as fh:
            return cls.deserialize(fh)


def pad_and_mask(
    windows: Sequence[WindowedFeatures],
    n_max: int | None = None,
    dtype=np.float64,
) -> tuple[np.ndarray, np.ndarray]:
    """Zero-pad windows to a common row count.

    Returns ``(batch, mask)`` of shapes ``B x N_pad x d`` and ``B x N_pad``;
    mask is True on real rows.
    """
    if not windows:
        raise ValueError("pad_and_mask needs at least one window")
    d = windows[0].d
    if any(w.d != d for w in windows):
        raise ValueError("all windows must share the feature dimension")
    longest = max(w.n for w in windows)
    if n_max is None:
        n_max = longest
    elif n_max < longest:
        raise ValueError(f"n_max={n_max} is smaller than a window of {longest} rows")
    batch = np.zeros((len(windows), n_max, d), dtype=dtype)
    mask = np.zeros((len(windows), n_max), dtype=bool)
    for i, w in enumerate(windows):
        batch[i, :w.n] = w.rows
        mask[i, :w.n] = True
    return batch, mask


def bank_from_stream(frame_times, frame_index, features, duration: float,
                     steps_per_second: float) -> FeatureBank:
    """Sample a bank from a per-frame feature stream.

    ``features`` holds every detection row (``R x d``), ``frame_index`` maps
    each row to a frame, and ``frame_times`` gives each frame's time in
    seconds. The bank has ``floor(duration * steps_per_second)`` steps; step
    ``t`` takes the rows of the frame closest to the centre of its interval
    (earlier frame on ties), or no rows when the stream has no frames.
    """
    frame_times = np.asarray(frame_times, dtype=np.float64).reshape(-1)
    frame_index = np.asarray(frame_index, dtype=np.int64).reshape(-1)
    features = np.asarray(features, dtype=np.float32)
    if features.ndim != 2:
        raise InconsistentBankError(f"stream features must be R x d, got shape {features.shape}")
    if frame_index.shape[0] != features.shape[0]:
        raise InconsistentBankError("frame_index and features disagree on the row count")
    if frame_index.size and (frame_index.min() < 0 or frame_index.max() >= frame_times.size):
        raise InconsistentBankError("frame_index refers to a missing frame")
    if steps_per_second <= 0 or duration < 0:
        raise ValueError("steps_per_second must be > 0 and duration >= 0")
    if features.shape[1] < 1:
        raise InconsistentBankError("stream feature dimension must be positive")
    bank = FeatureBank(features.shape[1], steps_per_second)
    steps = int(np.floor(duration * steps_per_second + 1e-9))
    rows_of = [features[frame_index == f] for f in range(frame_times.size)]
    for t in range(steps):
        if frame_times.size == 0:
            bank.append_step(np.zeros((0, bank.d)))
            continue
        centre = (t + 0.5) / steps_per_second
        bank.append_step(rows_of[int(np.argmin(np.abs(frame_times - centre)))])
    return bank
