"""Time-tag streams and their on-disk format.

Binary layout (little endian)::

    header  16 bytes   magic b"QKNIT1", version u16, pulse_period_ps u64
    record  10 bytes   time_ps u64, detector u8, flags u8

Detector ``d`` sits on channel ``d // 2``; even detectors are the transmit
port of the channel's polarizing splitter (the ``+`` outcome), odd detectors
the reflect port. Flag bit 0 marks a dark count, bit 1 an afterpulse.
"""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import FormatVersionError, SchemaError, TruncatedFileError
from .states import AXES

MAGIC = b"QKNIT1"
VERSION = 1
HEADER = struct.Struct("<6sHQ")
TAG_DTYPE = np.dtype([("time", "<u8"), ("detector", "u1"), ("flags", "u1")])
assert HEADER.size == 16 and TAG_DTYPE.itemsize == 10

N_CHANNELS = 3
N_DETECTORS = 6
FLAG_DARK = 1
FLAG_AFTERPULSE = 2


def detector_of(channel: int, port: str) -> int:
    return 2 * channel + (0 if port == "transmit" else 1)


@dataclass(frozen=True)
class DetectionEvent:
    time: int
    detector: int
    flags: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.detector < N_DETECTORS:
            raise ValueError(f"detector {self.detector} out of range")

    @property
    def channel(self) -> int:
        return self.detector // 2

    @property
    def port(self) -> str:
        return "transmit" if self.detector % 2 == 0 else "reflect"


@dataclass(frozen=True)
class SettingsLog:
    """Per-channel measurement basis for each acquisition segment.

    ``segments`` is a sequence of ``(start_ps, (basis_ch0, basis_ch1, basis_ch2))``
    sorted by start time; the first segment starts at 0.
    """

    segments: tuple[tuple[int, tuple[str, str, str]], ...] = ((0, ("Z", "X", "Y")),)

    def __post_init__(self) -> None:
        segs = tuple((int(s), tuple(b)) for s, b in self.segments)
        if not segs or segs[0][0] != 0:
            raise SchemaError("settings log must start at time 0")
        starts = [s for s, _ in segs]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise SchemaError("settings segments must have increasing start times")
        for _, bases in segs:
            if len(bases) != N_CHANNELS or any(b not in AXES for b in bases):
                raise SchemaError(f"bad channel bases {bases!r}")
        object.__setattr__(self, "segments", segs)

    @classmethod
    def fixed(cls, bases: Sequence[str] = ("Z", "X", "Y")) -> "SettingsLog":
        return cls(((0, tuple(bases)),))

    def segment_of(self, times_ps: np.ndarray) -> np.ndarray:
        starts = np.array([s for s, _ in self.segments], dtype=np.int64)
        return np.searchsorted(starts, np.asarray(times_ps, dtype=np.int64), side="right") - 1

    def axis_table(self) -> np.ndarray:
        """(segment, channel) -> index into AXES."""
        return np.array([[AXES.index(b) for b in bases] for _, bases in self.segments], dtype=np.int64)

    def to_json(self) -> list:
        return [{"start_ps": s, "bases": list(b)} for s, b in self.segments]

    @classmethod
    def from_json(cls, obj) -> "SettingsLog":
        try:
            return cls(tuple((int(o["start_ps"]), tuple(o["bases"])) for o in obj))
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"bad settings log: {exc}") from exc


@dataclass
class TagStream:
    records: np.ndarray
    pulse_period_ps: int
    settings: SettingsLog = field(default_factory=SettingsLog)

    def __post_init__(self) -> None:
        self.records = np.asarray(self.records, dtype=TAG_DTYPE)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def times(self) -> np.ndarray:
        return self.records["time"]

    @property
    def detectors(self) -> np.ndarray:
        return self.records["detector"]

    def events(self) -> Iterator[DetectionEvent]:
        for r in self.records:
            yield DetectionEvent(int(r["time"]), int(r["detector"]), int(r["flags"]))


def empty_records(n: int = 0) -> np.ndarray:
    return np.zeros(n, dtype=TAG_DTYPE)


def write_tags(path, stream: TagStream) -> None:
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, int(stream.pulse_period_ps)))
        fh.write(np.ascontiguousarray(stream.records, dtype=TAG_DTYPE).tobytes())


def read_header(fh) -> int:
    raw = fh.read(HEADER.size)
    if len(raw) < HEADER.size:
        raise TruncatedFileError(f"time-tag header is {len(raw)} bytes, expected {HEADER.size}")
    magic, version, period = HEADER.unpack(raw)
    if magic != MAGIC:
        raise SchemaError(f"not a time-tag file (magic {magic!r})")
    if version != VERSION:
        raise FormatVersionError(f"time-tag format version {version}, this build reads {VERSION}")
    return period


def read_tags(path, settings: "SettingsLog | None" = None) -> TagStream:
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        period = read_header(fh)
        payload = size - HEADER.size
        if payload % TAG_DTYPE.itemsize:
            raise TruncatedFileError(f"{path}: payload of {payload} bytes is not a whole number of records")
        records = np.fromfile(fh, dtype=TAG_DTYPE)
    return TagStream(records, period, settings or SettingsLog())


def iter_tag_chunks(path, chunk_records: int = 1 << 20) -> Iterator[np.ndarray]:
    """Yield record arrays of at most ``chunk_records`` without loading the whole file."""
    size = os.path.getsize(path)
    if (size - HEADER.size) % TAG_DTYPE.itemsize and size >= HEADER.size:
        raise TruncatedFileError(f"{path}: trailing partial record")
    with open(path, "rb") as fh:
        read_header(fh)
        while True:
            chunk = np.fromfile(fh, dtype=TAG_DTYPE, count=chunk_records)
            if len(chunk) == 0:
                return
            yield chunk


def write_tags_csv(path, stream: TagStream) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_ps", "detector", "channel", "port", "flags"])
        for r in stream.records:
            d = int(r["detector"])
            w.writerow([int(r["time"]), d, d // 2, "transmit" if d % 2 == 0 else "reflect", int(r["flags"])])
