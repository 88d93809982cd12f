"""Spatio-temporal grid and trajectory bit vectors.

The landscape is cut into square lat/lon cells of ``cell_size`` degrees and the
day into ``time_slots`` slots of ``time_interval`` seconds. Cells are numbered
time-major, then row (latitude), then column (longitude). Every interval is
half-open, ``[low, high)``.

A coarse grid can be refined by building a second :class:`GridSpec` whose
bounds are one coarse cell (see :meth:`GridSpec.cell_bounds`); the protocol
itself only ever sees one flat vector.
"""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

__all__ = [
    "GridSpec",
    "GpsPoint",
    "TrajectoryBitVector",
    "GridError",
    "OutOfBoundsError",
    "GridMismatchError",
    "cell_index",
    "encode_trajectory",
    "merge_or",
    "grid_id_for_length",
]

DEFAULT_TIME_INTERVAL = 300
DEFAULT_TIME_SLOTS = 288
_BITVEC_MAGIC = b"TBV1"


class GridError(ValueError):
    pass


class OutOfBoundsError(GridError):
    def __init__(self, message: str, point_index: int | None = None):
        if point_index is not None:
            message = f"point {point_index}: {message}"
        super().__init__(message)
        self.point_index = point_index


class GridMismatchError(GridError):
    pass


class GpsPoint(NamedTuple):
    lat: float
    lon: float
    timestamp: float


@dataclass(frozen=True)
class GridSpec:
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    cell_size: float
    epoch_start: int
    time_interval: int = DEFAULT_TIME_INTERVAL
    time_slots: int = DEFAULT_TIME_SLOTS
    spatial_rows: int = field(init=False)
    spatial_cols: int = field(init=False)

    def __post_init__(self):
        if not (self.lat_min < self.lat_max and self.lon_min < self.lon_max):
            raise GridError("grid bounds must satisfy min < max")
        if not (-90 <= self.lat_min and self.lat_max <= 90):
            raise GridError("latitude bounds must lie in [-90, 90]")
        if not (-180 <= self.lon_min and self.lon_max <= 180):
            raise GridError("longitude bounds must lie in [-180, 180]")
        if not self.cell_size > 0:
            raise GridError("cell_size must be positive")
        if not self.time_interval > 0 or self.time_slots < 1:
            raise GridError("time_interval and time_slots must be positive")
        object.__setattr__(self, "spatial_rows", self._count(self.lat_min, self.lat_max))
        object.__setattr__(self, "spatial_cols", self._count(self.lon_min, self.lon_max))

    def _count(self, low: float, high: float) -> int:
        k = max(1, math.ceil((high - low) / self.cell_size))
        while low + (k - 1) * self.cell_size >= high:
            k -= 1
        while low + k * self.cell_size < high:
            k += 1
        return k

    @property
    def total_cells(self) -> int:
        return self.spatial_rows * self.spatial_cols * self.time_slots

    @property
    def epoch_end(self) -> int:
        return self.epoch_start + self.time_slots * self.time_interval

    def lat_edge(self, row: int) -> float:
        return self.lat_min + row * self.cell_size

    def lon_edge(self, col: int) -> float:
        return self.lon_min + col * self.cell_size

    def time_edge(self, slot: int) -> int:
        return self.epoch_start + slot * self.time_interval

    def canonical(self) -> str:
        """Flat ``key=value`` text, sorted keys, one per line."""
        items = {
            "cell_size": self.cell_size,
            "epoch_start": self.epoch_start,
            "lat_max": self.lat_max,
            "lat_min": self.lat_min,
            "lon_max": self.lon_max,
            "lon_min": self.lon_min,
            "time_interval": self.time_interval,
            "time_slots": self.time_slots,
        }
        return "".join(f"{k}={_fmt(v)}\n" for k, v in sorted(items.items()))

    @property
    def grid_id(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()

    @classmethod
    def parse(cls, text: str) -> "GridSpec":
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise GridError(f"line {lineno}: expected key=value")
            values[key.strip()] = value.strip()
        try:
            return cls(
                lat_min=float(values["lat_min"]),
                lat_max=float(values["lat_max"]),
                lon_min=float(values["lon_min"]),
                lon_max=float(values["lon_max"]),
                cell_size=float(values["cell_size"]),
                epoch_start=int(values["epoch_start"]),
                time_interval=int(values.get("time_interval", DEFAULT_TIME_INTERVAL)),
                time_slots=int(values.get("time_slots", DEFAULT_TIME_SLOTS)),
            )
        except KeyError as exc:
            raise GridError(f"missing grid field {exc.args[0]}") from None

    @classmethod
    def load(cls, path) -> "GridSpec":
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    def save(self, path) -> None:
        Path(path).write_text(self.canonical(), encoding="utf-8")

    def cell_coords(self, index: int) -> tuple[int, int, int]:
        """Inverse of :func:`cell_index`: ``(time_slot, row, col)``."""
        if not 0 <= index < self.total_cells:
            raise GridError(f"cell index {index} out of range")
        rest, col = divmod(index, self.spatial_cols)
        slot, row = divmod(rest, self.spatial_rows)
        return slot, row, col

    def cell_bounds(self, index: int) -> dict:
        slot, row, col = self.cell_coords(index)
        return {
            "time_slot": slot,
            "row": row,
            "col": col,
            "lat": (self.lat_edge(row), self.lat_edge(row + 1)),
            "lon": (self.lon_edge(col), self.lon_edge(col + 1)),
            "time": (self.time_edge(slot), self.time_edge(slot + 1)),
        }


def _fmt(v) -> str:
    if isinstance(v, float) and v.is_integer():
        return str(int(v))
    return repr(v)


def _locate(value: float, low: float, step: float, count: int, edge) -> int:
    k = min(max(math.floor((value - low) / step), 0), count - 1)
    # float division can land a cell off near an edge; edges are authoritative
    while k > 0 and value < edge(k):
        k -= 1
    while k + 1 < count and value >= edge(k + 1):
        k += 1
    return k


def cell_index(spec: GridSpec, p: GpsPoint) -> int:
    lat, lon, ts = p
    if not (spec.lat_min <= lat < spec.lat_max):
        raise OutOfBoundsError(f"latitude {lat} outside [{spec.lat_min}, {spec.lat_max})")
    if not (spec.lon_min <= lon < spec.lon_max):
        raise OutOfBoundsError(f"longitude {lon} outside [{spec.lon_min}, {spec.lon_max})")
    if not (spec.epoch_start <= ts < spec.epoch_end):
        raise OutOfBoundsError(f"timestamp {ts} outside [{spec.epoch_start}, {spec.epoch_end})")
    row = _locate(lat, spec.lat_min, spec.cell_size, spec.spatial_rows, spec.lat_edge)
    col = _locate(lon, spec.lon_min, spec.cell_size, spec.spatial_cols, spec.lon_edge)
    slot = int((ts - spec.epoch_start) // spec.time_interval)
    return (slot * spec.spatial_rows + row) * spec.spatial_cols + col


def grid_id_for_length(length: int) -> str:
    """Grid id for vectors that are not tied to a geographic grid."""
    return hashlib.sha256(f"length={length}\n".encode()).hexdigest()


class TrajectoryBitVector:
    """Immutable 0/1 indicator vector bound to a grid id."""

    __slots__ = ("bits", "grid_id")

    def __init__(self, bits, grid_id: str | None = None):
        arr = np.array(bits, dtype=np.uint8).reshape(-1)
        if arr.size and arr.max() > 1:
            raise GridError("bit vector elements must be 0 or 1")
        arr.flags.writeable = False
        self.bits = arr
        self.grid_id = grid_id if grid_id is not None else grid_id_for_length(arr.size)

    @classmethod
    def zeros(cls, length: int, grid_id: str | None = None) -> "TrajectoryBitVector":
        return cls(np.zeros(length, dtype=np.uint8), grid_id)

    def __len__(self) -> int:
        return int(self.bits.size)

    def __iter__(self):
        return (int(b) for b in self.bits)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TrajectoryBitVector):
            return NotImplemented
        return self.grid_id == other.grid_id and np.array_equal(self.bits, other.bits)

    def __repr__(self) -> str:
        return f"TrajectoryBitVector(len={len(self)}, popcount={self.popcount()}, grid_id={self.grid_id[:12]})"

    def popcount(self) -> int:
        return int(self.bits.sum(dtype=np.int64))

    def set_indices(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.bits)]

    def tolist(self) -> list[int]:
        return self.bits.tolist()

    def packed(self) -> bytes:
        return np.packbits(self.bits, bitorder="little").tobytes()

    def to_bytes(self) -> bytes:
        """File format: magic, 32-byte grid id, 8-byte big-endian length, packed bits
        (little-endian bit order within each byte)."""
        return (
            _BITVEC_MAGIC
            + bytes.fromhex(self.grid_id)
            + struct.pack(">Q", len(self))
            + self.packed()
        )

    @classmethod
    def from_packed(cls, data: bytes, length: int, grid_id: str) -> "TrajectoryBitVector":
        if len(data) != (length + 7) // 8:
            raise GridError("packed bit data has wrong length")
        bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), count=length, bitorder="little")
        return cls(bits, grid_id)

    @classmethod
    def from_bytes(cls, data: bytes) -> "TrajectoryBitVector":
        if data[:4] != _BITVEC_MAGIC or len(data) < 44:
            raise GridError("not a trajectory bit vector file")
        grid_id = data[4:36].hex()
        (length,) = struct.unpack(">Q", data[36:44])
        return cls.from_packed(data[44:], length, grid_id)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "TrajectoryBitVector":
        return cls.from_bytes(Path(path).read_bytes())


def encode_trajectory(spec: GridSpec, points: Iterable[GpsPoint]) -> TrajectoryBitVector:
    bits = np.zeros(spec.total_cells, dtype=np.uint8)
    for i, p in enumerate(points):
        try:
            bits[cell_index(spec, GpsPoint(*p))] = 1
        except OutOfBoundsError as exc:
            raise OutOfBoundsError(str(exc), point_index=i) from None
    return TrajectoryBitVector(bits, spec.grid_id)


def check_same_grid(a: TrajectoryBitVector, b: TrajectoryBitVector) -> None:
    if a.grid_id != b.grid_id or len(a) != len(b):
        raise GridMismatchError("bit vectors belong to different grids")


def merge_or(a: TrajectoryBitVector, b: TrajectoryBitVector) -> TrajectoryBitVector:
    check_same_grid(a, b)
    return TrajectoryBitVector(a.bits | b.bits, a.grid_id)
