"""Lossy trajectory compression: lattice-quantized delta updates, tolerance
dictionaries for checkpoints, frame bitstreams, and successive refinement.

The quantizer is a scaled cubic lattice. With per-coordinate pitch
``s = 2 * max_error / sqrt(d)`` the worst-case Euclidean rounding error is
exactly ``max_error``, which keeps every downstream tolerance argument exact
rather than probabilistic. Refinement halves the pitch per level, so only a
scale (the level) has to travel with a correction.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np

__all__ = [
    "LatticeQuantizer",
    "IndexAccumulator",
    "reported_states",
    "QuantizedUpdate",
    "CheckpointDictionary",
    "DictIndex",
    "NewEntry",
    "Frame",
    "RefinementChunk",
    "UpdateExceedsClamp",
    "quantize_update",
    "dequantize_update",
    "update_bit_cost",
    "dict_encode_checkpoint",
    "encode_frame",
    "decode_frame",
    "refine_update",
    "apply_refinement",
    "refinement_bits_per_level",
    "refinement_chunk_bits",
    "FRAME_MAGIC",
]

FRAME_MAGIC = 0xAF


class UpdateExceedsClamp(ValueError):
    """Update magnitude beyond the representable range; checkpoint instead."""


@dataclass(frozen=True)
class LatticeQuantizer:
    dimension: int
    max_error: float
    clamp_radius: float

    def __post_init__(self):
        if self.dimension < 1:
            raise ValueError("dimension must be >= 1")
        if self.max_error <= 0:
            raise ValueError("max_error must be positive")
        if self.clamp_radius <= self.max_error:
            raise ValueError("clamp_radius must exceed max_error")

    @property
    def step(self) -> float:
        """Per-coordinate lattice pitch giving worst-case error max_error."""
        return 2.0 * self.max_error / math.sqrt(self.dimension)

    @property
    def max_index(self) -> int:
        """Largest index magnitude a level-0 in-range update can produce."""
        return math.ceil(self.clamp_radius / self.step)


@dataclass
class QuantizedUpdate:
    indices: np.ndarray
    refinement_level: int = 0

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.refinement_level < 0:
            raise ValueError("refinement_level must be nonnegative")

    def __eq__(self, other):
        if not isinstance(other, QuantizedUpdate):
            return NotImplemented
        return (self.refinement_level == other.refinement_level
                and np.array_equal(self.indices, other.indices))


@dataclass
class DictIndex:
    index: int


@dataclass
class NewEntry:
    state: np.ndarray

    def __post_init__(self):
        self.state = np.asarray(self.state, dtype=np.float64)

    def __eq__(self, other):
        if not isinstance(other, NewEntry):
            return NotImplemented
        return np.array_equal(self.state, other.state)


CheckpointCode = Union[DictIndex, NewEntry]


@dataclass
class CheckpointDictionary:
    """Ordered store of unique checkpoints, no two within tolerance."""

    dimension: int
    tolerance: float
    entries: List[np.ndarray] = field(default_factory=list)

    @property
    def step(self) -> float:
        return 2.0 * self.tolerance / math.sqrt(self.dimension)

    def lookup(self, index: int) -> np.ndarray:
        return self.entries[index]


def dict_encode_checkpoint(dictionary: CheckpointDictionary, x: np.ndarray) -> CheckpointCode:
    """Code a checkpoint against the dictionary.

    Returns the index of the first entry within tolerance (scan order), or
    quantizes the state onto the dictionary's lattice, appends it, and
    returns the new entry.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (dictionary.dimension,):
        raise ValueError("checkpoint dimension mismatch")
    if not np.all(np.isfinite(x)):
        raise ValueError("checkpoint contains NaN or inf")
    for i, entry in enumerate(dictionary.entries):
        if np.linalg.norm(x - entry) <= dictionary.tolerance:
            return DictIndex(i)
    quantized = np.round(x / dictionary.step) * dictionary.step
    dictionary.entries.append(quantized)
    return NewEntry(state=quantized)


def quantize_update(q: LatticeQuantizer, delta: np.ndarray) -> QuantizedUpdate:
    """Round a delta onto the lattice; reconstruction error is at most max_error.

    Nearest-integer rounding per coordinate, ties to even. Deltas whose norm
    exceeds the clamp radius are rejected so the caller can checkpoint.
    """
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != (q.dimension,):
        raise ValueError("delta dimension mismatch")
    if not np.all(np.isfinite(delta)):
        raise ValueError("delta contains NaN or inf")
    if np.linalg.norm(delta) > q.clamp_radius:
        raise UpdateExceedsClamp(
            f"update norm {np.linalg.norm(delta):.6g} exceeds clamp radius {q.clamp_radius:.6g}")
    indices = np.round(delta / q.step).astype(np.int64)
    return QuantizedUpdate(indices=indices)


def dequantize_update(q: LatticeQuantizer, u: QuantizedUpdate) -> np.ndarray:
    """Reconstruct the delta: indices times the level-scaled pitch."""
    if u.indices.shape != (q.dimension,):
        raise ValueError("update dimension mismatch")
    return u.indices * (q.step / 2 ** u.refinement_level)


def update_bit_cost(q: LatticeQuantizer) -> int:
    """Bits for one fixed-width level-0 update.

    Per coordinate there are 2 * ceil(clamp_radius / step) + 1 representable
    indices; each is stored in ceil(log2(count)) bits, d coordinates total.
    """
    count = 2 * q.max_index + 1
    return q.dimension * (count - 1).bit_length()


def _bits_per_coordinate(q: LatticeQuantizer) -> int:
    return update_bit_cost(q) // q.dimension


@dataclass
class Frame:
    """A checkpoint header plus a run of quantized updates."""

    frame_index: int
    checkpoint_code: CheckpointCode
    checkpoint_time: int = field(compare=False, default=0)
    updates: List[QuantizedUpdate] = field(default_factory=list)
    sealed: bool = False
    cap: Optional[int] = field(compare=False, default=None)

    def append_update(self, update: QuantizedUpdate) -> None:
        if self.sealed:
            raise ValueError("frame is sealed")
        if self.cap is not None and len(self.updates) >= self.cap:
            raise ValueError("frame is at its configured cap")
        self.updates.append(update)

    def seal(self) -> None:
        self.sealed = True

    def __len__(self) -> int:
        return len(self.updates)

    def __eq__(self, other):
        if not isinstance(other, Frame):
            return NotImplemented
        return (self.frame_index == other.frame_index
                and self.sealed == other.sealed
                and self.checkpoint_code == other.checkpoint_code
                and self.updates == other.updates)


class _BitWriter:
    def __init__(self):
        self._chunks = bytearray()
        self._acc = 0
        self._nbits = 0

    def write(self, value: int, width: int) -> None:
        self._acc = (self._acc << width) | (int(value) & ((1 << width) - 1))
        self._nbits += width
        while self._nbits >= 8:
            self._nbits -= 8
            self._chunks.append((self._acc >> self._nbits) & 0xFF)
        self._acc &= (1 << self._nbits) - 1

    def finish(self) -> bytes:
        if self._nbits:
            self._chunks.append((self._acc << (8 - self._nbits)) & 0xFF)
            self._acc = 0
            self._nbits = 0
        return bytes(self._chunks)


class _BitReader:
    def __init__(self, data: bytes, offset_bytes: int = 0):
        self._data = data
        self._pos = offset_bytes * 8

    def read(self, width: int) -> int:
        value = 0
        for _ in range(width):
            byte = self._data[self._pos >> 3]
            value = (value << 1) | ((byte >> (7 - (self._pos & 7))) & 1)
            self._pos += 1
        return value

    def read_signed(self, width: int) -> int:
        value = self.read(width)
        if value >= 1 << (width - 1):
            value -= 1 << width
        return value


def encode_frame(frame: Frame, q: LatticeQuantizer) -> Tuple[bytes, int]:
    """Serialize a sealed frame; returns (bytes, exact payload bit length).

    Layout: magic byte 0xAF, frame index (8-byte LE), checkpoint tag byte
    (0 dictionary index, 1 new entry), checkpoint payload (8-byte LE index or
    d float64 LE), update count (8-byte LE), then per-coordinate indices in
    two's complement, MSB first, zero-padded to a byte boundary. Only level-0
    updates are wire-encodable; refinements travel as separate chunks.
    """
    if not frame.sealed:
        raise ValueError("cannot encode an unsealed frame")
    header = bytearray([FRAME_MAGIC])
    header += struct.pack("<Q", frame.frame_index)
    code = frame.checkpoint_code
    if isinstance(code, DictIndex):
        header.append(0)
        header += struct.pack("<Q", code.index)
    else:
        if code.state.shape != (q.dimension,):
            raise ValueError("checkpoint dimension mismatch")
        header.append(1)
        header += code.state.astype("<f8").tobytes()
    header += struct.pack("<Q", len(frame.updates))

    width = _bits_per_coordinate(q)
    writer = _BitWriter()
    for u in frame.updates:
        if u.refinement_level != 0:
            raise ValueError("refined updates are not wire-encodable in a frame")
        if u.indices.shape != (q.dimension,):
            raise ValueError("update dimension mismatch")
        for idx in u.indices:
            writer.write(int(idx), width)
    bit_length = len(header) * 8 + len(frame.updates) * update_bit_cost(q)
    return bytes(header) + writer.finish(), bit_length


def decode_frame(data: bytes, q: LatticeQuantizer) -> Frame:
    """Parse a frame bitstream produced by encode_frame."""
    if not data or data[0] != FRAME_MAGIC:
        raise ValueError("bad frame magic")
    pos = 1
    frame_index = struct.unpack_from("<Q", data, pos)[0]
    pos += 8
    tag = data[pos]
    pos += 1
    if tag == 0:
        code: CheckpointCode = DictIndex(struct.unpack_from("<Q", data, pos)[0])
        pos += 8
    elif tag == 1:
        state = np.frombuffer(data, dtype="<f8", count=q.dimension, offset=pos).copy()
        code = NewEntry(state=state)
        pos += 8 * q.dimension
    else:
        raise ValueError(f"unknown checkpoint tag {tag}")
    count = struct.unpack_from("<Q", data, pos)[0]
    pos += 8

    width = _bits_per_coordinate(q)
    reader = _BitReader(data, pos)
    frame = Frame(frame_index=frame_index, checkpoint_code=code)
    for _ in range(count):
        idx = np.array([reader.read_signed(width) for _ in range(q.dimension)], dtype=np.int64)
        frame.append_update(QuantizedUpdate(indices=idx))
    frame.seal()
    return frame


class IndexAccumulator:
    """Exact running sum of quantized updates across refinement levels.

    Sums stay in integer lattice coordinates, rescaled by powers of two when
    a finer level appears, so every reader that accumulates the same updates
    reconstructs bit-identical states regardless of grouping.
    """

    def __init__(self, dimension: int):
        self.total = np.zeros(dimension, dtype=np.int64)
        self.level = 0

    def add(self, indices: np.ndarray, level: int) -> None:
        if level > self.level:
            self.total = self.total * (2 ** (level - self.level))
            self.level = level
        self.total = self.total + np.asarray(indices, dtype=np.int64) * (2 ** (self.level - level))

    def value(self, step: float) -> np.ndarray:
        return self.total * (step / 2 ** self.level)


def reported_states(anchor: np.ndarray, updates, q: LatticeQuantizer):
    """Reported states along a frame: anchor plus each running update sum.

    Returns M+1 states (the anchor first). All roles reconstruct through the
    same integer accumulation, so client, endorser, and verifier agree on the
    reported trajectory exactly.
    """
    anchor = np.asarray(anchor, dtype=np.float64)
    acc = IndexAccumulator(q.dimension)
    states = [anchor]
    for u in updates:
        acc.add(u.indices, u.refinement_level)
        states.append(anchor + acc.value(q.step))
    return states


@dataclass
class RefinementChunk:
    """One level of extra precision for a single update."""

    target: Tuple[int, int]
    level: int
    correction_indices: np.ndarray

    def __post_init__(self):
        self.correction_indices = np.asarray(self.correction_indices, dtype=np.int64)
        if self.level < 1:
            raise ValueError("refinement level must be >= 1")


def refinement_bits_per_level(dimension: int) -> int:
    # corrections live in {-1, 0, 1}: two bits per coordinate
    return 2 * dimension


def refine_update(q: LatticeQuantizer, true_delta: np.ndarray,
                  current: QuantizedUpdate,
                  target: Tuple[int, int] = (0, 0),
                  levels: int = 1) -> RefinementChunk:
    """Produce the correction taking an update to a finer level.

    The current reconstruction must lie within max_error / 2^level of the
    true delta (anything else is a stale base). For a single level the
    corrections are confined to {-1, 0, 1} per coordinate because halving
    the pitch moves the nearest lattice point by at most one fine cell; a
    jump over several levels widens the range to half a coarse cell.
    """
    true_delta = np.asarray(true_delta, dtype=np.float64)
    if true_delta.shape != (q.dimension,):
        raise ValueError("delta dimension mismatch")
    if levels < 1:
        raise ValueError("levels must be >= 1")
    level = current.refinement_level
    step_now = q.step / 2 ** level
    recon = current.indices * step_now
    # allow a whisker of float slack on the exact tolerance
    if np.linalg.norm(recon - true_delta) > q.max_error / 2 ** level * (1 + 1e-9):
        raise ValueError("stale refinement base: current update no longer matches the delta")
    scale = 2 ** levels
    fine = np.round(true_delta / (step_now / scale)).astype(np.int64)
    corrections = fine - scale * current.indices
    if np.any(np.abs(corrections) > scale // 2):
        raise ValueError("stale refinement base: correction out of range")
    return RefinementChunk(target=target, level=level + levels,
                           correction_indices=corrections)


def apply_refinement(current: QuantizedUpdate, chunk: RefinementChunk) -> QuantizedUpdate:
    """Apply a correction, yielding the update at the chunk's level."""
    jump = chunk.level - current.refinement_level
    if jump < 1:
        raise ValueError(
            f"chunk level {chunk.level} does not follow level {current.refinement_level}")
    if chunk.correction_indices.shape != current.indices.shape:
        raise ValueError("correction dimension mismatch")
    return QuantizedUpdate(indices=2 ** jump * current.indices + chunk.correction_indices,
                           refinement_level=chunk.level)


def refinement_chunk_bits(dimension: int, levels: int) -> int:
    """Payload bits of one refinement chunk: compact header plus corrections.

    Corrections for an l-level jump fit in l + 1 bits per coordinate; the
    header carries the in-frame offset and the target level.
    """
    return 24 + (levels + 1) * dimension
