"""Append-only hash-chained audit storage and post-hoc verification.

Committed frames are subsampled before storage: one cumulative update stands
in for a window of iterates, summed exactly in integer lattice coordinates.
Verification later recomputes each stored state from the previous one and
flags any deviation beyond the verification tolerance. Blocks are chained by
SHA-256 over a canonical little-endian encoding, so any interior mutation
breaks a link.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .codec import (
    CheckpointCode,
    DictIndex,
    Frame,
    IndexAccumulator,
    LatticeQuantizer,
    NewEntry,
    _BitReader,
    _BitWriter,
)
from .compute import step

__all__ = [
    "CheckpointAudit",
    "CumulativeAudit",
    "Audit",
    "BlockHeader",
    "Block",
    "AuditChain",
    "IntegrityReport",
    "AuditRecord",
    "VerificationReport",
    "choose_subsample_period",
    "subsample_frame",
    "append_block",
    "verify_chain_integrity",
    "verify_computation",
    "block_bytes",
    "block_hash",
    "chain_to_bytes",
    "chain_from_bytes",
    "save_chain",
    "load_chain",
    "decode_block_audits",
]

GENESIS_HASH = b"\x00" * 32
_HEADER_LEN = 32 + 8 + 8 + 8


@dataclass
class CheckpointAudit:
    """A fully coded state opening a stored segment."""

    code: CheckpointCode
    covered_range: Tuple[int, int]


@dataclass
class CumulativeAudit:
    """Integer sum of the quantized updates over one subsampling window."""

    indices: np.ndarray
    level: int
    covered_range: Tuple[int, int]

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)


Audit = Union[CheckpointAudit, CumulativeAudit]


def choose_subsample_period(lipschitz: float, quant_error: float,
                            verification_tolerance: float, period_cap: int) -> int:
    """Largest window K whose worst-case audit deviation stays verifiable.

    Requires (L^K + 1) * K * quant_error <= verification_tolerance; the left
    side grows with K, so the scan stops at the first miss.
    """
    if quant_error <= 0 or verification_tolerance <= 0:
        raise ValueError("tolerances must be positive")
    if period_cap < 1:
        raise ValueError("period cap must be >= 1")
    best = None
    for k in range(1, period_cap + 1):
        if (lipschitz ** k + 1.0) * k * quant_error <= verification_tolerance:
            best = k
        else:
            break
    if best is None:
        raise ValueError(
            "no feasible subsampling period: use a smaller quantization error")
    return best


def subsample_frame(frame: Frame, period: int) -> List[Audit]:
    """Aggregate a sealed frame into audits: checkpoint, then window sums.

    Windows cover up to ``period`` consecutive updates; the last one may be
    shorter. Sums are exact in integer lattice coordinates, rescaled to the
    finest refinement level present in each window.
    """
    if not frame.sealed:
        raise ValueError("cannot subsample an unsealed frame")
    if period < 1:
        raise ValueError("period must be >= 1")
    t0 = frame.checkpoint_time
    audits: List[Audit] = [CheckpointAudit(code=frame.checkpoint_code,
                                           covered_range=(t0, t0))]
    updates = frame.updates
    i = 0
    while i < len(updates):
        j = min(i + period, len(updates))
        group = updates[i:j]
        level = max(u.refinement_level for u in group)
        total = np.zeros(len(group[0].indices), dtype=np.int64)
        for u in group:
            total += u.indices * (2 ** (level - u.refinement_level))
        audits.append(CumulativeAudit(indices=total, level=level,
                                      covered_range=(t0 + 1 + i, t0 + j)))
        i = j
    return audits


def _cumulative_width(q: LatticeQuantizer, period: int, level: int) -> int:
    count = 2 * period * q.max_index * (2 ** level) + 1
    return (count - 1).bit_length()


def _encode_audits(audits: Sequence[Audit], q: LatticeQuantizer, period: int) -> bytes:
    out = bytearray()
    for audit in audits:
        lo, hi = audit.covered_range
        if isinstance(audit, CheckpointAudit):
            code = audit.code
            if isinstance(code, DictIndex):
                out.append(0)
                out += struct.pack("<QQQ", lo, hi, code.index)
            else:
                if code.state.shape != (q.dimension,):
                    raise ValueError("checkpoint dimension mismatch")
                out.append(1)
                out += struct.pack("<QQ", lo, hi)
                out += code.state.astype("<f8").tobytes()
        else:
            if audit.indices.shape != (q.dimension,):
                raise ValueError("audit dimension mismatch")
            out.append(2)
            out += struct.pack("<QQ", lo, hi)
            out.append(audit.level)
            width = _cumulative_width(q, period, audit.level)
            writer = _BitWriter()
            for idx in audit.indices:
                writer.write(int(idx), width)
            out += writer.finish()
    return bytes(out)


def _decode_audits(payload: bytes, q: LatticeQuantizer, period: int) -> List[Audit]:
    audits: List[Audit] = []
    pos = 0
    while pos < len(payload):
        kind = payload[pos]
        pos += 1
        if kind in (0, 1):
            lo, hi = struct.unpack_from("<QQ", payload, pos)
            pos += 16
            if kind == 0:
                (index,) = struct.unpack_from("<Q", payload, pos)
                pos += 8
                audits.append(CheckpointAudit(code=DictIndex(index),
                                              covered_range=(lo, hi)))
            else:
                state = np.frombuffer(payload, dtype="<f8", count=q.dimension,
                                      offset=pos).copy()
                pos += 8 * q.dimension
                audits.append(CheckpointAudit(code=NewEntry(state=state),
                                              covered_range=(lo, hi)))
        elif kind == 2:
            lo, hi = struct.unpack_from("<QQ", payload, pos)
            pos += 16
            level = payload[pos]
            pos += 1
            width = _cumulative_width(q, period, level)
            nbytes = (width * q.dimension + 7) // 8
            reader = _BitReader(payload[pos:pos + nbytes])
            indices = np.array([reader.read_signed(width) for _ in range(q.dimension)],
                               dtype=np.int64)
            pos += nbytes
            audits.append(CumulativeAudit(indices=indices, level=level,
                                          covered_range=(lo, hi)))
        else:
            raise ValueError(f"unknown audit kind {kind} at payload offset {pos - 1}")
    return audits


@dataclass
class BlockHeader:
    prev_hash: bytes
    height: int
    frame_index: int
    payload_length: int


@dataclass
class Block:
    header: BlockHeader
    payload: bytes


def block_bytes(block: Block) -> bytes:
    h = block.header
    return (h.prev_hash + struct.pack("<QQQ", h.height, h.frame_index, h.payload_length)
            + block.payload)


def block_hash(block: Block) -> bytes:
    return hashlib.sha256(block_bytes(block)).digest()


@dataclass
class AuditChain:
    """Append-only block sequence; single writer, freely snapshotted readers."""

    subsample_period: int
    quantizer: LatticeQuantizer
    blocks: List[Block] = field(default_factory=list)
    genesis_hash: bytes = GENESIS_HASH

    @property
    def next_frame_index(self) -> int:
        if not self.blocks:
            return 0
        return self.blocks[-1].header.frame_index + 1


def append_block(chain: AuditChain, frame_index: int, audits: Sequence[Audit]) -> Block:
    """Append one committed frame's audits as a new block."""
    if frame_index != chain.next_frame_index:
        raise ValueError(
            f"frame {frame_index} out of order; expected {chain.next_frame_index}")
    payload = _encode_audits(audits, chain.quantizer, chain.subsample_period)
    # self-check: payload must decode back to what we encoded
    reencoded = _encode_audits(_decode_audits(payload, chain.quantizer,
                                              chain.subsample_period),
                               chain.quantizer, chain.subsample_period)
    if reencoded != payload:
        raise ValueError("audit payload failed its encode/decode self-check")
    prev = chain.genesis_hash if not chain.blocks else block_hash(chain.blocks[-1])
    block = Block(header=BlockHeader(prev_hash=prev, height=len(chain.blocks),
                                     frame_index=frame_index,
                                     payload_length=len(payload)),
                  payload=payload)
    chain.blocks.append(block)
    return block


@dataclass
class IntegrityReport:
    ok: bool
    first_bad_height: Optional[int] = None
    reason: Optional[str] = None


def verify_chain_integrity(chain: AuditChain) -> IntegrityReport:
    """Recompute every hash link; any prefix of an untampered chain passes."""
    prev = chain.genesis_hash
    for i, block in enumerate(chain.blocks):
        h = block.header
        if h.height != i:
            return IntegrityReport(False, i, "height not dense")
        if h.frame_index != i:
            return IntegrityReport(False, i, "frame index not dense")
        if h.payload_length != len(block.payload):
            return IntegrityReport(False, i, "payload length mismatch")
        if h.prev_hash != prev:
            return IntegrityReport(False, max(i - 1, 0), "hash link broken")
        prev = block_hash(block)
    return IntegrityReport(True)


def decode_block_audits(chain: AuditChain, block: Block) -> List[Audit]:
    return _decode_audits(block.payload, chain.quantizer, chain.subsample_period)


@dataclass
class AuditRecord:
    height: int
    covered_range: Tuple[int, int]
    recompute_steps: int
    deviation: float
    ok: bool


@dataclass
class VerificationReport:
    records: List[AuditRecord]
    max_deviation: float
    all_ok: bool

    @property
    def failures(self) -> List[AuditRecord]:
        return [r for r in self.records if not r.ok]


def verify_computation(chain: AuditChain, op, verification_tolerance: float,
                       on_eval=None) -> VerificationReport:
    """Recompute the audited trajectory and flag deviations beyond tolerance.

    Walks the stored audits in order, applying the operation across each
    covered window from the previously reconstructed state. Only
    deterministic operations can be verified from audits alone.
    """
    if getattr(op, "stochastic", False):
        raise ValueError("verification by recomputation needs a deterministic operation")
    q = chain.quantizer
    replica: List[np.ndarray] = []
    records: List[AuditRecord] = []
    current: Optional[np.ndarray] = None
    current_time = 0
    base: Optional[np.ndarray] = None
    acc = IndexAccumulator(q.dimension)

    for block in chain.blocks:
        for audit in _decode_audits(block.payload, q, chain.subsample_period):
            if isinstance(audit, CheckpointAudit):
                code = audit.code
                if isinstance(code, NewEntry):
                    replica.append(code.state)
                    state = code.state
                else:
                    if code.index >= len(replica):
                        raise ValueError(
                            f"audit references unknown dictionary entry {code.index}")
                    state = replica[code.index]
                t = audit.covered_range[0]
                if current is not None:
                    k = t - current_time
                    if k < 1:
                        raise ValueError("audit ranges out of order")
                    recomputed = current
                    for _ in range(k):
                        recomputed = step(op, recomputed)
                    if on_eval:
                        on_eval(k)
                    dev = float(np.linalg.norm(state - recomputed))
                    records.append(AuditRecord(height=block.header.height,
                                               covered_range=audit.covered_range,
                                               recompute_steps=k, deviation=dev,
                                               ok=dev <= verification_tolerance))
                base = state
                acc = IndexAccumulator(q.dimension)
                current = state
                current_time = t
            else:
                if base is None:
                    raise ValueError("chain does not start with a checkpoint audit")
                t = audit.covered_range[1]
                k = t - current_time
                if k < 1:
                    raise ValueError("audit ranges out of order")
                recomputed = current
                for _ in range(k):
                    recomputed = step(op, recomputed)
                if on_eval:
                    on_eval(k)
                acc.add(audit.indices, audit.level)
                reconstructed = base + acc.value(q.step)
                dev = float(np.linalg.norm(reconstructed - recomputed))
                records.append(AuditRecord(height=block.header.height,
                                           covered_range=audit.covered_range,
                                           recompute_steps=k, deviation=dev,
                                           ok=dev <= verification_tolerance))
                current = reconstructed
                current_time = t

    max_dev = max((r.deviation for r in records), default=0.0)
    return VerificationReport(records=records, max_deviation=max_dev,
                              all_ok=all(r.ok for r in records))


def chain_to_bytes(chain: AuditChain) -> bytes:
    return b"".join(block_bytes(b) for b in chain.blocks)


def chain_from_bytes(blob: bytes, subsample_period: int,
                     quantizer: LatticeQuantizer) -> AuditChain:
    chain = AuditChain(subsample_period=subsample_period, quantizer=quantizer)
    pos = 0
    while pos < len(blob):
        if pos + _HEADER_LEN > len(blob):
            raise ValueError(f"torn block header at byte {pos}")
        prev_hash = blob[pos:pos + 32]
        height, frame_index, payload_length = struct.unpack_from("<QQQ", blob, pos + 32)
        pos += _HEADER_LEN
        if pos + payload_length > len(blob):
            raise ValueError(f"torn block payload at byte {pos}")
        payload = blob[pos:pos + payload_length]
        pos += payload_length
        chain.blocks.append(Block(header=BlockHeader(prev_hash=prev_hash, height=height,
                                                     frame_index=frame_index,
                                                     payload_length=payload_length),
                                  payload=payload))
    return chain


def save_chain(chain: AuditChain, path) -> None:
    with open(path, "wb") as fh:
        fh.write(chain_to_bytes(chain))


def load_chain(path, subsample_period: int, quantizer: LatticeQuantizer) -> AuditChain:
    with open(path, "rb") as fh:
        return chain_from_bytes(fh.read(), subsample_period=subsample_period,
                                quantizer=quantizer)
