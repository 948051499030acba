"""Deterministic message passing and protocol cost accounting.

Delivery is immediate but totally ordered by (send step, sender, sequence),
so replaying a run always yields the same trace. The ledger counts atomic
operation evaluations by role and bits by category; predictions implement
the per-window transaction/streaming/batch cost model with unit constants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List

__all__ = [
    "Message",
    "Network",
    "CostLedger",
    "ModeParams",
    "CostPrediction",
    "RatioReport",
    "dispatch",
    "predicted_cost",
    "measured_vs_predicted",
    "MESSAGE_KINDS",
]

MESSAGE_KINDS = ("FrameReport", "EndorsementMsg", "InvalidationNotice",
                 "RefinementChunkMsg", "CommitNotice")


@dataclass(eq=False)
class Message:
    kind: str
    sender: str
    receiver: str
    send_step: int
    seq: int
    payload: object
    payload_bits: int
    meta_bits: int


def dispatch(messages: List[Message]) -> List[Message]:
    """Deterministic delivery order: (send step, sender id, sequence).

    Sequence numbers increase per sender, so the order is FIFO for every
    sender-receiver pair; no loss, no duplication.
    """
    return sorted(messages, key=lambda m: (m.send_step, m.sender, m.seq))


@dataclass
class CostLedger:
    """Monotone counters for computation, communication, and storage."""

    comp_atomic_ops: Dict[str, int] = field(default_factory=dict)
    comm_bits: int = 0
    comm_meta_bits: int = 0
    received_bits: int = 0
    received_meta_bits: int = 0
    storage_bits: int = 0
    storage_meta_bits: int = 0

    def count_op(self, role: str, n: int = 1) -> None:
        if n < 0:
            raise ValueError("operation counts only grow")
        self.comp_atomic_ops[role] = self.comp_atomic_ops.get(role, 0) + n

    def eval_hook(self, role: str):
        return lambda n=1: self.count_op(role, n)

    @property
    def total_comp(self) -> int:
        return sum(self.comp_atomic_ops.values())

    def record_send_bits(self, payload_bits: int, meta_bits: int) -> None:
        if payload_bits < 0 or meta_bits < 0:
            raise ValueError("bit counts only grow")
        self.comm_bits += payload_bits
        self.comm_meta_bits += meta_bits

    def record_receive_bits(self, payload_bits: int, meta_bits: int) -> None:
        self.received_bits += payload_bits
        self.received_meta_bits += meta_bits

    def record_storage(self, payload_bits: int, meta_bits: int) -> None:
        if payload_bits < 0 or meta_bits < 0:
            raise ValueError("bit counts only grow")
        self.storage_bits += payload_bits
        self.storage_meta_bits += meta_bits

    @property
    def conserved(self) -> bool:
        """Sender-side and receiver-side bit totals agree."""
        return (self.comm_bits == self.received_bits
                and self.comm_meta_bits == self.received_meta_bits)


class Network:
    """In-memory network: send now, deliver in deterministic batches."""

    def __init__(self, ledger: CostLedger):
        self.ledger = ledger
        self.step = 0
        self._pending: List[Message] = []
        self._seq: Dict[str, int] = {}
        self.delivered_count = 0

    def send(self, kind: str, sender: str, receiver: str, payload,
             payload_bits: int, meta_bits: int) -> Message:
        seq = self._seq.get(sender, 0)
        self._seq[sender] = seq + 1
        msg = Message(kind=kind, sender=sender, receiver=receiver,
                      send_step=self.step, seq=seq, payload=payload,
                      payload_bits=payload_bits, meta_bits=meta_bits)
        self.ledger.record_send_bits(payload_bits, meta_bits)
        self._pending.append(msg)
        return msg

    def deliver_all(self) -> List[Message]:
        batch = dispatch(self._pending)
        self._pending = []
        for msg in batch:
            self.ledger.record_receive_bits(msg.payload_bits, msg.meta_bits)
        self.step += 1
        self.delivered_count += len(batch)
        return batch


@dataclass(frozen=True)
class ModeParams:
    """Inputs to the per-window cost model (one window = frame_cap iterates)."""

    mode: str
    endorsers_per_frame: float
    frame_cap: int
    subsample_rate: float
    dimension: int
    state_bound: float
    quant_error: float
    clamp_radius: float
    meta_bits: float

    def __post_init__(self):
        if self.mode not in ("transaction", "streaming", "batch"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not (self.state_bound > self.clamp_radius > self.quant_error > 0):
            raise ValueError("need state_bound > clamp_radius > quant_error > 0")
        if self.frame_cap < 1 or not (0 < self.subsample_rate <= 1):
            raise ValueError("frame_cap >= 1 and subsample_rate in (0, 1] required")


@dataclass(frozen=True)
class CostPrediction:
    comm_bits: float
    storage_bits: float


def predicted_cost(params: ModeParams) -> CostPrediction:
    """Per-window bit budgets with all big-O constants set to one.

    Transaction mode codes every state over the full range; streaming delta
    codes per state but pays metadata per state; batch pays metadata once per
    window and subsamples storage.
    """
    m_bar = params.frame_cap
    d = params.dimension
    full_state = d * math.log2(params.state_bound / params.quant_error)
    per_update = d * math.log2(params.clamp_radius / params.quant_error)
    meta = params.meta_bits
    if params.mode == "transaction":
        comm = m_bar * full_state + m_bar * meta
        storage = comm
    elif params.mode == "streaming":
        comm = m_bar * per_update + full_state + m_bar * meta
        storage = comm
    else:
        comm = m_bar * per_update + full_state + meta
        storage = params.subsample_rate * m_bar * per_update + full_state + meta
    return CostPrediction(comm_bits=comm, storage_bits=storage)


@dataclass(frozen=True)
class RatioReport:
    measured_comm_bits: float
    measured_storage_bits: float
    predicted_comm_bits: float
    predicted_storage_bits: float
    comm_ratio: float
    storage_ratio: float


def measured_vs_predicted(ledger: CostLedger, params: ModeParams,
                          windows: float) -> RatioReport:
    """Compare a run's recorded bits against the model, per window."""
    if windows <= 0:
        raise ValueError("windows must be positive")
    prediction = predicted_cost(params)
    comm = (ledger.comm_bits + ledger.comm_meta_bits) / windows
    storage = (ledger.storage_bits + ledger.storage_meta_bits) / windows
    return RatioReport(
        measured_comm_bits=comm,
        measured_storage_bits=storage,
        predicted_comm_bits=prediction.comm_bits,
        predicted_storage_bits=prediction.storage_bits,
        comm_ratio=comm / prediction.comm_bits,
        storage_ratio=storage / prediction.storage_bits,
    )
