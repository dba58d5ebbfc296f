"""Simulated rank group and collectives over jagged payloads.

Collectives move data through in-memory mailboxes and keep exact traffic
and residency accounting instead of wall-clock timing. Accounting rules:

* Byte counts cover value payloads only; message headers (sequence ids,
  chunk ids, ranges, counts at 8 bytes per integer) are tallied
  separately. Self-addressed data moves for free.
* Residency is tracked per rank as value-payload bytes held, including
  send/receive staging. Deliveries happen in cp_size - 1 rotation steps
  (step s: rank r sends to r+s, receives from r-s, mod cp_size); within a
  step a rank's send and receive overlap, so its meter takes one net
  change. A gather retains what it sends (every rank keeps its own copy
  of the result), so its residency only grows; an all-to-all relinquishes
  the rows it ships, so its residency stays near the larger of the
  outgoing and incoming footprints.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .jagged import JaggedTensor, _freeze

_HEADER_INTS_PER_CHUNK = 4  # seq id, chunk id, start, count
_HEADER_FIXED_BYTES = 24  # source, destination, chunk count


class CollectiveError(RuntimeError):
    """A rank group was used in a way that would deadlock or drop data."""


class MemoryMeter:
    """Running peak of resident payload bytes for one rank."""

    __slots__ = ("current", "peak")

    def __init__(self, initial: int = 0):
        self.current = int(initial)
        self.peak = int(initial)

    def step(self, delta: int) -> None:
        self.current += int(delta)
        if self.current > self.peak:
            self.peak = self.current


@dataclass
class CommStats:
    """Per-rank traffic accounting for one collective (or one phase)."""

    rank: int
    bytes_sent: int = 0
    bytes_received: int = 0
    messages: int = 0
    peak_resident_bytes: int = 0
    dtype_size: int = 0
    header_bytes_sent: int = 0
    header_bytes_received: int = 0

    def to_json_dict(self) -> dict:
        return {
            "rank": self.rank,
            "bytes_sent": self.bytes_sent,
            "bytes_received": self.bytes_received,
            "messages": self.messages,
            "peak_resident_bytes": self.peak_resident_bytes,
        }

    def add(self, other: "CommStats") -> None:
        self.bytes_sent += other.bytes_sent
        self.bytes_received += other.bytes_received
        self.messages += other.messages
        self.header_bytes_sent += other.header_bytes_sent
        self.header_bytes_received += other.header_bytes_received
        self.peak_resident_bytes = max(self.peak_resident_bytes, other.peak_resident_bytes)
        self.dtype_size = max(self.dtype_size, other.dtype_size)


@dataclass(frozen=True)
class JaggedMessage:
    """Chunk-addressed payload: header rows describe where each chunk of
    token rows belongs (sequence, chunk index, position range)."""

    seq_ids: np.ndarray  # (num_chunks,) int64
    chunk_ids: np.ndarray
    starts: np.ndarray  # global position of each chunk's first token
    counts: np.ndarray  # tokens per chunk
    arrays: Mapping[str, np.ndarray]  # named payloads, first dim == counts.sum()

    def __post_init__(self) -> None:
        for name in ("seq_ids", "chunk_ids", "starts", "counts"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        rows = int(self.counts.sum())
        for name, arr in self.arrays.items():
            if arr.shape[0] != rows:
                raise ValueError(
                    f"payload '{name}' has {arr.shape[0]} rows but header counts sum to {rows}"
                )

    @property
    def num_chunks(self) -> int:
        return int(self.counts.size)

    @property
    def num_rows(self) -> int:
        return int(self.counts.sum())

    def payload_nbytes(self) -> int:
        return int(sum(arr.nbytes for arr in self.arrays.values()))

    def header_nbytes(self) -> int:
        return _HEADER_FIXED_BYTES + 8 * _HEADER_INTS_PER_CHUNK * self.num_chunks


class RankGroup:
    """A CP group of simulated ranks exchanging through mailboxes.

    Every collective is a full-group rendezvous: the whole per-rank input
    list must be presented at once, which is also how step mismatches and
    missing ranks are detected.
    """

    def __init__(self, cp_size: int):
        if cp_size < 1:
            raise ValueError("cp_size must be >= 1")
        self.cp_size = cp_size
        self.steps_completed = 0
        self.mailboxes: list[list] = [[] for _ in range(cp_size)]

    def _require_full_group(self, entries: Sequence, what: str) -> None:
        if len(entries) != self.cp_size:
            raise CollectiveError(
                f"{what}: got {len(entries)} ranks for a group of {self.cp_size} "
                "(rank missing from collective)"
            )

    def deliver(self, rank: int, item) -> None:
        # One outstanding delivery per rank: each collective overwrites.
        self.mailboxes[rank] = [item]

    def drain(self, rank: int) -> list:
        items, self.mailboxes[rank] = self.mailboxes[rank], []
        return items


def _rotation_pairs(cp_size: int):
    """Deterministic delivery schedule: step s pairs r -> (r+s) % cp."""
    for s in range(1, cp_size):
        yield s


def gather_traffic(
    cp_size: int, payload: Sequence[int], dtype_size: int
) -> tuple[list[CommStats], list[MemoryMeter]]:
    """Traffic and residency accounting for a batch-dimension gather of
    ``payload[r]`` bytes per rank. The gather retains what it sends, so
    every rank's residency climbs to the full concatenated payload."""
    stats = [CommStats(rank=r, dtype_size=dtype_size) for r in range(cp_size)]
    meters = [MemoryMeter(payload[r]) for r in range(cp_size)]
    for s in _rotation_pairs(cp_size):
        for r in range(cp_size):
            src = (r - s) % cp_size
            stats[r].bytes_received += payload[src]
            stats[r].bytes_sent += payload[r]  # own batch reaches one more peer
            stats[r].messages += 2
            meters[r].step(payload[src])
    for r in range(cp_size):
        stats[r].peak_resident_bytes = meters[r].peak
    return stats, meters


def all_gather_jagged(
    group: RankGroup, local: Sequence[JaggedTensor]
) -> tuple[list[JaggedTensor], list[CommStats]]:
    """Every rank ends up holding all ranks' batches concatenated in rank
    order. Residency grows to the full concatenated payload on each rank."""
    group._require_full_group(local, "all_gather_jagged")
    dims = {jt.embed_dim for jt in local}
    if len(dims) > 1:
        raise ValueError(f"embed_dim mismatch across ranks: {sorted(dims)}")
    cp = group.cp_size
    payload = [jt.values.nbytes for jt in local]
    stats, _ = gather_traffic(cp, payload, local[0].values.dtype.itemsize)

    values = np.concatenate([jt.values for jt in local]) if cp > 1 else local[0].values
    offsets = [0]
    for jt in local:
        base = offsets[-1]
        offsets.extend(int(base + off) for off in jt.offsets[1:])
    max_length = max((jt.max_length for jt in local), default=0)
    gathered = JaggedTensor(_freeze(values), _freeze(np.asarray(offsets, dtype=np.int64)), max_length)
    for r in range(cp):
        group.deliver(r, gathered)
    group.steps_completed += 1
    return [gathered for _ in range(cp)], stats


def all_to_all_jagged(
    group: RankGroup, send: Sequence[Sequence[JaggedMessage]]
) -> tuple[list[list[JaggedMessage]], list[CommStats]]:
    """Exchange one message per (source, destination) pair.

    Two-phase protocol: headers first (so receivers can size buffers),
    then payloads. Received messages are ordered by source rank. A rank
    relinquishes the rows it sends, so its residency stays near
    max(outgoing footprint, incoming footprint).
    """
    group._require_full_group(send, "all_to_all_jagged")
    cp = group.cp_size
    for src in range(cp):
        group._require_full_group(send[src], f"all_to_all_jagged sends from rank {src}")

    payload = [[send[src][dst].payload_nbytes() for dst in range(cp)] for src in range(cp)]
    header = [[send[src][dst].header_nbytes() for dst in range(cp)] for src in range(cp)]
    dtype_size = 0
    for src in range(cp):
        for dst in range(cp):
            for arr in send[src][dst].arrays.values():
                if np.issubdtype(arr.dtype, np.floating):
                    dtype_size = max(dtype_size, arr.dtype.itemsize)

    stats = [CommStats(rank=r, dtype_size=dtype_size) for r in range(cp)]
    meters = [MemoryMeter(sum(payload[r])) for r in range(cp)]  # everything staged locally
    # Phase 1: headers.
    for s in _rotation_pairs(cp):
        for r in range(cp):
            src, dst = (r - s) % cp, (r + s) % cp
            stats[r].header_bytes_received += header[src][r]
            stats[r].header_bytes_sent += header[r][dst]
    # Phase 2: payloads; sends drain what receives refill.
    for s in _rotation_pairs(cp):
        for r in range(cp):
            src, dst = (r - s) % cp, (r + s) % cp
            stats[r].bytes_received += payload[src][r]
            stats[r].bytes_sent += payload[r][dst]
            stats[r].messages += 2
            meters[r].step(payload[src][r] - payload[r][dst])
    for r in range(cp):
        stats[r].peak_resident_bytes = meters[r].peak

    received = [[send[src][dst] for src in range(cp)] for dst in range(cp)]
    for dst in range(cp):
        group.deliver(dst, received[dst])
    group.steps_completed += 1
    return received, stats


def ring_send_recv(
    group: RankGroup,
    step: int,
    payloads: Sequence[JaggedMessage],
    steps: Sequence[int] | None = None,
    meters: Sequence[MemoryMeter] | None = None,
) -> tuple[list[JaggedMessage], list[CommStats]]:
    """One ring rotation: rank r's payload goes to rank (r+1) % cp_size and
    rank r receives from (r-1) % cp_size.

    ``steps`` carries each rank's view of the current step number when the
    callers are driven independently; any disagreement is the simulated
    deadlock and raises CollectiveError.
    """
    group._require_full_group(payloads, "ring_send_recv")
    if steps is not None:
        group._require_full_group(steps, "ring_send_recv steps")
        if any(int(s) != int(step) for s in steps):
            raise CollectiveError(f"ring step mismatch across ranks: {list(steps)} != {step}")
    cp = group.cp_size
    out_bytes = [m.payload_nbytes() for m in payloads]
    received = [payloads[(r - 1) % cp] for r in range(cp)]
    dtype_size = 0
    for m in payloads:
        for arr in m.arrays.values():
            if np.issubdtype(arr.dtype, np.floating):
                dtype_size = max(dtype_size, arr.dtype.itemsize)

    stats = [CommStats(rank=r, dtype_size=dtype_size) for r in range(cp)]
    own_meters = list(meters) if meters is not None else [MemoryMeter(out_bytes[r]) for r in range(cp)]
    for r in range(cp):
        if cp > 1:
            in_bytes = out_bytes[(r - 1) % cp]
            stats[r].bytes_sent += out_bytes[r]
            stats[r].bytes_received += in_bytes
            stats[r].header_bytes_sent += payloads[r].header_nbytes()
            stats[r].header_bytes_received += received[r].header_nbytes()
            stats[r].messages += 2
            own_meters[r].step(in_bytes - out_bytes[r])
        stats[r].peak_resident_bytes = own_meters[r].peak
        group.deliver(r, received[r])
    group.steps_completed += 1
    return received, stats
