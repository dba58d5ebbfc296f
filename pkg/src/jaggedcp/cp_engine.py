"""End-to-end context-parallel attention over a simulated rank group.

The pipeline is: plan the shard (which mini-chunk of which sequence lives
on which rank), redistribute the per-rank batches under one of two
protocols (gather-then-split or direct all-to-all), run the ring schedule
where key/value chunks rotate and every rank accumulates blockwise
partials against its resident queries, then route the finished rows back
to the ranks that contributed them.

Every rank's compute is a pure function of its inputs and all cross-rank
interaction goes through the comm collectives, so the engine runs
identically whether ranks are driven sequentially or by a thread pool.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Literal, Sequence

import numpy as np

from .attention import BiasConfig, BiasParams, blockwise_partial
from .comm import (
    CommStats,
    JaggedMessage,
    MemoryMeter,
    RankGroup,
    all_to_all_jagged,
    gather_traffic,
    ring_send_recv,
)
from .jagged import (
    JaggedIntSeries,
    JaggedTensor,
    MiniChunkLayout,
    _freeze,
    chunk_owner_map,
    lengths,
    make_contiguous_chunks,
    make_minichunks,
)

BalanceMode = Literal["balanced_minichunk", "naive_contiguous"]
BALANCE_MODES = ("balanced_minichunk", "naive_contiguous")


@dataclass(frozen=True)
class QKVBatch:
    """One rank's local attention inputs (shared offsets)."""

    q: JaggedTensor
    k: JaggedTensor
    v: JaggedTensor
    ts: JaggedIntSeries

    def __post_init__(self) -> None:
        for name, t in (("k", self.k), ("v", self.v), ("ts", self.ts)):
            if not np.array_equal(self.q.offsets, t.offsets):
                raise ValueError(f"offsets of q and {name} differ")

    @property
    def num_sequences(self) -> int:
        return self.q.num_sequences

    def payload_nbytes(self) -> int:
        return self.q.values.nbytes + self.k.values.nbytes + self.v.values.nbytes + self.ts.values.nbytes


@dataclass(frozen=True)
class PlanEntry:
    seq_id: int  # index into the CP group's combined batch
    chunk_id: int
    start: int  # global position range within the sequence
    end: int

    @property
    def count(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class ShardPlan:
    """Token-range ownership for one CP group's combined batch."""

    cp_size: int
    balance_mode: str
    seq_lengths: tuple[int, ...]
    seq_owner: tuple[int, ...]  # DP rank that contributed each sequence
    layout: MiniChunkLayout
    chunk_owner: tuple[int, ...]
    rank_entries: tuple[tuple[PlanEntry, ...], ...]

    @property
    def num_sequences(self) -> int:
        return len(self.seq_lengths)

    def group_offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.seq_lengths)]).astype(np.int64)

    def rank_token_counts(self) -> tuple[int, ...]:
        return tuple(sum(e.count for e in entries) for entries in self.rank_entries)


def build_shard_plan(
    lengths_per_rank: Sequence[Sequence[int]], cp_size: int, balance_mode: str
) -> ShardPlan:
    """Combine the per-rank batches (rank order) and assign token ranges.

    Balanced mode gives rank i mini-chunks {i, 2*cp-1-i} of every
    sequence; the naive baseline gives rank i the i-th of cp even
    contiguous slices.
    """
    if cp_size < 1:
        raise ValueError("cp_size must be >= 1")
    if balance_mode not in BALANCE_MODES:
        raise ValueError(f"unknown balance_mode {balance_mode!r}")
    if len(lengths_per_rank) != cp_size:
        raise ValueError(f"expected {cp_size} per-rank length lists, got {len(lengths_per_rank)}")
    seq_lengths: list[int] = []
    seq_owner: list[int] = []
    for rank, ls in enumerate(lengths_per_rank):
        seq_lengths.extend(int(x) for x in ls)
        seq_owner.extend([rank] * len(ls))
    if balance_mode == "balanced_minichunk":
        layout = make_minichunks(seq_lengths, cp_size)
    else:
        layout = make_contiguous_chunks(seq_lengths, cp_size)
    owners = chunk_owner_map(layout)
    rank_entries: list[tuple[PlanEntry, ...]] = []
    for r in range(cp_size):
        entries = [
            PlanEntry(b, c, *layout.chunk_ranges[b][c])
            for b in range(layout.num_sequences)
            for c in range(layout.chunks_per_seq)
            if owners[c] == r
        ]
        rank_entries.append(tuple(entries))
    return ShardPlan(
        cp_size=cp_size,
        balance_mode=balance_mode,
        seq_lengths=tuple(seq_lengths),
        seq_owner=tuple(seq_owner),
        layout=layout,
        chunk_owner=owners,
        rank_entries=tuple(rank_entries),
    )


@dataclass
class RankContext:
    """One rank's resident shard: Q/K/V/ts rows plus row provenance."""

    rank: int
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    ts: np.ndarray
    seq_ids: np.ndarray
    positions: np.ndarray
    chunk_ids: np.ndarray
    entries: tuple[PlanEntry, ...]

    @property
    def num_rows(self) -> int:
        return self.q.shape[0]

    def payload_nbytes(self) -> int:
        return self.q.nbytes + self.k.nbytes + self.v.nbytes + self.ts.nbytes


@dataclass(frozen=True)
class FlopsReport:
    """Causal-mask score-pair counts per rank (exact integers)."""

    per_rank: tuple[int, ...]
    total: int
    max_mean_ratio: float

    def to_json_dict(self) -> dict:
        return {
            "per_rank": list(self.per_rank),
            "total": self.total,
            "max_mean_ratio": self.max_mean_ratio,
        }


def _map_ranks(fn: Callable[[int], object], cp_size: int, scheduling: str) -> list:
    """Run a per-rank function across the group, sequentially or threaded.

    Results come back in rank order either way; failures carry the rank.
    """

    def run(r: int):
        try:
            return fn(r)
        except Exception as exc:  # annotate with the failing rank
            raise RuntimeError(f"rank {r}: {exc}") from exc

    if scheduling == "threaded" and cp_size > 1:
        with ThreadPoolExecutor(max_workers=cp_size) as pool:
            futures = [pool.submit(run, r) for r in range(cp_size)]
            return [f.result() for f in futures]
    if scheduling not in ("sequential", "threaded"):
        raise ValueError(f"unknown scheduling {scheduling!r}")
    return [run(r) for r in range(cp_size)]


def _entries_row_meta(entries: Sequence[PlanEntry]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    seq_ids = np.concatenate([np.full(e.count, e.seq_id, dtype=np.int64) for e in entries]) if entries else np.zeros(0, np.int64)
    positions = np.concatenate([np.arange(e.start, e.end, dtype=np.int64) for e in entries]) if entries else np.zeros(0, np.int64)
    chunk_ids = np.concatenate([np.full(e.count, e.chunk_id, dtype=np.int64) for e in entries]) if entries else np.zeros(0, np.int64)
    return seq_ids, positions, chunk_ids


def _gather_rows(values: np.ndarray, row_slices: list[tuple[int, int]], width: int | None) -> np.ndarray:
    if row_slices:
        return np.concatenate([values[a:b] for a, b in row_slices])
    shape = (0,) if width is None else (0, width)
    return np.zeros(shape, dtype=values.dtype)


def _check_plan_matches(batches: Sequence[QKVBatch], plan: ShardPlan) -> None:
    got: list[int] = []
    for b in batches:
        got.extend(int(x) for x in lengths(b.q))
    if tuple(got) != plan.seq_lengths:
        raise ValueError("plan does not match the provided batches")


def _context_from_rows(rank: int, plan: ShardPlan, q, k, v, ts) -> RankContext:
    seq_ids, positions, chunk_ids = _entries_row_meta(plan.rank_entries[rank])
    return RankContext(
        rank=rank,
        q=q,
        k=k,
        v=v,
        ts=ts,
        seq_ids=seq_ids,
        positions=positions,
        chunk_ids=chunk_ids,
        entries=plan.rank_entries[rank],
    )


def redistribute_allgather_split(
    group: RankGroup,
    batches: Sequence[QKVBatch],
    plan: ShardPlan,
    scheduling: str = "sequential",
) -> tuple[list[RankContext], list[CommStats]]:
    """Gather-then-split: every rank materializes the full concatenated
    batch (that is the peak), then keeps only its plan-assigned rows."""
    group._require_full_group(batches, "redistribute_allgather_split")
    _check_plan_matches(batches, plan)
    cp = group.cp_size
    dtype_size = batches[0].q.values.dtype.itemsize
    payload = [b.payload_nbytes() for b in batches]
    stats, meters = gather_traffic(cp, payload, dtype_size)

    full_q = np.concatenate([b.q.values for b in batches])
    full_k = np.concatenate([b.k.values for b in batches])
    full_v = np.concatenate([b.v.values for b in batches])
    full_ts = np.concatenate([b.ts.values for b in batches])
    full_bytes = full_q.nbytes + full_k.nbytes + full_v.nbytes + full_ts.nbytes
    goff = plan.group_offsets()

    def split(r: int) -> RankContext:
        rows = [(int(goff[e.seq_id] + e.start), int(goff[e.seq_id] + e.end)) for e in plan.rank_entries[r]]
        q = _gather_rows(full_q, rows, full_q.shape[1])
        k = _gather_rows(full_k, rows, full_k.shape[1])
        v = _gather_rows(full_v, rows, full_v.shape[1])
        ts = _gather_rows(full_ts, rows, None)
        # the split compacts kept rows inside the gathered buffer: the peak
        # is the full batch, the post-state the plan-assigned slab
        slab = q.nbytes + k.nbytes + v.nbytes + ts.nbytes
        meters[r].step(slab - full_bytes)
        stats[r].peak_resident_bytes = meters[r].peak
        return _context_from_rows(r, plan, q, k, v, ts)

    contexts = _map_ranks(split, cp, scheduling)
    group.steps_completed += 1
    return contexts, stats


def _slice_messages_for_rank(
    src: int, batch: QKVBatch, plan: ShardPlan, group_seq_base: int
) -> list[JaggedMessage]:
    """Messages from one source rank: its own sequences' chunks, addressed
    to each chunk's owner."""
    local_offsets = batch.q.offsets
    out: list[JaggedMessage] = []
    for dst in range(plan.cp_size):
        seq_ids, chunk_ids, starts, counts = [], [], [], []
        row_slices: list[tuple[int, int]] = []
        for e in plan.rank_entries[dst]:
            if plan.seq_owner[e.seq_id] != src:
                continue
            local_idx = e.seq_id - group_seq_base
            base = int(local_offsets[local_idx])
            seq_ids.append(e.seq_id)
            chunk_ids.append(e.chunk_id)
            starts.append(e.start)
            counts.append(e.count)
            row_slices.append((base + e.start, base + e.end))
        msg = JaggedMessage(
            np.asarray(seq_ids, dtype=np.int64),
            np.asarray(chunk_ids, dtype=np.int64),
            np.asarray(starts, dtype=np.int64),
            np.asarray(counts, dtype=np.int64),
            {
                "q": _gather_rows(batch.q.values, row_slices, batch.q.embed_dim),
                "k": _gather_rows(batch.k.values, row_slices, batch.k.embed_dim),
                "v": _gather_rows(batch.v.values, row_slices, batch.v.embed_dim),
                "ts": _gather_rows(batch.ts.values, row_slices, None),
            },
        )
        out.append(msg)
    return out


def _message_chunk_rows(msg: JaggedMessage) -> dict[tuple[int, int], tuple[int, int]]:
    bounds = np.concatenate([[0], np.cumsum(msg.counts)])
    return {
        (int(msg.seq_ids[i]), int(msg.chunk_ids[i])): (int(bounds[i]), int(bounds[i + 1]))
        for i in range(msg.num_chunks)
    }


def redistribute_alltoall(
    group: RankGroup,
    batches: Sequence[QKVBatch],
    plan: ShardPlan,
    scheduling: str = "sequential",
) -> tuple[list[RankContext], list[CommStats]]:
    """Direct chunk routing: each source slices its own sequences per the
    plan and ships every chunk straight to its owner. No rank ever holds
    the full concatenated batch."""
    group._require_full_group(batches, "redistribute_alltoall")
    _check_plan_matches(batches, plan)
    cp = group.cp_size
    seq_base = np.concatenate([[0], np.cumsum([b.num_sequences for b in batches])])

    send = _map_ranks(
        lambda r: _slice_messages_for_rank(r, batches[r], plan, int(seq_base[r])),
        cp,
        scheduling,
    )
    received, stats = all_to_all_jagged(group, send)

    def assemble(r: int) -> RankContext:
        chunk_index = [_message_chunk_rows(m) for m in received[r]]
        parts_q, parts_k, parts_v, parts_ts = [], [], [], []
        for e in plan.rank_entries[r]:
            src = plan.seq_owner[e.seq_id]
            a, b = chunk_index[src][(e.seq_id, e.chunk_id)]
            msg = received[r][src]
            parts_q.append(msg.arrays["q"][a:b])
            parts_k.append(msg.arrays["k"][a:b])
            parts_v.append(msg.arrays["v"][a:b])
            parts_ts.append(msg.arrays["ts"][a:b])
        d = batches[0].q.embed_dim
        dt = batches[0].q.values.dtype
        q = np.concatenate(parts_q) if parts_q else np.zeros((0, d), dtype=dt)
        k = np.concatenate(parts_k) if parts_k else np.zeros((0, d), dtype=dt)
        v = np.concatenate(parts_v) if parts_v else np.zeros((0, d), dtype=dt)
        ts = np.concatenate(parts_ts) if parts_ts else np.zeros((0,), dtype=np.int64)
        return _context_from_rows(r, plan, q, k, v, ts)

    contexts = _map_ranks(assemble, cp, scheduling)
    return contexts, stats


def _bundle_from_context(ctx: RankContext) -> JaggedMessage:
    return JaggedMessage(
        np.asarray([e.seq_id for e in ctx.entries], dtype=np.int64),
        np.asarray([e.chunk_id for e in ctx.entries], dtype=np.int64),
        np.asarray([e.start for e in ctx.entries], dtype=np.int64),
        np.asarray([e.count for e in ctx.entries], dtype=np.int64),
        {"k": ctx.k, "v": ctx.v, "ts": ctx.ts},
    )


def ring_hstu_attention(
    group: RankGroup,
    contexts: Sequence[RankContext],
    params: BiasParams,
    cfg: BiasConfig,
    scheduling: str = "sequential",
) -> tuple[list[np.ndarray], list[CommStats]]:
    """cp_size ring steps of blockwise attention.

    Key/value/timestamp bundles rotate around the group; at every step
    each rank scores its resident queries against the visiting chunks.
    SiLU gating makes partials purely additive, so the per-chunk partial
    outputs are buffered and reduced in ascending global chunk order after
    the last step -- the result does not depend on arrival order or on the
    rank scheduling.
    """
    group._require_full_group(contexts, "ring_hstu_attention")
    cp = group.cp_size
    d_out = contexts[0].v.shape[1]
    dt = contexts[0].q.dtype
    bundles = [_bundle_from_context(ctx) for ctx in contexts]
    meters = [
        MemoryMeter(ctx.q.nbytes + ctx.ts.nbytes + bundles[r].payload_nbytes())
        for r, ctx in enumerate(contexts)
    ]
    totals = [CommStats(rank=r, dtype_size=dt.itemsize) for r in range(cp)]
    partials: list[dict[int, np.ndarray]] = [{} for _ in range(cp)]

    def compute_step(r: int) -> None:
        ctx = contexts[r]
        msg = bundles[r]
        k_seq, k_chunk, k_pos = _expand_message_meta(msg)
        for c in sorted({int(c) for c in msg.chunk_ids}):
            idx = np.flatnonzero(k_chunk == c)
            block = blockwise_partial(
                ctx.q,
                ctx.seq_ids,
                ctx.positions,
                ctx.ts,
                msg.arrays["k"][idx],
                k_seq[idx],
                k_pos[idx],
                msg.arrays["ts"][idx],
                msg.arrays["v"][idx],
                params,
                cfg,
            )
            partials[r][c] = block
            meters[r].step(block.nbytes)

    for step in range(cp):
        _map_ranks(compute_step, cp, scheduling)
        if step < cp - 1:
            bundles, deltas = ring_send_recv(group, step, bundles, steps=[step] * cp, meters=meters)
            for r in range(cp):
                totals[r].add(deltas[r])

    def reduce(r: int) -> np.ndarray:
        out = np.zeros((contexts[r].num_rows, d_out), dtype=dt)
        meters[r].step(out.nbytes)
        freed = 0
        for c in sorted(partials[r]):
            out += partials[r][c]
            freed += partials[r][c].nbytes
        meters[r].step(-freed)
        totals[r].peak_resident_bytes = max(totals[r].peak_resident_bytes, meters[r].peak)
        return out

    outputs = _map_ranks(reduce, cp, scheduling)
    return outputs, totals


def _expand_message_meta(msg: JaggedMessage) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    seq = np.repeat(msg.seq_ids, msg.counts)
    chunk = np.repeat(msg.chunk_ids, msg.counts)
    if msg.num_chunks:
        pos = np.concatenate(
            [np.arange(s, s + c, dtype=np.int64) for s, c in zip(msg.starts, msg.counts)]
        )
    else:
        pos = np.zeros(0, dtype=np.int64)
    return seq, chunk, pos


def restore_outputs(
    group: RankGroup,
    slabs: Sequence[np.ndarray],
    plan: ShardPlan,
    max_lengths: Sequence[int] | None = None,
    scheduling: str = "sequential",
) -> tuple[list[JaggedTensor], list[CommStats]]:
    """Inverse redistribution: every DP rank gets back the attention output
    for exactly the sequences it contributed, rows in original order."""
    group._require_full_group(slabs, "restore_outputs")
    cp = group.cp_size
    for r in range(cp):
        want = sum(e.count for e in plan.rank_entries[r])
        if slabs[r].shape[0] != want:
            raise ValueError(f"rank {r} slab has {slabs[r].shape[0]} rows, plan expects {want}")
    d = slabs[0].shape[1] if slabs[0].ndim == 2 else 0
    dt = slabs[0].dtype

    def make_send(r: int) -> list[JaggedMessage]:
        bounds = np.concatenate([[0], np.cumsum([e.count for e in plan.rank_entries[r]])])
        per_dst: list[list[tuple[PlanEntry, int, int]]] = [[] for _ in range(cp)]
        for i, e in enumerate(plan.rank_entries[r]):
            per_dst[plan.seq_owner[e.seq_id]].append((e, int(bounds[i]), int(bounds[i + 1])))
        msgs = []
        for dst in range(cp):
            entries = per_dst[dst]
            rows = [slabs[r][a:b] for _, a, b in entries]
            msgs.append(
                JaggedMessage(
                    np.asarray([e.seq_id for e, _, _ in entries], dtype=np.int64),
                    np.asarray([e.chunk_id for e, _, _ in entries], dtype=np.int64),
                    np.asarray([e.start for e, _, _ in entries], dtype=np.int64),
                    np.asarray([e.count for e, _, _ in entries], dtype=np.int64),
                    {"out": np.concatenate(rows) if rows else np.zeros((0, d), dtype=dt)},
                )
            )
        return msgs

    send = _map_ranks(make_send, cp, scheduling)
    received, stats = all_to_all_jagged(group, send)

    def assemble(r: int) -> JaggedTensor:
        own_seqs = [b for b in range(plan.num_sequences) if plan.seq_owner[b] == r]
        chunk_index = [_message_chunk_rows(m) for m in received[r]]
        parts = []
        offs = [0]
        for b in own_seqs:
            for c in range(plan.layout.chunks_per_seq):
                src = plan.chunk_owner[c]
                a, z = chunk_index[src][(b, c)]
                parts.append(received[r][src].arrays["out"][a:z])
            offs.append(offs[-1] + plan.seq_lengths[b])
        values = np.concatenate(parts) if parts else np.zeros((0, d), dtype=dt)
        ml = max_lengths[r] if max_lengths is not None else (max((plan.seq_lengths[b] for b in own_seqs), default=0))
        return JaggedTensor(_freeze(values), _freeze(np.asarray(offs, dtype=np.int64)), int(ml))

    outputs = _map_ranks(assemble, cp, scheduling)
    return outputs, stats


def flops_per_rank(plan: ShardPlan, seq_lengths: Sequence[int] | None = None) -> FlopsReport:
    """Exact count of causal-mask-allowed (query, key) pairs per rank.

    A query at global position i scores i + 1 keys, so a rank's count is
    the sum of (i + 1) over the positions it owns -- pure integer math.
    """
    if seq_lengths is not None and tuple(int(x) for x in seq_lengths) != plan.seq_lengths:
        raise ValueError("seq_lengths do not match the plan")

    def tri(n: int) -> int:
        return n * (n + 1) // 2

    per_rank = tuple(
        sum(tri(e.end) - tri(e.start) for e in entries) for entries in plan.rank_entries
    )
    total = sum(tri(L) for L in plan.seq_lengths)
    if total == 0:
        ratio = 1.0
    else:
        ratio = max(per_rank) / (total / plan.cp_size)
    return FlopsReport(per_rank=per_rank, total=total, max_mean_ratio=ratio)


@dataclass
class PipelineResult:
    outputs: list[JaggedTensor]
    plan: ShardPlan
    redistribute_stats: list[CommStats]
    ring_stats: list[CommStats]
    restore_stats: list[CommStats]
    resident_tokens: list[int]
    peak_resident_bytes: list[int]
    flops: FlopsReport


def run_pipeline(
    batches: Sequence[QKVBatch],
    cp_size: int,
    protocol: str,
    balance_mode: str,
    params: BiasParams,
    cfg: BiasConfig,
    scheduling: str = "sequential",
) -> PipelineResult:
    """Full context-parallel forward pass for one CP group."""
    if protocol not in ("allgather_split", "alltoall"):
        raise ValueError(f"unknown protocol {protocol!r}")
    plan = build_shard_plan([lengths(b.q).tolist() for b in batches], cp_size, balance_mode)
    group = RankGroup(cp_size)
    if protocol == "allgather_split":
        contexts, redist = redistribute_allgather_split(group, batches, plan, scheduling)
    else:
        contexts, redist = redistribute_alltoall(group, batches, plan, scheduling)
    slabs, ring = ring_hstu_attention(group, contexts, params, cfg, scheduling)
    outputs, restore = restore_outputs(
        group, slabs, plan, [b.q.max_length for b in batches], scheduling
    )
    peaks = [
        max(redist[r].peak_resident_bytes, ring[r].peak_resident_bytes, restore[r].peak_resident_bytes)
        for r in range(cp_size)
    ]
    return PipelineResult(
        outputs=outputs,
        plan=plan,
        redistribute_stats=redist,
        ring_stats=ring,
        restore_stats=restore,
        resident_tokens=list(plan.rank_token_counts()),
        peak_resident_bytes=peaks,
        flops=flops_per_rank(plan),
    )
