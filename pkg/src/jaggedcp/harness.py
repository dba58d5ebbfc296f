"""Experiment harness: synthetic jagged batches, end-to-end runs against
the single-device reference, the memory-budget length sweep, and the
verification grid the CLI/service expose.

Everything is seeded and the reports contain no wall-clock fields, so a
repeated run with the same configuration serializes to identical bytes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .attention import AttentionInputs, BiasConfig, BiasParams, hstu_attention_reference
from .comm import CommStats, RankGroup
from .cp_engine import (
    QKVBatch,
    build_shard_plan,
    flops_per_rank,
    redistribute_allgather_split,
    redistribute_alltoall,
    run_pipeline,
)
from .jagged import (
    DTYPE_TAGS,
    JaggedTensor,
    _freeze,
    chunk_assignment,
    int_series_to_record,
    jagged_to_record,
    lengths,
    make_minichunks,
    new_int_series,
    new_jagged,
)

PROTOCOLS = ("allgather_split", "alltoall")
LENGTH_DISTS = ("uniform", "lognormal")
SCHEDULINGS = ("sequential", "threaded")

MAX_TS_GAP_SECONDS = 1_000_000

ACCOUNTING_NOTE = (
    "residency counts value payloads (q/k/v/ts and outputs) in bytes; headers are "
    "tallied separately; gathers retain sent data while all-to-all relinquishes it; "
    "memory_reduction_ratio compares worst-rank redistribution peaks of the two protocols"
)


@dataclass(frozen=True)
class ExperimentConfig:
    cp_size: int = 2
    batch_size: int = 2  # sequences per rank
    length_dist: str = "uniform"
    min_len: int = 1
    max_len: int = 32
    lognorm_mu: float = 3.0
    lognorm_sigma: float = 0.8
    max_length: int = 128
    embed_dim: int = 8
    num_buckets: int = 16
    dtype: str = "f64"
    protocol: str = "alltoall"
    balance_mode: str = "balanced_minichunk"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.cp_size < 1:
            raise ValueError("cp_size must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.length_dist not in LENGTH_DISTS:
            raise ValueError(f"unknown length_dist {self.length_dist!r}")
        if self.length_dist == "uniform":
            if not (0 <= self.min_len <= self.max_len <= self.max_length):
                raise ValueError(
                    "degenerate distribution bounds: need 0 <= min_len <= max_len <= max_length"
                )
        else:
            if self.lognorm_sigma < 0:
                raise ValueError("degenerate distribution bounds: lognorm_sigma must be >= 0")
        if self.max_length < 1:
            raise ValueError("max_length must be >= 1")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        if self.num_buckets < 1:
            raise ValueError("num_buckets must be >= 1")
        if self.dtype not in DTYPE_TAGS:
            raise ValueError(f"dtype must be one of {sorted(DTYPE_TAGS)}")
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}")
        if self.balance_mode not in ("balanced_minichunk", "naive_contiguous"):
            raise ValueError("unknown balance_mode")

    def to_json_dict(self) -> dict:
        return {
            "cp_size": self.cp_size,
            "batch_size": self.batch_size,
            "length_dist": self.length_dist,
            "min_len": self.min_len,
            "max_len": self.max_len,
            "lognorm_mu": self.lognorm_mu,
            "lognorm_sigma": self.lognorm_sigma,
            "max_length": self.max_length,
            "embed_dim": self.embed_dim,
            "num_buckets": self.num_buckets,
            "dtype": self.dtype,
            "protocol": self.protocol,
            "balance_mode": self.balance_mode,
            "seed": self.seed,
        }


def _draw_lengths(cfg: ExperimentConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.length_dist == "uniform":
        return rng.integers(cfg.min_len, cfg.max_len + 1, size=cfg.batch_size)
    raw = np.floor(rng.lognormal(cfg.lognorm_mu, cfg.lognorm_sigma, size=cfg.batch_size))
    return np.clip(raw, 1, cfg.max_length).astype(np.int64)


def gen_synthetic_batch(cfg: ExperimentConfig, rank: int) -> QKVBatch:
    """Seeded per (seed, rank): standard-normal embeddings and strictly
    increasing per-sequence timestamps with gaps in [1, 10^6] seconds."""
    rng = np.random.default_rng([cfg.seed, rank])
    seq_lengths = _draw_lengths(cfg, rng)
    offsets = np.concatenate([[0], np.cumsum(seq_lengths)]).astype(np.int64)
    total = int(offsets[-1])
    dt = DTYPE_TAGS[cfg.dtype]
    q = rng.standard_normal((total, cfg.embed_dim), dtype=dt)
    k = rng.standard_normal((total, cfg.embed_dim), dtype=dt)
    v = rng.standard_normal((total, cfg.embed_dim), dtype=dt)
    starts = rng.integers(0, 1_000_000_000, size=cfg.batch_size)
    gaps = rng.integers(1, MAX_TS_GAP_SECONDS + 1, size=total)
    ts = np.zeros(total, dtype=np.int64)
    for b in range(cfg.batch_size):
        lo, hi = int(offsets[b]), int(offsets[b + 1])
        ts[lo:hi] = starts[b] + np.cumsum(gaps[lo:hi])
    return QKVBatch(
        q=new_jagged(q, offsets, cfg.max_length),
        k=new_jagged(k, offsets, cfg.max_length),
        v=new_jagged(v, offsets, cfg.max_length),
        ts=new_int_series(ts, offsets),
    )


def bias_for_config(cfg: ExperimentConfig) -> tuple[BiasParams, BiasConfig]:
    bias_cfg = BiasConfig(num_buckets=cfg.num_buckets)
    # separate stream from the batch generators
    params = BiasParams.normal_init(bias_cfg, seed=cfg.seed + 0x5EED)
    return params, bias_cfg


def concat_batches(batches: Sequence[QKVBatch]) -> QKVBatch:
    """The CP group's combined batch, sequences in rank order."""
    offsets = [0]
    for b in batches:
        base = offsets[-1]
        offsets.extend(int(base + o) for o in b.q.offsets[1:])
    offs = np.asarray(offsets, dtype=np.int64)
    ml = max(b.q.max_length for b in batches)
    return QKVBatch(
        q=new_jagged(np.concatenate([b.q.values for b in batches]), offs, ml),
        k=new_jagged(np.concatenate([b.k.values for b in batches]), offs, ml),
        v=new_jagged(np.concatenate([b.v.values for b in batches]), offs, ml),
        ts=new_int_series(np.concatenate([b.ts.values for b in batches]), offs),
    )


def reference_outputs(
    batches: Sequence[QKVBatch], params: BiasParams, bias_cfg: BiasConfig
) -> list[JaggedTensor]:
    """Single-device forward over the combined batch, split back per rank."""
    combined = concat_batches(batches)
    out = hstu_attention_reference(
        AttentionInputs(combined.q, combined.k, combined.v, combined.ts, params, bias_cfg)
    )
    results = []
    row = 0
    for b in batches:
        n = b.q.total_tokens
        vals = out.values[row : row + n]
        results.append(JaggedTensor(_freeze(vals.copy()), b.q.offsets, b.q.max_length))
        row += n
    return results


def output_errors(got: Sequence[JaggedTensor], want: Sequence[JaggedTensor]) -> tuple[float, float]:
    """(max abs error, max per-row normalized error) across all ranks.

    The row error is ||got - want||_inf / max(1, ||want||_inf) over the
    row, which behaves like a relative error for O(1)-scale rows without
    blowing up on rows that cancel to near zero.
    """
    max_abs = 0.0
    max_rel = 0.0
    for g, w in zip(got, want):
        if g.total_tokens == 0:
            continue
        diff = np.abs(g.values.astype(np.float64) - w.values.astype(np.float64))
        ref = np.abs(w.values.astype(np.float64))
        max_abs = max(max_abs, float(diff.max()))
        row_err = diff.max(axis=1) / np.maximum(1.0, ref.max(axis=1))
        max_rel = max(max_rel, float(row_err.max()))
    return max_abs, max_rel


def _stats_dicts(stats: Sequence[CommStats]) -> list[dict]:
    return [s.to_json_dict() for s in stats]


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    max_abs_error: float
    max_rel_error: float
    redistribute_stats: list[CommStats]
    ring_stats: list[CommStats]
    restore_stats: list[CommStats]
    flops_per_rank: list[int]
    flops_total: int
    flops_max_mean_ratio: float
    resident_tokens_per_rank: list[int]
    per_rank_peak_resident_bytes: list[int]
    redistribute_peak_allgather: list[int]
    redistribute_peak_alltoall: list[int]
    memory_reduction_ratio: float

    def to_json_dict(self) -> dict:
        return {
            "config": self.config.to_json_dict(),
            "max_abs_error": self.max_abs_error,
            "max_rel_error": self.max_rel_error,
            "comm": {
                "redistribute": _stats_dicts(self.redistribute_stats),
                "ring": _stats_dicts(self.ring_stats),
                "restore": _stats_dicts(self.restore_stats),
            },
            "flops": {
                "per_rank": self.flops_per_rank,
                "total": self.flops_total,
                "max_mean_ratio": self.flops_max_mean_ratio,
            },
            "resident_tokens_per_rank": self.resident_tokens_per_rank,
            "per_rank_peak_resident_bytes": self.per_rank_peak_resident_bytes,
            "redistribute_peak_bytes": {
                "allgather_split": self.redistribute_peak_allgather,
                "alltoall": self.redistribute_peak_alltoall,
            },
            "memory_reduction_ratio": self.memory_reduction_ratio,
            "metadata": {"accounting": ACCOUNTING_NOTE},
        }


def redistribution_peaks(
    batches: Sequence[QKVBatch], cp_size: int, balance_mode: str, protocol: str
) -> list[int]:
    """Per-rank peak resident bytes of one redistribution protocol alone."""
    plan = build_shard_plan([lengths(b.q).tolist() for b in batches], cp_size, balance_mode)
    group = RankGroup(cp_size)
    if protocol == "allgather_split":
        _, stats = redistribute_allgather_split(group, batches, plan)
    else:
        _, stats = redistribute_alltoall(group, batches, plan)
    return [s.peak_resident_bytes for s in stats]


def run_experiment(cfg: ExperimentConfig, scheduling: str = "sequential") -> ExperimentReport:
    """Generate batches, run the CP pipeline and the single-device
    reference, and collect equivalence/traffic/balance metrics. Both
    protocols' redistribution peaks are measured so the report always
    carries the memory reduction ratio."""
    if scheduling not in SCHEDULINGS:
        raise ValueError(f"unknown scheduling {scheduling!r}")
    batches = [gen_synthetic_batch(cfg, r) for r in range(cfg.cp_size)]
    params, bias_cfg = bias_for_config(cfg)
    result = run_pipeline(
        batches, cfg.cp_size, cfg.protocol, cfg.balance_mode, params, bias_cfg, scheduling
    )
    want = reference_outputs(batches, params, bias_cfg)
    max_abs, max_rel = output_errors(result.outputs, want)
    if not (np.isfinite(max_abs) and np.isfinite(max_rel)):
        raise RuntimeError(f"non-finite equivalence error: abs={max_abs} rel={max_rel}")
    peaks_ag = redistribution_peaks(batches, cfg.cp_size, cfg.balance_mode, "allgather_split")
    peaks_a2a = redistribution_peaks(batches, cfg.cp_size, cfg.balance_mode, "alltoall")
    reduction = 1.0 - (max(peaks_a2a) / max(peaks_ag)) if max(peaks_ag) else 0.0
    return ExperimentReport(
        config=cfg,
        max_abs_error=max_abs,
        max_rel_error=max_rel,
        redistribute_stats=result.redistribute_stats,
        ring_stats=result.ring_stats,
        restore_stats=result.restore_stats,
        flops_per_rank=list(result.flops.per_rank),
        flops_total=result.flops.total,
        flops_max_mean_ratio=result.flops.max_mean_ratio,
        resident_tokens_per_rank=result.resident_tokens,
        per_rank_peak_resident_bytes=result.peak_resident_bytes,
        redistribute_peak_allgather=peaks_ag,
        redistribute_peak_alltoall=peaks_a2a,
        memory_reduction_ratio=reduction,
    )


# --- memory-budget length sweep ---------------------------------------------

def modeled_rank_bytes(seq_length: int, cp_size: int, embed_dim: int, dtype_size: int) -> int:
    """Modeled per-rank peak for one sequence of the given length under the
    balanced shard: q/k/v/ts slabs + output slab + the largest score block.

    Optimizer and parameter memory are out of model; this is the token-slab
    footprint the redistribution/ring accounting charges.
    """
    layout = make_minichunks([seq_length], cp_size)
    sizes = layout.chunk_lengths[0]
    per_rank_tokens = [
        sizes[a] + sizes[b] for a, b in chunk_assignment(cp_size).values()
    ]
    t = max(per_rank_tokens)
    largest_chunk = max(sizes)
    slabs = t * (3 * embed_dim * dtype_size + 8)  # q, k, v plus int64 ts
    output = t * embed_dim * dtype_size
    score_block = t * largest_chunk * dtype_size
    return slabs + output + score_block


@dataclass
class SweepReport:
    budget_bytes: int
    embed_dim: int
    dtype: str
    seed: int
    rows: list[dict]  # {"cp_size", "max_supported_length"}

    def to_json_dict(self) -> dict:
        return {
            "budget_bytes": self.budget_bytes,
            "embed_dim": self.embed_dim,
            "dtype": self.dtype,
            "seed": self.seed,
            "rows": self.rows,
            "metadata": {
                "model": "per-rank token slabs (q/k/v/ts + output) plus largest score block; "
                "balanced mini-chunk shard of a single sequence",
            },
        }


def sweep_max_tokens(
    budget_bytes: int, cp_sizes: Sequence[int], embed_dim: int = 8, dtype: str = "f32", seed: int = 0
) -> SweepReport:
    """Largest single-sequence length whose modeled per-rank footprint fits
    the budget, per CP size (binary search; the model is monotone)."""
    dtype_size = DTYPE_TAGS[dtype].itemsize
    rows = []
    for cp in cp_sizes:
        if cp < 1:
            raise ValueError("cp sizes must be >= 1")
        if modeled_rank_bytes(1, cp, embed_dim, dtype_size) > budget_bytes:
            raise ValueError(f"budget {budget_bytes} too small for a single token at cp={cp}")
        lo, hi = 1, 2
        while modeled_rank_bytes(hi, cp, embed_dim, dtype_size) <= budget_bytes:
            lo, hi = hi, hi * 2
            if hi > 1 << 31:
                break
        while lo + 1 < hi:
            mid = (lo + hi) // 2
            if modeled_rank_bytes(mid, cp, embed_dim, dtype_size) <= budget_bytes:
                lo = mid
            else:
                hi = mid
        rows.append({"cp_size": int(cp), "max_supported_length": int(lo)})
    return SweepReport(budget_bytes=int(budget_bytes), embed_dim=embed_dim, dtype=dtype, seed=seed, rows=rows)


# --- verification grid -------------------------------------------------------

F64_ABS_TOL = 1e-10
F32_REL_TOL = 1e-4


@dataclass
class VerifyCase:
    config: ExperimentConfig
    passed: bool
    failures: list[str]
    max_abs_error: float
    max_rel_error: float

    def to_json_dict(self) -> dict:
        return {
            "config": self.config.to_json_dict(),
            "passed": self.passed,
            "failures": self.failures,
            "max_abs_error": self.max_abs_error,
            "max_rel_error": self.max_rel_error,
        }


@dataclass
class VerifyReport:
    cases: list[VerifyCase]
    all_passed: bool

    def to_json_dict(self) -> dict:
        return {
            "all_passed": self.all_passed,
            "cases": [c.to_json_dict() for c in self.cases],
        }


def _check_case(cfg: ExperimentConfig, report: ExperimentReport) -> list[str]:
    failures = []
    if cfg.dtype == "f64" and report.max_abs_error > F64_ABS_TOL:
        failures.append(f"f64 abs error {report.max_abs_error:.3e} > {F64_ABS_TOL}")
    if cfg.dtype == "f32" and report.max_rel_error > F32_REL_TOL:
        failures.append(f"f32 rel error {report.max_rel_error:.3e} > {F32_REL_TOL}")
    for phase, stats in (
        ("redistribute", report.redistribute_stats),
        ("ring", report.ring_stats),
        ("restore", report.restore_stats),
    ):
        sent = sum(s.bytes_sent for s in stats)
        recv = sum(s.bytes_received for s in stats)
        if sent != recv:
            failures.append(f"{phase}: sent {sent} != received {recv}")
    total_tokens = sum(report.resident_tokens_per_rank)
    slack = (2 * cfg.cp_size - 1) * cfg.batch_size * cfg.cp_size
    for r, t in enumerate(report.resident_tokens_per_rank):
        if abs(t - total_tokens / cfg.cp_size) > slack:
            failures.append(f"rank {r} resident tokens {t} outside slack of total/cp")
    return failures


def verify_grid(
    seed: int,
    cp_sizes: Sequence[int] = (1, 2, 4, 8),
    protocols: Sequence[str] = PROTOCOLS,
    balance_modes: Sequence[str] = ("balanced_minichunk", "naive_contiguous"),
    dtypes: Sequence[str] = ("f32", "f64"),
    scheduling: str = "sequential",
) -> VerifyReport:
    """Equivalence and conservation checks over the configuration grid."""
    cases = []
    for cp in cp_sizes:
        for protocol in protocols:
            for balance in balance_modes:
                for dtype in dtypes:
                    cfg = ExperimentConfig(
                        cp_size=cp,
                        batch_size=2,
                        length_dist="uniform",
                        min_len=0,
                        max_len=48,
                        max_length=64,
                        embed_dim=8,
                        dtype=dtype,
                        protocol=protocol,
                        balance_mode=balance,
                        seed=seed,
                    )
                    report = run_experiment(cfg, scheduling=scheduling)
                    failures = _check_case(cfg, report)
                    cases.append(
                        VerifyCase(
                            config=cfg,
                            passed=not failures,
                            failures=failures,
                            max_abs_error=report.max_abs_error,
                            max_rel_error=report.max_rel_error,
                        )
                    )
    return VerifyReport(cases=cases, all_passed=all(c.passed for c in cases))


# --- fixture bundles ----------------------------------------------------------

def fixture_bundle(cfg: ExperimentConfig) -> dict:
    """JSON-ready synthetic batch records for every rank of the group."""
    ranks = {}
    for r in range(cfg.cp_size):
        batch = gen_synthetic_batch(cfg, r)
        ranks[str(r)] = {
            "q": jagged_to_record(batch.q),
            "k": jagged_to_record(batch.k),
            "v": jagged_to_record(batch.v),
            "ts": int_series_to_record(batch.ts),
        }
    return {"config": cfg.to_json_dict(), "ranks": ranks}
