"""Jagged batch containers and the sequence-dimension chunking they support.

A jagged tensor stores a batch of variable-length token sequences as one
flat row-major value matrix plus an offsets array; ``offsets[b]`` is the
row where sequence ``b`` starts. All containers are immutable after
construction (backing arrays are marked read-only) so they can be shared
freely across concurrent rank workers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

DTYPE_TAGS = {"f32": np.dtype(np.float32), "f64": np.dtype(np.float64)}
_TAG_BY_DTYPE = {v: k for k, v in DTYPE_TAGS.items()}


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


def _check_offsets(offsets: np.ndarray, total_rows: int) -> None:
    if offsets.ndim != 1 or offsets.size < 1:
        raise ValueError("offsets must be a 1-D array with at least one entry")
    if offsets[0] != 0:
        raise ValueError("offsets must start at 0")
    if np.any(np.diff(offsets) < 0):
        raise ValueError("offsets not monotone")
    if offsets[-1] != total_rows:
        raise ValueError(
            f"offsets end at {int(offsets[-1])} but values have {total_rows} rows"
        )


@dataclass(frozen=True)
class JaggedTensor:
    """Batch of variable-length embedding sequences: flat values + offsets."""

    values: np.ndarray  # (total_tokens, embed_dim)
    offsets: np.ndarray  # (num_sequences + 1,) int64
    max_length: int

    @property
    def num_sequences(self) -> int:
        return len(self.offsets) - 1

    @property
    def total_tokens(self) -> int:
        return self.values.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.values.shape[1]

    def sequence(self, b: int) -> np.ndarray:
        return self.values[self.offsets[b] : self.offsets[b + 1]]


@dataclass(frozen=True)
class JaggedIntSeries:
    """One integer per token (e.g. event timestamps), same offsets layout."""

    values: np.ndarray  # (total_tokens,) int64
    offsets: np.ndarray

    @property
    def num_sequences(self) -> int:
        return len(self.offsets) - 1

    @property
    def total_tokens(self) -> int:
        return self.values.shape[0]

    def sequence(self, b: int) -> np.ndarray:
        return self.values[self.offsets[b] : self.offsets[b + 1]]


def new_jagged(values, offsets, max_length: int) -> JaggedTensor:
    """Validate and build a JaggedTensor.

    Rejects non-monotone offsets, row-count mismatches, and any sequence
    longer than ``max_length``.
    """
    vals = np.asarray(values)
    if vals.ndim != 2:
        raise ValueError(f"values must be 2-D (total_tokens x embed_dim), got ndim={vals.ndim}")
    if not np.issubdtype(vals.dtype, np.floating):
        vals = vals.astype(np.float64)
    else:
        vals = vals.copy()  # defensive: the container owns (and freezes) its storage
    offs = np.array(offsets, dtype=np.int64)
    _check_offsets(offs, vals.shape[0])
    if max_length < 0:
        raise ValueError("max_length must be non-negative")
    seq_lengths = np.diff(offs)
    if seq_lengths.size and int(seq_lengths.max()) > max_length:
        raise ValueError(
            f"sequence length {int(seq_lengths.max())} exceeds max_length {max_length}"
        )
    return JaggedTensor(_freeze(vals), _freeze(offs), int(max_length))


def new_int_series(values, offsets) -> JaggedIntSeries:
    vals = np.array(values, dtype=np.int64)
    if vals.ndim != 1:
        raise ValueError("int series values must be 1-D (one integer per token)")
    offs = np.array(offsets, dtype=np.int64)
    _check_offsets(offs, vals.shape[0])
    return JaggedIntSeries(_freeze(vals), _freeze(offs))


def lengths(jt: JaggedTensor | JaggedIntSeries) -> np.ndarray:
    """Per-sequence lengths, i.e. consecutive offset differences."""
    return np.diff(jt.offsets)


@dataclass(frozen=True)
class MiniChunkLayout:
    """Contiguous per-sequence chunk boundaries used for sequence sharding.

    Balanced layouts carry 2*cp_size chunks per sequence (short sequences
    get empty trailing chunks); the naive baseline carries cp_size.
    """

    cp_size: int
    chunks_per_seq: int
    chunk_lengths: tuple[tuple[int, ...], ...]  # [seq][chunk]
    chunk_ranges: tuple[tuple[tuple[int, int], ...], ...]  # [seq][chunk] -> (start, end)

    @property
    def num_sequences(self) -> int:
        return len(self.chunk_lengths)

    def seq_lengths(self) -> tuple[int, ...]:
        return tuple(sum(c) for c in self.chunk_lengths)


def split_even(length: int, parts: int) -> list[int]:
    """Near-even split: earliest parts absorb the remainder, one token each."""
    base, rem = divmod(int(length), parts)
    return [base + 1 if p < rem else base for p in range(parts)]


def _layout_from_lengths(seq_lengths: Sequence[int], cp_size: int, parts: int) -> MiniChunkLayout:
    chunk_lengths = []
    chunk_ranges = []
    for L in seq_lengths:
        if L < 0:
            raise ValueError("sequence lengths must be non-negative")
        sizes = split_even(int(L), parts)
        bounds = np.concatenate([[0], np.cumsum(sizes)])
        chunk_lengths.append(tuple(sizes))
        chunk_ranges.append(tuple((int(bounds[c]), int(bounds[c + 1])) for c in range(parts)))
    return MiniChunkLayout(cp_size, parts, tuple(chunk_lengths), tuple(chunk_ranges))


def make_minichunks(seq_lengths: Sequence[int], cp_size: int) -> MiniChunkLayout:
    """Split every sequence into 2*cp_size contiguous near-even mini-chunks."""
    if cp_size < 1:
        raise ValueError("cp_size must be >= 1")
    return _layout_from_lengths(seq_lengths, cp_size, 2 * cp_size)


def make_contiguous_chunks(seq_lengths: Sequence[int], cp_size: int) -> MiniChunkLayout:
    """Naive baseline: cp_size even contiguous slices per sequence."""
    if cp_size < 1:
        raise ValueError("cp_size must be >= 1")
    return _layout_from_lengths(seq_lengths, cp_size, cp_size)


def chunk_assignment(cp_size: int) -> dict[int, tuple[int, int]]:
    """Head-tail pairing: rank i owns mini-chunks i and 2*cp_size-1-i.

    Pairing a leading chunk with its mirrored trailing chunk equalizes the
    causal-mask work across ranks.
    """
    if cp_size < 1:
        raise ValueError("cp_size must be >= 1")
    return {r: (r, 2 * cp_size - 1 - r) for r in range(cp_size)}


def chunk_owner_map(layout: MiniChunkLayout) -> tuple[int, ...]:
    """Owning rank for each chunk index of the layout."""
    n = layout.chunks_per_seq
    if n == 2 * layout.cp_size:
        owners = [0] * n
        for rank, (a, b) in chunk_assignment(layout.cp_size).items():
            owners[a] = rank
            owners[b] = rank
        return tuple(owners)
    if n == layout.cp_size:
        return tuple(range(n))
    raise ValueError(f"layout has {n} chunks per sequence for cp_size {layout.cp_size}")


def _rank_major_row_order(jt_offsets: np.ndarray, layout: MiniChunkLayout) -> tuple[np.ndarray, list[int]]:
    owners = chunk_owner_map(layout)
    perm_parts: list[np.ndarray] = []
    slab_sizes = [0] * layout.cp_size
    for rank in range(layout.cp_size):
        for b in range(layout.num_sequences):
            base = int(jt_offsets[b])
            for c in range(layout.chunks_per_seq):
                if owners[c] != rank:
                    continue
                start, end = layout.chunk_ranges[b][c]
                perm_parts.append(np.arange(base + start, base + end, dtype=np.int64))
                slab_sizes[rank] += end - start
    if perm_parts:
        perm = np.concatenate(perm_parts)
    else:
        perm = np.zeros(0, dtype=np.int64)
    return perm, slab_sizes


def rank_row_ranges(layout: MiniChunkLayout) -> list[tuple[int, int]]:
    """Row span of each rank's slab in the rank-major (reordered) row order."""
    sizes = [0] * layout.cp_size
    owners = chunk_owner_map(layout)
    for b in range(layout.num_sequences):
        for c in range(layout.chunks_per_seq):
            sizes[owners[c]] += layout.chunk_lengths[b][c]
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    return [(int(bounds[r]), int(bounds[r + 1])) for r in range(layout.cp_size)]


def reorder_balanced(jt: JaggedTensor, layout: MiniChunkLayout) -> tuple[JaggedTensor, np.ndarray]:
    """Permute token rows into rank-major order (rank, then sequence, then chunk).

    Returns the reordered tensor (offsets/max_length preserved so the
    round trip is exact) and the applied permutation, where
    ``reordered.values[i] == jt.values[perm[i]]``.
    """
    if layout.num_sequences != jt.num_sequences:
        raise ValueError("layout does not match the tensor's sequence count")
    if tuple(int(x) for x in lengths(jt)) != layout.seq_lengths():
        raise ValueError("layout chunk lengths do not sum to the tensor's sequence lengths")
    perm, _ = _rank_major_row_order(jt.offsets, layout)
    reordered = JaggedTensor(_freeze(jt.values[perm]), jt.offsets, jt.max_length)
    return reordered, perm


def inverse_reorder(jt: JaggedTensor, permutation: np.ndarray) -> JaggedTensor:
    """Undo a row permutation produced by :func:`reorder_balanced`."""
    perm = np.asarray(permutation, dtype=np.int64)
    n = jt.total_tokens
    if perm.shape != (n,):
        raise ValueError(f"permutation has {perm.size} entries for {n} rows")
    if n and (perm.min() < 0 or perm.max() >= n or np.bincount(perm, minlength=n).max() > 1):
        raise ValueError("permutation is not a bijection on row indices")
    restored = np.empty_like(jt.values)
    restored[perm] = jt.values
    return JaggedTensor(_freeze(restored), jt.offsets, jt.max_length)


# --- fixture-file serialization -------------------------------------------

def jagged_to_record(jt: JaggedTensor) -> dict:
    """Self-describing JSON-ready record (values flattened row-major)."""
    tag = _TAG_BY_DTYPE.get(jt.values.dtype)
    if tag is None:
        raise ValueError(f"unsupported dtype {jt.values.dtype}; expected f32 or f64")
    return {
        "embed_dim": jt.embed_dim,
        "offsets": [int(x) for x in jt.offsets],
        "max_length": jt.max_length,
        "dtype": tag,
        "values": [float(x) for x in jt.values.ravel()],
    }


def jagged_from_record(rec: dict) -> JaggedTensor:
    try:
        tag = rec["dtype"]
        embed_dim = int(rec["embed_dim"])
        offsets = rec["offsets"]
        max_length = int(rec["max_length"])
        flat = rec["values"]
    except KeyError as exc:
        raise ValueError(f"record is missing field {exc}") from exc
    if tag not in DTYPE_TAGS:
        raise ValueError(f"unknown dtype tag {tag!r}; expected one of {sorted(DTYPE_TAGS)}")
    vals = np.asarray(flat, dtype=DTYPE_TAGS[tag]).reshape(-1, embed_dim)
    return new_jagged(vals, offsets, max_length)


def int_series_to_record(series: JaggedIntSeries) -> dict:
    return {
        "dtype": "i64",
        "offsets": [int(x) for x in series.offsets],
        "values": [int(x) for x in series.values],
    }


def int_series_from_record(rec: dict) -> JaggedIntSeries:
    if rec.get("dtype") != "i64":
        raise ValueError("int series record must carry dtype tag i64")
    return new_int_series(rec["values"], rec["offsets"])
