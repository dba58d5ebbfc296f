"""SiLU-gated causal attention over jagged batches, with a learnable
time-delta bias.

Scores are ``(q . k + bias) / sqrt(d)`` gated by SiLU and masked causally
(diagonal kept); there is no softmax, so attention is linear in V and
block partials combine by plain summation. The bias for a (query, key)
pair is a learnable weight selected by log-bucketing the timestamp
difference ``ts_q - ts_k``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .jagged import JaggedIntSeries, JaggedTensor, _freeze


@dataclass(frozen=True)
class BiasConfig:
    """Bucketization rule for time deltas.

    A non-negative delta (seconds) maps to floor(ln(1 + delta)); results
    past the last bucket clamp to num_buckets - 1 and negative deltas
    clamp to bucket 0.
    """

    num_buckets: int = 16

    def __post_init__(self) -> None:
        if self.num_buckets < 1:
            raise ValueError("num_buckets must be >= 1")


@dataclass(frozen=True)
class BiasParams:
    """Learnable per-bucket bias weights."""

    ts_weights: np.ndarray  # (num_buckets,) float64

    @staticmethod
    def normal_init(cfg: BiasConfig, seed: int, mean: float = 0.0, stddev: float = 0.02) -> "BiasParams":
        rng = np.random.default_rng(seed)
        w = rng.normal(mean, stddev, size=cfg.num_buckets).astype(np.float64)
        return BiasParams(_freeze(w))

    def __post_init__(self) -> None:
        w = np.array(self.ts_weights, dtype=np.float64)
        if w.ndim != 1 or w.size < 1:
            raise ValueError("ts_weights must be a non-empty 1-D vector")
        object.__setattr__(self, "ts_weights", _freeze(w))


def silu(x):
    """x * sigmoid(x), numerically stable for large |x|; scalar or array."""
    xv = np.asarray(x)
    if not np.issubdtype(xv.dtype, np.floating):
        xv = xv.astype(np.float64)
    out = np.empty_like(xv)
    pos = xv >= 0
    out[pos] = xv[pos] / (1.0 + np.exp(-xv[pos]))
    e = np.exp(xv[~pos])
    out[~pos] = xv[~pos] * e / (1.0 + e)
    return out if out.ndim else out[()]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def bucketize(delta: int, cfg: BiasConfig) -> int:
    """Bucket index for one time delta: min(nb-1, floor(ln(1 + max(delta, 0))))."""
    return int(bucketize_array(np.asarray([delta], dtype=np.int64), cfg)[0])


def bucketize_array(deltas: np.ndarray, cfg: BiasConfig) -> np.ndarray:
    clipped = np.maximum(deltas.astype(np.float64), 0.0)
    idx = np.floor(np.log1p(clipped)).astype(np.int64)
    return np.clip(idx, 0, cfg.num_buckets - 1)


def compute_bias(ts_q, ts_k, params: BiasParams, cfg: BiasConfig) -> np.ndarray:
    """|ts_q| x |ts_k| matrix of bias weights selected by pairwise deltas."""
    tq = np.asarray(ts_q, dtype=np.int64)
    tk = np.asarray(ts_k, dtype=np.int64)
    buckets = bucketize_array(tq[:, None] - tk[None, :], cfg)
    return params.ts_weights[buckets]


@dataclass(frozen=True)
class AttentionInputs:
    q: JaggedTensor
    k: JaggedTensor
    v: JaggedTensor
    ts: JaggedIntSeries
    params: BiasParams
    cfg: BiasConfig

    def __post_init__(self) -> None:
        offs = self.q.offsets
        for name, other in (("k", self.k), ("v", self.v), ("ts", self.ts)):
            if not np.array_equal(offs, other.offsets):
                raise ValueError(f"offsets of q and {name} differ")
        if self.q.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        if self.k.embed_dim != self.q.embed_dim or self.v.embed_dim != self.q.embed_dim:
            raise ValueError("q, k, v must share embed_dim")


@dataclass(frozen=True)
class AttentionGradients:
    dq: JaggedTensor
    dk: JaggedTensor
    dv: JaggedTensor
    d_ts_weights: np.ndarray  # (num_buckets,) float64


def hstu_attention_reference(inputs: AttentionInputs) -> JaggedTensor:
    """Single-device forward pass, one full score matrix per sequence.

    Attention never crosses sequence boundaries; within a sequence the
    mask is lower-triangular including the diagonal.
    """
    q, k, v, ts = inputs.q, inputs.k, inputs.v, inputs.ts
    dt = q.values.dtype
    scale = dt.type(math.sqrt(q.embed_dim))
    out = np.zeros_like(v.values)
    for b in range(q.num_sequences):
        lo, hi = int(q.offsets[b]), int(q.offsets[b + 1])
        L = hi - lo
        if L == 0:
            continue
        qb = q.values[lo:hi]
        kb = k.values[lo:hi]
        tb = ts.values[lo:hi]
        bias = compute_bias(tb, tb, inputs.params, inputs.cfg).astype(dt)
        scores = (qb @ kb.T + bias) / scale
        gated = silu(scores)
        keep = np.tril(np.ones((L, L), dtype=bool))
        out[lo:hi] = np.where(keep, gated, dt.type(0)) @ v.values[lo:hi]
    return JaggedTensor(_freeze(out), q.offsets, v.max_length)


def blockwise_partial(
    q: np.ndarray,
    q_seq_ids: np.ndarray,
    q_positions: np.ndarray,
    ts_q: np.ndarray,
    k: np.ndarray,
    k_seq_ids: np.ndarray,
    k_positions: np.ndarray,
    ts_k: np.ndarray,
    v: np.ndarray,
    params: BiasParams,
    cfg: BiasConfig,
) -> np.ndarray:
    """Attention contribution of one key/value block to one query block.

    Rows carry their sequence id and global position; a (query, key) pair
    contributes only when both are in the same sequence and the key is
    not in the query's future. Because the gate is SiLU rather than
    softmax, the full output is the plain sum of these partials over any
    partition of the keys -- no rescaling state is carried between blocks.
    """
    if k.shape[0] != v.shape[0]:
        raise ValueError(f"k has {k.shape[0]} rows but v has {v.shape[0]}")
    dt = q.dtype
    if q.shape[0] == 0 or k.shape[0] == 0:
        return np.zeros((q.shape[0], v.shape[1] if v.ndim == 2 else 0), dtype=dt)
    scale = dt.type(math.sqrt(q.shape[1]))
    bias = compute_bias(ts_q, ts_k, params, cfg).astype(dt)
    scores = (q @ k.T + bias) / scale
    gated = silu(scores)
    allowed = (np.asarray(q_seq_ids)[:, None] == np.asarray(k_seq_ids)[None, :]) & (
        np.asarray(k_positions)[None, :] <= np.asarray(q_positions)[:, None]
    )
    return np.where(allowed, gated, dt.type(0)) @ v


def hstu_attention_backward(inputs: AttentionInputs, upstream: JaggedTensor) -> AttentionGradients:
    """Analytical gradients of the forward pass w.r.t. Q, K, V and the
    bias weights.

    Bucket selection is integer-valued and treated as constant; the bias
    gradient is scattered into buckets by the same indices the forward
    pass used.
    """
    q, k, v, ts = inputs.q, inputs.k, inputs.v, inputs.ts
    if not np.array_equal(upstream.offsets, q.offsets):
        raise ValueError("upstream offsets differ from input offsets")
    if upstream.values.shape != v.values.shape:
        raise ValueError("upstream shape differs from output shape")
    dt = q.values.dtype
    scale = dt.type(math.sqrt(q.embed_dim))
    dq = np.zeros_like(q.values)
    dk = np.zeros_like(k.values)
    dv = np.zeros_like(v.values)
    d_w = np.zeros_like(inputs.params.ts_weights)
    nb = inputs.cfg.num_buckets
    for b in range(q.num_sequences):
        lo, hi = int(q.offsets[b]), int(q.offsets[b + 1])
        L = hi - lo
        if L == 0:
            continue
        qb, kb, vb = q.values[lo:hi], k.values[lo:hi], v.values[lo:hi]
        tb = ts.values[lo:hi]
        g = upstream.values[lo:hi]
        buckets = bucketize_array(tb[:, None] - tb[None, :], inputs.cfg)
        bias = inputs.params.ts_weights[buckets].astype(dt)
        scores = (qb @ kb.T + bias) / scale
        sig = _sigmoid(scores)
        keep = np.tril(np.ones((L, L), dtype=bool))
        gated = np.where(keep, scores * sig, dt.type(0))
        dv[lo:hi] = gated.T @ g
        d_gated = g @ vb.T
        # d silu(s)/ds = sigmoid(s) * (1 + s * (1 - sigmoid(s)))
        d_scores = np.where(keep, d_gated * sig * (1.0 + scores * (1.0 - sig)), dt.type(0))
        dq[lo:hi] = (d_scores @ kb) / scale
        dk[lo:hi] = (d_scores.T @ qb) / scale
        d_bias = (d_scores / scale).astype(np.float64)
        d_w += np.bincount(buckets.ravel(), weights=d_bias.ravel(), minlength=nb)
    return AttentionGradients(
        dq=JaggedTensor(_freeze(dq), q.offsets, q.max_length),
        dk=JaggedTensor(_freeze(dk), k.offsets, k.max_length),
        dv=JaggedTensor(_freeze(dv), v.offsets, v.max_length),
        d_ts_weights=d_w,
    )
