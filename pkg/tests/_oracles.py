"""Independent oracles used by the test suite.

Everything here is deliberately written with explicit Python loops and
scalar math so it shares no code path with the library: the attention
oracle evaluates the scoring formula term by term, and the gradient
oracle is plain central finite differences over a scalar loss.
"""

from __future__ import annotations

import math


def silu_scalar(x: float) -> float:
    if x >= 0:
        return x / (1.0 + math.exp(-x))
    e = math.exp(x)
    return x * e / (1.0 + e)


def bucket_scalar(delta: int, num_buckets: int) -> int:
    if delta < 0:
        delta = 0
    b = int(math.floor(math.log1p(float(delta))))
    return min(num_buckets - 1, b)


def attention_triple_loop(q, k, v, ts, weights, num_buckets):
    """Causal SiLU attention with bucketized time-delta bias, one sequence.

    q, k, v: L x d nested lists (or anything indexable two deep),
    ts: length-L ints, weights: per-bucket floats. Returns an L x d_out
    nested list computed entirely with scalar float64 arithmetic.
    """
    L = len(q)
    d = len(q[0]) if L else 0
    d_out = len(v[0]) if L else 0
    scale = math.sqrt(float(d)) if d else 1.0
    out = [[0.0] * d_out for _ in range(L)]
    for i in range(L):
        for j in range(L):
            if j > i:
                continue  # causal: keys strictly in the future are masked
            s = 0.0
            for c in range(d):
                s += float(q[i][c]) * float(k[j][c])
            s += float(weights[bucket_scalar(int(ts[i]) - int(ts[j]), num_buckets)])
            a = silu_scalar(s / scale)
            for c in range(d_out):
                out[i][c] += a * float(v[j][c])
    return out


def central_difference_grad(fn, x0: float, step: float = 1e-6) -> float:
    """d fn / dx at x0 via central differences; fn takes a single float."""
    return (fn(x0 + step) - fn(x0 - step)) / (2.0 * step)
