"""Dense kernels with explicit gradients, plus deterministic RNG streams.

Matrices are plain numpy arrays, row-major, float32 or float64 (chosen once
per run). Every kernel is a pure function of its inputs; nothing here keeps
state, so arrays can be shared freely across worker threads.
"""

from __future__ import annotations

import numpy as np

# Stream ids for master-owned draws. Worker i uses stream id i, so master
# streams start far above any plausible device count.
STREAM_FUSION = 1 << 16
STREAM_ENCODING = (1 << 16) + 1
STREAM_CLASSIFIER = (1 << 16) + 2

# Row-block budget (in edges) for the sparse aggregation, keeps the gathered
# intermediate bounded (~128 MB at f32, 128 columns).
_SPMM_EDGE_CHUNK = 1 << 18


def rng_stream(seed: int, *stream_id: int) -> np.random.Generator:
    """Counter-based generator for (seed, stream_id).

    Same (seed, stream, draw index) yields the same value on every platform
    and under any thread schedule, because each stream is consumed by exactly
    one owner.
    """
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(stream_id))
    return np.random.Generator(np.random.Philox(ss))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """C = A @ B with an explicit shape check."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return a @ b


def spmm_norm(adj, s: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Degree-normalized sparse aggregation.

    out[v, :] = sum over neighbors u of s[u] * s[v] * h[u, :].

    The operator is symmetric for undirected graphs, so the same routine
    serves forward and backward. Reduction order is fixed (CSR row order,
    sequential within each row), which keeps results bit-identical for any
    thread schedule.
    """
    n = adj.num_nodes
    if h.ndim != 2 or h.shape[0] != n:
        raise ValueError(f"spmm_norm: H has {h.shape[0]} rows, graph has {n} nodes")
    if s.shape != (n,):
        raise ValueError(f"spmm_norm: scale vector has shape {s.shape}, want ({n},)")
    offsets = adj.row_offsets
    cols = adj.col_indices
    out = np.zeros_like(h)
    if len(cols) == 0:
        return out
    scaled = h * s[:, None]
    row = 0
    while row < n:
        # Extend the row block until the edge budget is hit.
        end = int(np.searchsorted(offsets, offsets[row] + _SPMM_EDGE_CHUNK, side="right")) - 1
        end = min(max(end, row + 1), n)
        lo, hi = int(offsets[row]), int(offsets[end])
        if hi > lo:
            gathered = scaled[cols[lo:hi]]
            starts = offsets[row:end] - lo
            counts = np.diff(offsets[row : end + 1])
            nonempty = counts > 0
            # reduceat over only the nonempty rows: each segment runs to the
            # next nonempty start, which is exactly this row's edge span.
            sums = np.add.reduceat(gathered, starts[nonempty], axis=0)
            block = out[row:end]
            block[nonempty] = sums
        row = end
    out *= s[:, None]
    return out


def glorot_init(rows: int, cols: int, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    """Uniform in [-a, a] with a = sqrt(6 / (rows + cols))."""
    if rows < 1 or cols < 1:
        raise ValueError("glorot_init needs positive dimensions")
    a = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-a, a, size=(rows, cols)).astype(dtype)


def relu(a: np.ndarray) -> np.ndarray:
    return np.maximum(a, 0)


def relu_backward(a: np.ndarray, d_out: np.ndarray) -> np.ndarray:
    # Subgradient at 0 is 0.
    return d_out * (a > 0)


def dropout(a, rate, training, rng):
    """Inverted dropout: (output, scaled keep mask).

    Survivors are scaled by 1/(1-rate) at train time so evaluation is a plain
    forward pass. Returns (a, None) when inactive; no rng draw happens then,
    keeping stream positions independent of evaluation passes.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a, None
    keep = rng.random(a.shape) >= rate
    mask = keep.astype(a.dtype) / a.dtype.type(1.0 - rate)
    return a * mask, mask


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient.

    loss = mean over rows of -log softmax(logits)[label]
    dLogits = (softmax - onehot) / m

    Rows are shifted by their max before exponentiation.
    """
    m, c = logits.shape
    if m == 0:
        raise ValueError("softmax_cross_entropy: empty batch")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError("softmax_cross_entropy: label out of range")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(denom)
    rows = np.arange(m)
    loss = float(-log_probs[rows, labels].mean())
    d_logits = exp / denom
    d_logits[rows, labels] -= 1
    d_logits /= m
    return loss, d_logits


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax (used for evaluation-time probabilities)."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)
