"""Loop-level reference implementations for the tests.

    Written against plain Python floats and lists with no package kernel, so
    the vectorized code is compared with something built independently.
"""
import math

from typing import List, Optional, Sequence

Rows = List[List[float]]


def rows(x) -> Rows:
    return [[float(v) for v in r] for r in x]


def matmul(a: Rows, b: Rows) -> Rows:
    n, inner, m = len(a), len(b), len(b[0]) if b else 0
    out = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            s = 0.0
            for k in range(inner):
                s += a[i][k] * b[k][j]
            out[i][j] = s
    return out


def transpose(a: Rows) -> Rows:
    return [list(c) for c in zip(*a)]


def softmax(logits: Rows, mask: Optional[Sequence[Sequence[bool]]] = None) -> Rows:
    out = []
    for i, row in enumerate(logits):
        keep = [j for j in range(len(row)) if mask is None or not mask[i][j]]
        top = max(row[j] for j in keep)
        e = [math.exp(row[j] - top) if j in keep else 0.0 for j in range(len(row))]
        total = sum(e)
        out.append([v / total for v in e])
    return out


def layernorm(x: Rows, gamma: Sequence[float], beta: Sequence[float], eps: float) -> Rows:
    out = []
    for row in x:
        d = len(row)
        mean = sum(row) / d
        var = sum((v - mean) ** 2 for v in row) / d
        out.append([(row[c] - mean) / math.sqrt(var + eps) * gamma[c] + beta[c] for c in range(d)])
    return out


def causal_mask(q_pos: Sequence[int], k_pos: Sequence[int]) -> List[List[bool]]:
    return [[kp > qp for kp in k_pos] for qp in q_pos]


def attention(q: Rows, k: Rows, v: Rows, mask=None) -> Rows:
    d = len(q[0])
    scores = [[s / math.sqrt(d) for s in r] for r in matmul(q, transpose(k))]
    return matmul(softmax(scores, mask), v)


def block(x: Rows, params, mask=None, eps: float = 1e-5, kv=None) -> Rows:
    """One Pre-LN block; *kv* replaces the block's own keys and values."""
    h = layernorm(x, params.ln1_gamma, params.ln1_beta, eps)
    q = matmul(h, rows(params.W_Q))
    k = matmul(h, rows(params.W_K)) if kv is None else rows(kv[0])
    v = matmul(h, rows(params.W_V)) if kv is None else rows(kv[1])

    a = attention(q, k, v, mask)
    z = [[x[i][c] + a[i][c] for c in range(len(x[0]))] for i in range(len(x))]

    h2 = layernorm(z, params.ln2_gamma, params.ln2_beta, eps)
    hidden = [[max(0.0, s) for s in r] for r in matmul(h2, rows(params.W_ffn1))]
    f = matmul(hidden, rows(params.W_ffn2))

    return [[z[i][c] + f[i][c] for c in range(len(z[0]))] for i in range(len(z))]


def forward(x, blocks, positions: Sequence[int], causal: bool = True, eps: float = 1e-5) -> Rows:
    state = rows(x)
    mask = causal_mask(positions, positions) if causal else None
    for params in blocks:
        state = block(state, params, mask, eps)
    return state


def max_abs_diff(a, b) -> float:
    a, b = rows(a), rows(b)
    assert len(a) == len(b)
    return max((abs(x - y) for ra, rb in zip(a, b) for x, y in zip(ra, rb)), default=0.0)
