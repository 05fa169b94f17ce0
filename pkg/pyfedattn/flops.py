"""FLOP counting convention.

    A multiply-add counts as 2 FLOPs, a softmax entry as 5 scalar operations
    (max, subtract, exp, sum, divide) and a LayerNorm element as 8. A block
    applies two LayerNorms. For `Lq` query rows over `Lk` keys:

        projections  3 * 2 * Lq * d^2
        scores       2 * Lq * Lk * d
        softmax      5 * Lq * Lk
        weighted     2 * Lq * Lk * d
        ffn          2 * Lq * d * d_ff * 2
        layernorm    2 * 8 * Lq * d

    The protocol engine instruments its forwards with these functions and the
    cost module predicts with them, so both agree exactly.
"""


def projection_flops(lq: int, d: int) -> int:
    return 3 * 2 * lq * d * d


def score_flops(lq: int, lk: int, d: int) -> int:
    return 2 * lq * lk * d


def softmax_flops(lq: int, lk: int) -> int:
    return 5 * lq * lk


def weighted_flops(lq: int, lk: int, d: int) -> int:
    return 2 * lq * lk * d


def attention_flops(lq: int, lk: int, d: int) -> int:
    return score_flops(lq, lk, d) + softmax_flops(lq, lk) + weighted_flops(lq, lk, d)


def ffn_flops(lq: int, d: int, d_ff: int) -> int:
    return 2 * lq * d * d_ff * 2


def layernorm_flops(lq: int, d: int) -> int:
    return 2 * 8 * lq * d


def block_flops(lq: int, lk: int, d: int, d_ff: int) -> int:
    """One block for *lq* queries attending to *lk* keys."""
    return (
        projection_flops(lq, d)
        + attention_flops(lq, lk, d)
        + ffn_flops(lq, d, d_ff)
        + layernorm_flops(lq, d)
    )
