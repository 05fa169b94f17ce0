"""The decoder-only Pre-LN Transformer used by every execution mode.

    One attention head, no biases, ReLU feed forward network and an output
    projection tied to the embedding table. A block computes::

        q, k, v = LN1(x) W_Q, LN1(x) W_K, LN1(x) W_V
        a       = x + Softmax(q k^T / sqrt(d) + mask) v
        x_out   = a + ReLU(LN2(a) W_ffn1) W_ffn2

    The keys and values of the attention may be replaced by an externally
    supplied pair (`KVSource`), which is how a participant attends to the
    aggregated global KV at a synchronization block.
"""
import math
import struct

from dataclasses import dataclass
from typing import Any, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from pydantic import BaseModel, Field

from pyfedattn.errors import ShapeError, TokenError, FixtureFormatError
from pyfedattn.numkernel import (
    DEFAULT_EPS,
    Mat,
    as_mat,
    layernorm,
    matmul,
    softmax_rows,
    zeros,
)
from pyfedattn.rng import Xoshiro256StarStar

INIT_STD = 0.02
"""Standard deviation of projection and embedding entries at init."""

WEIGHTS_MAGIC = b'FATW'
WEIGHTS_VERSION = 1
_WEIGHTS_HEADER = struct.Struct('<4sHHHHI')


class ModelConfig(BaseModel):
    """Dimensions and seed of a model."""

    d: int = Field(32, ge=1)
    """Hidden dimension."""
    d_ff: int = Field(64, ge=1)
    """Feed forward dimension."""
    M: int = Field(8, ge=1)
    """Number of blocks."""
    vocab: int = Field(64, ge=1)
    seed: int = Field(0, ge=0, lt=1 << 64)
    causal: bool = True
    """`False` gives bidirectional (encoder style) attention."""
    eps: float = Field(DEFAULT_EPS, gt=0)
    """LayerNorm epsilon."""

    class Config:
        allow_mutation = False
        extra = 'forbid'


@dataclass(frozen=True, eq=False)
class BlockParams:
    W_Q: Mat
    W_K: Mat
    W_V: Mat
    W_ffn1: Mat
    W_ffn2: Mat
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray

    def tensors(self) -> List[np.ndarray]:
        """The parameters in dump order."""
        return [
            self.W_Q, self.W_K, self.W_V, self.W_ffn1, self.W_ffn2,
            self.ln1_gamma, self.ln1_beta, self.ln2_gamma, self.ln2_beta
        ]


@dataclass(frozen=True, eq=False)
class ModelWeights:
    """ Immutable weights of a model.

        The unembedding is `embed^T`. Positional encodings are sinusoidal and
        computed on demand by `pos_encode`, so any global position is valid.
    """
    config: ModelConfig
    blocks: Tuple[BlockParams, ...]
    embed: Mat

    @property
    def M(self) -> int:
        return len(self.blocks)

    @property
    def d(self) -> int:
        return self.config.d

    def pos_encode(self, positions: Sequence[int]) -> Mat:
        return sinusoidal(positions, self.config.d)


class KVSource(NamedTuple):
    """Externally supplied keys and values for `block_forward`."""
    k: Mat
    v: Mat


KVOverride = Union[str, KVSource]
"""Either `'self'` or a `KVSource`."""


class BlockStep(NamedTuple):
    """Everything one block computes for its query rows."""
    x_out: Mat
    q: Mat
    k: Mat
    v: Mat
    attn: Mat
    """Attention output before the residual add."""
    z: Mat
    """Input of the feed forward sub-layer (`x + attn`)."""


def sinusoidal(positions: Sequence[int], d: int) -> Mat:
    """ Sinusoidal position table rows for *positions*.

        Even columns `sin(p / 10000^(2i/d))`, odd columns the matching cosine.
    """
    positions = [int(p) for p in positions]
    out = zeros(len(positions), d)

    for row, p in enumerate(positions):
        for col in range(d):
            angle = p / math.pow(10000.0, (col - col % 2) / d)
            out[row, col] = math.sin(angle) if col % 2 == 0 else math.cos(angle)

    return out


def init_weights(config: ModelConfig) -> ModelWeights:
    """ Draws a fresh model from `config.seed`.

        A single `Xoshiro256StarStar` stream fills, block by block, `W_Q`, `W_K`,
        `W_V`, `W_ffn1` and `W_ffn2` in row-major order, then the embedding table.
    """
    d, d_ff = config.d, config.d_ff
    gen = Xoshiro256StarStar(config.seed)

    def draw(rows: int, cols: int) -> Mat:
        return gen.normals(rows * cols, INIT_STD).reshape(rows, cols)

    blocks = []
    for _ in range(config.M):
        blocks.append(BlockParams(
            W_Q=draw(d, d),
            W_K=draw(d, d),
            W_V=draw(d, d),
            W_ffn1=draw(d, d_ff),
            W_ffn2=draw(d_ff, d),
            ln1_gamma=np.ones(d),
            ln1_beta=np.zeros(d),
            ln2_gamma=np.ones(d),
            ln2_beta=np.zeros(d)
        ))

    return ModelWeights(config=config, blocks=tuple(blocks), embed=draw(config.vocab, d))


def zero_block(d: int, d_ff: int) -> BlockParams:
    """A block whose every projection is zero (residual only)."""
    return BlockParams(
        W_Q=zeros(d, d), W_K=zeros(d, d), W_V=zeros(d, d),
        W_ffn1=zeros(d, d_ff), W_ffn2=zeros(d_ff, d),
        ln1_gamma=np.ones(d), ln1_beta=np.zeros(d),
        ln2_gamma=np.ones(d), ln2_beta=np.zeros(d)
    )


def check_positions(positions: Sequence[int]) -> List[int]:
    positions = [int(p) for p in positions]

    for i, p in enumerate(positions):
        if p < 0:
            raise TokenError(f'Negative position {p}', details={'index': i})
        if i > 0 and p <= positions[i - 1]:
            raise TokenError(
                'Positions must be strictly increasing',
                details={'index': i, 'previous': positions[i - 1], 'position': p}
            )

    return positions


def embed_tokens(ids: Sequence[int], global_positions: Sequence[int], w: ModelWeights) -> Mat:
    """ Embedding rows plus positional encodings at *global* positions.

        Raises:
            TokenError: When an id is outside the vocabulary or positions are not increasing.
    """
    ids = [int(i) for i in ids]
    positions = check_positions(global_positions)

    if len(ids) != len(positions):
        raise ShapeError(
            'ids and positions differ in length',
            details={'ids': len(ids), 'positions': len(positions)}
        )

    for i, t in enumerate(ids):
        if t < 0 or t >= w.config.vocab:
            raise TokenError(
                f'Token id {t} outside vocabulary of {w.config.vocab}',
                details={'index': i, 'id': t}
            )

    if not ids:
        return zeros(0, w.d)

    return w.embed[ids, :] + w.pos_encode(positions)


def qkv_project(x: Mat, block: BlockParams, eps: float = DEFAULT_EPS) -> Tuple[Mat, Mat, Mat]:
    x = _check_hidden(x, block)
    h = layernorm(x, block.ln1_gamma, block.ln1_beta, eps)
    return matmul(h, block.W_Q), matmul(h, block.W_K), matmul(h, block.W_V)


def attention_weights(q: Mat, k: Mat, mask: Optional[np.ndarray] = None) -> Mat:
    """The attention map `Softmax(q k^T / sqrt(d) + mask)`."""
    q = as_mat(q, 'q')
    k = as_mat(k, 'k')

    if q.shape[1] != k.shape[1]:
        raise ShapeError(
            'query and key widths differ',
            details={'q': list(q.shape), 'k': list(k.shape)}
        )

    scores = matmul(q, k.T) / math.sqrt(q.shape[1])
    return softmax_rows(scores, mask)


def attention(q: Mat, k: Mat, v: Mat, mask: Optional[np.ndarray] = None) -> Mat:
    """ Single head scaled dot product attention.

        Raises:
            ShapeError:         When q, k, v do not line up.
            DegenerateRowError: When a query row has every key masked.
    """
    v = as_mat(v, 'v')
    if as_mat(k, 'k').shape[0] != v.shape[0]:
        raise ShapeError(
            'keys and values differ in row count',
            details={'k': list(np.shape(k)), 'v': list(v.shape)}
        )

    return matmul(attention_weights(q, k, mask), v)


def build_mask(
        q_pos: Sequence[int],
        k_pos: Sequence[int],
        causal: bool = True,
        q_owner: Optional[Sequence[int]] = None,
        k_owner: Optional[Sequence[int]] = None) -> np.ndarray:
    """ Boolean mask for queries at *q_pos* over keys at *k_pos* (global indices).

        Causal masking hides keys at a later global position. When owners are
        given, keys owned by another participant are hidden as well.
    """
    q_pos = np.asarray(q_pos, dtype=np.int64)
    k_pos = np.asarray(k_pos, dtype=np.int64)

    mask = np.zeros((q_pos.shape[0], k_pos.shape[0]), dtype=bool)
    if causal:
        mask |= k_pos[None, :] > q_pos[:, None]

    if q_owner is not None and k_owner is not None:
        mask |= np.asarray(k_owner)[None, :] != np.asarray(q_owner)[:, None]

    return mask


def ffn(z: Mat, block: BlockParams, eps: float = DEFAULT_EPS) -> Mat:
    """Position-wise `ReLU(LN2(z) W_ffn1) W_ffn2`, LayerNorm housed inside."""
    h = layernorm(z, block.ln2_gamma, block.ln2_beta, eps)
    return matmul(np.maximum(matmul(h, block.W_ffn1), 0.0), block.W_ffn2)


def block_step(
        x_in: Mat,
        block: BlockParams,
        kv_source: KVOverride = 'self',
        mask: Optional[np.ndarray] = None,
        eps: float = DEFAULT_EPS) -> BlockStep:
    """`block_forward` that also returns the attention output and FFN input."""
    q, k, v = qkv_project(x_in, block, eps)
    return finish_block(x_in, (q, k, v), block, kv_source, mask, eps)


def finish_block(
        x_in: Mat,
        qkv: Tuple[Mat, Mat, Mat],
        block: BlockParams,
        kv_source: KVOverride = 'self',
        mask: Optional[np.ndarray] = None,
        eps: float = DEFAULT_EPS) -> BlockStep:
    """Completes a block from projections already computed by `qkv_project`."""
    q, k, v = qkv

    if isinstance(kv_source, str):
        if kv_source != 'self':
            raise ShapeError(f'Unknown kv_source {kv_source!r}', details={'kv_source': kv_source})
        k_used, v_used = k, v
    else:
        k_used, v_used = as_mat(kv_source.k, 'k'), as_mat(kv_source.v, 'v')
        if k_used.shape[1] != q.shape[1] or v_used.shape[1] != q.shape[1]:
            raise ShapeError(
                'external KV width differs from the model width',
                details={'k': list(k_used.shape), 'v': list(v_used.shape), 'd': q.shape[1]}
            )

    attn = attention(q, k_used, v_used, mask)
    z = x_in + attn
    x_out = z + ffn(z, block, eps)

    return BlockStep(x_out=x_out, q=q, k=k, v=v, attn=attn, z=z)


def block_forward(
        x_in: Mat,
        block: BlockParams,
        kv_source: KVOverride = 'self',
        mask: Optional[np.ndarray] = None,
        eps: float = DEFAULT_EPS) -> Tuple[Mat, Mat, Mat, Mat]:
    """ One Pre-LN block.

        Returns:
            `(x_out, q, k, v)` where q, k, v are this block's own projections of *x_in*.
    """
    step = block_step(x_in, block, kv_source, mask, eps)
    return step.x_out, step.q, step.k, step.v


def logits(state: Mat, w: ModelWeights) -> Mat:
    """Next token logits through the tied unembedding."""
    return matmul(as_mat(state), w.embed.T)


def greedy_token(row: np.ndarray) -> int:
    """Argmax of a logit row, the lowest id wins a tie."""
    return int(np.argmax(row))


def _check_hidden(x: Mat, block: BlockParams) -> Mat:
    x = as_mat(x)
    if x.shape[1] != block.W_Q.shape[0]:
        raise ShapeError(
            f'hidden width {x.shape[1]} differs from model width {block.W_Q.shape[0]}',
            details={'x': list(x.shape)}
        )
    return x


def dump_weights(w: ModelWeights) -> bytes:
    """ Binary fixture of *w*.

        A 16 byte header (magic `FATW`, version u16, d u16, d_ff u16, M u16,
        vocab u32) followed by little-endian real64 tensors, block by block in
        `BlockParams.tensors` order, then the embedding table.
    """
    c = w.config
    parts = [_WEIGHTS_HEADER.pack(WEIGHTS_MAGIC, WEIGHTS_VERSION, c.d, c.d_ff, w.M, c.vocab)]

    for block in w.blocks:
        parts.extend(t.astype('<f8').tobytes() for t in block.tensors())

    parts.append(w.embed.astype('<f8').tobytes())
    return b''.join(parts)


def load_weights(data: bytes, **config: Any) -> ModelWeights:
    """ Reads a `dump_weights` fixture.

        Extra keyword arguments (`seed`, `causal`, `eps`) complete the `ModelConfig`.

        Raises:
            FixtureFormatError: Bad magic, unknown version or wrong length.
    """
    if len(data) < _WEIGHTS_HEADER.size:
        raise FixtureFormatError('Weight fixture shorter than its header', details={'length': len(data)})

    magic, version, d, d_ff, m, vocab = _WEIGHTS_HEADER.unpack_from(data, 0)
    if magic != WEIGHTS_MAGIC:
        raise FixtureFormatError('Not a weight fixture', details={'magic': magic.hex()})
    if version != WEIGHTS_VERSION:
        raise FixtureFormatError(f'Unsupported weight fixture version {version}', details={'version': version})

    shapes = [(d, d), (d, d), (d, d), (d, d_ff), (d_ff, d), (d,), (d,), (d,), (d,)]
    per_block = sum(int(np.prod(s)) for s in shapes)
    expected = _WEIGHTS_HEADER.size + 8 * (m * per_block + vocab * d)
    if len(data) != expected:
        raise FixtureFormatError(
            'Weight fixture length does not match its header',
            details={'length': len(data), 'expected': expected}
        )

    offset = _WEIGHTS_HEADER.size

    def read(shape: Iterable[int]) -> np.ndarray:
        nonlocal offset
        shape = tuple(shape)
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype='<f8', count=count, offset=offset).astype(np.float64)
        offset += 8 * count
        return arr.reshape(shape)

    blocks = tuple(BlockParams(*[read(s) for s in shapes]) for _ in range(m))
    embed = read((vocab, d))

    return ModelWeights(
        config=ModelConfig(d=d, d_ff=d_ff, M=m, vocab=vocab, **config),
        blocks=blocks,
        embed=embed
    )
