"""Partitioning of the global token sequence across participants.

    Participants are numbered `0..N-1` and token indices are 0-based global
    positions. Participant `N-1` is always the task publisher, the one that
    decodes the answer. The indicator maps of a partition are kept as
    index arrays, never as 0/1 matrices.
"""
import json

from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from pydantic import BaseModel, Field, root_validator

from pyfedattn.errors import ConfigError, PartitionError, ShapeError
from pyfedattn.encoders import FedAttnJSONEncoder
from pyfedattn.numkernel import Mat, as_mat, zeros
from pyfedattn.rng import generator


class Strategy(str, Enum):
    """The 2x2 segmentation grid: token vs semantic boundaries, question agnostic vs exclusive."""
    TokSeg_QAg = 'TokSeg_QAg'
    TokSeg_QEx = 'TokSeg_QEx'
    SemSeg_QAg = 'SemSeg_QAg'
    SemSeg_QEx = 'SemSeg_QEx'

    @property
    def semantic(self) -> bool:
        return self in (Strategy.SemSeg_QAg, Strategy.SemSeg_QEx)

    @property
    def question_exclusive(self) -> bool:
        return self in (Strategy.TokSeg_QEx, Strategy.SemSeg_QEx)

    @classmethod
    def parse(cls, name: str) -> 'Strategy':
        """Accepts both `TokSeg_QAg` and the spelled out `Tok-seg: Q-ag`."""
        key = name.replace(' ', '').replace('-', '').replace(':', '_').lower()
        for s in cls:
            if s.value.lower() == key:
                return s

        raise ConfigError(f'Unknown segmentation strategy {name!r}', details={'field': 'strategy'})


@dataclass(frozen=True)
class SyntheticCorpus:
    """ Token ids cut into units; the last unit is the question.

        `units` are half-open `(start, end)` spans tiling `0..L`.
    """
    tokens: Tuple[int, ...]
    units: Tuple[Tuple[int, int], ...]
    shots: int

    @property
    def L(self) -> int:
        return len(self.tokens)

    @property
    def question(self) -> int:
        """Index of the question unit."""
        return len(self.units) - 1

    @property
    def question_span(self) -> Tuple[int, int]:
        return self.units[self.question]


class CorpusParams(BaseModel):
    shots: int = Field(4, ge=1)
    unit_len_min: int = Field(20, ge=1)
    unit_len_max: int = Field(32, ge=1)

    @root_validator(skip_on_failure=True)
    def _range(cls, values):
        if values['unit_len_min'] > values['unit_len_max']:
            raise ValueError('unit_len_min must not exceed unit_len_max')
        return values

    class Config:
        allow_mutation = False
        extra = 'forbid'


@dataclass(frozen=True, eq=False)
class Partition:
    """ Disjoint cover of the global indices `0..L-1` by `N` participants.

        `locals[n]` holds the strictly increasing global indices of participant
        `n` and `assign[i]` the owner of global index `i`.
    """
    L: int
    N: int
    assign: np.ndarray
    locals: Tuple[np.ndarray, ...]
    publisher: int

    @property
    def sizes(self) -> List[int]:
        return [int(len(ix)) for ix in self.locals]

    def local(self, n: int) -> np.ndarray:
        self.check_participant(n)
        return self.locals[n]

    def check_participant(self, n: int) -> None:
        if not isinstance(n, (int, np.integer)) or n < 0 or n >= self.N:
            raise PartitionError(f'Unknown participant {n}', details={'participant': n, 'N': self.N})

    def dict(self) -> Dict[str, Any]:
        return {
            'L': self.L,
            'N': self.N,
            'publisher': self.publisher,
            'locals': [ix.tolist() for ix in self.locals]
        }

    def json(self, default=None) -> str:
        return json.dumps(self.dict(), cls=FedAttnJSONEncoder)

    @classmethod
    def from_locals(cls, locals: Sequence[Sequence[int]], publisher: Optional[int] = None) -> 'Partition':
        """ Builds and validates a partition from index lists.

            Raises:
                PartitionError: When the lists overlap, leave a gap or are not increasing.
        """
        arrays = tuple(np.asarray(list(ix), dtype=np.int64) for ix in locals)
        n_participants = len(arrays)
        if n_participants < 1:
            raise PartitionError('A partition needs at least one participant')

        L = int(sum(len(a) for a in arrays))
        assign = np.full(L, -1, dtype=np.int64)

        for n, ix in enumerate(arrays):
            if len(ix) > 1 and np.any(np.diff(ix) <= 0):
                raise PartitionError(
                    f'Indices of participant {n} are not strictly increasing',
                    details={'participant': n}
                )
            if len(ix) and (ix[0] < 0 or ix[-1] >= L):
                raise PartitionError(
                    f'Indices of participant {n} fall outside 0..{L - 1}',
                    details={'participant': n}
                )
            if np.any(assign[ix] >= 0):
                raise PartitionError('Participants overlap', details={'participant': n})

            assign[ix] = n

        if np.any(assign < 0):
            raise PartitionError('Partition does not cover every index', details={'L': L})

        publisher = n_participants - 1 if publisher is None else publisher
        partition = cls(L=L, N=n_participants, assign=assign, locals=arrays, publisher=publisher)
        partition.check_participant(publisher)

        return partition

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> 'Partition':
        try:
            partition = cls.from_locals(doc['locals'], doc.get('publisher'))
        except KeyError as e:
            raise ConfigError(f'Partition document lacks {e}', details={'field': str(e)})

        if 'L' in doc and doc['L'] != partition.L:
            raise PartitionError('Partition document L differs from its locals', details={'L': doc['L']})

        return partition


def gen_corpus(shots: int, unit_len_range: Tuple[int, int], vocab: int, seed: int) -> SyntheticCorpus:
    """ Few-shot style corpus: *shots* example units followed by one question unit.

        Unit lengths are uniform in the inclusive *unit_len_range* and token
        ids uniform in `0..vocab-1`.
    """
    lo, hi = int(unit_len_range[0]), int(unit_len_range[1])
    if shots < 1:
        raise ConfigError('shots must be at least 1', details={'field': 'shots'})
    if lo < 1 or lo > hi:
        raise ConfigError(f'Invalid unit length range {unit_len_range}', details={'field': 'unit_len_range'})
    if vocab < 1:
        raise ConfigError('vocab must be at least 1', details={'field': 'vocab'})

    gen = generator(seed, 'corpus')
    units: List[Tuple[int, int]] = []
    tokens: List[int] = []

    for _ in range(shots + 1):
        length = gen.integers(lo, hi + 1)
        start = len(tokens)
        tokens.extend(gen.integers(0, vocab) for _ in range(length))
        units.append((start, len(tokens)))

    return SyntheticCorpus(tokens=tuple(tokens), units=tuple(units), shots=shots)


def _contiguous(indices: Sequence[int], parts: int) -> List[List[int]]:
    """Near equal contiguous split, the remainder going to the lowest parts."""
    base, extra = divmod(len(indices), parts)
    out, start = [], 0
    for n in range(parts):
        size = base + (1 if n < extra else 0)
        out.append(list(indices[start:start + size]))
        start += size
    return out


def _greedy_units(units: Sequence[Tuple[int, int]], parts: int) -> List[List[int]]:
    """Longest unit first onto the least loaded part, ties to the lower unit and part."""
    order = sorted(range(len(units)), key=lambda u: (-(units[u][1] - units[u][0]), u))
    load = [0] * parts
    owned: List[List[int]] = [[] for _ in range(parts)]

    for u in order:
        n = min(range(parts), key=lambda p: (load[p], p))
        start, end = units[u]
        owned[n].extend(range(start, end))
        load[n] += end - start

    return [sorted(ix) for ix in owned]


def make_partition(
        corpus: SyntheticCorpus,
        n_participants: int,
        strategy: Strategy) -> Partition:
    """ Splits *corpus* with one of the four segmentation strategies.

        Every strategy is deterministic in the corpus, so no seed is taken.

        Raises:
            PartitionError: When the strategy leaves a participant without tokens.
    """
    if not isinstance(strategy, Strategy):
        strategy = Strategy.parse(str(strategy))

    N = int(n_participants)
    if N < 1:
        raise PartitionError('At least one participant is required', details={'N': N})

    L = corpus.L
    if N == 1:
        return Partition.from_locals([list(range(L))])

    q_start, q_end = corpus.question_span

    if strategy == Strategy.TokSeg_QAg:
        locals = _contiguous(list(range(L)), N)
    elif strategy == Strategy.TokSeg_QEx:
        rest = [i for i in range(L) if not q_start <= i < q_end]
        locals = _contiguous(rest, N - 1) + [list(range(q_start, q_end))]
    elif strategy == Strategy.SemSeg_QAg:
        if len(corpus.units) < N:
            raise PartitionError(
                f'{len(corpus.units)} units can not cover {N} participants',
                details={'units': len(corpus.units), 'N': N, 'strategy': strategy.value}
            )
        locals = _greedy_units(corpus.units, N)
    else:
        others = [u for i, u in enumerate(corpus.units) if i != corpus.question]
        if len(others) < N - 1:
            raise PartitionError(
                f'{len(others)} example units can not cover {N - 1} participants',
                details={'units': len(corpus.units), 'N': N, 'strategy': strategy.value}
            )
        locals = _greedy_units(others, N - 1) + [list(range(q_start, q_end))]

    empty = [n for n, ix in enumerate(locals) if not ix]
    if empty:
        raise PartitionError(
            f'Strategy {strategy.value} leaves participant {empty[0]} without tokens',
            details={'participants': empty, 'N': N, 'L': L, 'strategy': strategy.value}
        )

    return Partition.from_locals(locals)


def gather(global_rows: Mat, p: Partition, n: int) -> Mat:
    """Rows of *global_rows* owned by participant *n*, in global order."""
    global_rows = as_mat(global_rows, 'global')
    if global_rows.shape[0] != p.L:
        raise ShapeError(
            f'Expected {p.L} rows, got {global_rows.shape[0]}',
            details={'rows': global_rows.shape[0], 'L': p.L}
        )

    return global_rows[p.local(n), :]


def scatter(local_rows: Sequence[Mat], p: Partition) -> Mat:
    """Places each participant's rows at its global indices."""
    if len(local_rows) != p.N:
        raise ShapeError(
            f'Expected {p.N} participant matrices, got {len(local_rows)}',
            details={'count': len(local_rows), 'N': p.N}
        )

    mats = [as_mat(x, 'local') for x in local_rows]
    cols = {m.shape[1] for m in mats}
    if len(cols) > 1:
        raise ShapeError('Participant matrices differ in width', details={'widths': sorted(cols)})

    out = zeros(p.L, cols.pop() if cols else 0)
    for n, m in enumerate(mats):
        if m.shape[0] != len(p.locals[n]):
            raise ShapeError(
                f'Participant {n} has {m.shape[0]} rows, owns {len(p.locals[n])} tokens',
                details={'participant': n, 'rows': m.shape[0], 'owned': len(p.locals[n])}
            )
        out[p.locals[n], :] = m

    return out
