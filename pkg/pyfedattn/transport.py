"""Simulated synchronous KV message layer with bit accounting.

    Nothing leaves the process: a `MessageBus` records every `KVMessage`,
    charges its `payload_bits` to the sender and the recipients and writes an
    AUDIT log record of the header.

    # Topologies

    + `Topology.ALL_TO_ALL`: the sender unicasts its payload to each of the
      other `N-1` participants and is charged `N-1` payloads.
    + `Topology.STAR`: the sender uploads once to a relay which forwards to
      every other participant. The sender is charged one payload, the relay
      its inbound plus outbound traffic (`relay_bits`).

    Either way every recipient is charged each payload it receives once.
"""
import struct

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional

import numpy as np

from pyfedattn.base import Operation
from pyfedattn.errors import ConfigError, FixtureFormatError, ShapeError
from pyfedattn.falogging import FedAttnLogger, get_logger
from pyfedattn.numkernel import Mat, as_mat

_MESSAGE_HEADER = struct.Struct('<HHHIIB')


class Topology(str, Enum):
    ALL_TO_ALL = 'all_to_all'
    STAR = 'star'


@dataclass(frozen=True, eq=False)
class KVMessage:
    """ The keys and values a participant transmits at a synchronization block.

        `round` is the ordinal of the sender's transmission and `block` the
        1-based block index.
    """
    sender: int
    round: int
    block: int
    token_globals: np.ndarray
    k_payload: Mat
    v_payload: Mat
    wire_bits: int

    def __post_init__(self):
        check_wire_bits(self.wire_bits)

        rows = len(self.token_globals)
        if self.k_payload.shape[0] != rows or self.v_payload.shape[0] != rows:
            raise ShapeError(
                'KV payload rows differ from the token count',
                details={'tokens': rows, 'k': list(self.k_payload.shape), 'v': list(self.v_payload.shape)}
            )

    @property
    def count(self) -> int:
        return int(len(self.token_globals))

    @property
    def d(self) -> int:
        return int(self.k_payload.shape[1])

    @property
    def payload_bits(self) -> int:
        return 2 * self.count * self.d * self.wire_bits

    def dict(self) -> Dict[str, Any]:
        """The header, never the payload."""
        return {
            'sender': self.sender,
            'round': self.round,
            'block': self.block,
            'count': self.count,
            'd': self.d,
            'wire_bits': self.wire_bits,
            'payload_bits': self.payload_bits
        }


@dataclass
class MessageBus:
    N: int
    topology: Topology = Topology.ALL_TO_ALL
    logger: Optional[FedAttnLogger] = None
    messages: List[KVMessage] = field(default_factory=list)
    bits_sent: List[int] = field(init=False)
    bits_received: List[int] = field(init=False)
    relay_bits: int = 0

    def __post_init__(self):
        self.topology = Topology(self.topology)
        self.bits_sent = [0] * self.N
        self.bits_received = [0] * self.N
        self.logger = self.logger or get_logger()

    def transmit(self, msg: KVMessage) -> Optional[KVMessage]:
        """ Delivers *msg* to every other participant.

            A message without tokens, from a zero `kv_exchange_ratio`, is not
            sent; its sender is excluded from the aggregate of that block.
        """
        if msg.count == 0:
            self.logger.debug({
                Operation: 'aggregate-kv',
                'excluded': msg.sender,
                'block': msg.block
            })
            return None

        peers = self.N - 1
        bits = msg.payload_bits

        if self.topology == Topology.STAR:
            self.bits_sent[msg.sender] += bits
            self.relay_bits += bits + bits * peers
        else:
            self.bits_sent[msg.sender] += bits * peers

        for n in range(self.N):
            if n != msg.sender:
                self.bits_received[n] += bits

        self.messages.append(msg)
        self.logger.audit({Operation: 'aggregate-kv', **msg.dict()})

        return msg

    def sent_at(self, block: int) -> List[KVMessage]:
        return [m for m in self.messages if m.block == block]


def dump_message(msg: KVMessage) -> bytes:
    """ Binary form of *msg*.

        Header `{sender u16, round u16, block u16, count u32, d u32, wire_bits u8}`,
        then the token indices as u32 and the K rows followed by the V rows as
        little-endian real32.
    """
    return b''.join([
        _MESSAGE_HEADER.pack(msg.sender, msg.round, msg.block, msg.count, msg.d, msg.wire_bits),
        np.asarray(msg.token_globals).astype('<u4').tobytes(),
        msg.k_payload.astype('<f4').tobytes(),
        msg.v_payload.astype('<f4').tobytes()
    ])


def load_message(data: bytes) -> KVMessage:
    """ Reads a `dump_message` buffer; payloads come back widened to real64.

        Raises:
            FixtureFormatError: When the buffer length does not match its header.
    """
    if len(data) < _MESSAGE_HEADER.size:
        raise FixtureFormatError('Message shorter than its header', details={'length': len(data)})

    sender, rnd, block, count, d, wire_bits = _MESSAGE_HEADER.unpack_from(data, 0)
    expected = _MESSAGE_HEADER.size + 4 * count + 2 * 4 * count * d
    if len(data) != expected:
        raise FixtureFormatError(
            'Message length does not match its header',
            details={'length': len(data), 'expected': expected}
        )

    offset = _MESSAGE_HEADER.size
    globals_ = np.frombuffer(data, dtype='<u4', count=count, offset=offset).astype(np.int64)
    offset += 4 * count
    k = np.frombuffer(data, dtype='<f4', count=count * d, offset=offset).astype(np.float64).reshape(count, d)
    offset += 4 * count * d
    v = np.frombuffer(data, dtype='<f4', count=count * d, offset=offset).astype(np.float64).reshape(count, d)

    return KVMessage(
        sender=sender, round=rnd, block=block,
        token_globals=globals_, k_payload=as_mat(k), v_payload=as_mat(v),
        wire_bits=wire_bits
    )


def check_wire_bits(wire_bits: int) -> int:
    """Every message quantizes its scalars to 1..255 bits."""
    if wire_bits < 1 or wire_bits > 255:
        raise ConfigError(f'wire_bits {wire_bits} outside 1..255', details={'field': 'wire_bits'})
    return wire_bits
