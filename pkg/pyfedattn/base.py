""" Keys and protocols shared by logging, errors and encoding.

    A federated run has two kinds of information: what a participant keeps to
    itself and what it sends to the others. `InfoClassification` labels log
    records and errors with that distinction.

    `Partition`, the cost reports and every `FedAttnError` satisfy
    `SupportsToCuratedDict`; pydantic models satisfy both protocols.

    ```
    rows = [r.dict() for r in reports if isinstance(r, SupportsToCuratedDict)]
    ```
"""
from enum import IntEnum
from typing import Any, Callable, Dict, Optional, Protocol, runtime_checkable

# record keys

Classification: str = 'classification'
Message: str = 'msg'
Arguments: str = 'args'
"""Keyword arguments of a call logged by `FedAttnLogger.method`."""
Return: str = 'return'
Operation: str = 'operation'
"""A name such as `run-fedattn` or `aggregate-kv`, independent of the function name."""
Error: str = 'error'
"""One `FedAttnError` or a list of them."""


@runtime_checkable
class SupportsToJson(Protocol):

    def json(self, default: Optional[Callable[[Any], Any]] = None) -> str:
        ...


@runtime_checkable
class SupportsToCuratedDict(Protocol):
    """ Objects that render themselves as a plain dict.

        Arrays become nested lists and index sets sorted lists, so the result
        can go straight into `json.dumps`.
    """

    def dict(self) -> Dict[str, Any]:
        ...


class InfoClassification(IntEnum):
    NA = 0
    SHARED = 50
    """Seen by every participant: exchanged KV headers, aggregate costs, deviations."""
    PARTICIPANT_PRIVATE = 100
    """Local tokens, embeddings or hidden states of one participant. Logged at `VERBOSE` only."""
