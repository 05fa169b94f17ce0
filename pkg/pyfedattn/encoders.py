"""JSON encoding of numpy values, enums, errors and the package's report types."""
import traceback

from dataclasses import asdict, is_dataclass
from enum import Enum
from json import JSONEncoder
from types import TracebackType
from typing import Any, Callable, Optional

import numpy as np

from pyfedattn.base import SupportsToCuratedDict, SupportsToJson
from pyfedattn.errors import FedAttnError

_EXACT = (
    (np.ndarray, lambda o: o.tolist()),
    (np.integer, int),
    (np.floating, float),
    (np.bool_, bool),
    (FedAttnError, lambda o: o.dict()),
    (Exception, str),
    (Enum, lambda o: o.name),
    ((set, frozenset), sorted),
    (TracebackType, lambda o: ''.join(traceback.format_tb(o)).strip()),
)


def _conforms(o: Any, protocol: type) -> bool:
    try:
        return issubclass(type(o), protocol)
    except TypeError:
        return False


class FedAttnJSONEncoder(JSONEncoder):
    """ `JSONEncoder` that knows numpy scalars and arrays, enums, sets and the package types.

        Objects nothing else matches are written as `str(o)` rather than failing.
    """

    def __init__(self, prehook: Optional[Callable[[Any], Any]] = None, *args, **kwargs):
        """*prehook* is tried first, a falsy result passes the object on."""
        super().__init__(*args, **kwargs)
        self._prehook = prehook

    def default(self, o: Any) -> Any:
        hooked = self._prehook(o) if self._prehook else None
        if hooked:
            return hooked

        if o is None:
            return 'None'

        for types, convert in _EXACT:
            if isinstance(o, types):
                return convert(o)

        if _conforms(o, SupportsToCuratedDict):
            return o.dict()
        if is_dataclass(o) and not isinstance(o, type):
            return asdict(o)
        if _conforms(o, SupportsToJson):
            return o.json()

        return str(o)
