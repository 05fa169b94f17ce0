"""Structured logging for pyfedattn.

    `FedAttnLogger` is a powertools `Logger` whose records carry three extra
    top level keys next to the message:

    + `classification`: the `base.InfoClassification` of the content.
    + `type`: a `LogEntryType`, `AUDIT` for every accounted KV transmission.
    + `operation`: a semantic name such as `run-fedattn` or `measure-sigma`.

    `LOG_LEVEL` and `POWERTOOLS_SERVICE_NAME` are honoured as by powertools
    itself; `init_env` defaults the service name to `pyfedattn`.

    A participant's local hidden states are classified
    `InfoClassification.PARTICIPANT_PRIVATE`. Such records are emitted at
    `VERBOSE` whatever level the call site asked for, so a DEBUG log of a
    run only ever shows what the participants exchange.

    ```
    logger.audit({Operation: 'aggregate-kv', 'sender': 2, 'block': 4, 'payload_bits': 4096})

    {
        "level":"DEBUG",
        "location":"transmit:130",
        "message":{"sender":2,"block":4,"payload_bits":4096},
        "timestamp":"2026-10-16 22:27:35,206+0100",
        "service":"pyfedattn",
        "classification":"SHARED",
        "type":"AUDIT",
        "operation":"aggregate-kv"
    }
    ```
"""
import json
import logging

from enum import IntEnum
from functools import wraps
from typing import IO, Any, Callable, Dict, NamedTuple, Optional, Union

from aws_lambda_powertools.logging.formatter import BasePowertoolsFormatter
from aws_lambda_powertools.logging.logger import Logger

from pyfedattn.base import Arguments, Classification, InfoClassification, Message, Operation, Return
from pyfedattn.encoders import FedAttnJSONEncoder
from pyfedattn.utils import get_log_level

LogType: str = 'type'
"""Key of the `LogEntryType` of a record."""

VERBOSE = logging.DEBUG - 1
"""Below DEBUG, the level of participant-private records."""


class LogEntryType(IntEnum):
    STD = 0
    AUDIT = 1
    """A transmission that is accounted in bits."""


class _Key(NamedTuple):
    """A structured key lifted from the message dict to the record."""
    name: str
    default: Optional[str]
    """Emitted when the message does not set the key, `None` to omit it."""


def _name(value: Any) -> Any:
    return value.name if isinstance(value, IntEnum) else value


def _at(level: int) -> Callable[..., None]:
    def emit(self: 'FedAttnLogger', msg: Any, *args: Any, **kwargs: Any) -> None:
        self.log(level, msg, *args, **kwargs)

    emit.__name__ = logging.getLevelName(level).lower()
    return emit


class FedAttnLogger(Logger):
    """ Powertools `Logger` with the pyfedattn record keys.

        >>> logger = FedAttnLogger(service='sweep')
        >>> logger.info({
                Operation: 'run-fedattn',
                'N': 4,
                'sync_blocks': [2, 4, 6, 8],
                Classification: InfoClassification.SHARED
            })
        {
            "level":"INFO",
            "message":{"N":4,"sync_blocks":[2,4,6,8]},
            "service":"sweep",
            "classification":"SHARED",
            "operation":"run-fedattn",
            ...
        }
    """

    def __init__(
            self,
            service: Optional[str] = None,
            level: Union[str, int, None] = None,
            child: bool = False,
            sampling_rate: Optional[float] = None,
            stream: Optional[IO[str]] = None,
            logger_formatter: Optional[BasePowertoolsFormatter] = None,
            logger_handler: Optional[logging.Handler] = None,
            custom_encoder: Optional[Callable[[Any], str]] = None,
            skip_std_type: bool = True,
            skip_info_na: bool = True,
            **kwargs):
        """ See `Logger` for the powertools arguments.

            Additional Args:
                custom_encoder: Fallback for objects `FedAttnJSONEncoder` does not know.
                skip_std_type:  Omit `type` on `LogEntryType.STD` records.
                skip_info_na:   Omit `classification` on `InfoClassification.NA` records.
        """
        encoder = FedAttnJSONEncoder(custom_encoder)

        super().__init__(
            service=service,
            level=level,
            child=child,
            sampling_rate=sampling_rate,
            stream=stream,
            logger_formatter=logger_formatter,
            logger_handler=logger_handler,
            json_default=encoder.default,
            **kwargs)

        logging.addLevelName(VERBOSE, 'VERBOSE')

        self._keys = (
            _Key(Classification, None if skip_info_na else InfoClassification.NA.name),
            _Key(LogType, None if skip_std_type else LogEntryType.STD.name),
            _Key(Operation, None),
        )
        self._skipped = {
            Classification: InfoClassification.NA.name if skip_info_na else None,
            LogType: LogEntryType.STD.name if skip_std_type else None,
        }

    verbose = _at(VERBOSE)
    debug = _at(logging.DEBUG)
    info = _at(logging.INFO)
    warning = _at(logging.WARNING)
    error = _at(logging.ERROR)
    critical = _at(logging.CRITICAL)

    def audit(self, msg: Dict[str, Any], level: Union[str, int, None] = logging.DEBUG) -> None:
        """Logs a transmission as `LogEntryType.AUDIT`, always `InfoClassification.SHARED`."""
        self.log(get_log_level(level), {
            **msg,
            Classification: InfoClassification.SHARED,
            LogType: LogEntryType.AUDIT
        })

    def log(self, level: int, msg: Any, *args: Any, **kwargs: Any) -> None:
        payload = dict(msg) if isinstance(msg, dict) else {Message: msg}

        if _name(payload.get(Classification)) == InfoClassification.PARTICIPANT_PRIVATE.name:
            level = VERBOSE

        for key in self._keys:
            value = _name(payload.pop(key.name, None)) or key.default
            if value is None or value == self._skipped.get(key.name):
                self.remove_keys([key.name])
            else:
                self.append_keys(**{key.name: value})

        if payload.get(Message) == '':
            del payload[Message]

        self._logger.log(level, payload, *args, **kwargs, stacklevel=3)

    def serialize(self, log: Dict[str, Any]) -> str:
        return json.dumps(log, cls=FedAttnJSONEncoder)

    def method(
            self,
            _func: Optional[Callable] = None,
            operation: Optional[str] = None,
            level: Union[str, int, None] = None,
            out_level: Union[str, int, None] = None,
            classification: InfoClassification = InfoClassification.NA,
            log_args: bool = True,
            log_return: bool = True):
        """ Decorator logging entry, exit and exceptions of a function.

            Entry is logged at *level* and exit at *out_level*. Both fall back
            to `LOG_LEVEL`, then to DEBUG for entry and INFO for exit. Switch
            *log_args* or *log_return* off for matrices and weights. An
            exception is logged with its stack and re-raised.
        """
        def decorator(func):
            names = func.__code__.co_varnames[:func.__code__.co_argcount]

            @wraps(func)
            def wrapper(*args, **kwargs):
                record = {Classification: classification, Operation: operation or func.__name__}
                arguments = {**dict(zip(names, args)), **kwargs} if log_args else {}

                self.log(get_log_level(level), {**record, Message: f'Entering {func.__name__}', Arguments: arguments})

                try:
                    value = func(*args, **kwargs)
                except Exception:
                    self.log(
                        logging.ERROR,
                        {**record, Message: f'Exception in {func.__name__}', Arguments: arguments},
                        exc_info=True)
                    raise

                done = {**record, Message: f'Exiting {func.__name__}'}
                if log_return:
                    done[Return] = value

                self.log(get_log_level(out_level, logging.INFO), done)
                return value

            return wrapper

        return decorator if _func is None else decorator(_func)


_package_logger: Optional[FedAttnLogger] = None


def get_logger() -> FedAttnLogger:
    """The package wide `FedAttnLogger`, created on first use at `LOG_LEVEL` or WARNING."""
    global _package_logger

    if _package_logger is None:
        _package_logger = FedAttnLogger(level=get_log_level(None, logging.WARNING))

    return _package_logger
