"""Error types of pyfedattn and the collector used by the experiment runner.

    Every error carries an `ExitCode`. It is the code the command line runner
    exits with when that error is the worst one of a run.

    + `ShapeError`: matrix dimensions do not line up (INTERNAL).
    + `DegenerateRowError`: a softmax row with every entry masked (DEGENERATE).
    + `ConfigError`: invalid configuration (CONFIG), refined by `ScheduleError`,
      `PartitionError`, `TokenError` and `FixtureFormatError`.
    + `IncompleteTableError`: a bound evaluator or checker lacks entries (INTERNAL).
    + `FedAttnErrorWithReturn`: a continuable error that carries the value
      the failing function returns in its place.

    A sweep keeps going past an infeasible grid point and reports it afterwards:

    ```
    errors = FedAttnErrorHandler(logger=logger)

    @errors.collect(root=True)
    def sweep(points):
        rows = [run_point(p) for p in points]
        return rows, errors.collector().get_highest()

    @errors.collect
    def run_point(point):
        if point.N > units:
            raise FedAttnErrorWithReturn('Strategy infeasible', return_value=None, code=ExitCode.CONFIG)
        ...
    ```

    Errors with `ErrorAction.RAISE` are collected as well but still raised.
"""
import json

from contextvars import ContextVar
from enum import IntEnum
from functools import wraps
from logging import Logger
from typing import Any, Callable, ClassVar, Dict, List, Optional, Union

from typing_extensions import Protocol

from pyfedattn.base import Classification, Error, InfoClassification, Message


class ExitCode(IntEnum):
    OK = 0
    INTERNAL = 1
    """Programming or shape error inside the library."""
    CONFIG = 2
    """Invalid configuration or experiment description."""
    DEGENERATE = 3
    """Numerical degeneracy, e.g. a fully masked attention row."""


class ErrorAction(IntEnum):
    """What the code catching an error is advised to do."""
    INDECISIVE = 0
    RAISE = 1
    CONTINUE = 2
    """The caller can still do its job, e.g. a sweep with one failed point."""


class FedAttnError(Exception):
    """ Base of all pyfedattn errors.

        Implements the `SupportsToJson` and `SupportsToCuratedDict` protocols.
    """

    @property
    def code(self) -> ExitCode:
        raise NotImplementedError

    @property
    def action(self) -> ErrorAction:
        raise NotImplementedError

    @property
    def message(self) -> str:
        raise NotImplementedError

    @property
    def classification(self) -> InfoClassification:
        raise NotImplementedError

    @property
    def details(self) -> Optional[Dict[str, Any]]:
        """Context such as the offending shapes or the field path of a configuration value."""
        raise NotImplementedError

    def dict(self) -> Dict[str, Any]:
        d: Dict[str, Any] = {
            'code': self.code.value,
            'action': self.action.name,
            Message: self.message,
            Classification: self.classification.name
        }

        if self.details:
            d['details'] = self.details

        return d

    def json(self, default: Optional[Callable[[Any], Any]] = None) -> str:
        return json.dumps(self.dict(), default=default)


class StdFedAttnError(FedAttnError):
    """ Concrete `FedAttnError`.

        Subclasses only change `default_code`; *code* overrides it per instance.
    """

    default_code: ClassVar[ExitCode] = ExitCode.INTERNAL

    def __init__(
            self,
            message: str,
            code: Union[ExitCode, int, None] = None,
            action: ErrorAction = ErrorAction.RAISE,
            classification: InfoClassification = InfoClassification.NA,
            details: Optional[Dict[str, Any]] = None) -> None:
        super().__init__(message)

        self._code = self.default_code if code is None else ExitCode(code)
        self._action = action
        self._message = message
        self._classification = classification
        self._details = details

    @property
    def code(self) -> ExitCode:
        return self._code

    @property
    def action(self) -> ErrorAction:
        return self._action

    @property
    def message(self) -> str:
        return self._message

    @property
    def classification(self) -> InfoClassification:
        return self._classification

    @property
    def details(self) -> Optional[Dict[str, Any]]:
        return self._details

    def __str__(self) -> str:
        return self.message

    def __repr__(self) -> str:
        return f'{type(self).__name__}(code={self.code.name}, message={self.message!r}, details={self.details})'


class ShapeError(StdFedAttnError):
    pass


class DegenerateRowError(StdFedAttnError):
    default_code = ExitCode.DEGENERATE


class ConfigError(StdFedAttnError):
    """`details['field']` holds the path of the offending value when it is known."""
    default_code = ExitCode.CONFIG


class ScheduleError(ConfigError):
    pass


class PartitionError(ConfigError):
    """Infeasible segmentation strategy or unknown participant."""


class TokenError(ConfigError):
    """Token id outside the vocabulary or positions not increasing."""


class FixtureFormatError(ConfigError):
    """Malformed binary weight or message dump."""


class IncompleteTableError(StdFedAttnError):
    """A gain table or trace lacks the entries an evaluator needs."""


class FedAttnErrorWithReturn(StdFedAttnError):
    """ A continuable error whose `return_value` replaces the result of the failing call.

        The return value is not part of `dict` or `json`.
    """

    def __init__(
            self,
            message: str,
            return_value: Any = None,
            code: Union[ExitCode, int, None] = None,
            action: ErrorAction = ErrorAction.CONTINUE,
            classification: InfoClassification = InfoClassification.NA,
            details: Optional[Dict[str, Any]] = None) -> None:
        super().__init__(message, code, action, classification, details)
        self._return_value = return_value

    @property
    def return_value(self) -> Any:
        return self._return_value


class ErrorCollector(Protocol):
    """Aggregates errors while execution continues."""

    @property
    def errors(self) -> List[FedAttnError]:
        ...

    def add(self, err: FedAttnError) -> 'ErrorCollector':
        ...

    def has_errors(self) -> bool:
        return len(self.errors) > 0

    def matching(self, matcher: Callable[[FedAttnError], bool]) -> List[FedAttnError]:
        """ The collected errors *matcher* accepts, in collection order.

            >>> StdErrorCollector().add(ConfigError('Missing sweep axis')).matching(lambda e: e.code == ExitCode.CONFIG)
            [ConfigError(code=CONFIG, message='Missing sweep axis', details=None)]
        """
        return [e for e in self.errors if matcher(e)]

    def get_highest(self) -> Optional[FedAttnError]:
        """The first error with the highest code, `None` when nothing was collected."""
        return max(self.errors, key=lambda e: e.code) if self.has_errors() else None

    def dict(self) -> List[Dict[str, Any]]:
        return [e.dict() for e in self.errors]

    def json(self, default: Optional[Callable[[Any], Any]] = None) -> str:
        return json.dumps(self.dict(), default=default)


class StdErrorCollector(ErrorCollector):

    def __init__(self) -> None:
        self._errors: List[FedAttnError] = []

    @property
    def errors(self) -> List[FedAttnError]:
        return self._errors

    def add(self, err: FedAttnError) -> 'ErrorCollector':
        self._errors.append(err)
        return self


_current_collector: ContextVar[Optional[ErrorCollector]] = ContextVar('current_collector', default=None)


def get_current_collector() -> Optional[ErrorCollector]:
    return _current_collector.get()


class FedAttnErrorHandler():
    """ Installs and feeds the current `ErrorCollector`.

        The collector lives in a `ContextVar`; worker threads see it when they
        run inside a copy of the submitting context.
    """

    def __init__(self, logger: Optional[Logger] = None) -> None:
        """*logger* receives every error passing a `collect` decorated function, if given."""
        self.logger = logger

    def collector(self, safe: bool = True) -> Optional[ErrorCollector]:
        """The current collector; an empty throwaway one when none is installed and *safe*."""
        c = get_current_collector()
        return StdErrorCollector() if c is None and safe else c

    def collect(self, _func: Optional[Callable] = None, root: bool = False) -> Callable:
        """ Decorator collecting the `FedAttnError`s a function raises.

            Args:
                root:   Install a fresh collector for the duration of the call
                        unless one is already current.

            A collected error with `ErrorAction.CONTINUE` is swallowed and the
            call returns its `return_value` (or `None`). Other errors, and every
            error raised while no collector is installed, propagate.
        """
        def decorator(func):

            @wraps(func)
            def wrapper(*args, **kwargs):
                token = _current_collector.set(StdErrorCollector()) if root and get_current_collector() is None else None

                try:
                    return func(*args, **kwargs)
                except FedAttnError as e:
                    if self.logger:
                        self.logger.error({
                            Message: f'{func.__name__} failed',
                            Error: e,
                            Classification: e.classification
                        })

                    collector = get_current_collector()
                    if collector is None:
                        raise

                    collector.add(e)
                    if e.action == ErrorAction.RAISE:
                        raise

                    return getattr(e, 'return_value', None)
                except Exception:
                    if self.logger:
                        self.logger.exception(f'{func.__name__} raised an unexpected error')
                    raise
                finally:
                    if token is not None:
                        _current_collector.reset(token)

            return wrapper

        return decorator if _func is None else decorator(_func)
