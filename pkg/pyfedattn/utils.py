import logging
import os
import re

from typing import Any, Type, TypeVar, Union

from pydantic import BaseModel, ValidationError

from pyfedattn.errors import ConfigError

M = TypeVar('M', bound=BaseModel)

_ENV_SEGMENT = re.compile(r'{([^{}]*)}')


def get_log_level(level: Union[str, int, None], default: int = logging.DEBUG) -> int:
    """ *level* as a number, else `LOG_LEVEL`, else *default*.

        Names (`'info'`, `'VERBOSE'`) and numeric strings are both accepted;
        anything unparseable yields *default*.
    """
    if isinstance(level, int):
        return level

    name = level or os.getenv('LOG_LEVEL')
    if not name:
        return default

    value = logging.getLevelName(name.upper())
    if isinstance(value, int):
        return value

    return int(name) if name.strip().lstrip('-').isdigit() else default


def render_env_string(template: str) -> str:
    """ Replaces every `{UPPER_CASE}` segment of *template* by that environment variable.

        >>> render_env_string('{FEDATTN_OUT_DIR}/h-sweep')
        'results/h-sweep'

        Other `{...}` segments are kept as they are. An unset variable raises
        `ConfigError` with the variable name as `details['field']`.
    """
    def substitute(match: 're.Match[str]') -> str:
        name = match.group(1)
        if not name.isupper():
            return match.group(0)

        value = os.getenv(name)
        if value is None:
            raise ConfigError(f'Environment variable {name} is not set.', details={'field': name})

        return value

    return _ENV_SEGMENT.sub(substitute, template) if template else ''


def parse_config(model: Type[M], data: Any, prefix: str = '') -> M:
    """ Parses *data* into the pydantic *model*.

        A `ValidationError` becomes a `ConfigError` whose details carry the
        dotted path of the first offending field, e.g. `sweep.H`.
    """
    if isinstance(data, model):
        return data

    try:
        return model.parse_obj(data)
    except ValidationError as e:
        errors = e.errors()
        loc = [str(p) for p in errors[0]['loc']] if errors else []
        field = '.'.join(([prefix] if prefix else []) + loc)

        raise ConfigError(
            f'Invalid {field or model.__name__}: {errors[0]["msg"] if errors else e}',
            details={'field': field, 'errors': errors}
        )
