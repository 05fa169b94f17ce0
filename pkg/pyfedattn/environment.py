"""Module that handles the environment for pyfedattn"""
import os

from typing import Optional

from pyfedattn.errors import ConfigError

DEFAULT_SERVICE_NAME = 'pyfedattn'

THREADS_ENV = 'FEDATTN_THREADS'
"""Default worker count for the engine and the experiment runner."""

WIRE_BITS_ENV = 'FEDATTN_WIRE_BITS'
"""Default bits per transmitted KV scalar."""

OUT_DIR_ENV = 'FEDATTN_OUT_DIR'
"""Default output directory of the command line runner."""


def init_env():
    """ Initializes the environment.

        Copies environment variables to to the required ones for
        AWS lambda powertools and falls back to the package name
        as service name.
    """
    if os.environ.get('POWERTOOLS_SERVICE_NAME') is None:
        os.environ['POWERTOOLS_SERVICE_NAME'] = os.environ.get('SERVICE_NAME') or DEFAULT_SERVICE_NAME


def get_int_env(name: str, default: int) -> int:
    """ Reads an integer environment variable.

        Returns *default* when the variable is unset or empty. A value that is
        not an integer raises a `ConfigError` naming the variable.
    """
    value: Optional[str] = os.environ.get(name)
    if value is None or value.strip() == '':
        return default

    try:
        return int(value)
    except ValueError:
        raise ConfigError(
            f'Environment variable {name} must be an integer, got: {value}',
            details={'field': name}
        )


def default_threads() -> int:
    return max(1, get_int_env(THREADS_ENV, 1))


def default_wire_bits() -> int:
    return get_int_env(WIRE_BITS_ENV, 16)


def default_out_dir() -> str:
    return os.environ.get(OUT_DIR_ENV) or 'results'
