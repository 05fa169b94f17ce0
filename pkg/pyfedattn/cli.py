"""Command line runner.

    ```
    pyfedattn run sweep.json --out results/h-sweep --seeds 0,1,2 --threads 8
    pyfedattn bounds sweep.json
    ```

    Exits with the `ExitCode` of the worst error: 0 success, 2 configuration
    error, 3 numerical degeneracy.
"""
import argparse
import sys

from typing import List, Optional, Sequence

from pyfedattn.base import Operation, Classification, InfoClassification
from pyfedattn.errors import ConfigError, FedAttnError
from pyfedattn.experiment import ExperimentResult, emit_bounds, load_spec, run_experiment
from pyfedattn.falogging import FedAttnLogger, get_logger


def parse_seeds(text: Optional[str]) -> Optional[List[int]]:
    """`"0,1,2"` to `[0, 1, 2]`, `None` passes through."""
    if text is None:
        return None

    try:
        seeds = [int(s) for s in text.split(',') if s.strip()]
    except ValueError:
        raise ConfigError(f'Invalid seed list {text!r}', details={'field': 'seeds'})

    if not seeds:
        raise ConfigError('The seed list is empty', details={'field': 'seeds'})

    return seeds


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='pyfedattn',
        description='Federated attention sweeps against the centralized forward.')

    commands = parser.add_subparsers(dest='command', required=True)

    for name, text in (
            ('run', 'Run every grid point and seed, write runs.csv and summary.csv'),
            ('bounds', 'Evaluate the error bounds of every run, write bounds.csv and bound_blocks.csv')):
        sub = commands.add_parser(name, help=text)
        sub.add_argument('spec', help='Experiment description (JSON)')
        sub.add_argument('--out', default=None, help='Output directory, overrides the sweep file')
        sub.add_argument('--seeds', default=None, help='Comma separated seeds, overrides the sweep file')
        sub.add_argument('--threads', type=int, default=None, help='Grid points run concurrently')

    return parser


def execute(args: argparse.Namespace, logger: FedAttnLogger) -> ExperimentResult:
    spec = load_spec(args.spec, seeds=parse_seeds(args.seeds), threads=args.threads)

    if args.command == 'bounds':
        return emit_bounds(spec, out=args.out, logger=logger)

    return run_experiment(spec, out=args.out, logger=logger)


def main(argv: Optional[Sequence[str]] = None, logger: Optional[FedAttnLogger] = None) -> int:
    args = build_parser().parse_args(argv)
    logger = logger or get_logger()

    try:
        result = execute(args, logger)
    except FedAttnError as e:
        logger.error({Operation: args.command, 'error': e, Classification: e.classification})
        print(f'pyfedattn: {e.message}', file=sys.stderr)
        return int(e.code)

    for path in result.files:
        print(path)

    if result.highest is not None:
        logger.warning({
            Operation: args.command,
            'error': result.highest,
            Classification: InfoClassification.SHARED
        })

    return int(result.exit_code)


if __name__ == '__main__':
    sys.exit(main())
