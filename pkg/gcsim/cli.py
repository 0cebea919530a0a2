"""
Command line entry point.

    gcsim run group8 --seed 7 --stats
    gcsim run my.scn --scheme lkh-strong --trace strong.trace
    gcsim compare base.trace strong.trace
    gcsim list

Exit status: 0 on success, 1 on malformed input or a protocol error, 2 when a run reports invariant violations
(and 1 from ``compare`` when the traces differ).
"""

import argparse
import logging
import sys

from .adversary import AdversaryError
from .crypto import CryptoError
from .lkh import LkhError
from .scenario import SCHEMES, ParseError, compare_runs, load_scenario, packaged_scenarios, run
from .tree import TreeError

log = logging.getLogger(__name__)


def _parse_args(argv=None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(prog='gcsim', description='Simulate group key distribution schemes.')
    parser.add_argument('-v', '--verbose', action='count', default=0, help='more logging (repeat for debug)')
    commands = parser.add_subparsers(dest='command', required=True)

    p = commands.add_parser('run', help='run a scenario script')
    p.add_argument('scenario', help='scenario file, or the name of a packaged scenario')
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--scheme', choices=sorted(SCHEMES), help='run the script under another scheme of its family')
    p.add_argument('--trace', metavar='PATH', default='-', help='where to write the trace (default: stdout)')
    p.add_argument('--stats', metavar='PATH', nargs='?', const='-', help='write statistics (default: stdout)')
    p.add_argument('--insecure-dump-keys', action='store_true', help='write key octets into the trace')

    p = commands.add_parser('compare', help='diff two traces')
    p.add_argument('a')
    p.add_argument('b')

    commands.add_parser('list', help='list the packaged scenarios')
    return parser.parse_args(argv)


def _write(path, lines):
    text = '\n'.join(lines) + '\n' if lines else ''
    if path == '-':
        sys.stdout.write(text)
    else:
        with open(path, 'w', encoding='utf-8') as f:
            f.write(text)


def _run(args) -> int:
    try:
        scenario = load_scenario(args.scenario)
        if args.scheme:
            scenario = scenario.with_scheme(args.scheme)
        trace, stats = run(scenario, seed=args.seed, dump_keys=args.insecure_dump_keys)
    except (OSError, ParseError) as err:
        print('gcsim: %s' % err, file=sys.stderr)
        return 1
    except (LkhError, TreeError, CryptoError, AdversaryError) as err:
        print('gcsim: %s: %s' % (type(err).__name__, err), file=sys.stderr)
        return 1
    _write(args.trace, trace.splitlines())
    if args.stats:
        _write(args.stats, stats.lines())
    for violation in stats.violations:
        print('gcsim: violation: %s' % violation, file=sys.stderr)
    return stats.exit_code


def _compare(args) -> int:
    try:
        with open(args.a, encoding='utf-8') as fa, open(args.b, encoding='utf-8') as fb:
            diff = compare_runs(fa.read(), fb.read())
    except OSError as err:
        print('gcsim: %s' % err, file=sys.stderr)
        return 1
    if diff.empty:
        print('traces are identical')
        return 0
    print(diff.to_string(index=False))
    return 1


def main(argv=None) -> int:
    args = _parse_args(argv)
    logging.basicConfig(level=max(logging.DEBUG, logging.WARNING - 10 * args.verbose),
                        format='%(levelname)s %(name)s: %(message)s')
    if args.command == 'run':
        return _run(args)
    if args.command == 'compare':
        return _compare(args)
    for name in packaged_scenarios():
        print(name)
    return 0


if __name__ == '__main__':
    raise SystemExit(main())
