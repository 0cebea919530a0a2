"""
scenario: scripted runs of the group key schemes, with canonical traces and exact statistics.

A scenario is a small text file, one directive per line, ``#`` starting a comment:

    scheme lkh            # lkh, lkh-strong, lkh-strong-opt, cs or cs-strong
    degree 3
    kappa 128
    setup u1 u2 u3 u4 u5 u6 u7 u8
    join u9
    leave u8
    leave u6
    corrupt u7
    recover

Stateless schemes use ``n 8``, ``broadcast revoke=1,8 msg="hello" [offline=3]`` and ``corrupt-receiver 5``. Both
families accept ``reveal``, ``recover`` and ``forward-recover <user> [t]``; stateful ones also ``bootstrap`` and
``churn leave=<u> join=<v>``.

The usual way to use this module is

    >>> from gcsim.scenario import load_scenario, run
    >>> trace, stats = run(load_scenario('group8'), seed=0)
    >>> stats.final_recovery
    4

`run` checks the protocol invariants after every event; anything found is listed in `stats.violations`.
"""

import difflib
import logging
import os
import shlex
import warnings
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
import pandas as pd

from . import adversary, lkh, stateless
from .crypto import DEFAULT_KAPPA, KAPPAS, CryptoError
from .tree import DEFAULT_DEGREE
from .utils import ceil_log, fingerprint, log2_exact, natural_key

log = logging.getLogger(__name__)

GCSIM_FOLDER = os.path.dirname(os.path.abspath(__file__))
DATA_FOLDER = os.path.join(GCSIM_FOLDER, 'data')

#: scheme name -> (family, policy or cover mode)
SCHEMES = {
    'lkh': ('stateful', lkh.RekeyPolicy.BASELINE),
    'lkh-strong': ('stateful', lkh.RekeyPolicy.STRONG),
    'lkh-strong-opt': ('stateful', lkh.RekeyPolicy.STRONG_OPT),
    'cs': ('stateless', stateless.CoverMode.BASELINE),
    'cs-strong': ('stateless', stateless.CoverMode.STRONG),
}

PARAMS = {'degree': 'stateful', 'bootstrap': 'stateful', 'n': 'stateless', 'kappa': None}
DIRECTIVES = {'setup': None, 'join': 'stateful', 'leave': 'stateful', 'churn': 'stateful', 'corrupt': 'stateful',
              'broadcast': 'stateless', 'corrupt-receiver': 'stateless', 'reveal': None, 'recover': None,
              'forward-recover': None}

#: PRF evaluations a member may spend on one event, per level of the tree
MEMBER_PRF_FACTOR = 4


class ParseError(ValueError):
    def __init__(self, message, lineno=None):
        self.lineno = lineno
        super().__init__('line %d: %s' % (lineno, message) if lineno else message)


class SchemeMismatch(ParseError):
    pass


class EventKind(Enum):
    SETUP = 'setup'
    JOIN = 'join'
    LEAVE = 'leave'
    CHURN = 'churn'
    CORRUPT = 'corrupt'
    REVEAL = 'reveal'
    BROADCAST = 'broadcast'
    RECOVER = 'recover'
    FORWARD_RECOVER = 'forward-recover'


@dataclass(frozen=True)
class Event:
    kind: EventKind
    lineno: int = 0
    users: tuple = ()
    user: str = None
    joins: tuple = ()
    leaves: tuple = ()
    revoke: tuple = ()
    message: bytes = b''
    offline: tuple = ()
    time: int = None


@dataclass
class Scenario:
    """A parsed, validated script."""
    scheme: str
    params: dict = field(default_factory=dict)
    events: list = field(default_factory=list)

    @property
    def family(self) -> str:
        return SCHEMES[self.scheme][0]

    @property
    def policy(self):
        """RekeyPolicy for stateful schemes, CoverMode for stateless ones."""
        return SCHEMES[self.scheme][1]

    @property
    def kappa(self) -> int:
        return self.params.get('kappa', DEFAULT_KAPPA)

    def with_scheme(self, scheme: str) -> 'Scenario':
        """The same script under another scheme of the same family."""
        if scheme not in SCHEMES:
            raise ParseError('unknown scheme %r' % scheme)
        if SCHEMES[scheme][0] != self.family:
            raise SchemeMismatch('%s is not a %s scheme' % (scheme, self.family))
        return replace(self, scheme=scheme)


# --------------------------------------------------------------------------------------------------------------------
#  Parsing
# --------------------------------------------------------------------------------------------------------------------

def _options(args, lineno, allowed):
    opts = dict()
    for arg in args:
        key, sep, value = arg.partition('=')
        if not sep or key not in allowed:
            raise ParseError('expected one of %s as key=value, got %r' % (', '.join(allowed), arg), lineno)
        opts[key] = value
    return opts


def _int_list(value, lineno):
    try:
        return tuple(int(v) for v in value.split(',') if v.strip())
    except ValueError:
        raise ParseError('expected comma separated integers, got %r' % value, lineno) from None


def _int(value, lineno, what):
    try:
        return int(value)
    except ValueError:
        raise ParseError('%s must be an integer, got %r' % (what, value), lineno) from None


class _Parser:
    """Line-by-line validation of a script, tracking membership and virtual time as a run would."""

    def __init__(self):
        self.scheme = None
        self.params = dict()
        self.events = []
        self.time = 0
        self.members = set()
        self.ever = set()
        self.left_at = dict()
        self.corrupted = dict()

    @property
    def family(self):
        return SCHEMES[self.scheme][0]

    def feed(self, lineno, tokens):
        directive, args = tokens[0], tokens[1:]
        if self.scheme is None:
            if directive != 'scheme':
                raise ParseError('the first directive must be "scheme", got %r' % directive, lineno)
        if directive == 'scheme':
            return self._scheme(lineno, args)
        if directive in PARAMS:
            return self._param(lineno, directive, args)
        if directive not in DIRECTIVES:
            raise ParseError('unknown directive %r' % directive, lineno)
        family = DIRECTIVES[directive]
        if family is not None and family != self.family:
            raise SchemeMismatch('%r is not available for %s schemes' % (directive, self.family), lineno)
        if directive != 'setup' and not self.events:
            if self.family == 'stateful':
                raise ParseError('%r before setup' % directive, lineno)
            self.events.append(Event(EventKind.SETUP, lineno))
        getattr(self, '_' + directive.replace('-', '_'))(lineno, args)

    def _scheme(self, lineno, args):
        if self.scheme is not None:
            raise ParseError('scheme given twice', lineno)
        if len(args) != 1 or args[0] not in SCHEMES:
            raise ParseError('unknown scheme %r; expected one of %s' % (' '.join(args), ', '.join(SCHEMES)), lineno)
        self.scheme = args[0]

    def _param(self, lineno, name, args):
        family = PARAMS[name]
        if family is not None and family != self.family:
            raise SchemeMismatch('parameter %r does not apply to %s schemes' % (name, self.family), lineno)
        if self.events:
            raise ParseError('parameter %r after the first event' % name, lineno)
        if len(args) != 1:
            raise ParseError('%s takes one value' % name, lineno)
        value = args[0]
        if name == 'bootstrap':
            if value not in lkh.BOOTSTRAPS:
                raise ParseError('bootstrap must be one of %s' % ', '.join(lkh.BOOTSTRAPS), lineno)
        else:
            value = _int(value, lineno, name)
            if name == 'degree' and value < 2:
                raise ParseError('degree must be at least 2', lineno)
            if name == 'kappa' and value not in KAPPAS:
                raise ParseError('kappa must be one of %s' % (KAPPAS,), lineno)
            if name == 'n':
                try:
                    if log2_exact(value) < 1:
                        raise ValueError
                except ValueError:
                    raise ParseError('n must be a power of 2, at least 2', lineno) from None
        if name in self.params:
            warnings.warn('line %d: %s given again, %r replaces %r' % (lineno, name, value, self.params[name]))
        self.params[name] = value

    def _setup(self, lineno, args):
        if self.events:
            raise ParseError('setup must come first and only once', lineno)
        if self.family == 'stateless':
            if args:
                raise ParseError('stateless setup takes no arguments', lineno)
            self.events.append(Event(EventKind.SETUP, lineno))
            return
        if not args:
            raise ParseError('setup needs at least one user', lineno)
        if len(set(args)) != len(args):
            raise ParseError('duplicate users in setup', lineno)
        self.members = set(args)
        self.ever = set(args)
        self.events.append(Event(EventKind.SETUP, lineno, users=tuple(args)))

    def _one_user(self, lineno, args, directive):
        if len(args) != 1:
            raise ParseError('%s takes one user' % directive, lineno)
        return args[0]

    def _check_join(self, lineno, u):
        if u in self.members:
            raise ParseError('%s is already a member' % u, lineno)
        self.members.add(u)
        self.ever.add(u)
        self.time += 1

    def _check_leave(self, lineno, u):
        if u not in self.members:
            raise ParseError('%s is not a member' % u, lineno)
        if len(self.members) == 1:
            raise ParseError('%s is the last member' % u, lineno)
        self.members.discard(u)
        self.time += 1
        self.left_at[u] = self.time

    def _join(self, lineno, args):
        u = self._one_user(lineno, args, 'join')
        self._check_join(lineno, u)
        self.events.append(Event(EventKind.JOIN, lineno, user=u, time=self.time))

    def _leave(self, lineno, args):
        u = self._one_user(lineno, args, 'leave')
        self._check_leave(lineno, u)
        self.events.append(Event(EventKind.LEAVE, lineno, user=u, time=self.time))

    def _churn(self, lineno, args):
        opts = _options(args, lineno, ('leave', 'join'))
        leaves = tuple(u for u in opts.get('leave', '').split(',') if u)
        joins = tuple(u for u in opts.get('join', '').split(',') if u)
        if not leaves and not joins:
            raise ParseError('churn needs leave= or join=', lineno)
        for op, u in lkh.serialize_requests(joins, leaves):
            if op == 'leave':
                self._check_leave(lineno, u)
            else:
                self._check_join(lineno, u)
        self.events.append(Event(EventKind.CHURN, lineno, joins=joins, leaves=leaves, time=self.time))

    def _receiver(self, lineno, value):
        u = _int(value, lineno, 'receiver')
        if 'n' not in self.params:
            raise ParseError('n must be set before receivers are named', lineno)
        if not 1 <= u <= self.params['n']:
            raise ParseError('receiver %d out of range 1..%d' % (u, self.params['n']), lineno)
        return str(u)

    def _corrupt(self, lineno, args):
        u = self._one_user(lineno, args, 'corrupt')
        if u not in self.ever:
            raise ParseError('%s was never a member' % u, lineno)
        self.corrupted[u] = self.time
        self.events.append(Event(EventKind.CORRUPT, lineno, user=u, time=self.time))

    def _corrupt_receiver(self, lineno, args):
        u = self._receiver(lineno, self._one_user(lineno, args, 'corrupt-receiver'))
        self.corrupted[u] = self.time
        self.events.append(Event(EventKind.CORRUPT, lineno, user=u, time=self.time))

    def _reveal(self, lineno, args):
        u = self._one_user(lineno, args, 'reveal')
        if self.family == 'stateless':
            u = self._receiver(lineno, u)
        elif u not in self.members:
            raise ParseError('%s is not a member' % u, lineno)
        self.events.append(Event(EventKind.REVEAL, lineno, user=u, time=self.time))

    def _broadcast(self, lineno, args):
        if 'n' not in self.params:
            raise ParseError('n must be set before broadcasting', lineno)
        opts = _options(args, lineno, ('revoke', 'msg', 'offline'))
        revoke = _int_list(opts.get('revoke', ''), lineno)
        offline = _int_list(opts.get('offline', ''), lineno)
        for u in revoke + offline:
            self._receiver(lineno, str(u))
        self.time += 1
        self.events.append(Event(EventKind.BROADCAST, lineno, revoke=tuple(sorted(set(revoke))),
                                 message=opts.get('msg', '').encode('utf-8'),
                                 offline=tuple(sorted(set(offline))), time=self.time))

    def _recover(self, lineno, args):
        if args:
            raise ParseError('recover takes no arguments', lineno)
        if not self.corrupted:
            raise ParseError('recover needs a prior corruption', lineno)
        self.events.append(Event(EventKind.RECOVER, lineno, time=self.time))

    def _forward_recover(self, lineno, args):
        if len(args) not in (1, 2):
            raise ParseError('forward-recover takes a user and an optional time', lineno)
        u = args[0] if self.family == 'stateful' else self._receiver(lineno, args[0])
        if u not in self.corrupted:
            raise ParseError('%s has not been corrupted' % u, lineno)
        if len(args) == 2:
            t = _int(args[1], lineno, 'time')
        elif self.family == 'stateless':
            t = self.corrupted[u] + 1
        else:
            t = self.left_at.get(u)
            if t is None or t <= self.corrupted[u]:
                raise ParseError('%s has not left since its corruption; give the time explicitly' % u, lineno)
        self.events.append(Event(EventKind.FORWARD_RECOVER, lineno, user=u, time=t))

    def finish(self) -> Scenario:
        if self.scheme is None:
            raise ParseError('no scheme given')
        if self.family == 'stateless':
            if 'n' not in self.params:
                raise ParseError('stateless scenarios need n')
            if not self.events:
                self.events.append(Event(EventKind.SETUP))
        elif not self.events:
            raise ParseError('stateful scenarios need setup')
        return Scenario(self.scheme, dict(self.params), list(self.events))


def parse_scenario(text: str) -> Scenario:
    """
    Parse and validate a scenario script.

    Parameters
    ----------
    text : str
        the script

    Returns
    -------
    Scenario

    Raises
    ------
    ParseError
        with the offending line number
    SchemeMismatch
        for directives of the other scheme family
    """
    parser = _Parser()
    for lineno, raw in enumerate(text.splitlines(), 1):
        try:
            tokens = shlex.split(raw, comments=True)
        except ValueError as err:
            raise ParseError(str(err), lineno) from None
        if tokens:
            parser.feed(lineno, tokens)
    return parser.finish()


def load_scenario(source: str) -> Scenario:
    """Parse a scenario file, or one of the scripts shipped in gcsim/data (by name, with or without .scn)."""
    candidates = [source, os.path.join(DATA_FOLDER, source), os.path.join(DATA_FOLDER, source + '.scn')]
    for path in candidates:
        if os.path.isfile(path):
            with open(path, encoding='utf-8') as f:
                return parse_scenario(f.read())
    raise FileNotFoundError('no scenario file or packaged scenario named %r' % source)


def packaged_scenarios():
    return sorted(f[:-4] for f in os.listdir(DATA_FOLDER) if f.endswith('.scn'))


# --------------------------------------------------------------------------------------------------------------------
#  Running
# --------------------------------------------------------------------------------------------------------------------

@dataclass
class RunStats:
    """
    Exact counts collected by `run`.

    `events` has one row per protocol event (setup, join, leave, broadcast) with its ciphertext count, message
    octets, PRF evaluations of the controller or center and of the members or receivers, and the tree height.
    """
    scheme: str
    seed: int
    events: pd.DataFrame = None
    member_prf: dict = field(default_factory=dict)
    recoveries: list = field(default_factory=list)
    final_recovery: int = None
    tape_items: int = 0
    violations: list = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        return 2 if self.violations else 0

    def lines(self):
        events = self.events
        out = ['scheme=%s' % self.scheme, 'seed=%d' % self.seed, 'events=%d' % len(events)]
        for column in ('ciphertexts', 'bytes', 'prf_controller', 'prf_member_total'):
            out.append('%s=%d' % (column, events[column].sum() if len(events) else 0))
        out.append('prf_member_max=%d' % (events['prf_member_max'].max() if len(events) else 0))
        out.append('height=%d' % (events['height'].iloc[-1] if len(events) else 0))
        out.append('tape_items=%d' % self.tape_items)
        for row in events.itertuples():
            out.append('event=%d op=%s t=%d ciphertexts=%d bytes=%d prf_controller=%d prf_member_max=%d height=%d'
                       % (row.Index, row.op, row.t, row.ciphertexts, row.bytes, row.prf_controller,
                          row.prf_member_max, row.height))
        for rec in self.recoveries:
            out.append('recovery=%s user=%s count=%d' % (rec['kind'], rec['user'], rec['count']))
        out.append('final_recovery=%s' % ('-' if self.final_recovery is None else self.final_recovery))
        out.append('violations=%d' % len(self.violations))
        return out


class _Run:
    """State shared by both scheme families: the rng, the tape, captures, trace and statistics."""

    def __init__(self, scenario: Scenario, seed: int, dump_keys: bool):
        self.scenario = scenario
        self.rng = np.random.default_rng(seed)
        self.kappa = scenario.kappa
        self.tape = adversary.TrafficTape()
        self.captures = dict()
        self.last_capture = None
        self.dump_keys = dump_keys
        self.trace = []
        self.rows = []
        self.stats = RunStats(scenario.scheme, seed)

    def violation(self, text):
        log.warning('violation: %s', text)
        self.stats.violations.append(text)

    def key_text(self, key):
        text = 'keyfp=%s' % key.fingerprint()
        return text + ' key=%s' % key.hex() if self.dump_keys else text

    def trace_message(self, msg):
        entry = self.tape.append(msg)
        kind = msg.kind.name.lower() if hasattr(msg, 'kind') else 'broadcast'
        self.trace.append('msg t=%d kind=%s items=%d bytes=%d fp=%s'
                          % (msg.time, kind, msg.item_count, len(entry.raw), fingerprint(entry.raw)))
        return entry

    def execute(self):
        for number, event in enumerate(self.scenario.events):
            self.trace.append('event=%d op=%s line=%d' % (number, event.kind.value, event.lineno))
            getattr(self, 'on_' + event.kind.name.lower())(event)
        self.stats.events = pd.DataFrame(self.rows, columns=['op', 't', 'ciphertexts', 'bytes', 'prf_controller',
                                                             'prf_member_max', 'prf_member_total', 'height'])
        self.stats.tape_items = self.tape.item_count
        if int(self.stats.events['ciphertexts'].sum()) != self.tape.item_count:
            self.violation('ciphertext counts do not add up to the tape')
        return '\n'.join(self.trace) + '\n', self.stats

    def record(self, op, msg, raw, prf_controller, member_deltas, height):
        self.rows.append(dict(op=op, t=msg.time, ciphertexts=msg.item_count, bytes=len(raw),
                              prf_controller=prf_controller,
                              prf_member_max=max(member_deltas.values(), default=0),
                              prf_member_total=sum(member_deltas.values()), height=height))
        for who, delta in member_deltas.items():
            self.stats.member_prf[who] = self.stats.member_prf.get(who, 0) + delta

    def capture(self, who, member, t):
        captured = adversary.corrupt(member, t)
        self.captures[who] = captured
        self.last_capture = captured
        self.trace.append('capture user=%s t=%d keys=%d' % (who, t, len(captured.keys)))
        for key_id in sorted(captured.keys):
            self.trace.append('captured key=%s %s' % (key_id, self.key_text(captured.keys[key_id])))

    def report(self, kind, report, captured):
        self.trace.append('recovery user=%s kind=%s count=%d' % (captured.source, kind, len(report.recovered)))
        self.trace.extend(report.lines())
        self.stats.recoveries.append(dict(kind=kind, user=captured.source, count=len(report.recovered)))
        for problem in adversary.check_soundness(report, captured):
            self.violation(problem)
        return report

    def on_recover(self, event):
        report = self.recover(self.last_capture)
        self.stats.final_recovery = len(report.recovered)

    def on_forward_recover(self, event):
        captured = self.captures[event.user]
        self.report('forward', adversary.forward_recover(self.tape, captured, event.time), captured)


class _GroupRun(_Run):
    """Runs a stateful scheme: group controller plus members."""

    def __init__(self, scenario, seed, dump_keys):
        super().__init__(scenario, seed, dump_keys)
        self.degree = scenario.params.get('degree', DEFAULT_DEGREE)
        self.ctrl = None
        self.members = dict()

    def active(self):
        return [self.members[u] for u in sorted(self.members, key=natural_key) if self.members[u].active]

    def trace_state(self):
        ctrl = self.ctrl
        self.trace.append('group t=%d key=%s %s'
                          % (ctrl.time, ctrl.group_key_ref(), self.key_text(lkh.current_group_key(ctrl))))
        self.trace.extend('tree ' + line for line in ctrl.tree.dump_lines())

    def check(self):
        ctrl = self.ctrl
        for problem in ctrl.tree.check():
            self.violation('t=%d: %s' % (ctrl.time, problem))
        for problem in lkh.check_correctness(ctrl, self.active()):
            self.violation('t=%d: %s' % (ctrl.time, problem))
        for problem in lkh.check_erasure(ctrl, self.members.values()):
            self.violation('t=%d: %s' % (ctrl.time, problem))

    def deliver(self, msg, recipients, op, prf_before):
        ctrl = self.ctrl
        n_before = len(ctrl.members) + (1 if op == 'leave' else -1 if op == 'join' else 0)
        before = {m.id: m.meter.total for m in recipients}
        entry = self.trace_message(msg)
        for unit_no, unit in enumerate(msg.units):
            for item_no, c in enumerate(unit.items):
                self.trace.append('ct t=%d unit=%d item=%d key=%s fp=%s'
                                  % (msg.time, unit_no, item_no, c.ref, c.fingerprint()))
        for m in recipients:
            try:
                lkh.member_rekey(m, msg)
            except (lkh.LkhError, CryptoError) as err:
                self.violation('t=%d: %s could not rekey: %s' % (msg.time, m.id, err))
        deltas = {m.id: m.meter.total - before[m.id] for m in recipients}
        budget = MEMBER_PRF_FACTOR * (ceil_log(max(n_before, len(ctrl.members)), self.degree) + 1)
        for who, delta in deltas.items():
            if delta > budget:
                self.violation('t=%d: %s spent %d PRF evaluations, budget %d' % (msg.time, who, delta, budget))
        self.record(op, msg, entry.raw, ctrl.meter.total - prf_before, deltas, ctrl.tree.height)
        self.trace_state()
        self.check()

    def on_setup(self, event):
        p = self.scenario.params
        ctrl, states, msg = lkh.setup(event.users, self.scenario.policy, self.rng, self.degree, self.kappa,
                                      p.get('bootstrap', 'group-key'))
        self.ctrl = ctrl
        self.members = {m.id: m for m in states}
        entry = self.trace_message(msg)
        for unit_no, unit in enumerate(msg.units):
            for item_no, c in enumerate(unit.items):
                self.trace.append('ct t=0 unit=%d item=%d key=%s fp=%s' % (unit_no, item_no, c.ref, c.fingerprint()))
        deltas = {m.id: m.meter.total for m in states}
        self.record('setup', msg, entry.raw, ctrl.meter.total, deltas, ctrl.tree.height)
        self.trace_state()
        self.check()

    def on_join(self, event, u=None):
        u = u or event.user
        self.members[u] = lkh.register(self.ctrl, u, self.rng)
        prf_before = self.ctrl.meter.total
        msg = lkh.join(self.ctrl, u, self.rng)
        self.deliver(msg, self.active(), 'join', prf_before)

    def on_leave(self, event, u=None):
        u = u or event.user
        recipients = self.active()
        prf_before = self.ctrl.meter.total
        msg = lkh.leave(self.ctrl, u, self.rng)
        self.deliver(msg, recipients, 'leave', prf_before)

    def on_churn(self, event):
        for op, u in lkh.serialize_requests(event.joins, event.leaves):
            self.trace.append('churn op=%s user=%s' % (op, u))
            (self.on_leave if op == 'leave' else self.on_join)(event, u)

    def on_corrupt(self, event):
        self.capture(event.user, self.members[event.user], self.ctrl.time)

    def on_reveal(self, event):
        key = adversary.reveal(self.members[event.user], self.ctrl.time)
        self.trace.append('reveal user=%s t=%d %s' % (event.user, self.ctrl.time, self.key_text(key)))
        if key.material != lkh.current_group_key(self.ctrl).material:
            self.violation('t=%d: revealed group key of %s differs from the controller' % (self.ctrl.time, event.user))

    def recover(self, captured):
        return self.report('recover', adversary.recover_closure(self.tape, captured), captured)


class _BroadcastRun(_Run):
    """Runs a stateless scheme: broadcast center plus receivers."""

    def __init__(self, scenario, seed, dump_keys):
        super().__init__(scenario, seed, dump_keys)
        self.n = scenario.params['n']
        self.center = None
        self.receivers = []

    def receiver(self, token) -> stateless.ReceiverSecrets:
        return self.receivers[int(token) - 1]

    def on_setup(self, event):
        self.center, self.receivers = stateless.cs_init(self.n, self.scenario.policy, self.rng, self.kappa)
        self.trace.append('setup n=%d keys=%d mode=%s' % (self.n, len(self.center.keys), self.center.mode.value))

    def on_broadcast(self, event):
        center, depth = self.center, log2_exact(self.n)
        prf_before = center.meter.total
        next_before = center.meter.next_calls
        msg = stateless.broadcast(center, set(event.revoke), event.message, self.rng)
        entry = self.trace_message(msg)
        for index, c in zip(msg.indices, msg.header_cts):
            self.trace.append('ct seq=%d index=%d key=%s fp=%s' % (msg.seq, index, c.ref, c.fingerprint()))
        self.trace.append('ct seq=%d body key=%s fp=%s' % (msg.seq, msg.body.ref, msg.body.fingerprint()))

        expected_next = (2 * self.n - 1) if msg.revocation_flag else 0
        if center.meter.next_calls - next_before != expected_next:
            self.violation('seq=%d: center made %d NEXT evaluations, expected %d'
                           % (msg.seq, center.meter.next_calls - next_before, expected_next))

        deltas = dict()
        budget = 2 * (depth + 1)
        for rs in self.receivers:
            if rs.user in event.offline:
                self.trace.append('rx seq=%d user=%d result=offline' % (msg.seq, rs.user))
                continue
            behind = rs.epoch < msg.epoch
            before = rs.meter.total
            result = stateless.receiver_decrypt(rs, msg)
            deltas[rs.id] = rs.meter.total - before
            if result is stateless.REVOKED:
                self.trace.append('rx seq=%d user=%d result=revoked' % (msg.seq, rs.user))
            else:
                self.trace.append('rx seq=%d user=%d result=ok lookups=%d msgfp=%s'
                                  % (msg.seq, rs.user, rs.last_lookups, fingerprint(result)))
            revoked = rs.user in event.revoke
            if revoked != (result is stateless.REVOKED) or (not revoked and result != event.message):
                self.violation('seq=%d: receiver %d got the wrong result' % (msg.seq, rs.user))
            if not behind and deltas[rs.id] > budget:
                self.violation('seq=%d: receiver %d spent %d PRF evaluations, budget %d'
                               % (msg.seq, rs.user, deltas[rs.id], budget))
            if center.mode is stateless.CoverMode.STRONG and rs.epoch != center.epoch:
                self.violation('seq=%d: receiver %d at epoch %d, center at %d'
                               % (msg.seq, rs.user, rs.epoch, center.epoch))
        self.record('broadcast', msg, entry.raw, center.meter.total - prf_before, deltas, depth)

    def on_corrupt(self, event):
        self.capture(event.user, self.receiver(event.user), self.center.seq)

    def on_reveal(self, event):
        try:
            key = adversary.reveal(self.receiver(event.user), self.center.seq)
        except lkh.NotSynchronized:
            # revoked, offline, or erased by a revoking broadcast
            self.trace.append('reveal user=%s t=%d none' % (event.user, self.center.seq))
            return
        self.trace.append('reveal user=%s t=%d %s' % (event.user, self.center.seq, self.key_text(key)))
        if key.material != self.center.session_keys.get(self.center.seq):
            self.violation('seq=%d: revealed session key of %s differs' % (self.center.seq, event.user))

    def recover(self, captured):
        return self.report('recover', adversary.stateless_recover(self.tape, captured), captured)


def run(scenario: Scenario, seed: int = 0, dump_keys: bool = False):
    """
    Execute a scenario.

    Parameters
    ----------
    scenario : Scenario
    seed : int, optional
        seed of the single random source of the run
    dump_keys : bool, optional
        write key octets into the trace next to their fingerprints

    Returns
    -------
    (str, RunStats)
        the canonical trace, identical for identical (scenario, seed), and the statistics

    Examples
    --------
    >>> trace, stats = run(load_scenario('group8').with_scheme('lkh-strong'))
    >>> stats.final_recovery, stats.exit_code
    (1, 0)
    """
    if dump_keys:
        warnings.warn('key material will be written to the trace')
    runner = _GroupRun if scenario.family == 'stateful' else _BroadcastRun
    log.debug('running %s with seed %d: %d events', scenario.scheme, seed, len(scenario.events))
    return runner(scenario, seed, dump_keys).execute()


def compare_runs(trace_a: str, trace_b: str) -> pd.DataFrame:
    """
    Line diff of two traces.

    Returns
    -------
    pandas.DataFrame
        one row per differing line: the change tag, line numbers (1-based, None where absent) and both texts; empty
        when the traces are identical
    """
    a, b = trace_a.splitlines(), trace_b.splitlines()
    rows = []
    for tag, i1, i2, j1, j2 in difflib.SequenceMatcher(None, a, b, autojunk=False).get_opcodes():
        if tag == 'equal':
            continue
        for k in range(max(i2 - i1, j2 - j1)):
            ia, jb = i1 + k, j1 + k
            rows.append(dict(tag=tag,
                             line_a=ia + 1 if ia < i2 else None, a=a[ia] if ia < i2 else None,
                             line_b=jb + 1 if jb < j2 else None, b=b[jb] if jb < j2 else None))
    return pd.DataFrame(rows, columns=['tag', 'line_a', 'a', 'line_b', 'b'])
