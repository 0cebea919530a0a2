"""
adversary: record the traffic, corrupt somebody later, recover what can be recovered.

The attacker modelled here is an active outsider. It reads every message on the broadcast channel (a
`TrafficTape`), may reveal group keys and corrupt members through the oracles `reveal` and `corrupt`, and knows
the PRF. It never sees an erased key and never inverts a PRF step.

`recover_closure` computes everything such an attacker learns from one corruption: starting from the captured
keys, it opens every recorded ciphertext whose key is known, or reachable through f(0), or through at most E
forward f(1) steps (E = number of recorded events), and repeats until nothing new is learnt. Every recovered key
carries the chain that produced it, and `replay` re-derives it from the tape octets alone.

With `tape`, `ctrl` and `members` left by the eight-user example under plain LKH (join u9, leave u8, leave u6):

    >>> captured = corrupt(members['u7'], ctrl.time)
    >>> report = recover_closure(tape, captured)
    >>> sorted(report.recovered_group_keys)
    [0, 1, 2, 3]
"""

import logging
from collections import namedtuple
from dataclasses import dataclass, field

import pandas as pd

from .crypto import DEFAULT_KAPPA, DecryptFailure, KeyRef, PrfLabel, gen_key, decrypt, prf_eval, unpack_keys
from .lkh import MemberState, NotSynchronized, RekeyMessage
from .stateless import BroadcastMessage, ReceiverSecrets, session_key_id

log = logging.getLogger(__name__)


class AdversaryError(Exception):
    pass


class UnknownMember(AdversaryError):
    pass


class AlreadyTested(AdversaryError):
    pass


TapeEntry = namedtuple('TapeEntry', ['index', 'time', 'message', 'raw'])

#: how a key entered the attacker's knowledge: 'captured', 'next' (from `source`, one f(1) step) or 'decrypt'
#: (opened item `item` of tape entry `entry` with key reference `source`)
Derivation = namedtuple('Derivation', ['kind', 'source', 'entry', 'item'])


class TrafficTape:
    """Append-only record of the broadcast channel, with the wire octets of every message."""

    def __init__(self):
        self._entries = []

    def append(self, message) -> TapeEntry:
        entry = TapeEntry(len(self._entries), message.time, message, message.encode())
        self._entries.append(entry)
        return entry

    @property
    def entries(self):
        return tuple(self._entries)

    def since(self, t: int):
        return [e for e in self._entries if e.time >= t]

    @property
    def item_count(self) -> int:
        return sum(e.message.item_count for e in self._entries)

    def __len__(self):
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)


@dataclass
class CapturedState:
    source: str
    captured_at: int
    keys: dict = field(default_factory=dict)


@dataclass
class RecoveryReport:
    """
    Outcome of a key-recovery closure.

    Attributes
    ----------
    known : dict
        VersionedKeyId -> SecretKey, everything the attacker holds at the fixpoint
    derivations : dict
        VersionedKeyId -> Derivation, one per known key
    recovered_group_keys : dict
        time -> group key, for rekey traffic
    recovered_session_keys : dict
        seq -> session key, for broadcast traffic
    recovered_plaintexts : dict
        seq -> message
    """
    source: str
    captured_at: int
    tape: TrafficTape
    known: dict = field(default_factory=dict)
    derivations: dict = field(default_factory=dict)
    recovered_group_keys: dict = field(default_factory=dict)
    group_key_refs: dict = field(default_factory=dict)
    recovered_session_keys: dict = field(default_factory=dict)
    recovered_plaintexts: dict = field(default_factory=dict)

    @property
    def recovered(self) -> dict:
        """Group keys by time, or session keys by seq for broadcast traffic."""
        return self.recovered_group_keys or self.recovered_session_keys

    def ref_for(self, t: int) -> KeyRef:
        return self.group_key_refs[t] if t in self.group_key_refs else KeyRef(session_key_id(t))

    def chain_length(self, ref) -> int:
        if isinstance(ref, KeyRef):
            return self.chain_length(ref.key_id) + int(ref.derived)
        step = self.derivations[ref]
        if step.kind == 'captured':
            return 0
        return 1 + self.chain_length(step.source)

    def lines(self):
        return ['recovered t=%d keyfp=%s via=%d' % (t, key.fingerprint(), self.chain_length(self.ref_for(t)))
                for t, key in sorted(self.recovered.items())]

    def table(self) -> pd.DataFrame:
        rows = [dict(t=t, key_id=str(self.ref_for(t)), keyfp=key.fingerprint(),
                     via=self.chain_length(self.ref_for(t)),
                     plaintext=self.recovered_plaintexts.get(t) if self.recovered_session_keys else None)
                for t, key in sorted(self.recovered.items())]
        return pd.DataFrame(rows, columns=['t', 'key_id', 'keyfp', 'via', 'plaintext']).set_index('t')


# --------------------------------------------------------------------------------------------------------------------
#  Oracles
# --------------------------------------------------------------------------------------------------------------------

def corrupt(member, t: int) -> CapturedState:
    """
    Hand the attacker a copy of every key `member` holds at time `t`, and mark it adversary controlled.

    A corrupted member no longer erases its keys when it leaves.
    """
    if isinstance(member, MemberState):
        if t < member.joined_at:
            raise UnknownMember('%s is not in the group at t=%d' % (member.id, t))
        keys = {key_id: key.copy() for key_id, key in member.keys.items() if not key.erased}
    elif isinstance(member, ReceiverSecrets):
        keys = {member.key_id(i): key.copy() for i, key in member.path_keys.items() if not key.erased}
        session_key = member.last_session_key
        if session_key is not None and not session_key.erased:
            keys[session_key_id(member.last_seq)] = session_key.copy()
    else:
        raise UnknownMember('cannot corrupt %r' % (member,))
    member.corrupted = True
    log.debug('corrupted %s at t=%d: %d keys', member.id, t, len(keys))
    return CapturedState(member.id, t, keys)


def reveal(member, t: int):
    """The group key `member` accepted at time `t` (the session key, for a receiver)."""
    if isinstance(member, MemberState):
        if not member.active or member.time != t or not member.acc.get(t, False):
            raise NotSynchronized('%s has not accepted a group key at t=%d' % (member.id, t))
        return member.group_key.copy()
    if isinstance(member, ReceiverSecrets):
        if member.last_seq != t or member.last_session_key is None:
            raise NotSynchronized('receiver %d holds no session key for message %d' % (member.user, t))
        return member.last_session_key.copy()
    raise UnknownMember('cannot reveal to %r' % (member,))


class IndGame:
    """
    One run of the test oracle: a hidden bit, one challenge, one guess.

    Only the bookkeeping exists; distinguishing advantage is not measured.
    """

    def __init__(self, rng, kappa: int = DEFAULT_KAPPA):
        self.rng = rng
        self.kappa = kappa
        self.tested = False
        self._bit = None

    def test_oracle(self, member, t: int):
        """Return (challenge, hidden bit): the real group key when the bit is 1, a fresh key otherwise."""
        if self.tested:
            raise AlreadyTested('the test oracle answers once per game')
        real = reveal(member, t)
        self.tested = True
        self._bit = bool(self.rng.integers(2))
        challenge = real if self._bit else gen_key(self.rng, len(real) * 8)
        return challenge, self._bit

    def score(self, guess) -> bool:
        if not self.tested:
            raise AdversaryError('no challenge has been issued')
        return bool(guess) == self._bit


# --------------------------------------------------------------------------------------------------------------------
#  Key-recovery closure
# --------------------------------------------------------------------------------------------------------------------

def _closure(entries, tape: TrafficTape, captured: CapturedState, bound: int) -> RecoveryReport:
    report = RecoveryReport(captured.source, captured.captured_at, tape)
    known, derivations = report.known, report.derivations
    for key_id, key in captured.keys.items():
        known[key_id] = key.copy()
        derivations[key_id] = Derivation('captured', None, None, None)

    def obtain(ref: KeyRef):
        key = known.get(ref.key_id)
        if key is None:
            target = ref.key_id
            older = [k for k in known if k.same_lineage(target) and target.epoch - bound <= k.epoch < target.epoch]
            if not older:
                return None
            key_id = max(older)
            key = known[key_id]
            while key_id != target:
                key = prf_eval(key, PrfLabel.NEXT)
                derivations[key_id.evolved()] = Derivation('next', key_id, None, None)
                key_id = key_id.evolved()
                known[key_id] = key
        return prf_eval(key, PrfLabel.ENC) if ref.derived else key

    opened = set()
    grew = True
    while grew:
        grew = False
        for entry in entries:
            for j, c in enumerate(entry.message.key_items()):
                if (entry.index, j) in opened:
                    continue
                key = obtain(c.ref)
                if key is None:
                    continue
                opened.add((entry.index, j))
                try:
                    bundle = unpack_keys(decrypt(key, c))
                except DecryptFailure:
                    log.warning('tape entry %d item %d did not open under %s', entry.index, j, c.ref)
                    continue
                for key_id, new_key in bundle:
                    if key_id not in known:
                        known[key_id] = new_key
                        derivations[key_id] = Derivation('decrypt', c.ref, entry.index, j)
                        grew = True
        log.debug('closure over %d entries: %d keys known, %d items opened', len(entries), len(known), len(opened))

    for entry in entries:
        msg = entry.message
        if isinstance(msg, RekeyMessage):
            report.group_key_refs[entry.time] = msg.group_key
            key = obtain(msg.group_key)
            if key is not None:
                report.recovered_group_keys[entry.time] = key
        elif isinstance(msg, BroadcastMessage):
            key = obtain(msg.session_ref)
            if key is not None:
                report.recovered_session_keys[msg.seq] = key
                report.recovered_plaintexts[msg.seq] = decrypt(key, msg.body)
    return report


def recover_closure(tape: TrafficTape, captured: CapturedState) -> RecoveryReport:
    """
    Everything the attacker learns from `captured` and the whole tape.

    Returns
    -------
    RecoveryReport
        group keys by time (rekey traffic) or session keys and plaintexts by seq (broadcast traffic)
    """
    return _closure(tape.entries, tape, captured, len(tape))


def forward_recover(tape: TrafficTape, captured: CapturedState, revoked_at: int) -> RecoveryReport:
    """Closure restricted to the traffic from time `revoked_at` on, when the victim is no longer a member."""
    return _closure(tape.since(revoked_at), tape, captured, len(tape))


def stateless_recover(tape: TrafficTape, captured: CapturedState) -> RecoveryReport:
    """`recover_closure` over broadcast traffic: session keys and plaintexts by seq."""
    if not all(isinstance(e.message, BroadcastMessage) for e in tape):
        raise AdversaryError('tape holds traffic other than broadcasts')
    return _closure(tape.entries, tape, captured, len(tape))


def replay(report: RecoveryReport, ref, tape: TrafficTape, captured: CapturedState):
    """
    Re-derive a recovered key from the captured octets and the tape octets alone, following its recorded chain.

    Parameters
    ----------
    report : RecoveryReport
    ref : KeyRef or VersionedKeyId
    tape : TrafficTape
        messages are decoded afresh from their wire octets
    captured : CapturedState
    """
    if isinstance(ref, KeyRef):
        key = replay(report, ref.key_id, tape, captured)
        return prf_eval(key, PrfLabel.ENC) if ref.derived else key
    step = report.derivations[ref]
    if step.kind == 'captured':
        return captured.keys[ref].copy()
    if step.kind == 'next':
        return prf_eval(replay(report, step.source, tape, captured), PrfLabel.NEXT)
    entry = tape.entries[step.entry]
    msg = type(entry.message).decode(entry.raw)
    c = msg.key_items()[step.item]
    bundle = dict(unpack_keys(decrypt(replay(report, step.source, tape, captured), c)))
    return bundle[ref]


def check_soundness(report: RecoveryReport, captured: CapturedState):
    """Recovered keys whose replay does not reproduce the same octets."""
    problems = []
    for t, key in sorted(report.recovered.items()):
        again = replay(report, report.ref_for(t), report.tape, captured)
        if again.material != key.material:
            problems.append('recovered key for t=%d does not replay' % t)
    for p in problems:
        log.warning(p)
    return problems
