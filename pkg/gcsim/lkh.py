"""
lkh: a logical key hierarchy, the stateful group communication scheme.

A group controller owns a `KeyTree` and rekeys the group at every join and leave with group-oriented rekeying:
all new keys of one event travel in a single `RekeyMessage`. Three rekey policies are available:

    * ``RekeyPolicy.BASELINE``: plain LKH. New keys are encrypted under the keys they replace, or under the
      children keys in the new tree after a leave.
    * ``RekeyPolicy.STRONG``: the same messages, except that every non-group key k is used only through f_k(0),
      and every key that is not replaced is evolved to f_k(1) after the event. A member captured later cannot
      open any earlier rekey message.
    * ``RekeyPolicy.STRONG_OPT``: like STRONG, but a join sends no new keys to the existing members. Everybody
      evolves every key, the joiner receives the evolved path keys, and the group key becomes f_root(0).

Typical use, for a group of eight users where a ninth joins:

    >>> import numpy as np
    >>> from gcsim import lkh
    >>> rng = np.random.default_rng(0)
    >>> ctrl, members, msg = lkh.setup(['u%d' % i for i in range(1, 9)], lkh.RekeyPolicy.STRONG, rng)
    >>> members = {m.id: m for m in members}
    >>> members['u9'] = lkh.register(ctrl, 'u9', rng)
    >>> msg = lkh.join(ctrl, 'u9', rng)
    >>> for m in members.values():
    ...     lkh.member_rekey(m, msg)
    >>> lkh.check_correctness(ctrl, members.values())
    []
"""

import logging
import struct
from dataclasses import dataclass, field
from enum import Enum, IntEnum

from .crypto import (DEFAULT_KAPPA, Ciphertext, CryptoError, DecryptFailure, KeyRef, PrfLabel, PrfMeter, SecretKey,
                     VersionedKeyId, check_kappa, decrypt, encrypt, gen_key, pack_keys, prf_eval, secure_erase,
                     unpack_keys)
from .tree import DEFAULT_DEGREE, KeyTree
from .utils import fingerprint, natural_key, pack_name, read_name, read_struct

log = logging.getLogger(__name__)

BOOTSTRAPS = ('group-key', 'keyset')


class LkhError(RuntimeError):
    pass


class DuplicateUser(LkhError):
    pass


class AlreadyMember(LkhError):
    pass


class NoIndividualKey(LkhError):
    pass


class NotMember(LkhError):
    pass


class StaleState(LkhError):
    pass


class NotSynchronized(LkhError):
    pass


class LastMember(LkhError):
    pass


class RekeyPolicy(Enum):
    BASELINE = 'baseline'
    STRONG = 'strong'
    STRONG_OPT = 'strong-opt'

    @property
    def evolves(self) -> bool:
        return self is not RekeyPolicy.BASELINE


class MessageKind(IntEnum):
    SETUP = 0
    JOIN = 1
    LEAVE = 2
    KEY_UPDATE_NOTICE = 3


# --------------------------------------------------------------------------------------------------------------------
#  Wire format
# --------------------------------------------------------------------------------------------------------------------

@dataclass(frozen=True)
class RekeyUnit:
    """Ciphertexts addressed to an explicit list of users."""
    recipients: tuple
    items: tuple = ()

    def encode(self) -> bytes:
        out = struct.pack('>H', len(self.recipients))
        out += b''.join(pack_name(u) for u in self.recipients)
        out += struct.pack('>H', len(self.items))
        return out + b''.join(c.encode() for c in self.items)

    @classmethod
    def decode(cls, buf: bytes, pos: int = 0):
        (count,), pos = read_struct('>H', buf, pos)
        recipients = []
        for _ in range(count):
            name, pos = read_name(buf, pos)
            recipients.append(name)
        (count,), pos = read_struct('>H', buf, pos)
        items = []
        for _ in range(count):
            c, pos = Ciphertext.decode(buf, pos)
            items.append(c)
        return cls(tuple(recipients), tuple(items)), pos


@dataclass(frozen=True)
class RekeyMessage:
    """
    Everything the controller multicasts for one event.

    Attributes
    ----------
    time : int
        virtual time t reached after the event
    kind : MessageKind
    units : tuple of RekeyUnit
    group_key : KeyRef
        the group key in force after the message (ids are public)
    subject : str
        the joining or leaving user; empty for setup
    retired : tuple of int
        k-nodes removed from the tree, whose keys members must erase
    """
    time: int
    kind: MessageKind
    units: tuple
    group_key: KeyRef
    subject: str = ''
    retired: tuple = ()

    @property
    def new_member(self):
        return self.subject if self.kind in (MessageKind.JOIN, MessageKind.KEY_UPDATE_NOTICE) else None

    @property
    def departed(self):
        return self.subject if self.kind == MessageKind.LEAVE else None

    def items(self):
        return [c for unit in self.units for c in unit.items]

    key_items = items

    @property
    def item_count(self) -> int:
        return sum(len(unit.items) for unit in self.units)

    def encode(self) -> bytes:
        out = struct.pack('>IB', self.time, int(self.kind)) + self.group_key.encode()
        out += struct.pack('>H', len(self.units)) + b''.join(unit.encode() for unit in self.units)
        out += pack_name(self.subject)
        out += struct.pack('>H', len(self.retired)) + b''.join(struct.pack('>I', n) for n in self.retired)
        return out

    @classmethod
    def decode(cls, buf: bytes):
        (time, kind), pos = read_struct('>IB', buf, 0)
        group_key, pos = KeyRef.decode(buf, pos)
        (count,), pos = read_struct('>H', buf, pos)
        units = []
        for _ in range(count):
            unit, pos = RekeyUnit.decode(buf, pos)
            units.append(unit)
        subject, pos = read_name(buf, pos)
        (count,), pos = read_struct('>H', buf, pos)
        retired = []
        for _ in range(count):
            (node,), pos = read_struct('>I', buf, pos)
            retired.append(node)
        if pos != len(buf):
            raise ValueError('%d trailing octets after rekey message' % (len(buf) - pos))
        return cls(time, MessageKind(kind), tuple(units), group_key, subject, tuple(retired))

    def fingerprint(self) -> str:
        return fingerprint(self.encode())


# --------------------------------------------------------------------------------------------------------------------
#  Parties
# --------------------------------------------------------------------------------------------------------------------

@dataclass
class ControllerState:
    """
    The group controller.

    `group_keys` keeps, for every time t, the octets of k^(t); like `tree.ledger` it is a debugging record used
    by the harness to score attacks, never by the protocol itself.
    """
    tree: KeyTree
    policy: RekeyPolicy
    kappa: int = DEFAULT_KAPPA
    bootstrap: str = 'group-key'
    time: int = 0
    members: set = field(default_factory=set)
    pending_individual_keys: dict = field(default_factory=dict)
    reserved_ids: dict = field(default_factory=dict)
    meter: PrfMeter = field(default_factory=PrfMeter)
    group_keys: dict = field(default_factory=dict)

    def group_key_ref(self) -> KeyRef:
        root_id = self.tree.root.key_id
        return KeyRef(root_id, self.policy is RekeyPolicy.STRONG_OPT and root_id.epoch > 0)

    def record_group_key(self):
        self.group_keys[self.time] = current_group_key(self).material


@dataclass
class MemberState:
    """A group member: the keys it holds, its acceptance record and its view of the group key."""
    id: str
    policy: RekeyPolicy
    keys: dict = field(default_factory=dict)
    time: int = -1
    joined_at: int = 0
    acc: dict = field(default_factory=dict)
    group_key: SecretKey = None
    group_key_ref: KeyRef = None
    meter: PrfMeter = field(default_factory=PrfMeter)
    corrupted: bool = False
    active: bool = True

    @property
    def accepted(self) -> bool:
        return self.active and self.acc.get(self.time, False)

    def erase_all(self):
        for key in self.keys.values():
            secure_erase(key)
        self.keys.clear()
        if self.group_key is not None:
            secure_erase(self.group_key)


# --------------------------------------------------------------------------------------------------------------------
#  Controller protocols
# --------------------------------------------------------------------------------------------------------------------

def _next_key_id(node) -> VersionedKeyId:
    generation = node.key_id.generation + 1 if node.key_id is not None else 0
    return VersionedKeyId(node.node_id, generation, 0)


def _seal(ctrl: ControllerState, key: SecretKey, key_id: VersionedKeyId, bundle, rng, derived: bool) -> Ciphertext:
    """Encrypt a key bundle under `key`, or under f_key(0) when `derived`."""
    if derived:
        ephemeral = ctrl.meter(key, PrfLabel.ENC)
        c = encrypt(ephemeral, pack_keys(bundle), key_id, rng, derived=True)
        secure_erase(ephemeral)
        return c
    return encrypt(key, pack_keys(bundle), key_id, rng)


def setup(members, policy: RekeyPolicy, rng, degree: int = DEFAULT_DEGREE, kappa: int = DEFAULT_KAPPA,
          bootstrap: str = 'group-key', tape=None):
    """
    Create the group.

    Every member gets an individual key k_u out of band, the controller builds a balanced tree over the members and
    sends each member its keys under k_u (under f_{k_u}(0) in the strong policies).

    Parameters
    ----------
    members : list of str
        initial members, distinct, in leaf order
    policy : RekeyPolicy
    rng : numpy.random.Generator
    degree : int, optional
        tree degree d
    kappa : int, optional
    bootstrap : {'group-key', 'keyset'}, optional
        what the setup ciphertext under k_u carries. With 'group-key' only the group key goes on the wire and the
        auxiliary keys are provisioned out of band together with k_u; with 'keyset' the whole keyset (except k_u)
        goes on the wire.
    tape : TrafficTape, optional
        if given, the setup message is recorded before delivery

    Returns
    -------
    (ControllerState, list of MemberState, RekeyMessage)
        all members have accepted at time 0
    """
    members = list(members)
    if not members:
        raise LkhError('a group needs at least one member')
    if len(set(members)) != len(members):
        dup = sorted({u for u in members if members.count(u) > 1}, key=natural_key)
        raise DuplicateUser('duplicate users in setup: %s' % ', '.join(dup))
    if bootstrap not in BOOTSTRAPS:
        raise ValueError('bootstrap must be one of %s, got %r' % (BOOTSTRAPS, bootstrap))
    check_kappa(kappa)

    individual = {u: gen_key(rng, kappa) for u in members}
    tree = KeyTree.build(members, {u: k.copy() for u, k in individual.items()}, rng, degree, kappa)
    ctrl = ControllerState(tree, policy, kappa, bootstrap, members=set(members))

    units, states = [], []
    for u in members:
        path = tree.keyset_nodes(u)
        leaf, above = path[0], path[1:]
        on_wire = above if bootstrap == 'keyset' else above[-1:]
        bundle = [(node.key_id, node.key) for node in reversed(on_wire)]
        c = _seal(ctrl, leaf.key, leaf.key_id, bundle, rng, policy.evolves)
        units.append(RekeyUnit((u,), (c,)))

        m = MemberState(u, policy, keys={leaf.key_id: individual[u]}, joined_at=0)
        if bootstrap == 'group-key':
            for node in above[:-1]:
                m.keys[node.key_id] = node.key.copy()
        states.append(m)

    msg = RekeyMessage(0, MessageKind.SETUP, tuple(units), ctrl.group_key_ref())
    ctrl.record_group_key()
    if tape is not None:
        tape.append(msg)
    for m in states:
        member_rekey(m, msg)
    log.debug('setup: %d members, %d ciphertexts, height %d', len(members), msg.item_count, tree.height)
    return ctrl, states, msg


def register(ctrl: ControllerState, u: str, rng) -> MemberState:
    """
    Establish the individual key of a prospective member out of band.

    The controller keeps k_u until `join`; the returned member state holds its own copy, under the key id the
    leaf will have once attached.
    """
    if u in ctrl.members:
        raise AlreadyMember('%s is already a member' % u)
    if u in ctrl.pending_individual_keys:
        secure_erase(ctrl.pending_individual_keys[u])
    k_u = gen_key(rng, ctrl.kappa)
    node_id = ctrl.reserved_ids.get(u) or ctrl.tree.new_node_id()
    ctrl.pending_individual_keys[u] = k_u
    ctrl.reserved_ids[u] = node_id
    return MemberState(u, ctrl.policy, keys={VersionedKeyId(node_id): k_u.copy()}, time=ctrl.time,
                       joined_at=ctrl.time + 1)


def join(ctrl: ControllerState, u: str, rng) -> RekeyMessage:
    """
    Admit `u`, whose individual key was established with `register`.

    BASELINE and STRONG replace every key on the path from the joining point to the root. The existing members get
    each new key under the key it replaces, the joiner gets all of them under k_u; STRONG uses f(0) of every
    non-group key and evolves all non-group keys afterwards. STRONG_OPT evolves every key instead, sends only a
    "key update" notice to the existing members and the evolved path keys to the joiner.

    Returns
    -------
    RekeyMessage
        for time t+1
    """
    if u in ctrl.members:
        raise AlreadyMember('%s is already a member' % u)
    k_u = ctrl.pending_individual_keys.pop(u, None)
    if k_u is None:
        raise NoIndividualKey('no individual key established for %s' % u)

    tree, policy = ctrl.tree, ctrl.policy
    old_members = tuple(sorted(ctrl.members, key=natural_key))
    joining_point = tree.find_joining_point()
    leaf = tree.node(tree.attach(joining_point, u, k_u, node_id=ctrl.reserved_ids.pop(u, None)))
    path = list(leaf.path[:-1])   # x_0 (root) ... x_j
    split = path[-1].key is None
    ctrl.time += 1
    ctrl.members.add(u)

    if policy is RekeyPolicy.STRONG_OPT:
        msg = _join_key_update(ctrl, u, leaf, path, split, old_members, rng)
    else:
        msg = _join_replace(ctrl, u, leaf, path, split, old_members, rng)

    ctrl.record_group_key()
    log.debug('join %s at t=%d: %d ciphertexts, joining point %d%s', u, ctrl.time, msg.item_count,
              joining_point, ' (split)' if split else '')
    return msg


def _join_replace(ctrl, u, leaf, path, split, old_members, rng):
    tree, strong = ctrl.tree, ctrl.policy is RekeyPolicy.STRONG
    fresh = [(node, _next_key_id(node), gen_key(rng, ctrl.kappa)) for node in path]

    items = []
    for node, new_id, hk in fresh:
        if node.key is not None:
            under, under_id = node.key, node.key_id
        else:
            displaced = node.children[0]
            under, under_id = displaced.key, displaced.key_id
        items.append(_seal(ctrl, under, under_id, [(new_id, hk)], rng, strong and node is not tree.root))
    to_joiner = _seal(ctrl, leaf.key, leaf.key_id, [(new_id, hk) for _, new_id, hk in fresh], rng, strong)

    for node, new_id, hk in fresh:
        tree.install(node.node_id, hk)
    if strong:
        for node in list(tree.nodes.values()):
            if node is not tree.root:
                tree.evolve(node.node_id, ctrl.meter)

    units = (RekeyUnit(old_members, tuple(items)), RekeyUnit((u,), (to_joiner,)))
    return RekeyMessage(ctrl.time, MessageKind.JOIN, units, ctrl.group_key_ref(), u)


def _join_key_update(ctrl, u, leaf, path, split, old_members, rng):
    tree = ctrl.tree
    notice_items = ()
    if split:
        w = path[-1]
        displaced = w.children[0]
        hk_w = gen_key(rng, ctrl.kappa)
        notice_items = (_seal(ctrl, displaced.key, displaced.key_id, [(_next_key_id(w), hk_w)], rng, True),)

    ephemeral = ctrl.meter(leaf.key, PrfLabel.ENC)
    joiner_key_id = leaf.key_id
    for node in list(tree.nodes.values()):
        if node.key is not None:
            tree.evolve(node.node_id, ctrl.meter)
    if split:
        tree.install(path[-1].node_id, hk_w)

    bundle = [(node.key_id, node.key) for node in path]
    to_joiner = encrypt(ephemeral, pack_keys(bundle), joiner_key_id, rng, derived=True)
    secure_erase(ephemeral)

    units = (RekeyUnit(old_members, notice_items), RekeyUnit((u,), (to_joiner,)))
    return RekeyMessage(ctrl.time, MessageKind.KEY_UPDATE_NOTICE, units, ctrl.group_key_ref(), u)


def leave(ctrl: ControllerState, u: str, rng) -> RekeyMessage:
    """
    Remove `u` from the group.

    Every key on the path from the leaving point to the root is replaced. The new key of each path node x_i is
    encrypted under each of x_i's children keys in the new tree, the child on the path contributing its own new
    key. In the strong policies every encryption uses f(0) of the child key, and all non-group keys evolve
    afterwards.

    When the departure leaves the tree deeper than ceil(log_d n) + 1, the inner k-nodes are rebuilt as a balanced
    stack over the remaining leaves and every one of them gets a fresh key, sealed the same way under its children.

    Raises
    ------
    NotMember
    LastMember
        when `u` is the only member
    """
    if u not in ctrl.members:
        raise NotMember('%s is not a member' % u)
    if len(ctrl.members) == 1:
        raise LastMember('%s is the last member; the group cannot be emptied' % u)

    tree, policy = ctrl.tree, ctrl.policy
    ctrl.members.discard(u)
    remaining = tuple(sorted(ctrl.members, key=natural_key))
    detached = tree.detach(u)
    retired = list(detached.retired)
    if tree.height > tree.height_bound:
        inner, dropped = tree.rebalance()
        retired += dropped
        path = [tree.node(n) for n in inner]
    else:
        path = [tree.node(n) for n in reversed(tree.path_to_root(detached.leaving_point))]   # x_0 ... x_j
    fresh = {node.node_id: (_next_key_id(node), gen_key(rng, ctrl.kappa)) for node in path}
    ctrl.time += 1

    items = []
    for node in path:
        new_id, hk = fresh[node.node_id]
        for child in node.children:
            if child.node_id in fresh:
                under_id, under = fresh[child.node_id]
            else:
                under_id, under = child.key_id, child.key
            items.append(_seal(ctrl, under, under_id, [(new_id, hk)], rng, policy.evolves))

    for node in path:
        tree.install(node.node_id, fresh[node.node_id][1])
    if policy.evolves:
        for node in list(tree.nodes.values()):
            if node is not tree.root:
                tree.evolve(node.node_id, ctrl.meter)

    msg = RekeyMessage(ctrl.time, MessageKind.LEAVE, (RekeyUnit(remaining, tuple(items)),), ctrl.group_key_ref(), u,
                       tuple(retired))
    ctrl.record_group_key()
    log.debug('leave %s at t=%d: %d ciphertexts, leaving point %d', u, ctrl.time, msg.item_count,
              detached.leaving_point)
    return msg


def serialize_requests(joins=(), leaves=()):
    """Order simultaneous requests: every leave first, then every join, each in request order."""
    return [('leave', u) for u in leaves] + [('join', u) for u in joins]


# --------------------------------------------------------------------------------------------------------------------
#  Member protocol
# --------------------------------------------------------------------------------------------------------------------

def _usable_key(m: MemberState, received: dict, ref: KeyRef):
    key = received.get(ref.key_id)
    if key is None:
        key = m.keys.get(ref.key_id)
    if key is None:
        return None, False
    if ref.derived:
        return m.meter(key, PrfLabel.ENC), True
    return key, False


def _evolve_member_key(m: MemberState, key_id: VersionedKeyId):
    old = m.keys.pop(key_id)
    m.keys[key_id.evolved()] = m.meter(old, PrfLabel.NEXT)
    secure_erase(old)


def member_rekey(m: MemberState, msg: RekeyMessage) -> MemberState:
    """
    Process a rekey message.

    The member opens every ciphertext of its units whose key it holds or has just received (selecting keys by id,
    never by trial), installs the new keys, erases the keys they replace together with keys of retired k-nodes,
    evolves its remaining keys as the policy dictates and adopts the announced group key.

    Raises
    ------
    StaleState
        if the message is not the one for time m.time + 1
    DecryptFailure
        if the member cannot reach the announced group key; acc[t] stays false
    """
    if not m.active:
        raise StaleState('%s is no longer in the group' % m.id)
    if msg.time != m.time + 1:
        raise StaleState('%s is at t=%d and cannot process the message for t=%d' % (m.id, m.time, msg.time))

    if msg.departed == m.id:
        m.time = msg.time
        m.acc[msg.time] = False
        m.active = False
        if not m.corrupted:
            m.erase_all()
        return m

    held_before = set(m.keys)
    pending = [c for unit in msg.units if m.id in unit.recipients for c in unit.items]
    received = dict()
    progress = True
    while pending and progress:
        progress = False
        for c in list(pending):
            key, temporary = _usable_key(m, received, c.ref)
            if key is None:
                continue
            pending.remove(c)
            progress = True
            try:
                bundle = unpack_keys(decrypt(key, c))
            except CryptoError:
                m.acc[msg.time] = False
                raise
            finally:
                if temporary:
                    secure_erase(key)
            for key_id, new_key in bundle:
                if key_id in received:
                    secure_erase(received[key_id])
                received[key_id] = new_key

    for key_id, new_key in received.items():
        for old_id in [k for k in m.keys if k.node == key_id.node and k != key_id]:
            secure_erase(m.keys.pop(old_id))
        m.keys[key_id] = new_key
    for old_id in [k for k in m.keys if k.node in msg.retired]:
        secure_erase(m.keys.pop(old_id))

    if msg.kind == MessageKind.KEY_UPDATE_NOTICE:
        for key_id in sorted(held_before & set(m.keys)):
            _evolve_member_key(m, key_id)
    elif m.policy.evolves and msg.kind in (MessageKind.JOIN, MessageKind.LEAVE):
        for key_id in sorted(k for k in m.keys if k != msg.group_key.key_id):
            _evolve_member_key(m, key_id)

    base = m.keys.get(msg.group_key.key_id)
    if base is None:
        m.time = msg.time
        m.acc[msg.time] = False
        log.warning('%s could not reach group key %s at t=%d', m.id, msg.group_key, msg.time)
        raise DecryptFailure('%s cannot reach the group key of t=%d' % (m.id, msg.time))
    if m.group_key is not None:
        secure_erase(m.group_key)
    m.group_key = m.meter(base, PrfLabel.ENC) if msg.group_key.derived else base.copy()
    m.group_key_ref = msg.group_key
    m.time = msg.time
    m.acc[msg.time] = True
    return m


def current_group_key(state) -> SecretKey:
    """
    k^(t) as seen by the controller or by an accepted member.

    For the controller this is the root key, or f_root(0) under STRONG_OPT once the root key has evolved.

    Raises
    ------
    NotSynchronized
        for a member that has not accepted at its current time
    """
    if isinstance(state, ControllerState):
        ref = state.group_key_ref()
        root = state.tree.root.key
        return prf_eval(root, PrfLabel.ENC) if ref.derived else root
    if not state.accepted:
        raise NotSynchronized('%s has not accepted at t=%d' % (state.id, state.time))
    return state.group_key


# --------------------------------------------------------------------------------------------------------------------
#  Invariant checks
# --------------------------------------------------------------------------------------------------------------------

def check_correctness(ctrl: ControllerState, members):
    """
    Problems with the correctness requirement at the controller's current time.

    Every accepted member must share the controller's group key, and every key it holds must be in the tree with
    the same material.
    """
    problems = []
    group_key = current_group_key(ctrl).material
    index = ctrl.tree.key_index()
    for m in members:
        if not m.active or m.corrupted:
            continue
        if m.time != ctrl.time or not m.accepted:
            problems.append('%s has not accepted at t=%d' % (m.id, ctrl.time))
            continue
        if m.group_key.material != group_key:
            problems.append('%s holds a wrong group key at t=%d' % (m.id, ctrl.time))
        for key_id, key in m.keys.items():
            node = index.get(key_id)
            if node is None:
                problems.append('%s holds %s, unknown to the controller' % (m.id, key_id))
            elif node.key.material != key.material:
                problems.append('%s holds %s with wrong material' % (m.id, key_id))
    for p in problems:
        log.warning(p)
    return problems


def check_erasure(ctrl: ControllerState, members):
    """Problems found by comparing member keys against every key the tree no longer holds."""
    current = set(ctrl.tree.key_index())
    outdated = {material for key_id, material in ctrl.tree.ledger.items() if key_id not in current}
    problems = []
    for m in members:
        if m.corrupted:
            continue
        held = list(m.keys.items())
        if m.group_key is not None and not m.group_key.erased:
            held.append(('group key', m.group_key))
        for key_id, key in held:
            if not key.erased and key.material in outdated:
                problems.append('%s still holds replaced key material under %s' % (m.id, key_id))
    for p in problems:
        log.warning(p)
    return problems
