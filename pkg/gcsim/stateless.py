"""
stateless: broadcast encryption with the complete subtree method.

N receivers sit at the leaves of a complete binary tree stored in heap order (root 1, children 2i and 2i+1, receiver
u at leaf N + u - 1). Every node i holds an independent key L_i and every receiver keeps the log N + 1 keys on its
path. To broadcast to everybody outside a revoked set R, the center encrypts a fresh session key K under the keys
of the subtrees hanging off the Steiner tree of R, and the message under K.

In ``CoverMode.STRONG`` the session key is encrypted under f_{L_i}(0), and after every broadcast that revokes
somebody all 2N - 1 keys evolve to f_{L_i}(1). Receivers keep an epoch counter and catch up by evolving their keys
as many times as the epoch of a message is ahead of theirs, so they need not see every message.

    >>> import numpy as np
    >>> from gcsim import stateless
    >>> rng = np.random.default_rng(0)
    >>> center, receivers = stateless.cs_init(8, stateless.CoverMode.STRONG, rng)
    >>> msg = stateless.broadcast(center, {1}, b'hello', rng)
    >>> msg.indices
    (3, 5, 9)
    >>> stateless.receiver_decrypt(receivers[4], msg)
    b'hello'
"""

import copy
import logging
import struct
from bisect import bisect_left
from dataclasses import dataclass, field
from enum import Enum

from .crypto import (DEFAULT_KAPPA, Ciphertext, DecryptFailure, KeyRef, PrfLabel, PrfMeter, VersionedKeyId,
                     check_kappa, decrypt, encrypt, gen_key, pack_keys, secure_erase, unpack_keys)
from .utils import fingerprint, log2_exact, read_struct

log = logging.getLogger(__name__)


class BadN(ValueError):
    pass


class CoverMode(Enum):
    BASELINE = 'baseline'
    STRONG = 'strong'


class Revoked(Enum):
    """Result of decrypting a message one is revoked from."""
    REVOKED = 'revoked'

    def __repr__(self):
        return 'REVOKED'


REVOKED = Revoked.REVOKED


def leaf_index(n: int, user: int) -> int:
    return n + user - 1


def session_key_id(seq: int) -> VersionedKeyId:
    """Session keys live at node 0 (never a heap index), one generation per broadcast."""
    return VersionedKeyId(0, seq, 0)


@dataclass
class SubsetSystem:
    """
    The broadcast center.

    `session_keys` records the octets of every session key by sequence number; it is a debugging record used to
    score attacks, never sent anywhere.
    """
    n: int
    mode: CoverMode
    keys: dict
    kappa: int = DEFAULT_KAPPA
    epoch: int = 0
    seq: int = 0
    meter: PrfMeter = field(default_factory=PrfMeter)
    session_keys: dict = field(default_factory=dict)

    @property
    def depth(self) -> int:
        return log2_exact(self.n)


@dataclass
class ReceiverSecrets:
    """
    What receiver `user` (1..N) keeps: its path keys by heap index, all at epoch `epoch`.

    `last_seq` and `last_session_key` record the last message processed; `last_lookups` counts the candidate depths
    inspected by the last ancestor search. A revoking broadcast erases the session key as the epoch moves on.
    """
    user: int
    n: int
    path_keys: dict
    epoch: int = 0
    meter: PrfMeter = field(default_factory=PrfMeter)
    last_seq: int = 0
    last_session_key: object = None
    last_lookups: int = 0
    corrupted: bool = False

    @property
    def id(self) -> str:
        return str(self.user)

    def key_id(self, index: int) -> VersionedKeyId:
        return VersionedKeyId(index, 0, self.epoch)

    def ancestors(self):
        """Heap indices from the root (depth 0) down to the leaf."""
        leaf = leaf_index(self.n, self.user)
        depth = log2_exact(self.n)
        return [leaf >> (depth - d) for d in range(depth + 1)]


@dataclass(frozen=True)
class BroadcastMessage:
    """
    ``seq ‖ epoch ‖ flag ‖ m ‖ (index ‖ header ciphertext) x m ‖ body ciphertext`` on the wire.

    `revocation_flag` tells receivers that the center evolved every key after this message.
    """
    seq: int
    epoch: int
    revocation_flag: bool
    indices: tuple
    header_cts: tuple
    body: Ciphertext

    @property
    def time(self) -> int:
        return self.seq

    @property
    def session_ref(self) -> KeyRef:
        return KeyRef(session_key_id(self.seq))

    def key_items(self):
        return list(self.header_cts)

    @property
    def item_count(self) -> int:
        return len(self.header_cts) + 1

    def encode(self) -> bytes:
        out = struct.pack('>IIBH', self.seq, self.epoch, int(self.revocation_flag), len(self.indices))
        for index, c in zip(self.indices, self.header_cts):
            out += struct.pack('>I', index) + c.encode()
        return out + self.body.encode()

    @classmethod
    def decode(cls, buf: bytes):
        (seq, epoch, flag, m), pos = read_struct('>IIBH', buf, 0)
        indices, header = [], []
        for _ in range(m):
            (index,), pos = read_struct('>I', buf, pos)
            c, pos = Ciphertext.decode(buf, pos)
            indices.append(index)
            header.append(c)
        body, pos = Ciphertext.decode(buf, pos)
        if pos != len(buf):
            raise ValueError('%d trailing octets after broadcast message' % (len(buf) - pos))
        return cls(seq, epoch, bool(flag), tuple(indices), tuple(header), body)

    def fingerprint(self) -> str:
        return fingerprint(self.encode())


def cs_init(n: int, mode: CoverMode, rng, kappa: int = DEFAULT_KAPPA):
    """
    Draw the 2N - 1 node keys and hand every receiver its path keys.

    Parameters
    ----------
    n : int
        number of receivers, a power of 2 (at least 2)
    mode : CoverMode
    rng : numpy.random.Generator
    kappa : int, optional

    Returns
    -------
    (SubsetSystem, list of ReceiverSecrets)
        receivers in order 1..N
    """
    try:
        depth = log2_exact(n)
    except (ValueError, TypeError):
        raise BadN('number of receivers must be a power of 2, got %r' % n) from None
    if depth < 1:
        raise BadN('at least 2 receivers are needed, got %r' % n)
    check_kappa(kappa)

    keys = {i: gen_key(rng, kappa) for i in range(1, 2 * n)}
    center = SubsetSystem(n, mode, keys, kappa)
    receivers = []
    for user in range(1, n + 1):
        rs = ReceiverSecrets(user, n, {})
        rs.path_keys = {i: keys[i].copy() for i in rs.ancestors()}
        receivers.append(rs)
    log.debug('complete subtree system: %d receivers, %d keys, %s mode', n, len(keys), mode.value)
    return center, receivers


def _check_revoked(n: int, revoked) -> set:
    revoked = set(revoked)
    bad = sorted(u for u in revoked if not isinstance(u, int) or not 1 <= u <= n)
    if bad:
        raise ValueError('revoked receivers out of range 1..%d: %s' % (n, bad))
    return revoked


def steiner_cover(n: int, revoked):
    """
    Roots of the subtrees hanging off the Steiner tree of the revoked leaves.

    Parameters
    ----------
    n : int
        number of receivers
    revoked : iterable of int
        revoked receivers, 1..N

    Returns
    -------
    list of int
        heap indices in ascending order; [1] when nobody is revoked, [] when everybody is

    Examples
    --------
    >>> steiner_cover(8, {1})
    [3, 5, 9]
    >>> steiner_cover(8, {1, 8})
    [5, 6, 9, 14]
    """
    revoked = _check_revoked(n, revoked)
    if not revoked:
        return [1]
    steiner = set()
    for u in revoked:
        i = leaf_index(n, u)
        while i >= 1 and i not in steiner:
            steiner.add(i)
            i //= 2
    cover = []
    for i in steiner:
        if i >= n:
            continue
        left, right = 2 * i, 2 * i + 1
        if (left in steiner) != (right in steiner):
            cover.append(right if left in steiner else left)
    return sorted(cover)


def broadcast(center: SubsetSystem, revoked, message: bytes, rng) -> BroadcastMessage:
    """
    Send `message` to every receiver outside `revoked`.

    A fresh session key K is encrypted under L_i (f_{L_i}(0) in STRONG mode) for every subtree i of the cover, and the
    message under K. In STRONG mode a broadcast that revokes somebody is followed by the evolution of all 2N - 1 keys.
    """
    revoked = _check_revoked(center.n, revoked)
    center.seq += 1
    cover = steiner_cover(center.n, revoked)
    strong = center.mode is CoverMode.STRONG

    session_key = gen_key(rng, center.kappa)
    sid = session_key_id(center.seq)
    plaintext = pack_keys([(sid, session_key)])
    header = []
    for i in cover:
        key_id = VersionedKeyId(i, 0, center.epoch)
        if strong:
            ephemeral = center.meter(center.keys[i], PrfLabel.ENC)
            header.append(encrypt(ephemeral, plaintext, key_id, rng, derived=True))
            secure_erase(ephemeral)
        else:
            header.append(encrypt(center.keys[i], plaintext, key_id, rng))
    body = encrypt(session_key, message, sid, rng)
    center.session_keys[center.seq] = session_key.material
    secure_erase(session_key)

    flag = strong and bool(revoked)
    msg = BroadcastMessage(center.seq, center.epoch, flag, tuple(cover), tuple(header), body)
    if flag:
        for i in list(center.keys):
            old = center.keys[i]
            center.keys[i] = center.meter(old, PrfLabel.NEXT)
            secure_erase(old)
        center.epoch += 1
    log.debug('broadcast %d: r=%d, cover %s, epoch %d%s', msg.seq, len(revoked), cover, msg.epoch,
              ', keys evolved' if flag else '')
    return msg


def _evolve_receiver(rs: ReceiverSecrets, steps: int):
    for _ in range(steps):
        for i in list(rs.path_keys):
            old = rs.path_keys[i]
            rs.path_keys[i] = rs.meter(old, PrfLabel.NEXT)
            secure_erase(old)
        rs.epoch += 1


def _find_ancestor(rs: ReceiverSecrets, indices):
    """
    Binary search over the depths of the receiver's path.

    The predicate "some cover subtree lies within the subtree of the ancestor at depth d" holds exactly down to the
    covering ancestor, if any. It is tested on leaf ranges with one bisection over the sorted cover.
    """
    n, depth = rs.n, log2_exact(rs.n)
    ancestors = rs.ancestors()
    ranges = sorted(_leaf_range(n, i) for i in indices)
    starts = [lo for lo, _ in ranges]

    def nests(d):
        lo, hi = _leaf_range(n, ancestors[d])
        k = bisect_left(starts, lo)
        return k < len(ranges) and ranges[k][1] <= hi

    lookups = 0
    low, high = 0, depth
    while low < high:
        mid = (low + high + 1) // 2
        lookups += 1
        if nests(mid):
            low = mid
        else:
            high = mid - 1
    rs.last_lookups = lookups
    candidate = ancestors[low]
    return candidate if candidate in indices else None


def _leaf_range(n: int, index: int):
    """First and last leaf (heap indices) below node `index`."""
    lo = hi = index
    while lo < n:
        lo, hi = 2 * lo, 2 * hi + 1
    return lo, hi


def receiver_decrypt(rs: ReceiverSecrets, msg: BroadcastMessage):
    """
    Decrypt a broadcast, catching up on missed evolutions first.

    Returns
    -------
    bytes or REVOKED

    Raises
    ------
    DecryptFailure
        if the receiver is at a later epoch than the message
    """
    if rs.epoch > msg.epoch:
        raise DecryptFailure('receiver %d is at epoch %d, message %d is for epoch %d'
                             % (rs.user, rs.epoch, msg.seq, msg.epoch))
    if msg.epoch > rs.epoch:
        log.debug('receiver %d catches up %d epochs', rs.user, msg.epoch - rs.epoch)
        _evolve_receiver(rs, msg.epoch - rs.epoch)

    if rs.last_session_key is not None:
        secure_erase(rs.last_session_key)
        rs.last_session_key = None
    result = REVOKED
    rs.last_lookups = 0
    if msg.indices:
        ancestor = _find_ancestor(rs, msg.indices)
        if ancestor is not None:
            c = msg.header_cts[msg.indices.index(ancestor)]
            if c.key_id != rs.key_id(ancestor):
                raise DecryptFailure('header for node %d is under %s, receiver holds %s'
                                     % (ancestor, c.key_id, rs.key_id(ancestor)))
            key = rs.path_keys[ancestor]
            if c.derived:
                key = rs.meter(key, PrfLabel.ENC)
            [(_, session_key)] = unpack_keys(decrypt(key, c))
            if c.derived:
                secure_erase(key)
            result = decrypt(session_key, msg.body)
            rs.last_session_key = session_key

    if msg.revocation_flag:
        # the session key does not outlive the epoch it was sent in
        if rs.last_session_key is not None:
            secure_erase(rs.last_session_key)
            rs.last_session_key = None
        _evolve_receiver(rs, 1)
    rs.last_seq = msg.seq
    return result


def receiver_prf_budget(rs: ReceiverSecrets, msg: BroadcastMessage) -> int:
    """PRF evaluations `rs` spends on `msg`, measured on a copy."""
    trial = copy.deepcopy(rs)
    trial.meter = PrfMeter()
    receiver_decrypt(trial, msg)
    return trial.meter.total
