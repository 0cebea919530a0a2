import math
from itertools import combinations

import numpy as np
import pytest

from gcsim.crypto import DecryptFailure
from gcsim.stateless import (REVOKED, BadN, BroadcastMessage, CoverMode, broadcast, cs_init, receiver_decrypt,
                             receiver_prf_budget, steiner_cover)


def maximal_subtrees(n, revoked):
    """Top-down enumeration of the largest complete subtrees free of revoked leaves."""
    cover = []

    def leaves(i):
        lo = hi = i
        while lo < n:
            lo, hi = 2 * lo, 2 * hi + 1
        return range(lo - n + 1, hi - n + 2)

    def visit(i):
        if not revoked.intersection(leaves(i)):
            cover.append(i)
        elif i < n:
            visit(2 * i)
            visit(2 * i + 1)

    visit(1)
    return sorted(cover), leaves


def all_subsets(n):
    users = range(1, n + 1)
    for r in range(n + 1):
        for revoked in combinations(users, r):
            yield set(revoked)


def check_cover(n, revoked):
    cover = steiner_cover(n, revoked)
    expected, leaves = maximal_subtrees(n, revoked)
    assert cover == expected
    covered = [u for i in cover for u in leaves(i)]
    assert len(covered) == len(set(covered))
    assert set(covered) == set(range(1, n + 1)) - revoked
    r = len(revoked)
    if 1 <= r < n:
        assert len(cover) <= r * math.log2(n / r) + 1e-9


def test_cover_examples():
    assert steiner_cover(8, set()) == [1]
    assert steiner_cover(8, {1}) == [3, 5, 9]
    assert steiner_cover(8, {1, 8}) == [5, 6, 9, 14]
    assert steiner_cover(8, set(range(1, 9))) == []
    assert steiner_cover(8, {1, 2, 3, 4}) == [3]


def test_cover_exhaustive():
    for n in (2, 4, 8, 16):
        for revoked in all_subsets(n):
            check_cover(n, revoked)


def test_cover_random_n32():
    choice = np.random.default_rng(32)
    for _ in range(1000):
        r = int(choice.integers(0, 33))
        revoked = {int(u) for u in choice.choice(np.arange(1, 33), size=r, replace=False)}
        check_cover(32, revoked)


def test_cover_rejects_bad_receivers():
    with pytest.raises(ValueError):
        steiner_cover(8, {0})
    with pytest.raises(ValueError):
        steiner_cover(8, {9})


def test_cs_init(rng):
    center, receivers = cs_init(8, CoverMode.BASELINE, rng)
    assert len(center.keys) == 15
    assert [len(rs.path_keys) for rs in receivers] == [4] * 8
    assert receivers[4].ancestors() == [1, 3, 6, 12]
    assert receivers[4].path_keys[3].material == center.keys[3].material
    center, receivers = cs_init(2, CoverMode.STRONG, rng)
    assert len(center.keys) == 3 and all(len(rs.path_keys) == 2 for rs in receivers)


def test_cs_init_is_seeded():
    a, _ = cs_init(4, CoverMode.BASELINE, np.random.default_rng(1))
    b, _ = cs_init(4, CoverMode.BASELINE, np.random.default_rng(1))
    assert [k.material for k in a.keys.values()] == [k.material for k in b.keys.values()]


@pytest.mark.parametrize('n', [0, 1, 6, 12])
def test_cs_init_bad_n(rng, n):
    with pytest.raises(BadN):
        cs_init(n, CoverMode.BASELINE, rng)


def test_broadcast_header_sizes(rng):
    center, receivers = cs_init(8, CoverMode.BASELINE, rng)
    assert len(broadcast(center, set(), b'all', rng).header_cts) == 1
    msg = broadcast(center, {1}, b'not u1', rng)
    assert msg.indices == (3, 5, 9)
    assert msg.seq == 2 and not msg.revocation_flag
    assert msg.item_count == 4
    assert receiver_decrypt(receivers[4], msg) == b'not u1'
    assert receiver_decrypt(receivers[0], msg) is REVOKED


@pytest.mark.parametrize('mode', list(CoverMode))
def test_decryption_totality(mode):
    for n in (2, 4, 8, 16):
        rng = np.random.default_rng(n)
        center, receivers = cs_init(n, mode, rng)
        for revoked in all_subsets(n):
            msg = broadcast(center, revoked, b'payload', rng)
            for rs in receivers:
                result = receiver_decrypt(rs, msg)
                assert result == (REVOKED if rs.user in revoked else b'payload')
            assert {rs.epoch for rs in receivers} == {center.epoch}


def test_strong_center_evolves_every_key_per_revocation(rng):
    center, receivers = cs_init(8, CoverMode.STRONG, rng)
    broadcast(center, set(), b'nobody revoked', rng)
    assert center.meter.next_calls == 0 and center.epoch == 0
    broadcast(center, {2}, b'one', rng)
    broadcast(center, {1, 2, 3, 4}, b'left half', rng)
    assert center.meter.next_calls == 30
    assert center.epoch == 2


def test_revocation_flag_even_when_cover_has_one_subtree(rng):
    center, receivers = cs_init(8, CoverMode.STRONG, rng)
    msg = broadcast(center, {1, 2, 3, 4}, b'right half only', rng)
    assert msg.indices == (3,) and msg.revocation_flag
    for rs in receivers:
        receiver_decrypt(rs, msg)
    assert all(rs.epoch == 1 for rs in receivers)
    msg = broadcast(center, set(), b'everyone', rng)
    assert all(receiver_decrypt(rs, msg) == b'everyone' for rs in receivers)


def test_session_key_erased_when_the_epoch_moves_on(rng):
    strong, strong_receivers = cs_init(8, CoverMode.STRONG, rng)
    base, base_receivers = cs_init(8, CoverMode.BASELINE, rng)
    for center, receivers in ((strong, strong_receivers), (base, base_receivers)):
        msg = broadcast(center, {1}, b'one revoked', rng)
        assert receiver_decrypt(receivers[4], msg) == b'one revoked'
    assert strong_receivers[4].last_session_key is None
    assert base_receivers[4].last_session_key.material == base.session_keys[1]
    msg = broadcast(strong, set(), b'nobody revoked', rng)
    assert receiver_decrypt(strong_receivers[4], msg) == b'nobody revoked'
    assert strong_receivers[4].last_session_key.material == strong.session_keys[2]


def test_receiver_catches_up_after_missing_a_revocation(rng):
    center, receivers = cs_init(8, CoverMode.STRONG, rng)
    offline = receivers[2]
    first = broadcast(center, {1}, b'first', rng)
    for rs in receivers:
        if rs is not offline:
            receiver_decrypt(rs, first)
    second = broadcast(center, {2}, b'second', rng)
    assert offline.epoch == 0 and second.epoch == 1
    assert receiver_decrypt(offline, second) == b'second'
    assert offline.epoch == center.epoch == 2
    with pytest.raises(DecryptFailure):
        receiver_decrypt(offline, first)


def test_receiver_prf_budget():
    for n in (2, 8, 16):
        rng = np.random.default_rng(n)
        center, receivers = cs_init(n, CoverMode.STRONG, rng)
        depth = int(math.log2(n))
        for revoked in ({1}, {n}, set(range(1, n // 2 + 1))):
            msg = broadcast(center, revoked, b'm', rng)
            for rs in receivers:
                assert receiver_prf_budget(rs, msg) <= 2 * (depth + 1)
                receiver_decrypt(rs, msg)


def test_ancestor_search_is_loglog(rng):
    for n in (2, 4, 8, 16, 32, 64):
        center, receivers = cs_init(n, CoverMode.BASELINE, rng)
        bound = math.log2(math.log2(n)) + 2
        for revoked in ({1}, {n}, {1, n}, set(range(2, n + 1, 3))):
            msg = broadcast(center, revoked, b'm', rng)
            for rs in receivers:
                receiver_decrypt(rs, msg)
                assert rs.last_lookups <= bound


def test_broadcast_wire_format(rng):
    center, _ = cs_init(8, CoverMode.STRONG, rng)
    msg = broadcast(center, {1, 8}, b'hello', rng)
    raw = msg.encode()
    assert raw[:11] == (1).to_bytes(4, 'big') + (0).to_bytes(4, 'big') + b'\x01' + (4).to_bytes(2, 'big')
    assert BroadcastMessage.decode(raw) == msg
