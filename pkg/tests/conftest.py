import numpy as np
import pytest

from gcsim import lkh
from gcsim.adversary import TrafficTape
from gcsim.crypto import PrfLabel, SecretKey, DecryptFailure, decrypt, prf_eval, unpack_keys

GROUP8_USERS = ['u%d' % i for i in range(1, 9)]


def run_group8(policy=lkh.RekeyPolicy.BASELINE, bootstrap='group-key', seed=0):
    """Eight users on a degree-3 tree, then join u9, leave u8, leave u6. Returns (ctrl, members, tape)."""
    rng = np.random.default_rng(seed)
    tape = TrafficTape()
    ctrl, states, _ = lkh.setup(GROUP8_USERS, policy, rng, degree=3, bootstrap=bootstrap, tape=tape)
    members = {m.id: m for m in states}

    def deliver(msg):
        tape.append(msg)
        for m in list(members.values()):
            if m.active:
                lkh.member_rekey(m, msg)

    members['u9'] = lkh.register(ctrl, 'u9', rng)
    deliver(lkh.join(ctrl, 'u9', rng))
    deliver(lkh.leave(ctrl, 'u8', rng))
    deliver(lkh.leave(ctrl, 'u6', rng))
    return ctrl, members, tape


def brute_force_keys(tape, captured):
    """
    Every key octet string reachable from `captured` by trial decryption of every recorded item under every known
    key, its forward evolutions (up to the number of recorded events) and their f(0) derivations, ignoring key ids.
    """
    bound = len(tape)
    known = {key.material for key in captured.keys.values()}
    items = [c for entry in tape for c in entry.message.key_items()]
    grew = True
    while grew:
        grew = False
        candidates = set()
        for material in known:
            key = SecretKey(material)
            for _ in range(bound + 1):
                candidates.add(key.material)
                candidates.add(prf_eval(key, PrfLabel.ENC).material)
                key = prf_eval(key, PrfLabel.NEXT)
        for c in items:
            for material in candidates:
                try:
                    bundle = unpack_keys(decrypt(SecretKey(material), c))
                except DecryptFailure:
                    continue
                for _, new_key in bundle:
                    if new_key.material not in known:
                        known.add(new_key.material)
                        grew = True
    reachable = set(known)
    for material in known:
        key = SecretKey(material)
        for _ in range(bound + 1):
            reachable.add(key.material)
            reachable.add(prf_eval(key, PrfLabel.ENC).material)
            key = prf_eval(key, PrfLabel.NEXT)
    return reachable


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


@pytest.fixture
def group8():
    return run_group8()


@pytest.fixture
def group8_factory():
    return run_group8


@pytest.fixture
def oracle():
    return brute_force_keys
