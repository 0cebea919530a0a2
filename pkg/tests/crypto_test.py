import logging

import numpy as np
import pytest

from gcsim.crypto import (Ciphertext, DecryptFailure, ErasedKey, KeyRef, PrfLabel, PrfMeter, SecretKey,
                          VersionedKeyId, decrypt, encrypt, gen_key, pack_keys, prf_eval, secure_erase,
                          unpack_keys)


def test_gen_key_is_seeded(rng):
    a = gen_key(np.random.default_rng(5))
    b = gen_key(np.random.default_rng(5))
    assert a.material == b.material
    assert len(gen_key(rng, 256)) == 32
    assert gen_key(rng).kappa == 128


def test_gen_key_rejects_odd_kappa(rng):
    with pytest.raises(ValueError):
        gen_key(rng, 100)


def test_prf_labels_differ_and_keep_width(rng):
    for kappa in (128, 192, 256):
        k = gen_key(rng, kappa)
        enc, nxt = prf_eval(k, PrfLabel.ENC), prf_eval(k, PrfLabel.NEXT)
        assert len(enc) == len(nxt) == kappa // 8
        assert enc.material != nxt.material
        assert enc.material != k.material
        assert prf_eval(k, PrfLabel.ENC).material == enc.material


def test_prf_meter_counts(rng):
    meter = PrfMeter()
    k = gen_key(rng)
    meter(k, PrfLabel.ENC)
    meter(k, PrfLabel.NEXT)
    meter(k, PrfLabel.NEXT)
    assert (meter.enc_calls, meter.next_calls, meter.total) == (1, 2, 3)


def test_encrypt_decrypt(rng):
    k = gen_key(rng)
    kid = VersionedKeyId(4, 1, 2)
    c = encrypt(k, b'hello group', kid, rng)
    assert len(c.body) == len(b'hello group')
    assert len(c.nonce) == 12 and len(c.tag) == 16
    assert c.ref == KeyRef(kid)
    assert decrypt(k, c) == b'hello group'


def test_decrypt_with_wrong_key_fails(rng, caplog):
    c = encrypt(gen_key(rng), b'secret', VersionedKeyId(1), rng)
    with caplog.at_level(logging.DEBUG, logger='gcsim.crypto'), pytest.raises(DecryptFailure):
        decrypt(gen_key(rng), c)
    assert 'tag mismatch for ciphertext under' in caplog.text


def test_key_id_is_bound_to_ciphertext(rng):
    k = gen_key(rng)
    c = encrypt(k, b'secret', VersionedKeyId(1), rng)
    moved = Ciphertext(VersionedKeyId(2), c.nonce, c.body, c.tag)
    with pytest.raises(DecryptFailure):
        decrypt(k, moved)
    flipped = Ciphertext(c.key_id, c.nonce, c.body, c.tag, derived=True)
    with pytest.raises(DecryptFailure):
        decrypt(k, flipped)


def test_ciphertext_wire_format(rng):
    c = encrypt(gen_key(rng), b'abc', VersionedKeyId(9, 3, 1), rng, derived=True)
    raw = c.encode()
    again, pos = Ciphertext.decode(raw)
    assert pos == len(raw)
    assert again == c
    assert str(again.ref) == '9.3.1/enc'


def test_secure_erase(rng):
    k = gen_key(rng)
    copy = k.copy()
    secure_erase(k)
    assert k.erased
    assert all(b == 0 for b in k._material)
    with pytest.raises(ErasedKey):
        k.material
    with pytest.raises(ErasedKey):
        prf_eval(k, PrfLabel.NEXT)
    assert not copy.erased
    secure_erase(k)
    assert repr(k) == 'SecretKey(erased)'


def test_secret_key_length():
    with pytest.raises(ValueError):
        SecretKey(b'short')


def test_versioned_key_id():
    kid = VersionedKeyId(3, 1)
    assert kid.evolved() == VersionedKeyId(3, 1, 1)
    assert kid.evolved(4).same_lineage(kid)
    assert not kid.same_lineage(VersionedKeyId(3, 2))
    assert VersionedKeyId.decode(kid.encode()) == (kid, 12)
    assert str(kid.evolved(2)) == '3.1.2'


def test_key_bundle(rng):
    items = [(VersionedKeyId(1), gen_key(rng)), (VersionedKeyId(2, 5, 1), gen_key(rng, 192))]
    back = unpack_keys(pack_keys(items))
    assert [kid for kid, _ in back] == [kid for kid, _ in items]
    assert [k.material for _, k in back] == [k.material for _, k in items]
    assert unpack_keys(pack_keys([])) == []
