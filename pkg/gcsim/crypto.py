"""
crypto: the primitives every scheme in gcsim is built on.

This module defines the key container `SecretKey`, the pseudorandom function family used for key
evolution, an authenticated CPA encryption, key generation and secure erasure. The PRF is evaluated on
exactly two inputs:

    * ``PrfLabel.ENC``  (octet 0x00): f_k(0), the ephemeral key actually used to encrypt under k;
    * ``PrfLabel.NEXT`` (octet 0x01): f_k(1), the value that replaces k when it evolves.

The usual way to use this module is

    >>> import numpy as np
    >>> from gcsim import crypto
    >>> rng = np.random.default_rng(0)
    >>> k = crypto.gen_key(rng)
    >>> kid = crypto.VersionedKeyId(node=7)
    >>> c = crypto.encrypt(crypto.prf_eval(k, crypto.PrfLabel.ENC), b'payload', kid, rng, derived=True)
    >>> crypto.decrypt(crypto.prf_eval(k, crypto.PrfLabel.ENC), c)
    b'payload'

All randomness comes from a numpy ``Generator`` owned by the caller, so a run is reproducible from its seed.
"""

import logging
import struct
from dataclasses import dataclass, replace
from enum import IntEnum

import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, hmac
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .utils import fingerprint, pack_blob, read_blob, read_struct

log = logging.getLogger(__name__)

#: security parameter in bits, used when none is configured
DEFAULT_KAPPA = 128

#: admissible values of kappa (AES key sizes)
KAPPAS = (128, 192, 256)

NONCE_SIZE = 12
TAG_SIZE = 16


class CryptoError(Exception):
    pass


class ErasedKey(CryptoError):
    pass


class DecryptFailure(CryptoError):
    pass


def check_kappa(kappa: int) -> int:
    if kappa not in KAPPAS:
        raise ValueError('kappa must be one of %s, got %r' % (KAPPAS, kappa))
    return kappa


class PrfLabel(IntEnum):
    ENC = 0
    NEXT = 1


class SecretKey:
    """
    kappa-bit key material that can be securely erased.

    Parameters
    ----------
    material : bytes-like
        the key octets; the length fixes kappa (16, 24 or 32 octets)

    Notes
    -----
    Reading `material` after `secure_erase` raises `ErasedKey`. Keys are never shared between parties:
    whoever hands a key to someone else hands over a `copy()`, so that erasing one copy cannot affect
    another party's state.
    """

    __slots__ = ('_material', 'erased')

    def __init__(self, material):
        if len(material) * 8 not in KAPPAS:
            raise ValueError('key material must be %s bits long, got %d octets' % (KAPPAS, len(material)))
        self._material = bytearray(material)
        self.erased = False

    @property
    def material(self) -> bytes:
        if self.erased:
            raise ErasedKey('key has been erased')
        return bytes(self._material)

    @property
    def kappa(self) -> int:
        return 8 * len(self._material)

    def __len__(self):
        return len(self._material)

    def copy(self) -> 'SecretKey':
        return SecretKey(self.material)

    def fingerprint(self) -> str:
        return fingerprint(self.material)

    def hex(self) -> str:
        return self.material.hex()

    def __repr__(self):
        return 'SecretKey(erased)' if self.erased else 'SecretKey(%s)' % self.fingerprint()


@dataclass(frozen=True, order=True)
class VersionedKeyId:
    """
    Names one version of the key held at a tree node.

    Attributes
    ----------
    node : int
        node the key is installed at (heap index for complete-subtree systems, 0 for session keys)
    generation : int
        bumped every time a fresh key is installed at the node
    epoch : int
        number of NEXT evolutions applied since the key was installed
    """
    node: int
    generation: int = 0
    epoch: int = 0

    def evolved(self, steps: int = 1) -> 'VersionedKeyId':
        return replace(self, epoch=self.epoch + steps)

    def same_lineage(self, other: 'VersionedKeyId') -> bool:
        return self.node == other.node and self.generation == other.generation

    def encode(self) -> bytes:
        return struct.pack('>III', self.node, self.generation, self.epoch)

    @classmethod
    def decode(cls, buf: bytes, pos: int = 0):
        (node, generation, epoch), pos = read_struct('>III', buf, pos)
        return cls(node, generation, epoch), pos

    def __str__(self):
        return '%d.%d.%d' % (self.node, self.generation, self.epoch)


@dataclass(frozen=True, order=True)
class KeyRef:
    """A key id plus whether the encryption key is the id's key itself or its ENC derivation."""
    key_id: VersionedKeyId
    derived: bool = False

    @property
    def base(self) -> 'KeyRef':
        return KeyRef(self.key_id, False)

    def encode(self) -> bytes:
        return self.key_id.encode() + struct.pack('>B', int(self.derived))

    @classmethod
    def decode(cls, buf: bytes, pos: int = 0):
        key_id, pos = VersionedKeyId.decode(buf, pos)
        (derived,), pos = read_struct('>B', buf, pos)
        return cls(key_id, bool(derived)), pos

    def __str__(self):
        return str(self.key_id) + ('/enc' if self.derived else '')


@dataclass(frozen=True)
class Ciphertext:
    """
    {z}_w on the wire.

    Encoded as ``key_id ‖ nonce ‖ body ‖ tag``, each length-prefixed. The key id travels in clear and is bound
    to the body as associated data.
    """
    key_id: VersionedKeyId
    nonce: bytes
    body: bytes
    tag: bytes
    derived: bool = False

    @property
    def ref(self) -> KeyRef:
        return KeyRef(self.key_id, self.derived)

    def encode(self) -> bytes:
        return pack_blob(self.ref.encode()) + pack_blob(self.nonce) + pack_blob(self.body) + pack_blob(self.tag)

    @classmethod
    def decode(cls, buf: bytes, pos: int = 0):
        raw_ref, pos = read_blob(buf, pos)
        ref, _ = KeyRef.decode(raw_ref)
        nonce, pos = read_blob(buf, pos)
        body, pos = read_blob(buf, pos)
        tag, pos = read_blob(buf, pos)
        return cls(ref.key_id, nonce, body, tag, ref.derived), pos

    def fingerprint(self) -> str:
        return fingerprint(self.encode())


def gen_key(rng: np.random.Generator, kappa: int = DEFAULT_KAPPA) -> SecretKey:
    """
    Draw a fresh key from the run's random source.

    Parameters
    ----------
    rng : numpy.random.Generator
        the seeded generator owned by the simulation
    kappa : int, optional
        key length in bits (128, 192 or 256)

    Returns
    -------
    SecretKey
    """
    return SecretKey(rng.bytes(check_kappa(kappa) // 8))


def prf_eval(k: SecretKey, label: PrfLabel) -> SecretKey:
    """
    f_k(label): HMAC-SHA256 keyed with k over the one-octet label, truncated to the key width.

    Raises
    ------
    ErasedKey
        if k has been erased
    """
    mac = hmac.HMAC(k.material, hashes.SHA256())
    mac.update(bytes([int(label)]))
    return SecretKey(mac.finalize()[:len(k)])


@dataclass
class PrfMeter:
    """Counts PRF evaluations made on behalf of one party (controller, member, center, receiver)."""
    enc_calls: int = 0
    next_calls: int = 0

    def __call__(self, k: SecretKey, label: PrfLabel) -> SecretKey:
        if label == PrfLabel.ENC:
            self.enc_calls += 1
        else:
            self.next_calls += 1
        return prf_eval(k, label)

    @property
    def total(self) -> int:
        return self.enc_calls + self.next_calls


def encrypt(k: SecretKey, plaintext: bytes, key_id: VersionedKeyId, rng: np.random.Generator,
            derived: bool = False) -> Ciphertext:
    """
    Encrypt `plaintext` under `k` (AES-GCM, fresh nonce from `rng`).

    Parameters
    ----------
    k : SecretKey
        the key actually used; when `derived` is True this is f_w(0) for the key w named by `key_id`
    plaintext : bytes
    key_id : VersionedKeyId
        id of the key w, written on the wire so recipients know which key to use
    rng : numpy.random.Generator
    derived : bool, optional
        whether `k` is the ENC derivation of w rather than w itself

    Returns
    -------
    Ciphertext
        body has the length of the plaintext; the tag is carried separately
    """
    nonce = rng.bytes(NONCE_SIZE)
    ref = KeyRef(key_id, derived)
    sealed = AESGCM(k.material).encrypt(nonce, bytes(plaintext), ref.encode())
    return Ciphertext(key_id, nonce, sealed[:-TAG_SIZE], sealed[-TAG_SIZE:], derived)


def decrypt(k: SecretKey, c: Ciphertext) -> bytes:
    """
    Decrypt `c` with `k`.

    Raises
    ------
    DecryptFailure
        if `k` is not the key `c` was produced under (tag mismatch)
    ErasedKey
        if `k` has been erased
    """
    try:
        return AESGCM(k.material).decrypt(c.nonce, c.body + c.tag, c.ref.encode())
    except InvalidTag:
        log.debug('tag mismatch for ciphertext under %s', c.ref)
        raise DecryptFailure('wrong key for ciphertext under %s' % c.ref) from None


def secure_erase(k: SecretKey) -> None:
    """Overwrite the key octets with zeros and mark the key erased. Idempotent."""
    for i in range(len(k._material)):
        k._material[i] = 0
    k.erased = True


def pack_keys(items) -> bytes:
    """
    Serialize a key bundle: ``count(2B) ‖ (key_id ‖ len(2B) ‖ key)*``.

    Parameters
    ----------
    items : iterable of (VersionedKeyId, SecretKey)
    """
    items = list(items)
    out = struct.pack('>H', len(items))
    for key_id, key in items:
        out += key_id.encode() + pack_blob(key.material)
    return out


def unpack_keys(buf: bytes):
    """Inverse of `pack_keys`; returns a list of (VersionedKeyId, SecretKey)."""
    (count,), pos = read_struct('>H', buf, 0)
    items = []
    for _ in range(count):
        key_id, pos = VersionedKeyId.decode(buf, pos)
        material, pos = read_blob(buf, pos)
        items.append((key_id, SecretKey(material)))
    return items
