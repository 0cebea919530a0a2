"""
utils: small helpers shared by the wire codecs and the trace writer.

Everything on the wire is big-endian. Variable-length fields are prefixed with
their length as an unsigned 16-bit integer; user names carry a one-octet length.
"""

import hashlib
import re
import struct


def pack_blob(data: bytes) -> bytes:
    """Length-prefix an octet string (2-byte big-endian length)."""
    if len(data) > 0xFFFF:
        raise ValueError('field too long for a 16-bit length prefix: %d octets' % len(data))
    return struct.pack('>H', len(data)) + bytes(data)


def read_blob(buf: bytes, pos: int):
    """Inverse of `pack_blob`. Returns the field and the position after it."""
    (size,), pos = read_struct('>H', buf, pos)
    end = pos + size
    if end > len(buf):
        raise ValueError('truncated field at offset %d' % pos)
    return bytes(buf[pos:end]), end


def read_struct(fmt: str, buf: bytes, pos: int):
    size = struct.calcsize(fmt)
    if pos + size > len(buf):
        raise ValueError('truncated message at offset %d' % pos)
    return struct.unpack_from(fmt, buf, pos), pos + size


def pack_name(name: str) -> bytes:
    raw = name.encode('ascii')
    if len(raw) > 0xFF:
        raise ValueError('user token too long: %r' % name)
    return struct.pack('>B', len(raw)) + raw


def read_name(buf: bytes, pos: int):
    (size,), pos = read_struct('>B', buf, pos)
    return bytes(buf[pos:pos + size]).decode('ascii'), pos + size


def fingerprint(data: bytes) -> str:
    """First 8 lowercase hex digits of the SHA-256 of `data`."""
    return hashlib.sha256(bytes(data)).hexdigest()[:8]


def ceil_log(n: int, base: int) -> int:
    """
    Smallest integer h with base**h >= n (0 for n <= 1).

    Computed with integers so that exact powers do not suffer from float rounding.

    Examples
    --------
    >>> ceil_log(8, 3)
    2
    >>> ceil_log(9, 3)
    2
    >>> ceil_log(10, 3)
    3
    """
    h, reach = 0, 1
    while reach < n:
        reach *= base
        h += 1
    return h


def natural_key(token: str):
    """Sort key that puts u2 before u10."""
    return [int(part) if part.isdigit() else part for part in re.split(r'(\d+)', str(token))]


def log2_exact(n: int) -> int:
    """log2 of a power of two; ValueError otherwise."""
    if n < 1 or n & (n - 1):
        raise ValueError('%r is not a power of 2' % n)
    return n.bit_length() - 1
