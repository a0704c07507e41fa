"""Bit-exact lossless coding of integer coordinate sequences.

The primitive is an Elias-gamma stream over positive integers; on top of
it, integer blocks are zig-zag mapped and coded one symbol per value,
with a single leading flag bit that short-circuits all-zero blocks so
degenerate inputs compress below one bit per symbol.  Everything here is
parameter-free, prefix-free and deterministic: identical inputs yield
identical bit strings on every platform.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import DecodeError, InvalidInputError

# Keeps floor(log2) exact under float64 conversion.
_MAX_MAGNITUDE = 1 << 40


@dataclass(frozen=True)
class BitString:
    """Packed bits; ``bit_length`` is authoritative, pad bits are zero."""

    data: bytes
    bit_length: int

    def to_bytes(self):
        """Serialize with a little-endian 32-bit bit-length header."""
        return struct.pack("<I", self.bit_length) + self.data

    @classmethod
    def from_bytes(cls, raw):
        if len(raw) < 4:
            raise DecodeError("bit string header truncated")
        (bit_length,) = struct.unpack("<I", raw[:4])
        return cls._checked(raw[4:], bit_length)

    @classmethod
    def _checked(cls, data, bit_length):
        nbytes = (bit_length + 7) // 8
        if len(data) != nbytes:
            raise DecodeError(
                f"bit string has {len(data)} bytes, expected {nbytes} for "
                f"{bit_length} bits")
        if bit_length % 8 and data and data[-1] & ((1 << (8 - bit_length % 8)) - 1):
            raise DecodeError("nonzero pad bits")
        return cls(data=data, bit_length=bit_length)


def zigzag_encode(values):
    values = np.asarray(values, dtype=np.int64)
    return np.where(values >= 0, 2 * values, -2 * values - 1).astype(np.uint64)


def zigzag_decode(codes):
    codes = np.asarray(codes, dtype=np.uint64)
    half = (codes >> np.uint64(1)).astype(np.int64)
    return np.where(codes & np.uint64(1), -half - 1, half)


def _floor_log2(v):
    # frexp gives the exact exponent for integers below 2**53.
    _, exp = np.frexp(np.asarray(v).astype(np.float64))
    return (exp - 1).astype(np.int64)


def gamma_lengths(values):
    """Code length of each positive integer under Elias-gamma."""
    v = np.asarray(values, dtype=np.uint64)
    return 2 * _floor_log2(v) + 1


def gamma_bits(values, prefix=0):
    """Bit array of the concatenated gamma codes, with ``prefix`` lead zeros."""
    v = np.asarray(values, dtype=np.uint64)
    if v.size and (int(v.min()) < 1 or int(v.max()) >= 2 * _MAX_MAGNITUDE):
        raise InvalidInputError("gamma values must be in [1, 2^41)")
    n = _floor_log2(v)
    lengths = 2 * n + 1
    starts = np.empty(v.size, dtype=np.int64)
    if v.size:
        starts[0] = prefix
        np.cumsum(lengths[:-1], out=starts[1:])
        starts[1:] += prefix
    total = prefix + int(lengths.sum())
    bits = np.zeros(total, dtype=np.uint8)
    value_starts = starts + n
    for j in range(int(n.max()) + 1 if v.size else 0):
        mask = n >= j
        pos = value_starts[mask] + j
        bits[pos] = ((v[mask] >> (n[mask] - j).astype(np.uint64)) & np.uint64(1)).astype(np.uint8)
    return bits


def rice_lengths(values, k):
    """Code length of each non-negative integer under Rice with parameter k."""
    v = np.asarray(values, dtype=np.uint64)
    return (v >> np.uint64(k)).astype(np.int64) + 1 + k


def rice_bits(values, k, prefix=0):
    """Concatenated Rice codes: quotient zeros, a one, then k remainder bits."""
    v = np.asarray(values, dtype=np.uint64)
    if v.size and int(v.max()) >= 2 * _MAX_MAGNITUDE:
        raise InvalidInputError("rice values must be below 2^41")
    q = (v >> np.uint64(k)).astype(np.int64)
    lengths = q + 1 + k
    starts = np.empty(v.size, dtype=np.int64)
    if v.size:
        starts[0] = prefix
        np.cumsum(lengths[:-1], out=starts[1:])
        starts[1:] += prefix
    total = prefix + int(lengths.sum())
    bits = np.zeros(total, dtype=np.uint8)
    bits[starts + q] = 1
    for j in range(k):
        pos = starts + q + 1 + j
        bits[pos] = ((v >> np.uint64(k - 1 - j)) & np.uint64(1)).astype(np.uint8)
    return bits


def pack_bits(bits):
    """Pack a 0/1 array into a BitString (MSB-first within bytes)."""
    bits = np.asarray(bits, dtype=np.uint8)
    return BitString(data=np.packbits(bits).tobytes() if bits.size else b"",
                     bit_length=int(bits.size))


def unpack_bits(bs):
    if len(bs.data) * 8 < bs.bit_length:
        raise DecodeError("bit string shorter than declared length")
    return np.unpackbits(np.frombuffer(bs.data, dtype=np.uint8))[:bs.bit_length]


def read_gamma_stream(bits, pos, count):
    """Read ``count`` gamma values (each >= 1) starting at bit ``pos``.

    Returns (values, end position); raises DecodeError on malformed input.
    """
    out = np.empty(int(count), dtype=np.int64)
    status, end = _kernels.gamma_stream(bits, int(pos), out)
    if status != _kernels.STATUS_OK:
        raise DecodeError(f"{_kernels.STATUS_MESSAGES[status]} at bit {end}")
    return out, int(end)


def _as_int_coords(coords):
    arr = np.asarray(coords)
    if arr.ndim != 1:
        arr = arr.ravel()
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.isfinite(arr)) or np.any(arr != np.round(arr)):
            raise InvalidInputError("coordinates must be finite integers")
        arr = arr.astype(np.int64)
    arr = arr.astype(np.int64)
    if arr.size and int(np.max(np.abs(arr))) >= _MAX_MAGNITUDE:
        raise InvalidInputError("coordinate magnitude exceeds 2^40")
    return arr


def codeword_length(coords):
    """Bit length of ``encode_indices(coords)`` without materializing it."""
    arr = _as_int_coords(coords)
    if arr.size == 0 or not arr.any():
        return 1
    return 1 + int(gamma_lengths(zigzag_encode(arr) + np.uint64(1)).sum())


def encode_indices(coords):
    """Losslessly code a block of integers into a BitString.

    Layout: one flag bit (0 = all-zero block, nothing follows), then the
    Elias-gamma code of zigzag(value) + 1 for each integer.
    """
    arr = _as_int_coords(coords)
    if arr.size == 0 or not arr.any():
        return pack_bits(np.zeros(1, dtype=np.uint8))
    bits = gamma_bits(zigzag_encode(arr) + np.uint64(1), prefix=1)
    bits[0] = 1
    return pack_bits(bits)


def decode_indices(bs, count):
    """Exact inverse of :func:`encode_indices` for a block of ``count`` ints."""
    count = int(count)
    if bs.bit_length < 1:
        raise DecodeError("empty bit string")
    bits = unpack_bits(bs)
    if bits[0] == 0:
        if bs.bit_length != 1:
            raise DecodeError("all-zero block must be exactly one bit")
        return np.zeros(count, dtype=np.int64)
    values, end = read_gamma_stream(bits, 1, count)
    if end != bs.bit_length:
        raise DecodeError(f"{bs.bit_length - end} trailing bits after last symbol")
    return zigzag_decode((values - 1).astype(np.uint64))


def pack_fixed(values, width):
    """Pack non-negative ints into ``width``-bit fields (MSB first)."""
    values = np.asarray(values, dtype=np.uint64)
    width = int(width)
    if width < 1 or width > 32:
        raise InvalidInputError(f"field width must be in [1, 32], got {width}")
    if values.size and int(values.max()) >> width:
        raise InvalidInputError("value does not fit the field width")
    shifts = np.arange(width - 1, -1, -1, dtype=np.uint64)
    bits = ((values[:, None] >> shifts[None, :]) & np.uint64(1)).astype(np.uint8)
    return pack_bits(bits.ravel())


def unpack_fixed(bs, count, width):
    count, width = int(count), int(width)
    if bs.bit_length != count * width:
        raise DecodeError(
            f"expected {count * width} bits for {count} x {width}-bit fields, "
            f"got {bs.bit_length}")
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    bits = unpack_bits(bs)
    weights = (np.uint64(1) << np.arange(width - 1, -1, -1, dtype=np.uint64))
    return (bits.reshape(count, width).astype(np.uint64) @ weights).astype(np.int64)


# 12-bit uniform scalar code for the update-norm side value.

NORM_CODE_BITS = 12
_NORM_LEVELS = 1 << NORM_CODE_BITS


def quantize_norm(value, cap):
    """Map a non-negative scalar to its 12-bit uniform code over [0, cap]."""
    if not cap > 0:
        raise InvalidInputError(f"norm cap must be positive, got {cap}")
    if not np.isfinite(value) or value < 0:
        raise InvalidInputError(f"norm must be finite and non-negative, got {value}")
    return int(min(int(value * _NORM_LEVELS / cap), _NORM_LEVELS - 1))


def dequantize_norm(code, cap):
    """Midpoint reconstruction of a 12-bit norm code."""
    if not 0 <= code < _NORM_LEVELS:
        raise DecodeError(f"norm code {code} out of range")
    return (code + 0.5) * cap / _NORM_LEVELS
