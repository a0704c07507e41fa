"""Rate-matched comparison compressors: QSGD, rotated uniform, masked uniform.

All three share the codec's bit accounting: every encode is audited
against the m*R budget, side values (norms, dynamic ranges, level counts)
are counted, and masks/rotations are regenerated from the shared seed
instead of being transmitted, which is the variant hardest for the
lattice codec to beat.  The rotated and masked schemes round
stochastically, matching the probabilistic quantizers they reproduce.
"""

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import entropy
from .entropy import BitString
from .errors import DecodeError, InvalidInputError, RateInfeasibleError
from .streams import DOMAIN_MASK, DOMAIN_QSGD, DOMAIN_ROTATION, derived_rng

_QSGD_MAX_LEVELS = 65535  # level count travels as a 16-bit field
_QSGD_HEADER_BITS = 48    # 32-bit norm + 16-bit level count


@dataclass(frozen=True)
class BaselineSpec:
    kind: str  # "qsgd" | "rotated" | "masked"
    rate: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("qsgd", "rotated", "masked"):
            raise InvalidInputError(f"unknown baseline kind {self.kind!r}")
        if not self.rate > 0:
            raise InvalidInputError(f"rate must be positive, got {self.rate}")


def _check_finite(h):
    h = np.asarray(h, dtype=float).ravel()
    if h.size < 1 or not np.all(np.isfinite(h)):
        raise InvalidInputError("input vector must be non-empty and finite")
    return h


# ---------------------------------------------------------------------------
# QSGD: norm + stochastic signed level per entry, zig-zag gamma coded.

def _qsgd_signed_levels(h, norm, levels, uniforms):
    if norm == 0.0:
        return np.zeros(h.size, dtype=np.int64)
    a = np.abs(h) * (levels / norm)
    low = np.floor(a)
    q = (low + (uniforms < (a - low))).astype(np.int64)
    return np.where(h < 0, -q, q)


def _qsgd_token_bits(signed_q):
    v = entropy.zigzag_encode(signed_q) + np.uint64(1)
    return int(entropy.gamma_lengths(v).sum())


def qsgd_encode(h, levels, rng):
    """Encode with a fixed level count; layout [32 norm][16 levels][tokens].

    Each entry's token is the gamma code of zigzag(sign * level) + 1.
    """
    h = _check_finite(h)
    levels = int(levels)
    if levels < 1 or levels > _QSGD_MAX_LEVELS:
        raise InvalidInputError(f"level count must be in [1, {_QSGD_MAX_LEVELS}]")
    return _qsgd_pack(h, levels, rng.random(h.size))


def _qsgd_pack(h, levels, uniforms):
    norm32 = np.float32(np.linalg.norm(h))
    signed_q = _qsgd_signed_levels(h, float(norm32), levels, uniforms)
    values = entropy.zigzag_encode(signed_q) + np.uint64(1)
    bits = entropy.gamma_bits(values, prefix=_QSGD_HEADER_BITS)
    header = (int.from_bytes(struct.pack(">f", norm32), "big") << 16) | levels
    for i in range(_QSGD_HEADER_BITS):
        bits[i] = (header >> (_QSGD_HEADER_BITS - 1 - i)) & 1
    return entropy.pack_bits(bits)


def qsgd_decode(bits, count):
    """Inverse of :func:`qsgd_encode`; ``count`` is the vector length."""
    count = int(count)
    if bits.bit_length < _QSGD_HEADER_BITS:
        raise DecodeError("qsgd stream shorter than its header")
    arr = entropy.unpack_bits(bits)
    norm = struct.unpack(">f", bits.data[:4])[0]
    levels = struct.unpack(">H", bits.data[4:6])[0]
    if levels < 1:
        raise DecodeError("qsgd level count must be positive")
    tokens, end = entropy.read_gamma_stream(arr, _QSGD_HEADER_BITS, count)
    if end != bits.bit_length:
        raise DecodeError(f"{bits.bit_length - end} trailing bits in qsgd stream")
    signed_q = entropy.zigzag_decode((tokens - 1).astype(np.uint64))
    return signed_q * (norm / levels)


def _qsgd_bits_bound(h, norm, levels):
    # Expected codeword length plus a six-sigma margin over the rounding
    # randomness.  This is a deterministic function of (h, levels), so the
    # level choice never conditions on the rounding draws and the decoder
    # stays exactly unbiased; the margin makes overflow astronomically
    # rare (a decrement fallback still guarantees the budget).
    if norm == 0.0:
        return float(_QSGD_HEADER_BITS + h.size)
    a = np.abs(h) * (levels / norm)
    low = np.floor(a)
    p = a - low
    q_low = np.where(h < 0, -low, low).astype(np.int64)
    q_high = np.where(h < 0, -(low + 1), low + 1).astype(np.int64)
    len_low = entropy.gamma_lengths(entropy.zigzag_encode(q_low) + np.uint64(1))
    len_high = entropy.gamma_lengths(entropy.zigzag_encode(q_high) + np.uint64(1))
    mean = float(((1.0 - p) * len_low + p * len_high).sum())
    var = float((p * (1.0 - p) * (len_high - len_low) ** 2).sum())
    return _QSGD_HEADER_BITS + mean + 6.0 * math.sqrt(var)


def qsgd_fit_levels(h, rate):
    """Largest level count fitting floor(m * rate) bits with high margin."""
    h = _check_finite(h)
    budget = math.floor(h.size * rate)
    norm32 = float(np.float32(np.linalg.norm(h)))

    def bits_at(levels):
        return _qsgd_bits_bound(h, norm32, levels)

    if bits_at(1) > budget:
        raise RateInfeasibleError(
            f"qsgd needs {bits_at(1):.0f} bits at one level, budget is {budget}")
    lo, hi = 1, _QSGD_MAX_LEVELS
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if bits_at(mid) <= budget:
            lo = mid
        else:
            hi = mid - 1
    while bits_at(lo) > budget:  # token lengths are only near-monotone
        lo -= 1
    return lo


def qsgd_roundtrip(h, rate, master_seed, user_id, round_index):
    """Rate-matched QSGD encode/decode; returns (decoded, bit string)."""
    h = _check_finite(h)
    levels = qsgd_fit_levels(h, rate)
    rng = derived_rng(master_seed, DOMAIN_QSGD, user_id, round_index)
    uniforms = rng.random(h.size)
    budget = math.floor(h.size * rate)
    bits = _qsgd_pack(h, levels, uniforms)
    while bits.bit_length > budget and levels > 1:
        levels -= 1  # six-sigma overflow fallback; effectively unreachable
        bits = _qsgd_pack(h, levels, uniforms)
    if bits.bit_length > budget:
        raise RateInfeasibleError("qsgd codeword exceeds the budget at one level")
    return qsgd_decode(bits, h.size), bits


# ---------------------------------------------------------------------------
# Uniform quantization after a seeded randomized-Hadamard-style rotation.

def fwht(vec):
    """Walsh-Hadamard transform (Sylvester order), unnormalized."""
    a = np.asarray(vec, dtype=float).copy()
    n = a.size
    if n & (n - 1):
        raise InvalidInputError(f"transform length must be a power of two, got {n}")
    h = 1
    while h < n:
        a = a.reshape(-1, 2, h)
        top = a[:, 0, :] + a[:, 1, :]
        bot = a[:, 0, :] - a[:, 1, :]
        a = np.stack((top, bot), axis=1)
        h *= 2
    return a.reshape(n)


def _rotation_rng(master_seed, user_id, round_index):
    return derived_rng(master_seed, DOMAIN_ROTATION, user_id, round_index)


def _rotation_signs(rng, n):
    return rng.integers(0, 2, size=n) * 2.0 - 1.0


def rotate(h, signs):
    """Orthonormal rotation: sign flip then normalized Hadamard transform."""
    n = signs.size
    x = np.zeros(n)
    x[:h.size] = h
    return fwht(signs * x) / math.sqrt(n)


def unrotate(y, signs):
    n = signs.size
    return signs * fwht(y) / math.sqrt(n)


def _rotated_width(count, rate):
    n = 1 << max(0, (count - 1).bit_length())
    budget = math.floor(count * rate)
    # The 64 range bits are counted inside the budget, so at power-of-two
    # lengths the per-entry width lands one below floor(rate).  At the
    # one-bit floor (rate ~ 1) the range words ride above the budget.
    width = min(int(math.floor(rate)), (budget - 64) // n)
    if width < 1 and budget >= n:
        width = 1
    return n, width


def rotated_encode(h, rate, master_seed, user_id, round_index):
    """Layout [32 min][32 max][n fixed-width codes] on the rotated vector."""
    h = _check_finite(h)
    n, width = _rotated_width(h.size, rate)
    if width < 1:
        raise RateInfeasibleError(
            f"rotated quantizer cannot fit {n} entries plus range words in "
            f"{math.floor(h.size * rate)} bits")
    rng = _rotation_rng(master_seed, user_id, round_index)
    signs = _rotation_signs(rng, n)
    y = rotate(h, signs)
    lo = float(np.float32(y.min()))
    hi = float(np.float32(y.max()))
    span = hi - lo
    top = (1 << width) - 1
    if span > 0:
        a = np.clip((y - lo) * (top / span), 0, top)
        low = np.floor(a)
        codes = (low + (rng.random(n) < (a - low))).astype(np.int64)
        codes = np.clip(codes, 0, top)
    else:
        codes = np.zeros(n, dtype=np.int64)
    body = entropy.pack_fixed(codes, width)
    head = struct.pack(">f", np.float32(lo)) + struct.pack(">f", np.float32(hi))
    return BitString(data=head + body.data, bit_length=64 + body.bit_length)


def rotated_decode(bits, count, rate, master_seed, user_id, round_index):
    count = int(count)
    n, width = _rotated_width(count, rate)
    if bits.bit_length != 64 + n * width:
        raise DecodeError(
            f"rotated stream has {bits.bit_length} bits, expected {64 + n * width}")
    lo = struct.unpack(">f", bits.data[:4])[0]
    hi = struct.unpack(">f", bits.data[4:8])[0]
    body = BitString(data=bits.data[8:], bit_length=n * width)
    codes = entropy.unpack_fixed(body, n, width)
    top = (1 << width) - 1
    span = hi - lo
    y = lo + codes * (span / top) if span > 0 else np.full(n, lo)
    # Only the sign prefix of the shared stream is consumed; the encoder's
    # rounding draws come after it and are never needed here.
    signs = _rotation_signs(_rotation_rng(master_seed, user_id, round_index), n)
    return unrotate(y, signs)[:count]


# ---------------------------------------------------------------------------
# Random-mask subsampling followed by a three-bit uniform quantizer.  The
# decoder scales kept entries by 1/p so the subsampling estimator stays
# unbiased; dropped entries decode to zero.

_MASK_QUANT_BITS = 3


def masked_keep_count(length, rate):
    """Entries kept by the mask: fraction rate/3 of the vector, capped at 1."""
    p = min(1.0, rate / _MASK_QUANT_BITS)
    return min(length, int(round(p * length)))


def _mask_rng(master_seed, user_id, round_index):
    return derived_rng(master_seed, DOMAIN_MASK, user_id, round_index)


def masked_encode(h, rate, master_seed, user_id, round_index):
    """Layout [32 min][32 max][3-bit codes for the kept entries]."""
    h = _check_finite(h)
    kept = masked_keep_count(h.size, rate)
    if kept < 1:
        raise RateInfeasibleError(f"mask keeps no entries at rate {rate}")
    rng = _mask_rng(master_seed, user_id, round_index)
    idx = rng.permutation(h.size)[:kept]
    vals = h[idx]
    lo = float(np.float32(vals.min()))
    hi = float(np.float32(vals.max()))
    span = hi - lo
    top = (1 << _MASK_QUANT_BITS) - 1
    if span > 0:
        a = np.clip((vals - lo) * (top / span), 0, top)
        low = np.floor(a)
        codes = (low + (rng.random(kept) < (a - low))).astype(np.int64)
        codes = np.clip(codes, 0, top)
    else:
        codes = np.zeros(kept, dtype=np.int64)
    body = entropy.pack_fixed(codes, _MASK_QUANT_BITS)
    head = struct.pack(">f", np.float32(lo)) + struct.pack(">f", np.float32(hi))
    return BitString(data=head + body.data, bit_length=64 + body.bit_length)


def masked_decode(bits, count, rate, master_seed, user_id, round_index):
    count = int(count)
    kept = masked_keep_count(count, rate)
    if bits.bit_length != 64 + kept * _MASK_QUANT_BITS:
        raise DecodeError(
            f"masked stream has {bits.bit_length} bits, expected "
            f"{64 + kept * _MASK_QUANT_BITS}")
    lo = struct.unpack(">f", bits.data[:4])[0]
    hi = struct.unpack(">f", bits.data[4:8])[0]
    body = BitString(data=bits.data[8:], bit_length=kept * _MASK_QUANT_BITS)
    codes = entropy.unpack_fixed(body, kept, _MASK_QUANT_BITS)
    top = (1 << _MASK_QUANT_BITS) - 1
    span = hi - lo
    vals = lo + codes * (span / top) if span > 0 else np.full(kept, lo)
    out = np.zeros(count)
    idx = _mask_rng(master_seed, user_id, round_index).permutation(count)[:kept]
    out[idx] = vals * (count / kept)
    return out
