"""Subtractive dithered lattice codec for model updates.

Encoding: the update is normalized by zeta times its norm, zero-padded to
a multiple of the lattice dimension and split into sub-vectors; each
sub-vector is dithered with a shared-seed draw uniform on the basic cell
and quantized to the nearest lattice point; the resulting points are
entropy coded.  Decoding regenerates the same dither from the shared
seed, subtracts it from the decoded lattice points, and undoes the
partitioning and normalization.

Lattice points are coded by their rank in the distance-then-lex
enumeration of the lattice, with the rank itself Elias-gamma coded.  In
one dimension this reproduces zig-zag-then-gamma integer coding exactly
(0, -1, +1, -2, +2, ...); in higher dimensions it is the same rule
applied to whole points, so one code symbol covers L coordinates.
Points outside the enumeration table (rare overload outliers) escape to
per-coordinate zig-zag gamma codes.

The norm side value travels as a 12-bit uniform code and the lattice
scale chosen by the rate search as a 16-bit geometric-grid code; both are
counted against the bit budget.  A seed or round mismatch between encoder
and decoder is undetectable by construction: decoding succeeds but the
subtracted dither is wrong, so the error statistics silently break.
"""

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import _kernels, entropy
from .entropy import BitString
from .errors import DecodeError, InvalidInputError, RateInfeasibleError
from .lattice import Lattice, dither_from_uniforms, preset_lattice
from .streams import dither_uniforms

ZETA_THREE_SIGMA = "3/sqrt(M)"
ZETA_RATE_ADAPTIVE = "(2+R/5)/sqrt(M)"

SCALE_CODE_BITS = 16
_SCALE_CODES = 1 << SCALE_CODE_BITS
SCALE_CODE_NEUTRAL = _SCALE_CODES // 2  # multiplier exactly 1.0
_SCALE_LOG_SPAN = 28.0  # grid covers multipliers 2^-14 .. 2^+14

# Side information charged to every codeword: 16-bit scale + 12-bit norm.
HEADER_BITS = SCALE_CODE_BITS + entropy.NORM_CODE_BITS


def scale_from_code(code):
    """Geometric 16-bit scale grid; code 32768 is exactly 1."""
    if not 0 <= code < _SCALE_CODES:
        raise DecodeError(f"scale code {code} out of range")
    return float(np.exp2((code - SCALE_CODE_NEUTRAL) * (_SCALE_LOG_SPAN / _SCALE_CODES)))


def resolve_zeta(zeta, rate, num_blocks):
    """Resolve a zeta rule (fixed number or named rule) to a value."""
    if isinstance(zeta, str):
        if zeta == ZETA_THREE_SIGMA:
            value = 3.0 / math.sqrt(num_blocks)
        elif zeta == ZETA_RATE_ADAPTIVE:
            if rate is None:
                raise InvalidInputError(
                    f"zeta rule {zeta!r} needs a configured rate")
            value = (2.0 + rate / 5.0) / math.sqrt(num_blocks)
        else:
            raise InvalidInputError(f"unknown zeta rule {zeta!r}")
    else:
        value = float(zeta)
    if not value > 0:
        raise InvalidInputError(f"resolved zeta must be positive, got {value}")
    return value


RICE_PARAM_BITS = 5
_RICE_PARAM_MAX = 24
_RICE_CHUNK = 32  # blocks per Rice parameter


class RankCoder:
    """Distance-then-lex enumeration of lattice points for entropy coding.

    In one dimension the rank sequence 0, -1, +1, -2, +2, ... is exactly
    the zig-zag map, and ranks are Elias-gamma coded, reproducing plain
    zig-zag/gamma integer coding bit for bit.  For L >= 2 one rank symbol
    covers a whole L-dimensional point; because ranks of bell-shaped
    sources are close to geometric, they are Rice coded with a parameter
    chosen per 32-block chunk (first one absolute in five bits, the rest
    as zig-zag gamma deltas), which lets the code track a locally varying
    scale.  The enumeration table covers a coordinate box around the
    origin; points outside the box (rare overload outliers) take an
    escape symbol followed by per-coordinate zig-zag gamma codes.
    """

    def __init__(self, lat, box=None):
        dim = lat.dimension
        if box is None:
            box = {1: 4096, 2: 128}.get(dim, int(round(4096 ** (1.0 / dim))))
        self.box = int(box)
        self.dim = dim
        self.use_rice = dim >= 2
        side = 2 * self.box + 1
        coords = np.array(list(itertools.product(range(-self.box, self.box + 1),
                                                 repeat=dim)), dtype=np.int64)
        reals = coords @ lat.matrix.T
        d2 = np.square(reals).sum(axis=1)
        order = np.lexsort(tuple(coords[:, j] for j in range(dim - 1, -1, -1)) + (d2,))
        self.coords_by_rank = np.ascontiguousarray(coords[order])
        self.num_ranks = len(order)
        self.escape = self.num_ranks
        grid = np.empty(side ** dim, dtype=np.int64)
        strides = side ** np.arange(dim - 1, -1, -1)
        grid[(self.coords_by_rank + self.box) @ strides] = np.arange(self.num_ranks)
        self._grid = grid
        self._strides = strides

    def ranks(self, idx):
        """Rank of each coordinate row; out-of-table rows get the escape value."""
        idx = np.asarray(idx, dtype=np.int64)
        out = np.full(len(idx), self.escape, dtype=np.int64)
        inbox = (np.abs(idx) <= self.box).all(axis=1)
        if inbox.any():
            flat = (idx[inbox] + self.box) @ self._strides
            out[inbox] = self._grid[flat]
        return out

    def _chunk_rice_params(self, ranks):
        """Per-chunk Rice parameters, their token bits, and header bits."""
        v = ranks.astype(np.uint64)
        bounds = np.arange(0, len(ranks), _RICE_CHUNK)
        per_k = np.empty((_RICE_PARAM_MAX + 1, len(bounds)), dtype=np.int64)
        for k in range(_RICE_PARAM_MAX + 1):
            per_k[k] = np.add.reduceat(entropy.rice_lengths(v, k), bounds)
        ks = np.argmin(per_k, axis=0)
        main = int(per_k[ks, np.arange(len(bounds))].sum())
        header = RICE_PARAM_BITS
        if len(ks) > 1:
            deltas = entropy.zigzag_encode(np.diff(ks)) + np.uint64(1)
            header += int(entropy.gamma_lengths(deltas).sum())
        return ks, main, header

    def _escape_extra(self, idx, esc_rows):
        zz = entropy.zigzag_encode(idx[esc_rows].ravel()) + np.uint64(1)
        return int(entropy.gamma_lengths(zz).sum())

    def code_length(self, idx):
        """Payload bit length for the given coordinate rows."""
        idx = np.asarray(idx, dtype=np.int64)
        ranks = self.ranks(idx)
        if not ranks.any():
            return 1
        esc_rows = np.flatnonzero(ranks == self.escape)
        extra = self._escape_extra(idx, esc_rows) if esc_rows.size else 0
        if self.use_rice:
            _, main, header = self._chunk_rice_params(ranks)
            return 1 + header + main + extra
        main = int(entropy.gamma_lengths(ranks.astype(np.uint64) + np.uint64(1)).sum())
        return 1 + main + extra

    def encode(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        ranks = self.ranks(idx)
        if not ranks.any():
            return entropy.pack_bits(np.zeros(1, dtype=np.uint8))
        parts = [np.ones(1, dtype=np.uint8)]
        if self.use_rice:
            ks, _, _ = self._chunk_rice_params(ranks)
            for c, k in enumerate(ks):
                if c == 0:
                    parts.append(np.array(
                        [(int(k) >> (RICE_PARAM_BITS - 1 - j)) & 1
                         for j in range(RICE_PARAM_BITS)], dtype=np.uint8))
                else:
                    delta = entropy.zigzag_encode([int(k) - int(ks[c - 1])]) + np.uint64(1)
                    parts.append(entropy.gamma_bits(delta))
                lo, hi = c * _RICE_CHUNK, min((c + 1) * _RICE_CHUNK, len(ranks))
                parts.extend(self._emit_run(ranks, idx, lo, hi,
                                            lambda s, k=int(k): entropy.rice_bits(
                                                s.astype(np.uint64), k)))
        else:
            parts.extend(self._emit_run(
                ranks, idx, 0, len(ranks),
                lambda s: entropy.gamma_bits(s.astype(np.uint64) + np.uint64(1))))
        return entropy.pack_bits(np.concatenate(parts))

    def _emit_run(self, ranks, idx, lo, hi, emit):
        """Token bits for blocks [lo, hi), escapes interleaved in place."""
        esc_rows = lo + np.flatnonzero(ranks[lo:hi] == self.escape)
        parts, prev = [], lo
        for i in esc_rows:
            parts.append(emit(ranks[prev:i + 1]))  # includes the escape symbol
            parts.append(entropy.gamma_bits(entropy.zigzag_encode(idx[i]) + np.uint64(1)))
            prev = i + 1
        if prev < hi:
            parts.append(emit(ranks[prev:hi]))
        return parts

    def decode(self, bs, count):
        count = int(count)
        if bs.bit_length < 1:
            raise DecodeError("empty payload")
        bits = entropy.unpack_bits(bs)
        if bits[0] == 0:
            if bs.bit_length != 1:
                raise DecodeError("all-zero payload must be exactly one bit")
            return np.zeros((count, self.dim), dtype=np.int64)
        out = np.empty((count, self.dim), dtype=np.int64)
        status, pos = _kernels.rank_stream(
            bits, self.dim, self.use_rice, _RICE_CHUNK, RICE_PARAM_BITS,
            _RICE_PARAM_MAX, self.num_ranks, self.coords_by_rank, out)
        if status != _kernels.STATUS_OK:
            raise DecodeError(f"{_kernels.STATUS_MESSAGES[status]} at bit {pos}")
        if pos != bs.bit_length:
            raise DecodeError(f"{bs.bit_length - pos} trailing payload bits")
        return out


@dataclass(frozen=True)
class UVeQFedConfig:
    """Codec configuration shared verbatim by encoder and decoder.

    ``lattice`` names a preset; ``generator`` (row-major tuple of tuples)
    overrides it for arbitrary lattices.  ``rate`` is the bit budget per
    model entry; with ``rate_constrained=False`` the lattice keeps its
    base scale and no budget is enforced (used by the distortion-law
    validators, which pin the scale).
    """

    lattice: str = "hex"
    base_scale: float = 1.0
    zeta: object = ZETA_RATE_ADAPTIVE
    rate: float | None = 4.0
    master_seed: int = 0
    norm_rms_cap: float = 1.0
    rate_constrained: bool = True
    generator: tuple | None = None

    def __post_init__(self):
        if self.rate is not None and not self.rate > 0:
            raise InvalidInputError(f"rate must be positive, got {self.rate}")
        if self.rate_constrained and self.rate is None:
            raise InvalidInputError("rate-constrained codec needs a rate")
        if not self.norm_rms_cap > 0:
            raise InvalidInputError("norm_rms_cap must be positive")


@dataclass(frozen=True)
class EncodedUpdate:
    """One user's quantized update plus the side values needed to decode it."""

    payload: BitString
    norm_code: int
    scale_code: int
    num_blocks: int
    padded_length: int
    length: int
    overload_fraction: float = field(default=0.0, compare=False)

    @property
    def is_zero_update(self):
        return self.payload.bit_length == 0 and self.norm_code == 0

    @property
    def scale_multiplier(self):
        return scale_from_code(self.scale_code)

    @property
    def total_bits(self):
        return self.payload.bit_length + HEADER_BITS

    def to_bytes(self):
        """Logging layout: [16-bit scale][12-bit norm][32-bit bitLength][payload]."""
        header = (self.scale_code << 44) | (self.norm_code << 32) | self.payload.bit_length
        return (header << 4).to_bytes(8, "big") + self.payload.data

    @classmethod
    def from_bytes(cls, raw, length, lattice_dim):
        if len(raw) < 8:
            raise DecodeError("encoded update header truncated")
        header = int.from_bytes(raw[:8], "big") >> 4
        scale_code = header >> 44
        norm_code = (header >> 32) & 0xFFF
        bit_length = header & 0xFFFFFFFF
        payload = BitString._checked(raw[8:], bit_length)
        num_blocks = -(-length // lattice_dim)
        return cls(payload=payload, norm_code=norm_code, scale_code=scale_code,
                   num_blocks=num_blocks, padded_length=num_blocks * lattice_dim,
                   length=length)


class UVeQFedCodec:
    """Stateful wrapper binding a config to its lattice, coder and streams."""

    def __init__(self, cfg):
        self.cfg = cfg
        if cfg.generator is not None:
            self.base = Lattice(np.array(cfg.generator, dtype=float),
                                scale=cfg.base_scale)
        else:
            self.base = preset_lattice(cfg.lattice, cfg.base_scale)
        self.dim = self.base.dimension
        self.coder = RankCoder(self.base)

    def num_blocks(self, length):
        return -(-length // self.dim)

    def zeta_for(self, length):
        return resolve_zeta(self.cfg.zeta, self.cfg.rate, self.num_blocks(length))

    def norm_cap(self, length, zeta):
        return 2.0 * zeta * math.sqrt(length) * self.cfg.norm_rms_cap

    def base_dither(self, user_id, round_index, num_blocks):
        """Shared-seed dither for the unit-multiplier lattice, one row per block."""
        u = dither_uniforms(self.cfg.master_seed, user_id, round_index,
                            num_blocks, self.dim)
        return dither_from_uniforms(self.base, u)

    def applied_second_moment(self, scale_code):
        """Basic-cell second moment of the lattice actually used."""
        mult = scale_from_code(scale_code)
        return self.base.second_moment.value * mult * mult

    def rate_search(self, blocks, dither, budget_bits):
        """Smallest scale-grid code whose codeword fits the budget.

        Coarser lattices (larger multipliers) produce fewer bits, so the
        leftmost feasible code is found by bisection over the 16-bit grid.
        """
        def bits_at(code):
            mult = scale_from_code(code)
            idx = self.base.nearest_indices(blocks / mult + dither)
            return self.coder.code_length(idx) + HEADER_BITS

        if bits_at(_SCALE_CODES - 1) > budget_bits:
            raise RateInfeasibleError(
                f"budget of {budget_bits} bits unattainable even at the "
                f"coarsest lattice scale")
        lo, hi = 0, _SCALE_CODES - 1
        while lo < hi:
            mid = (lo + hi) // 2
            if bits_at(mid) <= budget_bits:
                hi = mid
            else:
                lo = mid + 1
        # The code length is only near-monotone in the scale; walk up
        # until the budget provably holds (terminates: the top is feasible).
        code = lo
        while bits_at(code) > budget_bits:
            code += 1
        return code

    def encode(self, h, user_id, round_index):
        h = np.asarray(h, dtype=float).ravel()
        if h.size < 1:
            raise InvalidInputError("update vector must have at least one entry")
        if not np.all(np.isfinite(h)):
            raise InvalidInputError("update vector must be finite")
        m = h.size
        num_blocks = self.num_blocks(m)
        padded = num_blocks * self.dim
        zeta = resolve_zeta(self.cfg.zeta, self.cfg.rate, num_blocks)
        constrained = self.cfg.rate_constrained and self.cfg.rate is not None
        budget = math.floor(m * self.cfg.rate) if constrained else None
        if budget is not None and budget < HEADER_BITS + 1:
            raise RateInfeasibleError(
                f"budget of {budget} bits cannot carry the {HEADER_BITS}-bit header")
        if not h.any():
            return EncodedUpdate(payload=BitString(data=b"", bit_length=0),
                                 norm_code=0, scale_code=SCALE_CODE_NEUTRAL,
                                 num_blocks=num_blocks, padded_length=padded,
                                 length=m)
        nu = zeta * float(np.linalg.norm(h))
        norm_code = entropy.quantize_norm(nu, self.norm_cap(m, zeta))
        padded_h = np.zeros(padded)
        padded_h[:m] = h / nu
        blocks = padded_h.reshape(num_blocks, self.dim)
        overload = float(np.mean(np.square(blocks).sum(axis=1) > 1.0))
        dither = self.base_dither(user_id, round_index, num_blocks)
        if constrained:
            scale_code = self.rate_search(blocks, dither, budget)
        else:
            scale_code = SCALE_CODE_NEUTRAL
        mult = scale_from_code(scale_code)
        indices = self.base.nearest_indices(blocks / mult + dither)
        payload = self.coder.encode(indices)
        if budget is not None and payload.bit_length + HEADER_BITS > budget:
            raise RateInfeasibleError("rate search produced an oversized codeword")
        return EncodedUpdate(payload=payload, norm_code=norm_code,
                             scale_code=scale_code, num_blocks=num_blocks,
                             padded_length=padded, length=m,
                             overload_fraction=overload)

    def decode(self, enc, user_id, round_index):
        m = enc.length
        if enc.is_zero_update:
            return np.zeros(m)
        zeta = resolve_zeta(self.cfg.zeta, self.cfg.rate, enc.num_blocks)
        nu_hat = entropy.dequantize_norm(enc.norm_code, self.norm_cap(m, zeta))
        coords = self.coder.decode(enc.payload, enc.num_blocks)
        dither = self.base_dither(user_id, round_index, enc.num_blocks)
        mult = scale_from_code(enc.scale_code)
        recon = mult * (self.base.points_from_indices(coords) - dither)
        return nu_hat * recon.ravel()[:m]


@lru_cache(maxsize=64)
def _codec_for(cfg):
    return UVeQFedCodec(cfg)


def encode(h, cfg, user_id, round_index):
    """Encode a model update under ``cfg`` (functional form)."""
    return _codec_for(cfg).encode(h, user_id, round_index)


def decode(enc, cfg, user_id, round_index):
    """Decode an update produced by :func:`encode` with identical arguments."""
    return _codec_for(cfg).decode(enc, user_id, round_index)
