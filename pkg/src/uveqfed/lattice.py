"""Lattices, nearest-point quantization, and basic-cell dither sampling.

A lattice is the set of integer linear combinations of the columns of a
non-singular generator matrix.  The quantizer maps a real vector to its
nearest lattice point (ties broken toward lexicographically smallest
integer coordinates, so encoder and decoder agree bit-for-bit), and the
dither sampler produces points uniform on the basic cell, i.e. the
Voronoi region of the origin.
"""

import itertools
import zlib
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import _kernels
from .errors import InvalidInputError

# Generating vectors are the matrix columns.  The hex preset's columns
# (2, 0) and (1, 1/sqrt(3)) span the two-dimensional hexagonal lattice:
# six minimal vectors of equal norm 2/sqrt(3).
PRESET_GENERATORS = {
    "scalar": ((1.0,),),
    "hex": ((2.0, 1.0), (0.0, 1.0 / np.sqrt(3.0))),
}

_MOMENT_SEED = 0x5ECD017


@dataclass(frozen=True)
class SecondMoment:
    """Monte-Carlo estimate of E||z||^2 for z uniform on the basic cell."""

    value: float
    sample_count: int
    standard_error: float


@dataclass(frozen=True)
class LatticePoint:
    integer_coords: np.ndarray
    real_coords: np.ndarray


class Lattice:
    """Immutable lattice with a cached basic-cell second moment.

    Parameters
    ----------
    generator : array_like
        Square non-singular matrix whose columns generate the lattice.
    scale : float
        Positive multiplier applied to the generator.
    moment_samples : int
        Monte-Carlo sample count for the cached second moment.
    """

    def __init__(self, generator, scale=1.0, moment_samples=1_000_000,
                 _moment=None):
        G = np.array(generator, dtype=float)
        if G.ndim != 2 or G.shape[0] != G.shape[1]:
            raise InvalidInputError(f"generator must be square, got shape {G.shape}")
        if not np.all(np.isfinite(G)):
            raise InvalidInputError("generator must be finite")
        if not scale > 0:
            raise InvalidInputError(f"scale must be positive, got {scale}")
        self.generator = G
        self.generator.setflags(write=False)
        self.scale = float(scale)
        self.dimension = G.shape[0]
        self.matrix = self.scale * G
        self.matrix.setflags(write=False)
        det = np.linalg.det(self.matrix)
        if det == 0 or not np.isfinite(det):
            raise InvalidInputError("generator is singular")
        self._inverse = np.linalg.inv(self.matrix)
        # Babai refinement candidates in lexicographic order; first-minimum
        # selection then resolves distance ties toward the smallest integer
        # coordinates.
        self._offsets = np.array(
            list(itertools.product((-1, 0, 1), repeat=self.dimension)),
            dtype=np.int64)
        self._offset_points = np.ascontiguousarray(self._offsets @ self.matrix.T)
        self._offset_sq = np.square(self._offset_points).sum(axis=1)
        self._inverse_t = np.ascontiguousarray(self._inverse.T)
        self._matrix_t = np.ascontiguousarray(self.matrix.T)
        if _moment is not None:
            self.second_moment = _moment
        else:
            rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(
                _MOMENT_SEED, spawn_key=(zlib.crc32(self.matrix.tobytes()),))))
            self.second_moment = estimate_second_moment(self, moment_samples, rng)

    def scaled(self, factor):
        """Lattice with the generator rescaled by ``factor``.

        Reuses the cached second moment, which transforms as factor^2.
        """
        if not factor > 0:
            raise InvalidInputError(f"scale factor must be positive, got {factor}")
        old = self.second_moment
        moment = SecondMoment(value=old.value * factor * factor,
                              sample_count=old.sample_count,
                              standard_error=old.standard_error * factor * factor)
        return Lattice(self.generator, scale=self.scale * factor, _moment=moment)

    def nearest_indices(self, points):
        """Integer coordinates of the nearest lattice point, row-wise.

        ``points`` has shape (n, L).  Exact for the bundled presets:
        Babai rounding followed by exhaustive refinement over the +-1
        integer neighbourhood (3^L candidates).
        """
        points = np.ascontiguousarray(points, dtype=float)
        out = np.empty(points.shape, dtype=np.int64)
        # Candidate scores use ||resid - c||^2 = ||resid||^2 - 2 resid.c
        # + ||c||^2; the common first term drops out of the minimum and
        # its exact ties.
        _kernels.nearest_points(points, self._inverse_t, self._matrix_t,
                                self._offsets, self._offset_points,
                                self._offset_sq, out)
        return out

    def points_from_indices(self, indices):
        """Real coordinates of lattice points given integer coordinates.

        Accepts a single coordinate vector or a stack of rows.
        """
        x = np.ascontiguousarray(indices, dtype=float)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        out = np.empty(x.shape)
        _kernels.apply_matrix_t(x, self._matrix_t, out)
        return out[0] if single else out


@lru_cache(maxsize=None)
def preset_lattice(name, scale=1.0):
    """Construct (and cache) one of the named lattice presets."""
    if name not in PRESET_GENERATORS:
        raise InvalidInputError(
            f"unknown lattice preset {name!r}; choose from {sorted(PRESET_GENERATORS)}")
    return Lattice(PRESET_GENERATORS[name], scale=scale)


def nearest_point(x, lat):
    """Quantize ``x`` to its nearest lattice point.

    Ties on the cell boundary go to the lexicographically smallest
    integer coordinates.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (lat.dimension,):
        raise InvalidInputError(
            f"expected vector of length {lat.dimension}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("input vector must be finite")
    l = lat.nearest_indices(x[None, :])[0]
    return LatticePoint(integer_coords=l, real_coords=lat.points_from_indices(l))


def sample_dither(lat, rng, size=None):
    """Draw dither vectors uniform on the basic cell.

    A draw is uniform on the fundamental parallelepiped (the image of
    [-1/2, 1/2)^L under the scaled generator) and then reduced modulo the
    lattice, which maps it onto the Voronoi region of the origin without
    rejection.  Each vector consumes exactly L uniforms from ``rng``, so
    counter-derived streams stay aligned.
    """
    n = 1 if size is None else int(size)
    u = rng.random((n, lat.dimension)) - 0.5
    z = dither_from_uniforms(lat, u)
    return z[0] if size is None else z


def dither_from_uniforms(lat, u):
    """Map uniform draws on [-1/2, 1/2)^L to basic-cell dither vectors."""
    u = np.ascontiguousarray(u, dtype=float)
    para = np.empty(u.shape)
    _kernels.apply_matrix_t(u, lat._matrix_t, para)
    return para - lat.points_from_indices(lat.nearest_indices(para))


def estimate_second_moment(lat, n, rng):
    """Monte-Carlo estimate of the basic-cell second moment E||z||^2."""
    n = int(n)
    if n < 10_000:
        raise InvalidInputError(f"need at least 10^4 samples, got {n}")
    total = 0.0
    total_sq = 0.0
    chunk = 200_000
    done = 0
    while done < n:
        take = min(chunk, n - done)
        z = sample_dither(lat, rng, size=take)
        sq = np.square(z).sum(axis=1)
        total += float(sq.sum())
        total_sq += float(np.square(sq).sum())
        done += take
    mean = total / n
    var = max(total_sq / n - mean * mean, 0.0)
    return SecondMoment(value=mean, sample_count=n,
                        standard_error=float(np.sqrt(var / n)))
