import numpy as np
import pytest

from uveqfed.errors import InvalidInputError
from uveqfed.lattice import (Lattice, estimate_second_moment, nearest_point,
                             preset_lattice, sample_dither)

from helpers import exhaustive_nearest

# Frozen golden from the deterministic construction-time Monte Carlo
# (n = 10^6); the analytic value for this hexagon is 5/27.
HEX_MOMENT_GOLDEN = 0.18514228979038785
HEX_MOMENT_SE = 0.00010856999566530533


def test_preset_generators():
    sc = preset_lattice("scalar")
    assert sc.dimension == 1
    assert sc.matrix[0, 0] == 1.0
    hx = preset_lattice("hex")
    assert hx.dimension == 2
    assert np.linalg.det(hx.matrix) != 0
    # generating vectors (2, 0) and (1, 1/sqrt(3)) as matrix columns
    assert np.allclose(hx.matrix[:, 0], [2.0, 0.0])
    assert np.allclose(hx.matrix[:, 1], [1.0, 1.0 / np.sqrt(3.0)])


def test_hex_preset_is_hexagonal():
    # six minimal vectors of equal length 2/sqrt(3)
    hx = preset_lattice("hex")
    coords = np.array([[a, b] for a in range(-3, 4) for b in range(-4, 5)
                       if (a, b) != (0, 0)])
    norms = np.linalg.norm(coords @ hx.matrix.T, axis=1)
    shortest = norms.min()
    assert shortest == pytest.approx(2.0 / np.sqrt(3.0), rel=1e-12)
    assert np.sum(np.isclose(norms, shortest, rtol=1e-9)) == 6


def test_invalid_generators():
    with pytest.raises(InvalidInputError):
        Lattice([[1.0, 0.0], [2.0, 0.0]])  # singular
    with pytest.raises(InvalidInputError):
        Lattice([[np.inf]])
    with pytest.raises(InvalidInputError):
        Lattice([[1.0]], scale=0.0)


@pytest.mark.parametrize("preset", ["scalar", "hex"])
def test_nearest_matches_exhaustive_search(preset):
    lat = preset_lattice(preset)
    rng = np.random.default_rng(11)
    for _ in range(1000):
        x = rng.normal(0, 2.0, lat.dimension)
        got = lat.nearest_indices(x[None, :])[0]
        want = exhaustive_nearest(lat, x)
        assert np.array_equal(got, want), (x, got, want)


def test_scalar_rounding_examples():
    sc = preset_lattice("scalar")
    assert nearest_point(np.array([0.0]), sc).integer_coords[0] == 0
    assert nearest_point(np.array([0.49]), sc).integer_coords[0] == 0
    assert nearest_point(np.array([0.51]), sc).integer_coords[0] == 1
    # boundary tie resolves to the lexicographically smaller coordinate
    assert nearest_point(np.array([0.5]), sc).integer_coords[0] == 0
    assert nearest_point(np.array([-0.5]), sc).integer_coords[0] == -1


def test_hex_example_vs_grid():
    import itertools
    hx = preset_lattice("hex")
    x = np.array([1.0, 0.3])
    grid = np.array(list(itertools.product(range(-5, 6), repeat=2)))
    d2 = np.square(x - grid @ hx.matrix.T).sum(axis=1)
    want = grid[np.argmin(d2)]
    got = nearest_point(x, hx)
    assert np.array_equal(got.integer_coords, want)
    assert np.allclose(got.real_coords, hx.matrix @ got.integer_coords)


def test_nearest_point_rejects_nonfinite():
    sc = preset_lattice("scalar")
    with pytest.raises(InvalidInputError):
        nearest_point(np.array([np.nan]), sc)
    with pytest.raises(InvalidInputError):
        nearest_point(np.array([1.0, 2.0]), sc)  # wrong length


@pytest.mark.parametrize("preset", ["scalar", "hex"])
def test_dither_membership(preset):
    lat = preset_lattice(preset)
    z = sample_dither(lat, np.random.default_rng(3), size=10_000)
    assert not lat.nearest_indices(z).any()


def test_dither_moments_scalar():
    sc = preset_lattice("scalar")
    n = 100_000
    z = sample_dither(sc, np.random.default_rng(4), size=n)[:, 0]
    se_mean = np.sqrt(1.0 / 12.0 / n)
    assert abs(z.mean()) < 3 * se_mean
    assert abs(z.var() - 1.0 / 12.0) < 0.02 * (1.0 / 12.0)


def test_dither_second_moment_hex_selfconsistent():
    hx = preset_lattice("hex")
    z = sample_dither(hx, np.random.default_rng(5), size=100_000)
    emp = float(np.square(z).sum(axis=1).mean())
    assert abs(emp - hx.second_moment.value) < 0.02 * hx.second_moment.value


def test_estimate_second_moment_scalar():
    sc = preset_lattice("scalar")
    est = estimate_second_moment(sc, 1_000_000, np.random.default_rng(6))
    assert abs(est.value - 1.0 / 12.0) < 3 * est.standard_error
    delta = 0.37
    scaled = Lattice([[1.0]], scale=delta, moment_samples=200_000)
    est2 = scaled.second_moment
    assert abs(est2.value - delta ** 2 / 12.0) < 3 * est2.standard_error


def test_estimate_second_moment_needs_enough_samples():
    sc = preset_lattice("scalar")
    with pytest.raises(InvalidInputError):
        estimate_second_moment(sc, 5000, np.random.default_rng(0))


def test_hex_moment_golden():
    hx = preset_lattice("hex")
    assert hx.second_moment.value == HEX_MOMENT_GOLDEN
    assert hx.second_moment.standard_error == HEX_MOMENT_SE
    # cross-check against the analytic hexagon moment
    assert abs(hx.second_moment.value - 5.0 / 27.0) < 4 * HEX_MOMENT_SE


@pytest.mark.parametrize("preset", ["scalar", "hex"])
def test_quantization_error_law(preset):
    # e = Q(x + z) - z - x is zero-mean with E||e||^2 = sigma^2 for any x.
    lat = preset_lattice(preset)
    rng = np.random.default_rng(7)
    trials = 40_000
    probes = [np.zeros(lat.dimension),
              0.2 * np.ones(lat.dimension),        # inside the basic cell
              17.3 * np.ones(lat.dimension)]       # far outside
    energies = []
    for x in probes:
        z = sample_dither(lat, rng, size=trials)
        y = x[None, :] + z
        err = lat.points_from_indices(lat.nearest_indices(y)) - z - x[None, :]
        se = err.std(axis=0) / np.sqrt(trials)
        assert (np.abs(err.mean(axis=0)) < 4 * se).all()
        energy = float(np.square(err).sum(axis=1).mean())
        assert abs(energy - lat.second_moment.value) < 0.02 * lat.second_moment.value
        energies.append(energy)
    assert max(energies) / min(energies) < 1.03


def test_scale_covariance():
    hx = preset_lattice("hex")
    big = hx.scaled(3.0)
    rng = np.random.default_rng(8)
    x = rng.normal(0, 2, size=(200, 2))
    assert np.array_equal(hx.nearest_indices(x), big.nearest_indices(3.0 * x))


def test_scaled_reuses_moment():
    hx = preset_lattice("hex")
    s = hx.scaled(2.0)
    assert s.second_moment.value == 4.0 * hx.second_moment.value
    assert s.second_moment.sample_count == hx.second_moment.sample_count
