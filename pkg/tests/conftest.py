import warnings

import numpy as np
import pytest

from gmtriesz.measure import DiscreteMeasure, generate
from gmtriesz.lattice import Params, build_lattice
from gmtriesz.coeffs import compute_coeffs
import gmtriesz.corona as co


def build_quiet(mu, params, depth):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return build_lattice(mu, params, max_depth=depth)


def forest_of(lat):
    return co.build_top(lat, compute_coeffs(lat))


@pytest.fixture(scope="session")
def seg7():
    return generate("segment", 7)


@pytest.fixture(scope="session")
def seg7_lattice(seg7):
    return build_quiet(seg7, Params(C0=2.0, A0=16.0, n=1), 5)


@pytest.fixture(scope="session")
def cantor4():
    return generate("cantor4corner", 4)


@pytest.fixture(scope="session")
def cantor4_lattice(cantor4):
    return build_quiet(cantor4, Params(C0=2.0, A0=4.0, n=1), 4)


@pytest.fixture(scope="session")
def cantor_line5():
    return generate("cantor_line", 5)


@pytest.fixture(scope="session")
def cantor_line5_lattice(cantor_line5):
    return build_quiet(cantor_line5, Params(C0=2.0, A0=16.0, n=1), 4)


@pytest.fixture(scope="session")
def seg7_forest(seg7_lattice):
    return forest_of(seg7_lattice)


@pytest.fixture(scope="session")
def cantor4_forest(cantor4_lattice):
    return forest_of(cantor4_lattice)


@pytest.fixture(scope="session")
def cline5_forest(cantor_line5_lattice):
    return forest_of(cantor_line5_lattice)


@pytest.fixture(scope="session")
def trivial_forest(seg7):
    # kLambda=8 puts the density-jump threshold above every desk jump,
    # so all stopping families are empty and the forest is one tree
    lat = build_quiet(seg7, Params(C0=2.0, A0=16.0, n=1, kLambda=8), 5)
    return forest_of(lat)


@pytest.fixture(scope="session")
def spike_forest():
    xs = np.linspace(0.0, 1.0, 64)
    w = np.ones(64)
    w[31] = 10.0
    mu = DiscreteMeasure(np.stack([xs, np.zeros(64)], axis=1), w, 1)
    lat = build_quiet(mu, Params(C0=2.0, A0=16.0, n=1), 4)
    return forest_of(lat)


@pytest.fixture(scope="session")
def ld_pure_forest():
    # far light cluster: its whole branch is low-density, so the walk
    # must stop by cause (iii) once the cover is purely low-density
    xs = np.linspace(0.0, 1.0, 64)
    far = np.array([1.90, 1.91, 1.92, 1.93])
    pos = np.concatenate([xs, far])
    w = np.concatenate([np.full(64, 0.25), np.full(4, 1e-5)])
    mu = DiscreteMeasure(np.stack([pos, np.zeros_like(pos)], axis=1), w, 1)
    lat = build_quiet(mu, Params(C0=2.0, A0=16.0, n=1, N0=0, K=1e4), 4)
    return forest_of(lat)


@pytest.fixture(scope="session")
def ld_mix_forest():
    # medium and light sub-clusters inside one coarse cell; the light one
    # alone is low-density, so its siblings receive the spread formula.
    # Needs A0 > 56 so the parent cell is wider than the child's density
    # ball, and a large K so the far heavy block does not trip the
    # localized-transform stop.
    xs = np.linspace(0.0, 1.0, 64)
    med = np.linspace(1.9000, 1.9007, 8)
    lite = 1.9040 + 8e-6 * np.arange(4)
    pos = np.concatenate([xs, med, lite])
    w = np.concatenate([np.full(64, 0.25), np.full(8, 0.0015),
                        np.full(4, 1e-8)])
    mu = DiscreteMeasure(np.stack([pos, np.zeros_like(pos)], axis=1), w, 1)
    lat = build_quiet(mu, Params(C0=2.0, A0=256.0, n=1, N0=0, K=1e5), 2)
    return forest_of(lat)
