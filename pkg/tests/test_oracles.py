import math

import numpy as np
import pytest

from parapot import oracles
from parapot.adaptree import AdaptiveTree, TreeField, build_adaptive, sample_function

from helpers import band_limited


def test_direct_transform_of_constant_and_cosine():
    tree = AdaptiveTree.uniform(2)
    x, y = np.random.default_rng(0).uniform(-0.5, 0.5, (2, 10))
    one = TreeField(tree, np.ones((len(tree), 1, 8, 8)))
    assert np.max(np.abs(oracles.direct_gauss_transform(one, 1e-3, x, y) - 1)) < 1e-12
    f = lambda X, Y: np.cos(2 * np.pi * X)
    cos = TreeField(AdaptiveTree.uniform(3), sample_function(f, AdaptiveTree.uniform(3), 8))
    delta = 2e-3
    ref = math.exp(-(math.pi**2) * delta) * f(x, y)
    assert np.max(np.abs(oracles.direct_gauss_transform(cos, delta, x, y)[0] - ref)) < 1e-11


def test_direct_transform_matches_multiplier_on_band_limited_field():
    f = band_limited(5, nmax=3)
    u = build_adaptive(f, 1e-13)
    delta = 5e-3
    x, y = np.random.default_rng(1).uniform(-0.5, 0.5, (2, 8))
    M = 16
    g = oracles.UniformGridField.from_function(f, M).vals[0]
    c = np.fft.fft2(g) / M**2
    n = np.fft.fftfreq(M, 1.0 / M)
    n1, n2 = np.meshgrid(n, n, indexing="ij")
    c = c * np.exp(-(math.pi**2) * delta * (n1**2 + n2**2))
    # evaluate the Fourier series at the targets (x -> first axis)
    sx, sy = x + 0.5, y + 0.5
    ref = np.real(np.einsum("ij,ijk->k", c, np.exp(2j * np.pi * (n1[..., None] * sx + n2[..., None] * sy))))
    got = oracles.direct_gauss_transform(u, delta, x, y)[0]
    assert np.max(np.abs(got - ref)) < 1e-11


def test_spectral_poisson_examples():
    f = lambda X, Y: -8 * np.pi**2 * np.sin(2 * np.pi * X) * np.sin(2 * np.pi * Y)
    phi, gx, gy = oracles.spectral_poisson(oracles.UniformGridField.from_function(f, 32))
    X, Y = oracles.uniform_points(32)
    assert np.max(np.abs(phi.vals[0] - np.sin(2 * np.pi * X) * np.sin(2 * np.pi * Y))) < 1e-13
    zero = oracles.spectral_poisson(oracles.UniformGridField(np.zeros((16, 16))))
    assert all(np.all(z.vals == 0) for z in zero)
    with pytest.raises(ValueError):
        oracles.spectral_poisson(oracles.UniformGridField(np.ones((16, 16))))


def test_spectral_poisson_parseval():
    f = band_limited(6, nmax=5, zero_mean=True)
    M = 32
    rhs = oracles.UniformGridField.from_function(f, M)
    phi, gx, gy = oracles.spectral_poisson(rhs)
    # sum |grad phi|^2 = -sum phi * rhs (integration by parts, discrete Parseval)
    lhs = np.mean(gx.vals**2 + gy.vals**2)
    rhs_ = -np.mean(phi.vals * rhs.vals)
    assert abs(lhs - rhs_) < 1e-12 * max(1.0, lhs)


def test_duhamel_pure_decay():
    u0 = lambda X, Y: np.cos(2 * np.pi * X) * np.sin(4 * np.pi * Y)
    out = oracles.duhamel_dense(lambda X, Y, t: 0 * X, u0, 0.5, 0.1, M=16)
    X, Y = oracles.uniform_points(16)
    lam = 4 * math.pi**2 * 5 * 0.5
    assert np.max(np.abs(out.vals[0] - math.exp(-lam * 0.1) * u0(X, Y))) < 1e-13


def test_duhamel_constant_forcing():
    F = lambda X, Y, t: np.cos(2 * np.pi * Y) + 0 * X
    out = oracles.duhamel_dense(F, lambda X, Y: 0 * X, 1.0, 0.02, M=16)
    lam = 4 * math.pi**2
    X, Y = oracles.uniform_points(16)
    ref = (1 - math.exp(-lam * 0.02)) / lam * np.cos(2 * np.pi * Y)
    assert np.max(np.abs(out.vals[0] - ref)) < 1e-12
