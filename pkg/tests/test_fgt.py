import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from parapot import fgt, oracles
from parapot.adaptree import AdaptiveTree, TreeField, build_adaptive, eval_field, sample_function

from helpers import random_field


def cos_field(n1, n2, tree=None, eps=1e-12):
    f = lambda x, y: np.cos(2 * np.pi * (n1 * x + n2 * y))
    if tree is None:
        return build_adaptive(f, eps), f
    return TreeField(tree, sample_function(f, tree, 8)), f


def analytic_diffused(c, a, delta):
    def f(x, y):
        out = 0.0
        for i in range(-2, 3):
            for j in range(-2, 3):
                out = out + np.exp(-((x - c[0] - i) ** 2 + (y - c[1] - j) ** 2) / (a + delta))
        return a / (a + delta) * out
    return f


# -- heat kernel ---------------------------------------------------------------


@pytest.mark.parametrize("tau", [1e-4, 1e-2, 0.5])
def test_heat_kernel_has_unit_mass(tau):
    xs, ws = np.polynomial.legendre.leggauss(80)
    # split [-1/2, 1/2] into panels so narrow kernels are integrated well
    edges = np.linspace(-0.5, 0.5, 33)
    pts = np.concatenate([0.5 * (b - a) * xs + 0.5 * (a + b) for a, b in zip(edges[:-1], edges[1:])])
    wts = np.concatenate([0.5 * (b - a) * ws for a, b in zip(edges[:-1], edges[1:])])
    g1 = fgt.periodic_gauss_1d(pts, 4 * tau)
    mass = (wts @ g1) ** 2 / (math.pi * 4 * tau)
    assert abs(mass - 1.0) < 1e-12


def test_heat_kernel_flattens_for_long_times():
    tau = 0.2
    x = np.linspace(-0.5, 0.5, 11)
    g = fgt.heat_kernel(x, 0.3 * x, tau)
    assert np.max(np.abs(g - 1.0)) <= 4 * math.exp(-4 * math.pi**2 * tau) * 1.01


def test_heat_kernel_branches_agree_in_crossover():
    x = np.linspace(-0.5, 0.5, 41)
    y = np.roll(x, 7)
    a = fgt.heat_kernel(x, y, 0.02, method="images")
    b = fgt.heat_kernel(x, y, 0.02, method="fourier")
    assert np.max(np.abs(a - b)) < 1e-12
    with pytest.raises(ValueError):
        fgt.heat_kernel(x, y, 0.0)


# -- plans ---------------------------------------------------------------------


def test_plan_cutoff_criterion():
    plan = fgt.build_plan(4e-3, 1e-12)
    D = plan.D_cut
    assert math.exp(-(D**2) / plan.delta) < 1e-12
    # the next finer level would fail
    assert math.exp(-((D / 2) ** 2) / plan.delta) >= 1e-12


@pytest.mark.parametrize("delta", [1.0, 3.0])
def test_wide_kernels_use_spectral_mode(delta):
    assert fgt.build_plan(delta, 1e-6).spectral


@pytest.mark.parametrize("eps", [1e-3, 1e-6, 1e-9, 1e-12])
@pytest.mark.parametrize("delta", [1e-4, 4e-3, 2e-2])
def test_plan_plane_wave_error(eps, delta):
    plan = fgt.build_plan(delta, eps)
    xs = np.random.default_rng(0).uniform(-2 * plan.D_cut, 2 * plan.D_cut, 1000)
    approx = (np.exp(1j * np.outer(xs, plan.k)) @ plan.w).real
    assert np.max(np.abs(approx - np.exp(-xs * xs / delta))) < eps / 10


def test_plan_rejects_bad_input():
    with pytest.raises(ValueError):
        fgt.build_plan(1e-3, 1e-2)
    with pytest.raises(ValueError):
        fgt.build_plan(-1.0, 1e-6)


# -- apply ---------------------------------------------------------------------


@pytest.mark.parametrize("delta", [1e-4, 1e-2, 1.0])
def test_constant_is_preserved(delta):
    tree = AdaptiveTree.uniform(3).refine([(3, 2, 2)]).balanced()
    u = TreeField(tree, np.ones((len(tree), 1, 8, 8)))
    out = fgt.apply(fgt.build_plan(delta, 1e-9), u)
    assert np.max(np.abs(out.vals - 1.0)) < 1e-9


@pytest.mark.parametrize("delta", [1e-4, 1e-3, 1e-2, 1e-1, 1.0])
@pytest.mark.parametrize("n", [(1, 0), (2, 3), (0, 8), (5, -5)])
def test_fourier_multiplier(delta, n):
    u, f = cos_field(*n, eps=1e-11)
    out = fgt.apply(fgt.build_plan(delta, 1e-9), u)
    X, Y = u.nodes()
    lam = math.exp(-(math.pi**2) * delta * (n[0] ** 2 + n[1] ** 2))
    assert np.max(np.abs(out.vals[:, 0] - lam * f(X, Y))) < 1e-9


@pytest.mark.parametrize("eps", [1e-6, 1e-9])
@pytest.mark.parametrize("delta", [1e-4, 1e-3, 1e-2])
def test_matches_direct_oracle(eps, delta):
    u, _ = random_field(7, eps)
    rng = np.random.default_rng(1)
    x, y = rng.uniform(-0.5, 0.5, (2, 60))
    out = fgt.apply(fgt.build_plan(delta, eps), u)
    ref = oracles.direct_gauss_transform(u, delta, x, y)
    assert np.max(np.abs(eval_field(out, x, y) - ref)) <= 5 * eps * u.max_abs()


def test_mass_is_conserved():
    u, _ = random_field(3)
    out = fgt.apply(fgt.build_plan(1e-3, 1e-9), u)
    assert abs(out.mean()[0] - u.mean()[0]) < 1e-9 * u.max_abs()


@settings(max_examples=4)
@given(st.integers(0, 1000))
def test_semigroup(seed):
    u, _ = random_field(seed)
    d1, d2, eps = 1e-3, 3e-3, 1e-9
    a = fgt.apply(fgt.build_plan(d1, eps), fgt.apply(fgt.build_plan(d2, eps), u))
    b = fgt.apply(fgt.build_plan(d1 + d2, eps), u)
    assert np.max(np.abs(a.vals - b.vals)) <= 10 * eps * u.max_abs()


def test_translation_equivariance():
    c, a, delta, eps = (0.1, -0.05), 2e-3, 1e-3, 1e-9
    shift = (0.25, 0.375)  # dyadic: the shifted tree is the same tree relabelled
    g = analytic_diffused(c, a, 0.0)
    gs = analytic_diffused((c[0] + shift[0], c[1] + shift[1]), a, 0.0)
    tree = build_adaptive(g, eps, start=AdaptiveTree.uniform(3)).tree
    moved = AdaptiveTree(
        [(l, (i + int(shift[0] * 2**l)) % 2**l, (j + int(shift[1] * 2**l)) % 2**l) for l, i, j in tree.keys]
    )
    plan = fgt.build_plan(delta, eps)
    o1 = fgt.apply(plan, TreeField(tree, sample_function(g, tree, 8)))
    o2 = fgt.apply(plan, TreeField(moved, sample_function(gs, moved, 8)))
    x, y = np.random.default_rng(4).uniform(-0.5, 0.5, (2, 200))
    assert np.max(np.abs(eval_field(o1, x, y) - eval_field(o2, x + shift[0], y + shift[1]))) <= 10 * eps


# -- adaptive output -----------------------------------------------------------


def test_adaptive_output_of_sharp_pulses():
    f = lambda x, y: np.exp(-((x - 0.2) ** 2 + (y - 0.1) ** 2) / 4e-3) - 0.5 * np.exp(
        -((x + 0.2) ** 2 + (y + 0.15) ** 2) / 4e-3
    )
    u = build_adaptive(f, 1e-9)
    out = fgt.apply_adaptive(fgt.build_plan(4e-3, 1e-9), u, 1e-9)
    assert out.tree != u.tree
    # the smoother output needs a comparable, somewhat smaller tree
    assert 0.5 * len(u.tree) <= len(out.tree) <= len(u.tree)


def test_adaptive_output_of_constant_collapses():
    tree = AdaptiveTree.uniform(3)
    u = TreeField(tree, np.full((len(tree), 1, 8, 8), 2.0))
    out = fgt.apply_adaptive(fgt.build_plan(1e-3, 1e-9), u)
    assert len(out.tree) == 1
    np.testing.assert_allclose(out.vals, 2.0, atol=1e-9)


def test_adaptive_output_matches_analytic_diffusion():
    c, a, delta, eps = (0.05, -0.1), 5e-4, 2e-3, 1e-9
    u = build_adaptive(analytic_diffused(c, a, 0.0), eps)
    out = fgt.apply_adaptive(fgt.build_plan(delta, eps), u)
    x, y = np.random.default_rng(5).uniform(-0.5, 0.5, (2, 1000))
    exact = analytic_diffused(c, a, delta)(x, y)
    assert np.max(np.abs(eval_field(out, x, y)[0] - exact)) <= 10 * eps


def test_gauss_sum_mixes_widths():
    u, f = cos_field(1, 2, tree=AdaptiveTree.uniform(3))
    w = TreeField(u.tree, 0.5 * u.vals)
    out = fgt.gauss_sum([(1.0, u, [1e-3]), (2.0, w, [4e-3])], 1e-9)
    lam = lambda d: math.exp(-(math.pi**2) * d * 5)
    X, Y = out.nodes()
    assert np.max(np.abs(out.vals[:, 0] - (lam(1e-3) + lam(4e-3)) * f(X, Y))) < 1e-8
