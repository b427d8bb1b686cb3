import math

import numpy as np
import pytest

from parapot import helmholtz as H
from parapot import problems as P
from parapot.adaptree import build_adaptive


def fd_lap(f, x, y, t, h=1e-4):
    return (f(x + h, y, t) + f(x - h, y, t) + f(x, y + h, t) + f(x, y - h, t) - 4 * f(x, y, t)) / h**2


def fd_t(f, x, y, t, h=1e-5):
    # fourth-order central difference
    return (-f(x, y, t + 2 * h) + 8 * f(x, y, t + h) - 8 * f(x, y, t - h) + f(x, y, t - 2 * h)) / (12 * h)


def test_heat_forcing_examples():
    delta = 2.5e-3
    v = P.heat_forcing(0.25, 0.0, 0.0, delta)
    assert abs(v - (1 - 0.5 * math.exp(-0.25 / delta))) < 1e-14
    x, y = np.random.default_rng(0).uniform(-0.5, 0.5, (2, 20))
    a = P.heat_forcing(x, y, 0.013)
    np.testing.assert_allclose(P.heat_forcing(x, y, 0.113), a, atol=0, rtol=1e-10)  # c1 period, c2 also returns
    c1, _ = P.heat_centers(0.1)
    assert abs(c1[0] - 0.25) < 1e-14 and abs(c1[1]) < 1e-14


def test_periodized_evaluators_agree_with_wide_sums():
    x, y = np.random.default_rng(1).uniform(-0.5, 0.5, (2, 50))
    for delta in (2.5e-3, 1e-2, 0.1):
        a = P.heat_forcing(x, y, 0.37, delta, images=4)
        b = P.heat_forcing(x, y, 0.37, delta, images=8)
        c = P.heat_forcing(x, y, 0.37, delta)
        assert np.max(np.abs(a - b)) < 1e-13 and np.max(np.abs(c - b)) < 1e-13


def test_gray_scott_examples():
    np.testing.assert_allclose(P.gray_scott_rhs(1.0, 0.0), (0.0, 0.0), atol=1e-16)
    fu, fv = P.gray_scott_rhs(0.5, 0.25)
    assert abs(fu + 0.01125) < 1e-15 and abs(fv + 0.00375) < 1e-15
    u, v = P.gray_scott_ic(-0.05, -0.02)
    assert u == 0.0
    u, v = P.gray_scott_ic(0.05, 0.02)
    assert v == 1.0
    u, v = P.gray_scott_ic(0.5, 0.5)
    assert abs(u - 1) < 1e-10 and abs(v - math.exp(-80 * (0.2025 + 0.2304))) < 1e-20


def test_gray_scott_jacobian_matches_finite_differences():
    rng = np.random.default_rng(2)
    h = 1e-6
    for u, v in rng.uniform(0, 1, (20, 2)):
        J = P.gray_scott_jacobian(u, v)
        du = (np.array(P.gray_scott_rhs(u + h, v)) - np.array(P.gray_scott_rhs(u - h, v))) / (2 * h)
        dv = (np.array(P.gray_scott_rhs(u, v + h)) - np.array(P.gray_scott_rhs(u, v - h))) / (2 * h)
        fd = np.stack([du, dv], axis=1)
        assert np.max(np.abs(J - fd)) <= 1e-7 * max(1.0, np.abs(J).max())


def test_every_semilinear_problem_has_consistent_jacobian():
    rng = np.random.default_rng(3)
    for name in P.PROBLEMS:
        pr = P.make_problem(name)
        if pr.kind != "semilinear":
            continue
        U = rng.uniform(0, 1, (pr.p, 20))
        x, y = rng.uniform(-0.5, 0.5, (2, 20))
        J = pr.jacobian(U, x, y, 0.0)
        for c in range(pr.p):
            e = np.zeros((pr.p, 1))
            e[c] = 1e-6
            fd = (pr.F(U + e, x, y, 0.0) - pr.F(U - e, x, y, 0.0)) / 2e-6
            assert np.max(np.abs(J[:, c] - fd)) <= 1e-6 * max(1.0, np.abs(J).max())


def test_stokes_manufactured():
    rng = np.random.default_rng(4)
    x, y = rng.uniform(-0.5, 0.5, (2, 100))
    ex = P.stokes_manufactured
    h = 1e-6
    div = (ex(x + h, y, 0.7)[0] - ex(x - h, y, 0.7)[0] + ex(x, y + h, 0.7)[1] - ex(x, y - h, 0.7)[1]) / (2 * h)
    assert np.max(np.abs(div)) < 1e-6  # fd noise; exact divergence is zero
    assert np.all(ex(x, y, 0.0) == 0) and np.all(P.stokes_manufactured_forcing(x, y, 0.0) == 0)
    for t in rng.uniform(0, 1, 5):
        ut = fd_t(ex, x, y, t)
        lap = fd_lap(ex, x, y, t)
        px = (ex(x + h, y, t)[2] - ex(x - h, y, t)[2]) / (2 * h)
        py = (ex(x, y + h, t)[2] - ex(x, y - h, t)[2]) / (2 * h)
        F = np.array([ut[0] - lap[0] + px, ut[1] - lap[1] + py])
        ref = P.stokes_manufactured_forcing(x, y, t)
        assert np.max(np.abs(F - ref)) <= 1e-5 * np.abs(ref).max()


def test_stokes_vortex():
    xc, yc = 0.25 * math.sin(20 * math.pi * 0.01), 0.25 * math.cos(20 * math.pi * 0.01)
    np.testing.assert_allclose(P.stokes_vortex_field(xc, yc, 0.01), 0.0, atol=1e-12)
    rng = np.random.default_rng(5)
    x, y = xc + rng.uniform(-0.1, 0.1, 50), yc + rng.uniform(-0.1, 0.1, 50)
    f = P.stokes_vortex_field
    h = 1e-6
    div = (f(x + h, y, 0.01)[0] - f(x - h, y, 0.01)[0] + f(x, y + h, 0.01)[1] - f(x, y - h, 0.01)[1]) / (2 * h)
    assert np.max(np.abs(div)) <= 1e-7 * np.abs(f(x, y, 0.01)).max()
    res = fd_t(f, x, y, 0.01, 1e-7) - fd_lap(f, x, y, 0.01) - P.stokes_vortex_forcing(x, y, 0.01)
    assert np.max(np.abs(res)) <= 1e-4 * np.abs(P.stokes_vortex_forcing(x, y, 0.01)).max()


def test_shear_layer_examples():
    u = P.shear_layer_ic(0.1, -0.25)
    assert u[0] == 0.0
    a = P.shear_layer_ic(0.1, -1e-15)[0]
    b = P.shear_layer_ic(0.1, 1e-15)[0]
    assert abs(a - b) < 1e-12 and abs(a - math.tanh(7.5)) < 1e-12
    assert abs(P.shear_layer_ic(0.25, 0.0)[1] - 0.05) < 1e-15
    ys = np.linspace(-0.5, 0.5, 101)
    c = P.shear_layer_ic(0 * ys, ys)
    s = P.shear_layer_ic(0 * ys, ys, orientation="smooth")
    assert np.max(np.abs(c - s)) < 1e-6
    lit = P.shear_layer_ic(np.array([-0.2, 0.2]), np.array([0.3, 0.3]), orientation="x-switched")
    assert lit[0, 0] != lit[0, 1]
    with pytest.raises(ValueError):
        P.shear_layer_ic(0.0, 0.0, orientation="sideways")


def test_ns_nonlinear_examples():
    const = build_adaptive(lambda x, y: np.stack([1 + 0 * x, 0 * y]), 1e-10)
    assert np.max(np.abs(P.ns_nonlinear(const).vals)) < 1e-13
    shear = build_adaptive(lambda x, y: np.stack([np.sin(2 * np.pi * y), 0 * x]), 1e-10)
    assert np.max(np.abs(P.ns_nonlinear(shear).vals)) < 1e-9
    tg = build_adaptive(lambda x, y: P.taylor_green(x, y), 1e-10)
    adv = P.ns_nonlinear(tg)
    assert np.max(np.abs(H.project(adv, 1e-10).vals)) <= 10 * 1e-10 * max(1.0, adv.max_abs())


def test_vorticity_examples():
    rigid = build_adaptive(lambda x, y: np.stack([-np.sin(2 * np.pi * y), np.sin(2 * np.pi * x)]) / (2 * np.pi), 1e-10)
    X, Y = rigid.nodes()
    w = P.vorticity(rigid).vals[:, 0]
    np.testing.assert_allclose(w, np.cos(2 * np.pi * X) + np.cos(2 * np.pi * Y), atol=1e-8)
    grad = build_adaptive(lambda x, y: np.stack([np.cos(2 * np.pi * x) * np.sin(2 * np.pi * y), np.sin(2 * np.pi * x) * np.cos(2 * np.pi * y)]), 1e-10)
    assert np.max(np.abs(P.vorticity(grad).vals)) < 1e-7
    tg = build_adaptive(lambda x, y: P.taylor_green(x, y), 1e-10)
    X, Y = tg.nodes()
    ref = 4 * np.pi * np.cos(2 * np.pi * X) * np.cos(2 * np.pi * Y)
    assert np.max(np.abs(P.vorticity(tg).vals[:, 0] - ref)) < 1e-7


def test_registry():
    for name in P.PROBLEMS:
        pr = P.make_problem(name)
        assert pr.p == len(pr.D)
    with pytest.raises(ValueError):
        P.make_problem("nope")
    assert P.make_problem("taylor-green").exact is not None
