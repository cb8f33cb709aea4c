import numpy as np
import pytest
import sympy as sp
from hypothesis import given
from hypothesis import strategies as st

from stochmech.fields import (FIXED_ZERO, NONRELATIVISTIC, RELATIVISTIC, ComplexWaveField,
                              PhysicalParams, PolarField, action_gradient, make_grid,
                              polar_decompose, time_derivative)
from stochmech.identities import fit_order
from stochmech.kleingordon import kg_plane_wave, kg_superposition
from stochmech.schrodinger import analytic_box_eigenstate, analytic_free_gaussian, free_gaussian_width
from stochmech.velocities import (DegenerateMassError, aux_velocities,
                                  cross_check_velocity_bilinear, current_velocity,
                                  drift_velocity, osmotic_velocity, quantum_potential,
                                  variable_mass, velocity_fields)

TWO_PI = 2 * np.pi


def _one_slice(n, lo=0.0, hi=TWO_PI, boundary="periodic"):
    return make_grid(lo, hi, n, 0.01, 2, boundary).with_time(0.01, 1)


def _nonrel(values, g, hbar=1.0):
    return polar_decompose(ComplexWaveField(g, values), NONRELATIVISTIC, hbar)


def test_plane_wave_current_velocity():
    g = _one_slice(64)
    v = current_velocity(_nonrel(np.exp(3j * g.x), g), PhysicalParams())
    assert np.allclose(v, 3.0, atol=1e-12)


def test_box_current_velocity_vanishes():
    p = PhysicalParams()
    g = make_grid(0, 1, 128, 1e-3, 2, FIXED_ZERO)
    f = analytic_box_eigenstate(2, 1.0, p, g)
    fs = velocity_fields(polar_decompose(f, NONRELATIVISTIC), p)
    # the sign flip at the node is a pi jump of the phase, excluded by the mask
    assert np.max(np.abs(fs.current[~fs.mask])) < 1e-12


def test_packet_centre_velocity():
    p = PhysicalParams(hbar=1.0, m=2.0)
    k0 = 1.5
    g = make_grid(-20, 20, 1600, 1.0, 2)
    f = analytic_free_gaussian(-3.0, 1.0, k0, p, g)
    v = current_velocity(polar_decompose(f, NONRELATIVISTIC, p.hbar), p)
    centre = np.argmin(np.abs(g.x - (-3.0 + p.hbar * k0 / p.m)))
    assert abs(g.x[centre] - (-3.0 + p.hbar * k0 / p.m)) < 1e-12
    assert abs(v[1, centre] - p.hbar * k0 / p.m) < 1e-6


def test_osmotic_velocity_constant_density():
    g = _one_slice(32)
    assert np.all(osmotic_velocity(np.full((1, 32), 0.3), PhysicalParams(), g) == 0)


def test_osmotic_velocity_gaussian_is_second_order():
    p = PhysicalParams(m=0.7)
    sigma = 1.3
    dxs, errs = [], []
    for n in (200, 400, 800, 1600):
        g = _one_slice(n, -10, 10)
        P = np.exp(-g.x ** 2 / (2 * sigma ** 2))[None, :]
        u = osmotic_velocity(P, p, g)
        good = np.abs(g.x) < 4
        errs.append(np.max(np.abs(u[0, good] + p.D * g.x[good] / sigma ** 2)))
        dxs.append(g.dx)
    assert errs[-1] < 2e-4
    assert abs(fit_order(dxs, errs) - 2) < 0.3


@pytest.mark.parametrize("L", [1.0, 2.0])
def test_box_osmotic_velocity_ground_level(L):
    p = PhysicalParams()
    g = make_grid(0, L, 4096, 1e-4, 2, FIXED_ZERO).with_time(1e-4, 1)
    k = np.pi / L
    s = np.sin(k * g.x)
    u = osmotic_velocity((2 / L) * s[None, :] ** 2, p, g)[0]
    off = np.abs(s) > 0.1
    v = p.hbar * k / p.m
    expect = v * np.cos(k * g.x[off]) / s[off]
    assert np.max(np.abs(u[off] - expect) / np.maximum(np.abs(expect), v)) < 1e-6


def test_drift_velocity():
    g = _one_slice(64)
    pol = _nonrel(np.exp(2j * g.x), g)
    assert np.allclose(drift_velocity(pol, PhysicalParams(alpha=1.0)), 2.0, atol=1e-12)
    assert np.allclose(drift_velocity(pol, PhysicalParams(alpha=0.0)), 2.0, atol=1e-12)
    gg = _one_slice(2000, -10, 10)
    sigma = 1.0
    static = _nonrel(np.exp(-gg.x ** 2 / (4 * sigma ** 2)) + 0j, gg)
    b = drift_velocity(static, PhysicalParams(alpha=1.0))[0]
    good = np.abs(gg.x) < 3
    x, h = gg.x[good], gg.dx
    # exact value of the centred stencil on exp(-x^2 / (2 sigma^2))
    discrete = -0.5 / h * np.exp(-h ** 2 / (2 * sigma ** 2)) * np.sinh(x * h / sigma ** 2)
    assert np.max(np.abs(b[good] - discrete)) < 1e-10
    assert np.max(np.abs(b[good] + 0.5 * x / sigma ** 2)) < (3 * h) ** 2
    with pytest.raises(ValueError):
        drift_velocity(polar_decompose(ComplexWaveField(g, np.exp(2j * g.x))), PhysicalParams())


def test_quantum_potential_examples():
    p = PhysicalParams(hbar=0.8, m=1.3)
    g = _one_slice(64)
    assert np.all(quantum_potential(np.ones((1, 64)), p, g) == 0)
    gb = make_grid(0, 1, 1024, 1e-3, 2, FIXED_ZERO).with_time(1e-3, 1)
    k = np.pi
    R = np.sin(k * gb.x)[None, :]
    Q = quantum_potential(R, p, gb)
    expect = p.hbar ** 2 * k ** 2 / (2 * p.m)
    good = R[0] > 0.1
    # three-point stencil: 2 (1 - cos(k dx)) / dx^2 instead of k^2
    stencil = p.hbar ** 2 / (2 * p.m) * 2 * (1 - np.cos(k * gb.dx)) / gb.dx ** 2
    assert np.allclose(Q[0, good], stencil, rtol=1e-9)
    assert abs(stencil / expect - 1) < (k * gb.dx) ** 2 / 12 * 1.01


def test_quantum_potential_of_dispersing_gaussian():
    x, t = sp.symbols("x t", real=True)
    s0, hbar, m = sp.Rational(1), sp.Rational(1), sp.Rational(1)
    width = s0 * sp.sqrt(1 + (hbar * t / (2 * m * s0 ** 2)) ** 2)
    R = sp.exp(-x ** 2 / (4 * width ** 2))
    Q_expr = sp.simplify(-hbar ** 2 / (2 * m) * sp.diff(R, x, 2) / R)
    Q_exact = sp.lambdify((x, t), Q_expr, "numpy")
    p = PhysicalParams()
    dxs, errs = [], []
    for n in (400, 800, 1600):
        g = make_grid(-10, 10, n, 0.5, 3)
        f = analytic_free_gaussian(0.0, 1.0, 0.0, p, g)
        Q = quantum_potential(np.abs(f.values), p, g)
        X, T = np.meshgrid(g.x, g.t)
        good = np.abs(X) < 4
        errs.append(np.max(np.abs(Q - Q_exact(X, T))[good]))
        dxs.append(g.dx)
    assert abs(fit_order(dxs, errs) - 2) < 0.3
    assert np.allclose(free_gaussian_width(1.0, 0.5, p), float(width.subs(t, 0.5)))


def test_variable_mass_examples():
    p = PhysicalParams(m=1.2)
    g = make_grid(0, TWO_PI, 64, 0.02, 5)
    pol = polar_decompose(kg_plane_wave(2.0, p, g), RELATIVISTIC)
    M, tach = variable_mass(pol.R, p, g)
    assert np.allclose(M, p.m, atol=1e-12) and not tach.any()
    M, _ = variable_mass(pol.R, p, g, V=0.3)
    assert np.allclose(M, p.m + 0.3 / p.c ** 2, atol=1e-12)


def test_tachyonic_samples_flagged():
    p = PhysicalParams(m=0.1)
    g = make_grid(-8, 8, 256, 0.02, 5)
    R = np.exp(-g.x ** 2 / 4)[None, :].repeat(5, axis=0)
    M, tach = variable_mass(R, p, g)
    assert tach.any() and np.all(np.isnan(M[tach]))
    assert np.all(np.isfinite(M[~tach & (R > 1e-6 * R.max())]))
    with pytest.raises(ValueError, match="tachyonic"):
        gf = make_grid(-8, 8, 256, 0.02, 5, FIXED_ZERO)
        variable_mass(np.exp(gf.x / 4)[None, :].repeat(5, axis=0), PhysicalParams(m=0.1), gf)


def test_degenerate_mass():
    g = make_grid(0, TWO_PI, 64, 0.02, 5)
    pol = polar_decompose(kg_plane_wave(1.0, PhysicalParams(), g), RELATIVISTIC)
    with pytest.raises(DegenerateMassError):
        current_velocity(pol, PhysicalParams(), RELATIVISTIC, M=np.zeros(pol.R.shape))


def test_aux_velocities():
    p = PhysicalParams(hbar=1.0, m=1.0)
    g = _one_slice(2000, -5, 5, FIXED_ZERO)
    zero_D, zero_M = aux_velocities(np.full(g.n_points, 2.0), np.full(g.n_points, 3.0), p, g)
    assert np.all(zero_D == 0) and np.all(zero_M == 0)
    lam, v_d = 0.1, 1.0
    m = 1.0 * np.exp(-lam * g.x / v_d)
    u_D, _ = aux_velocities(m, np.ones_like(m), p, g)
    assert np.allclose(u_D, -p.D * lam / v_d, rtol=1e-6)
    with pytest.raises(ValueError):
        aux_velocities(-m, np.ones_like(m), p, g)


def test_bilinear_velocity_examples():
    p = PhysicalParams(hbar=1.0, m=2.0)
    g = _one_slice(4096)
    f = ComplexWaveField(g, np.exp(3j * g.x))
    # the centred stencil gives sin(k dx)/dx in place of k
    assert np.allclose(cross_check_velocity_bilinear(f, p), np.sin(3 * g.dx) / g.dx / p.m, atol=1e-12)
    real = ComplexWaveField(g, np.cos(g.x) + 2.0 + 0j)
    assert np.max(np.abs(cross_check_velocity_bilinear(real, p))) == 0


def test_bilinear_and_decomposition_paths_agree_to_stencil_order():
    p = PhysicalParams()
    dxs, errs = [], []
    for n in (1024, 2048, 4096, 8192):
        g = _one_slice(n)
        f = ComplexWaveField(g, np.exp(1j * g.x) + 0.5 * np.exp(-2j * g.x))
        pol = polar_decompose(f, NONRELATIVISTIC)
        good = ~pol.invalid
        d = current_velocity(pol, p) - cross_check_velocity_bilinear(f, p)
        errs.append(np.max(np.abs(d[good])))
        dxs.append(g.dx)
    assert abs(fit_order(dxs, errs) - 2) < 0.1


@given(st.integers(0, 2 ** 31), st.floats(0.1, 3.0))
def test_balance_identity(seed, m):
    rng = np.random.default_rng(seed)
    g = make_grid(0, 4, 64, 0.01, 3)
    P = np.exp(rng.normal(size=(3, 64)))
    p = PhysicalParams(m=m)
    u = osmotic_velocity(P, p, g)
    from stochmech.fields import gradient
    assert np.max(np.abs(u * P - p.D * gradient(P, g))) < 1e-10 * max(1.0, np.abs(P).max())


@given(st.floats(-50, 50), st.floats(0, 30))
def test_gauge_covariance(const, E_vac):
    p = PhysicalParams()
    g = make_grid(0, TWO_PI, 64, 0.01, 6)
    f = kg_superposition([(1.0, 1, 1), (0.3, -2, 1)], p, g)
    pol = polar_decompose(f, RELATIVISTIC)
    base = velocity_fields(pol, p)
    moved = PolarField(g, pol.R, pol.S + const, pol.convention, pol.node_mask,
                       pol.defect_mask, pol.hbar)
    other = velocity_fields(moved, p)
    for a, b in ((base.current, other.current), (base.current0, other.current0),
                 (base.osmotic, other.osmotic)):
        assert np.allclose(a, b, atol=1e-9, equal_nan=True)
    S_vac = pol.S + E_vac * g.t[:, None]
    assert np.allclose(time_derivative(S_vac, g) - time_derivative(pol.S, g), E_vac, atol=1e-9)
    assert np.allclose(action_gradient(S_vac, g), action_gradient(pol.S, g), atol=1e-9)


def test_field_set_consistency():
    p = PhysicalParams(alpha=0.6)
    g = make_grid(-10, 10, 512, 0.01, 5)
    f = analytic_free_gaussian(0.0, 1.0, 1.0, p, g)
    fs = velocity_fields(polar_decompose(f, NONRELATIVISTIC), p)
    good = ~fs.mask
    assert np.all(fs.density >= 0)
    assert np.max(np.abs(fs.drift - fs.current - p.alpha * fs.osmotic)[good]) < 1e-10
    assert 0 <= fs.mask_fraction < 1
